#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "inspect/config.hpp"
#include "inspect/error.hpp"
#include "inspect/model.hpp"
#include "inspect/protocol.hpp"
#include "inspect/registry.hpp"
#include "inspect/training.hpp"
#include "inspect/update.hpp"

// Transport-free logic of the edge and main servers. The HTTP and TCP layers
// in servers.hpp only translate requests into these calls.
namespace inspect {

// A deployed model together with its registry version.
struct Deployment {
  std::uint64_t registry_version = 0;
  ModelWeights weights;
  std::string digest;
};

// Stores a new model and returns its registry version.
using RegisterFn = std::function<std::uint64_t(const ModelWeights&, Origin, std::uint64_t parent, nlohmann::json metrics)>;

struct PredictionRecord {
  std::string product_id;
  std::uint64_t tick = 0;
  double probability = 0.5;
  int y_pred = 1;
  std::uint64_t model_version = 0;
};

struct TickMetrics {
  std::uint64_t tick = 0;
  std::uint64_t model_version = 0;
  std::optional<double> frozen_accuracy;
  double fsr = 0.0;
  std::string action = "none";
  std::size_t predictions = 0;
  std::size_t unreliable = 0;
  std::size_t failed = 0;
  std::size_t scrap_or_repair = 0;
  std::size_t next_process = 0;
};

inline nlohmann::json to_json(const TickMetrics& m) {
  nlohmann::json j{{"tick", m.tick},
                   {"model_version", m.model_version},
                   {"fsr", m.fsr},
                   {"action", m.action},
                   {"predictions", m.predictions},
                   {"unreliable", m.unreliable},
                   {"failed", m.failed},
                   {"buffers", {{"scrap_or_repair", m.scrap_or_repair}, {"next_process", m.next_process}}}};
  j["frozen_accuracy"] = m.frozen_accuracy ? nlohmann::json(*m.frozen_accuracy) : nlohmann::json(nullptr);
  return j;
}

inline double evaluate_accuracy(const ModelWeights& m, std::span<const Sample> test, const Window& win) {
  return m.kind == ModelKind::classifier ? classifier_accuracy(m, test) : detector_accuracy(m, test, win);
}

// Per-line inference, unreliable-sample ledger and idle-time fine-tuning.
// Thread safe; inference and API calls may arrive concurrently.
class EdgeNode {
 public:
  enum class DecisionOutcome { applied, duplicate };

  EdgeNode(EdgeServerConfig cfg, Deployment initial, RegisterFn register_fn, std::optional<Dataset> frozen_test = {})
      : cfg_(std::move(cfg)), register_(std::move(register_fn)), frozen_(std::move(frozen_test)) {
    validate_model(initial.weights);
    current_ = std::make_shared<const Deployment>(std::move(initial));
  }

  const EdgeServerConfig& config() const noexcept { return cfg_; }

  std::shared_ptr<const Deployment> deployment() const {
    std::lock_guard lock(mu_);
    return current_;
  }

  // Swaps the served model. In-flight inferences finish on the old one.
  void install(Deployment d) {
    validate_model(d.weights);
    auto next = std::make_shared<const Deployment>(std::move(d));
    std::lock_guard lock(mu_);
    current_ = std::move(next);
  }

  std::optional<double> frozen_accuracy() const {
    if (!frozen_ || frozen_->empty()) return std::nullopt;
    const auto d = deployment();
    return evaluate_accuracy(d->weights, frozen_->samples, cfg_.window);
  }

  // Line-protocol entry point: answers ImageSending with DeepModelPrediction.
  std::optional<ProtocolMessage> handle(const ProtocolMessage& m) {
    if (m.kind != MessageKind::image_sending) return std::nullopt;
    const auto d = deployment();
    double p_ok = 0.5;
    if (d->weights.kind == ModelKind::classifier) {
      p_ok = predict_proba(d->weights, *m.image);
    } else {
      double worst = 0.0;
      for (const auto& det : detect_defects(d->weights, *m.image, cfg_.window)) worst = std::max(worst, det.probability);
      p_ok = 1.0 - worst;
    }
    const int y_pred = d->weights.kind == ModelKind::classifier ? decide_label(p_ok) : (p_ok < 1.0 - kDetectionThreshold ? 0 : 1);
    {
      std::lock_guard lock(mu_);
      Sample s;
      s.id = m.product_id;
      s.image = *m.image;
      s.label = y_pred;
      s.source = SampleSource::captured;
      records_.push_back({m.product_id, tick_, p_ok, y_pred, d->registry_version});
      const ScoredSample scored{std::move(s), p_ok};
      for (auto& u : select_unreliable(std::span(&scored, 1), cfg_.alpha, tick_)) {
        u.y_pred = y_pred;
        pending_.push_back(std::move(u));
      }
    }
    return make_deep_prediction(m.product_id, Prediction{y_pred, p_ok}, d->registry_version);
  }

  std::uint64_t tick() const {
    std::lock_guard lock(mu_);
    return tick_;
  }

  // Unreliable samples of the current tick still awaiting a decision.
  std::vector<UnreliableSample> pending() const {
    std::lock_guard lock(mu_);
    std::vector<UnreliableSample> out;
    for (const auto& u : pending_)
      if (!decisions_.count(u.sample.id)) out.push_back(u);
    return out;
  }

  std::optional<UnreliableSample> find_pending(const std::string& id) const {
    std::lock_guard lock(mu_);
    for (const auto& u : pending_)
      if (u.sample.id == id) return u;
    return std::nullopt;
  }

  // Idempotent: the same decision twice is a no-op; a different decision for
  // an already decided sample is a ledger error.
  DecisionOutcome post_decision(const ReviewDecision& d) {
    validate_decision(d);
    std::lock_guard lock(mu_);
    const UnreliableSample* target = nullptr;
    for (const auto& u : pending_)
      if (u.sample.id == d.sample_id) target = &u;
    if (!target) throw UnknownSample("no pending unreliable sample " + d.sample_id);
    if (d.stage1 == Stage1::label_wrong && *d.y_gt == target->y_pred) {
      throw MalformedDecision("label_wrong with y_gt equal to the prediction");
    }
    auto it = decisions_.find(d.sample_id);
    if (it != decisions_.end()) {
      const auto& a = it->second;
      if (a.stage1 == d.stage1 && a.y_gt == d.y_gt && a.g == d.g) return DecisionOutcome::duplicate;
      throw LedgerError("sample " + d.sample_id + " already has a different decision");
    }
    decisions_.emplace(d.sample_id, d);
    return DecisionOutcome::applied;
  }

  // Failed set implied by the decisions so far, without closing the tick.
  FailedSampleSet preview_failed() const {
    std::lock_guard lock(mu_);
    return build_failed_locked();
  }

  // Ends the review window of the current tick. Undecided samples are dropped.
  FailedSampleSet close_tick(std::size_t scrap_or_repair = 0, std::size_t next_process = 0) {
    std::lock_guard lock(mu_);
    FailedSampleSet set = build_failed_locked();
    TickMetrics m;
    m.tick = tick_;
    m.model_version = current_->registry_version;
    m.unreliable = pending_.size();
    m.failed = set.size();
    m.scrap_or_repair = scrap_or_repair;
    m.next_process = next_process;
    for (const auto& r : records_) m.predictions += r.tick == tick_ ? 1 : 0;
    metrics_.push_back(m);
    pending_.clear();
    decisions_.clear();
    ++tick_;
    return set;
  }

  // Called once the main server has decided what to do with a closed tick.
  void record_outcome(std::uint64_t tick, UpdateKind kind, double fsr) {
    std::lock_guard lock(mu_);
    for (auto& m : metrics_) {
      if (m.tick == tick) {
        m.action = to_string(kind);
        m.fsr = fsr;
      }
    }
  }

  void queue_fine_tune(std::vector<Sample> set) {
    if (set.empty()) return;
    std::lock_guard lock(mu_);
    queued_.push_back(std::move(set));
  }

  std::size_t queued() const {
    std::lock_guard lock(mu_);
    return queued_.size();
  }

  void set_idle(bool idle) {
    std::lock_guard lock(mu_);
    idle_ = idle;
  }

  bool idle() const {
    std::lock_guard lock(mu_);
    return idle_;
  }

  // Runs queued fine-tunes while the line is idle. Returns how many ran.
  std::size_t run_idle_work() {
    std::size_t ran = 0;
    while (true) {
      std::vector<Sample> set;
      std::shared_ptr<const Deployment> base;
      {
        std::lock_guard lock(mu_);
        if (!idle_ || queued_.empty()) return ran;
        set = std::move(queued_.front());
        queued_.erase(queued_.begin());
        base = current_;
      }
      ModelWeights tuned = fine_tune(base->weights, set, cfg_.fine_tune);
      nlohmann::json metrics = nlohmann::json::object();
      if (frozen_ && !frozen_->empty()) metrics["frozen_accuracy"] = evaluate_accuracy(tuned, frozen_->samples, cfg_.window);
      const std::uint64_t v = register_(tuned, Origin::fine_tune, base->registry_version, metrics);
      install({v, std::move(tuned), ""});
      {
        std::lock_guard lock(mu_);
        if (!metrics_.empty()) {
          metrics_.back().model_version = v;
          if (metrics.contains("frozen_accuracy")) metrics_.back().frozen_accuracy = metrics["frozen_accuracy"].get<double>();
        }
      }
      ++ran;
    }
  }

  // Accuracy is evaluated after every tick and model change.
  nlohmann::json metrics_json() const {
    std::vector<TickMetrics> copy;
    {
      std::lock_guard lock(mu_);
      copy = metrics_;
    }
    nlohmann::json series = nlohmann::json::array();
    for (const auto& m : copy) series.push_back(to_json(m));
    const auto d = deployment();
    nlohmann::json j{{"schema_version", 1},
                     {"line_id", cfg_.line_id},
                     {"tick", tick()},
                     {"model_version", d->registry_version},
                     {"series", series}};
    const auto acc = frozen_accuracy();
    j["frozen_accuracy"] = acc ? nlohmann::json(*acc) : nlohmann::json(nullptr);
    return j;
  }

  void annotate_last_metrics(std::optional<double> frozen_accuracy) {
    std::lock_guard lock(mu_);
    if (!metrics_.empty()) {
      metrics_.back().frozen_accuracy = frozen_accuracy;
      metrics_.back().model_version = current_->registry_version;
    }
  }

  std::vector<PredictionRecord> predictions() const {
    std::lock_guard lock(mu_);
    return records_;
  }

 private:
  FailedSampleSet build_failed_locked() const {
    std::vector<ReviewDecision> ds;
    for (const auto& [id, d] : decisions_) ds.push_back(d);
    return apply_review(pending_, ds, tick_);
  }

  EdgeServerConfig cfg_;
  RegisterFn register_;
  std::optional<Dataset> frozen_;

  mutable std::mutex mu_;
  std::shared_ptr<const Deployment> current_;
  std::uint64_t tick_ = 0;
  std::vector<PredictionRecord> records_;
  std::vector<UnreliableSample> pending_;
  std::map<std::string, ReviewDecision> decisions_;
  std::vector<std::vector<Sample>> queued_;
  bool idle_ = false;
  std::vector<TickMetrics> metrics_;
};

// Owns the training corpus and the registry; decides fine-tune vs re-train.
class MainNode {
 public:
  struct ReportOutcome {
    UpdateKind kind = UpdateKind::none;
    double fsr = 0.0;
    std::optional<std::uint64_t> new_version;  // set after a re-train
  };

  MainNode(MainServerConfig cfg, ModelRegistry& registry, Dataset training, std::optional<Dataset> frozen_test = {})
      : cfg_(std::move(cfg)), registry_(registry), frozen_(std::move(frozen_test)) {
    state_.alpha = cfg_.alpha;
    state_.beta = cfg_.beta;
    state_.training = std::move(training);
    validate_state(state_);
    if (state_.training.empty()) throw ConfigError("main server needs a nonempty training dataset");
  }

  // Trains and deploys the initial model when the registry is empty.
  std::uint64_t bootstrap() {
    std::lock_guard lock(mu_);
    if (registry_.deployed()) return *registry_.deployed();
    if (auto latest = registry_.latest()) {
      registry_.deploy(*latest);
      return *latest;
    }
    const auto& first = state_.training.samples.front().image;
    ModelWeights m = re_train(state_.training.samples, ModelKind::classifier,
                              {first.height, first.width, first.channels}, cfg_.seed, cfg_.re_train);
    const auto& e = registry_.add(m, Origin::initial, std::nullopt, snapshot(m));
    registry_.deploy(e.version);
    return e.version;
  }

  ReportOutcome receive_report(const FailedSampleSet& set) {
    std::lock_guard lock(mu_);
    const UpdateAction act = schedule_update(state_, set);
    ReportOutcome out{act.kind, act.fsr, std::nullopt};
    ++reports_;
    if (act.kind == UpdateKind::re_train) {
      const std::uint64_t parent = registry_.deployed().value_or(0);
      const ModelWeights base = registry_.load(parent);
      ModelWeights m = re_train(act.samples, base.kind, base.input, cfg_.seed + reports_, cfg_.re_train, base.filters);
      const auto& e = registry_.add(m, Origin::re_train, parent, snapshot(m));
      registry_.deploy(e.version);
      out.new_version = e.version;
      ++retrains_;
    }
    return out;
  }

  // Stores a model produced elsewhere (an edge fine-tune) in the registry.
  std::uint64_t register_model(const ModelWeights& m, Origin origin, std::uint64_t parent, nlohmann::json metrics) {
    std::lock_guard lock(mu_);
    if (metrics.empty()) metrics = snapshot(m);
    const auto& e = registry_.add(m, origin, parent, std::move(metrics));
    if (origin == Origin::fine_tune) registry_.deploy(e.version);
    return e.version;
  }

  double fsr() const {
    std::lock_guard lock(mu_);
    return compute_fsr(state_);
  }
  std::size_t training_size() const {
    std::lock_guard lock(mu_);
    return state_.training.size();
  }
  Dataset training() const {
    std::lock_guard lock(mu_);
    return state_.training;
  }
  std::size_t retrains() const {
    std::lock_guard lock(mu_);
    return retrains_;
  }
  ModelRegistry& registry() noexcept { return registry_; }
  const MainServerConfig& config() const noexcept { return cfg_; }

 private:
  nlohmann::json snapshot(const ModelWeights& m) const {
    nlohmann::json j = nlohmann::json::object();
    if (frozen_ && !frozen_->empty() && m.kind == ModelKind::classifier) {
      j["frozen_accuracy"] = classifier_accuracy(m, frozen_->samples);
    }
    j["training_size"] = state_.training.size();
    return j;
  }

  MainServerConfig cfg_;
  ModelRegistry& registry_;
  std::optional<Dataset> frozen_;
  mutable std::mutex mu_;
  UpdateState state_;
  std::size_t reports_ = 0;
  std::size_t retrains_ = 0;
};

}  // namespace inspect
