#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "inspect/error.hpp"
#include "inspect/model.hpp"
#include "inspect/sample.hpp"
#include "inspect/training.hpp"

namespace inspect {

struct ScoredSample {
  Sample sample;
  double probability = 0.5;
};

// A tested sample whose probability fell inside the review band.
struct UnreliableSample {
  Sample sample;
  double probability = 0.5;
  int y_pred = 1;
  std::uint64_t tick = 0;
};

inline void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 0.5)) throw ConfigError("alpha must lie in [0, 0.5]");
}

// Keeps exactly the samples with 0.5 - alpha <= p <= 0.5 + alpha.
inline std::vector<UnreliableSample> select_unreliable(std::span<const ScoredSample> predictions, double alpha,
                                                       std::uint64_t tick = 0) {
  check_alpha(alpha);
  std::vector<UnreliableSample> out;
  for (const auto& s : predictions) {
    if (s.probability >= 0.5 - alpha && s.probability <= 0.5 + alpha) {
      out.push_back({s.sample, s.probability, decide_label(s.probability), tick});
    }
  }
  return out;
}

// ---- two-stage review ----

enum class Stage1 { label_right, label_wrong };

inline const char* to_string(Stage1 s) noexcept { return s == Stage1::label_right ? "label_right" : "label_wrong"; }

struct ReviewDecision {
  std::string sample_id;
  Stage1 stage1 = Stage1::label_right;
  std::optional<int> y_gt;  // corrected label, only with label_wrong
  std::optional<int> g;     // 1 well trained, 0 training fail; only with label_right
  std::string reviewer;
  std::uint64_t timestamp = 0;

  friend bool operator==(const ReviewDecision&, const ReviewDecision&) = default;
};

inline void validate_decision(const ReviewDecision& d) {
  if (d.sample_id.empty()) throw MalformedDecision("decision without sample id");
  if (d.stage1 == Stage1::label_wrong) {
    if (d.g) throw MalformedDecision("stage 2 is only given when stage 1 confirms the label");
    if (!d.y_gt || (*d.y_gt != 0 && *d.y_gt != 1)) throw MalformedDecision("label_wrong needs a binary y_gt");
  } else {
    if (!d.g || (*d.g != 0 && *d.g != 1)) throw MalformedDecision("label_right needs stage 2 G in {0,1}");
    if (d.y_gt) throw MalformedDecision("y_gt is only given with label_wrong");
  }
}

enum class FailureKind { prediction_failed, poorly_explained };

// A failed sample with its verified label. sample.label equals y_gt.
struct FailedSample {
  Sample sample;
  int y_gt = 1;
  FailureKind kind = FailureKind::prediction_failed;
};

struct FailedSampleSet {
  std::uint64_t tick = 0;
  std::vector<FailedSample> members;

  bool empty() const noexcept { return members.empty(); }
  std::size_t size() const noexcept { return members.size(); }
  std::vector<Sample> samples() const {
    std::vector<Sample> out;
    out.reserve(members.size());
    for (const auto& m : members) out.push_back(m.sample);
    return out;
  }
};

// Splits reviewed samples into prediction failures (relabeled with y_gt) and
// correct-but-poorly-explained ones (label kept); G = 1 samples are dropped.
inline FailedSampleSet apply_review(std::span<const UnreliableSample> pending, std::span<const ReviewDecision> decisions,
                                    std::uint64_t tick) {
  std::map<std::string, const UnreliableSample*> by_id;
  for (const auto& u : pending) by_id[u.sample.id] = &u;

  std::map<std::string, const ReviewDecision*> chosen;
  for (const auto& d : decisions) {
    validate_decision(d);
    auto it = by_id.find(d.sample_id);
    if (it == by_id.end() || it->second->tick != tick) {
      throw UnknownSample("decision for unknown sample " + d.sample_id + " at tick " + std::to_string(tick));
    }
    if (d.stage1 == Stage1::label_wrong && *d.y_gt == it->second->y_pred) {
      throw MalformedDecision("label_wrong with y_gt equal to the prediction for " + d.sample_id);
    }
    auto [slot, fresh] = chosen.emplace(d.sample_id, &d);
    if (!fresh) {
      const ReviewDecision& a = *slot->second;
      if (a.stage1 != d.stage1 || a.y_gt != d.y_gt || a.g != d.g) {
        throw LedgerError("conflicting decisions for " + d.sample_id);
      }
    }
  }

  FailedSampleSet out;
  out.tick = tick;
  for (const auto& u : pending) {
    auto it = chosen.find(u.sample.id);
    if (it == chosen.end()) continue;
    const ReviewDecision& d = *it->second;
    FailedSample f{u.sample, u.y_pred, FailureKind::poorly_explained};
    if (d.stage1 == Stage1::label_wrong) {
      f.y_gt = *d.y_gt;
      f.kind = FailureKind::prediction_failed;
    } else if (*d.g == 1) {
      continue;
    }
    f.sample.label = f.y_gt;
    if (f.y_gt == 1) f.sample.defect_box.reset();
    out.members.push_back(std::move(f));
  }
  return out;
}

// ---- scheduling ----

struct UpdateState {
  double alpha = 0.05;
  double beta = 0.2;
  std::uint64_t tick = 0;
  Dataset training;                            // D
  std::vector<FailedSampleSet> accumulated;    // failed sets since the last re-train
};

inline void validate_state(const UpdateState& s) {
  check_alpha(s.alpha);
  if (!(s.beta > 0.0 && s.beta < 1.0)) throw ConfigError("beta must lie in (0,1)");
}

inline std::set<std::string> accumulated_ids(const UpdateState& s) {
  std::set<std::string> ids;
  for (const auto& set : s.accumulated)
    for (const auto& m : set.members) ids.insert(m.sample.id);
  return ids;
}

inline double compute_fsr(const UpdateState& s) {
  if (s.training.empty()) throw ConfigError("FSR is undefined for an empty training set");
  return static_cast<double>(accumulated_ids(s).size()) / static_cast<double>(s.training.size());
}

// D plus every accumulated failed sample not already present by id. A sample
// failing at several ticks enters once, with its latest verified label.
inline Dataset build_d_plus(const UpdateState& s) {
  Dataset out = s.training;
  std::set<std::string> present;
  for (const auto& x : out.samples) present.insert(x.id);
  std::map<std::string, Sample> latest;
  std::vector<std::string> order;
  for (const auto& set : s.accumulated) {
    for (const auto& m : set.members) {
      if (present.count(m.sample.id)) continue;
      if (!latest.count(m.sample.id)) order.push_back(m.sample.id);
      latest[m.sample.id] = m.sample;
    }
  }
  for (const auto& id : order) out.samples.push_back(latest[id]);
  return out;
}

enum class UpdateKind { none, fine_tune, re_train };

inline const char* to_string(UpdateKind k) noexcept {
  switch (k) {
    case UpdateKind::none: return "none";
    case UpdateKind::fine_tune: return "fine_tune";
    case UpdateKind::re_train: return "re_train";
  }
  return "?";
}

struct UpdateAction {
  UpdateKind kind = UpdateKind::none;
  std::vector<Sample> samples;  // failed set for fine_tune, D+ for re_train
  double fsr = 0.0;             // ratio that drove the decision
};

// Accumulates the new failed set, then decides. A re-train replaces D with D+
// and restarts accumulation.
inline UpdateAction schedule_update(UpdateState& state, const FailedSampleSet& new_set) {
  validate_state(state);
  UpdateAction act;
  if (new_set.empty()) {
    act.fsr = compute_fsr(state);
    return act;
  }
  state.accumulated.push_back(new_set);
  act.fsr = compute_fsr(state);
  if (act.fsr > state.beta) {
    Dataset d_plus = build_d_plus(state);
    act.kind = UpdateKind::re_train;
    act.samples = d_plus.samples;
    state.training = std::move(d_plus);
    state.accumulated.clear();
  } else {
    act.kind = UpdateKind::fine_tune;
    act.samples = new_set.samples();
  }
  return act;
}

// ---- model updates ----

// Gradient steps on the failed set only, starting from the current weights.
// The child always carries a newer version, even with zero epochs.
inline ModelWeights fine_tune(const ModelWeights& model, std::span<const Sample> set, const TrainOptions& opts) {
  if (set.empty()) throw RejectedInput("fine_tune needs a nonempty failed set");
  ModelWeights out = train(model, set, opts);
  if (out.version == model.version) ++out.version;
  return out;
}

inline ModelWeights re_train(std::span<const Sample> d_plus, ModelKind kind, InputShape input, std::uint64_t seed,
                             const TrainOptions& opts, int filters = kDefaultFilters) {
  return train(make_model(kind, input, seed, filters), d_plus, opts);
}

// Starts from another line's weights and fine-tunes on the target data.
inline ModelWeights expand_model(const ModelWeights& source, std::span<const Sample> target, const TrainOptions& opts) {
  validate_model(source);
  for (const auto& s : target) {
    if (s.image.height != source.input.height || s.image.width != source.input.width ||
        s.image.channels != source.input.channels) {
      throw ExpansionError("target sample " + s.id + " does not match the source input shape");
    }
  }
  if (target.empty()) return source;
  return train(source, target, opts);
}

}  // namespace inspect
