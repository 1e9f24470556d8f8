#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "inspect/data.hpp"
#include "inspect/dataset_io.hpp"
#include "inspect/model.hpp"
#include "inspect/nodes.hpp"
#include "inspect/plant.hpp"
#include "inspect/protocol.hpp"
#include "inspect/training.hpp"
#include "inspect/update.hpp"

// Reproducible experiments with pass/fail thresholds. Each returns an Outcome
// that the CLI and the acceptance suite print as-is.
namespace inspect::experiments {

struct Check {
  std::string name;
  bool passed = false;
  double measured = 0.0;
  double threshold = 0.0;
  std::string relation;  // how measured compares with threshold when passing
};

inline Check at_least(std::string name, double measured, double threshold) {
  return {std::move(name), measured >= threshold, measured, threshold, ">="};
}
inline Check below(std::string name, double measured, double threshold) {
  return {std::move(name), measured < threshold, measured, threshold, "<"};
}
inline Check exactly(std::string name, double measured, double expected) {
  return {std::move(name), measured == expected, measured, expected, "=="};
}

inline nlohmann::json to_json(const Check& c) {
  return {{"name", c.name}, {"passed", c.passed}, {"measured", c.measured}, {"threshold", c.threshold},
          {"relation", c.relation}};
}

struct Outcome {
  std::string name;
  std::vector<Check> checks;
  nlohmann::json detail = nlohmann::json::object();
  double seconds = 0.0;

  bool passed() const {
    return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
  }
};

inline nlohmann::json to_json(const Outcome& o) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : o.checks) checks.push_back(to_json(c));
  return {{"experiment", o.name}, {"passed", o.passed()}, {"seconds", o.seconds}, {"checks", checks},
          {"detail", o.detail}};
}

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline FailedSampleSet as_update_set(std::uint64_t tick, const std::vector<Sample>& samples) {
  FailedSampleSet set;
  set.tick = tick;
  for (const auto& s : samples) set.members.push_back({s, s.label, FailureKind::prediction_failed});
  return set;
}

}  // namespace detail

// ---- catastrophic forgetting: fine-tune only vs the FSR-scheduled policy ----

struct ForgettingOptions {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int ticks = 40;
  std::size_t train_per_class = 30;
  std::size_t test_per_class = 131;
  std::size_t new_per_class = 10;
  double brightness_drift = -0.0025;
  double beta = 0.2;
  double alpha = 0.05;
  TrainOptions fine_tune{0.01, 5};
  TrainOptions re_train{1.0, 1000};
  int image_size = 16;
  double accuracy_floor = 0.90;
  double time_limit_s = 300.0;
};

struct ForgettingRun {
  std::uint64_t seed = 0;
  std::string policy;
  std::vector<double> accuracy;  // frozen-test accuracy after tick 0..ticks
  std::vector<std::string> actions;
  int retrains = 0;

  double min_accuracy() const { return *std::min_element(accuracy.begin(), accuracy.end()); }
};

// Every tick adds a balanced batch of new line images. The fine-tune-only
// policy adapts to each batch; the scheduled policy accumulates batches and
// re-trains on D+ once their share of D exceeds beta.
inline ForgettingRun forgetting_run(const ForgettingOptions& o, std::uint64_t seed, bool scheduled) {
  SyntheticLineConfig cfg;
  cfg.name = "forget";
  cfg.height = cfg.width = o.image_size;
  cfg.seed = seed;
  cfg.drift.brightness_per_tick = o.brightness_drift;
  const InputShape shape{o.image_size, o.image_size, 1};

  UpdateState state;
  state.alpha = o.alpha;
  state.beta = o.beta;
  state.training.name = "D";
  state.training.samples = generate_balanced(cfg, 0, o.train_per_class, o.train_per_class, 1);
  const auto frozen = generate_balanced(cfg, 0, o.test_per_class, o.test_per_class, 2);

  ForgettingRun run{seed, scheduled ? "fsr_schedule" : "fine_tune_only", {}, {}, 0};
  ModelWeights model = re_train(state.training.samples, ModelKind::classifier, shape, seed, o.re_train);
  run.accuracy.push_back(classifier_accuracy(model, frozen));
  run.actions.push_back("initial");
  for (int t = 1; t <= o.ticks; ++t) {
    const auto fresh = generate_balanced(cfg, t, o.new_per_class, o.new_per_class, 3);
    if (scheduled) {
      const UpdateAction act = schedule_update(state, detail::as_update_set(t, fresh));
      if (act.kind == UpdateKind::re_train) {
        model = re_train(act.samples, ModelKind::classifier, shape, seed + 1000 * static_cast<std::uint64_t>(t), o.re_train);
        ++run.retrains;
      } else {
        model = fine_tune(model, act.samples, o.fine_tune);
      }
      run.actions.push_back(to_string(act.kind));
    } else {
      model = fine_tune(model, fresh, o.fine_tune);
      run.actions.push_back(to_string(UpdateKind::fine_tune));
    }
    run.accuracy.push_back(classifier_accuracy(model, frozen));
  }
  return run;
}

inline Outcome forgetting(const ForgettingOptions& o = {}) {
  detail::Stopwatch clock;
  Outcome out{"forgetting", {}, {}, 0.0};
  double worst_ft = 0.0, worst_sched = 1.0;
  nlohmann::json runs = nlohmann::json::array();
  for (auto seed : o.seeds) {
    for (bool scheduled : {false, true}) {
      const auto r = forgetting_run(o, seed, scheduled);
      runs.push_back({{"seed", r.seed}, {"policy", r.policy}, {"min_accuracy", r.min_accuracy()},
                      {"retrains", r.retrains}, {"accuracy", r.accuracy}, {"actions", r.actions}});
      if (scheduled) worst_sched = std::min(worst_sched, r.min_accuracy());
      else worst_ft = std::max(worst_ft, r.min_accuracy());
    }
  }
  out.seconds = clock.seconds();
  // Every seed must show forgetting under fine-tune only, and no seed may dip
  // under the floor with scheduling.
  out.checks.push_back(below("fine_tune_only_min_accuracy_worst_seed", worst_ft, o.accuracy_floor));
  out.checks.push_back(at_least("scheduled_min_accuracy_worst_seed", worst_sched, o.accuracy_floor));
  out.checks.push_back(below("seconds", out.seconds, o.time_limit_s));
  out.detail = {{"runs", runs}, {"beta", o.beta}, {"drift", o.brightness_drift}};
  return out;
}

// ---- augmentation under lighting variation ----

struct AugmentationOptions {
  std::uint64_t seed = 1;
  std::size_t train_per_class = 136;
  int multiplier = 10;
  std::vector<double> test_brightness{0.4, 0.5, 0.6, 0.7, 0.8};
  std::size_t test_per_class_per_level = 50;
  TrainOptions train{4.0, 1000};
  double min_gain = 0.10;
  double time_limit_s = 120.0;
};

inline SyntheticLineConfig augmentation_line(std::uint64_t seed) {
  SyntheticLineConfig cfg;
  cfg.name = "aug";
  cfg.mode = DefectMode::local_spot;
  cfg.height = cfg.width = 16;
  cfg.brightness = 0.6;
  cfg.spot_radius = 2;
  cfg.seed = seed;
  return cfg;
}

inline AugmentationSpec default_augmentation(std::uint64_t seed, int multiplier) {
  AugmentationSpec spec;
  spec.multiplier = multiplier;
  spec.seed = seed;
  ProjectiveOp p;
  p.jitter = {0.05, 0.05, 1.5, 0.05, 0.05, 1.5, 0.0, 0.0};
  spec.ops.push_back(p);
  spec.ops.push_back(ColorOp{0.02, 0.22});
  spec.ops.push_back(NoiseOp{NoiseKind::gaussian, 0.03});
  return spec;
}

// Captured images come from one lighting setting; the test set spans the
// brightness range the line sees in operation.
inline Outcome augmentation(const AugmentationOptions& o = {}) {
  detail::Stopwatch clock;
  Outcome out{"augmentation", {}, {}, 0.0};
  const SyntheticLineConfig cfg = augmentation_line(o.seed);
  Dataset captured{"captured", generate_balanced(cfg, 0, o.train_per_class, o.train_per_class, 1)};
  const Dataset augmented = augment(captured, default_augmentation(o.seed, o.multiplier));

  std::vector<Sample> test;
  for (double b : o.test_brightness) {
    SyntheticLineConfig c = cfg;
    c.brightness = b;
    c.name = "aug-b" + std::to_string(static_cast<int>(std::lround(b * 100)));
    const auto part = generate_balanced(c, 0, o.test_per_class_per_level, o.test_per_class_per_level, 2);
    test.insert(test.end(), part.begin(), part.end());
  }
  const InputShape shape{cfg.height, cfg.width, 1};
  const auto base = train(make_model(ModelKind::classifier, shape, o.seed), captured.samples, o.train);
  const auto aug = train(make_model(ModelKind::classifier, shape, o.seed), augmented.samples, o.train);
  const double acc_base = classifier_accuracy(base, test);
  const double acc_aug = classifier_accuracy(aug, test);
  out.seconds = clock.seconds();
  out.checks.push_back(exactly("captured_images", static_cast<double>(captured.size()), 272));
  out.checks.push_back(exactly("augmented_images", static_cast<double>(augmented.size()), 2720));
  out.checks.push_back(at_least("accuracy_gain", acc_aug - acc_base, o.min_gain));
  out.checks.push_back(below("seconds", out.seconds, o.time_limit_s));
  out.detail = {{"captured_accuracy", acc_base}, {"augmented_accuracy", acc_aug}, {"test_images", test.size()}};
  return out;
}

// ---- image classifier vs sliding-window detector on small local defects ----

struct DetectorOptions {
  std::uint64_t seed = 7;
  int image_size = 48;
  std::size_t train_per_class = 20;
  std::size_t test_per_class = 100;
  Window window{8, 8, 1};
  TrainOptions train{1.0, 1000};
  double min_gap = 0.05;
  double time_limit_s = 180.0;
};

inline SyntheticLineConfig local_spot_line(std::uint64_t seed, int size) {
  SyntheticLineConfig cfg;
  cfg.name = "spot";
  cfg.mode = DefectMode::local_spot;
  cfg.height = cfg.width = size;
  cfg.brightness = 0.6;
  cfg.benign_dots = 8;
  cfg.benign_marks = 4;
  cfg.seed = seed;
  return cfg;
}

// Both models see the same annotated images and the same number of gradient
// steps at the same learning rate.
inline Outcome classifier_vs_detector(const DetectorOptions& o = {}) {
  detail::Stopwatch clock;
  Outcome out{"classifier_vs_detector", {}, {}, 0.0};
  const auto cfg = local_spot_line(o.seed, o.image_size);
  const auto train_set = generate_balanced(cfg, 0, o.train_per_class, o.train_per_class, 1);
  const auto test = generate_balanced(cfg, 0, o.test_per_class, o.test_per_class, 2);
  const auto clf = train(make_model(ModelKind::classifier, {o.image_size, o.image_size, 1}, o.seed + 4), train_set, o.train);
  const auto windows = detector_training_windows(train_set, o.window);
  const auto det = train(make_model(ModelKind::detector, {o.window.height, o.window.width, 1}, o.seed + 4), windows, o.train);
  const double acc_clf = classifier_accuracy(clf, test);
  const double acc_det = detector_accuracy(det, test, o.window);
  out.seconds = clock.seconds();
  out.checks.push_back(at_least("detector_minus_classifier", acc_det - acc_clf, o.min_gap));
  out.checks.push_back(below("seconds", out.seconds, o.time_limit_s));
  out.detail = {{"classifier_accuracy", acc_clf}, {"detector_accuracy", acc_det}, {"training_windows", windows.size()},
                {"image_size", o.image_size}};
  return out;
}

// ---- saliency localisation on correctly classified NG images ----

struct SaliencyOptions {
  std::uint64_t seed = 7;
  int image_size = 24;
  std::size_t train_per_class = 60;
  std::size_t test_ng = 150;
  TrainOptions train{3.0, 1000};
  std::size_t min_samples = 100;
  double mass_threshold = 0.5;
  double min_fraction = 0.8;
};

inline Outcome saliency_localisation(const SaliencyOptions& o = {}) {
  detail::Stopwatch clock;
  Outcome out{"saliency", {}, {}, 0.0};
  auto cfg = local_spot_line(o.seed, o.image_size);
  cfg.benign_dots = 4;
  cfg.benign_marks = 2;
  const auto train_set = generate_balanced(cfg, 0, o.train_per_class, o.train_per_class, 1);
  const auto test = generate_balanced(cfg, 0, 0, o.test_ng, 2);
  const auto clf = train(make_model(ModelKind::classifier, {o.image_size, o.image_size, 1}, o.seed + 4), train_set, o.train);
  std::size_t considered = 0, localised = 0;
  std::vector<double> masses;
  for (const auto& s : test) {
    if (decide_label(predict_proba(clf, s.image)) != 0) continue;
    ++considered;
    const double mass = saliency(clf, s.image).mass_inside(*s.defect_box);
    masses.push_back(mass);
    if (mass >= o.mass_threshold) ++localised;
  }
  const double fraction = considered ? static_cast<double>(localised) / considered : 0.0;
  out.seconds = clock.seconds();
  out.checks.push_back(at_least("correct_ng_samples", static_cast<double>(considered), static_cast<double>(o.min_samples)));
  out.checks.push_back(at_least("fraction_localised", fraction, o.min_fraction));
  std::sort(masses.begin(), masses.end());
  out.detail = {{"considered", considered}, {"localised", localised},
                {"median_mass", masses.empty() ? 0.0 : masses[masses.size() / 2]}};
  return out;
}

// ---- line expansion from a sibling line ----

struct ExpansionOptions {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t source_per_class = 136;
  std::size_t target_per_class = 10;
  std::size_t test_per_class = 100;
  TrainOptions source_train{1.0, 1000};
  TrainOptions target_train{1.0, 1000};
};

inline std::pair<SyntheticLineConfig, SyntheticLineConfig> sibling_lines(std::uint64_t seed) {
  SyntheticLineConfig a;
  a.name = "line-a";
  a.seed = seed;
  SyntheticLineConfig b = a;
  b.name = "line-b";
  b.seed = seed + 100;
  b.brightness = 0.6;
  b.part_radius = 0.33;
  return {a, b};
}

inline Outcome expansion(const ExpansionOptions& o = {}) {
  detail::Stopwatch clock;
  Outcome out{"expansion", {}, {}, 0.0};
  double worst_margin = 1.0;
  nlohmann::json per_seed = nlohmann::json::array();
  for (auto seed : o.seeds) {
    const auto [src, tgt] = sibling_lines(seed);
    const InputShape shape{src.height, src.width, 1};
    const auto source_data = generate_balanced(src, 0, o.source_per_class, o.source_per_class, 1);
    const auto target_data = generate_balanced(tgt, 0, o.target_per_class, o.target_per_class, 1);
    const auto test = generate_balanced(tgt, 0, o.test_per_class, o.test_per_class, 2);
    const auto source = train(make_model(ModelKind::classifier, shape, seed), source_data, o.source_train);
    const auto expanded = expand_model(source, target_data, o.target_train);
    const auto scratch = train(make_model(ModelKind::classifier, shape, seed), target_data, o.target_train);
    const double acc_e = classifier_accuracy(expanded, test);
    const double acc_s = classifier_accuracy(scratch, test);
    worst_margin = std::min(worst_margin, acc_e - acc_s);
    per_seed.push_back({{"seed", seed}, {"source_on_target", classifier_accuracy(source, test)},
                        {"expanded", acc_e}, {"from_scratch", acc_s}});
  }
  out.seconds = clock.seconds();
  out.checks.push_back(at_least("expanded_minus_scratch_worst_seed", worst_margin, 0.0));
  out.detail = {{"seeds", per_seed}, {"target_samples", 2 * o.target_per_class}};
  return out;
}

// ---- plant simulation and protocol audit ----

struct LineRun {
  std::vector<CycleTrace> traces;
  CellCounters counters;
  std::size_t framing_errors = 0;
};

// Runs `ticks` ticks of products through one inspection cell. The edge node
// closes its review window at every tick end.
inline LineRun run_line(const SyntheticLineConfig& line, std::size_t per_tick, int ticks, GoalMode goal,
                        const MachineVisionSim& mv, const EdgeHandler& edge, PlcSim& plc, MesSim& mes,
                        bool shadow = false, EdgeNode* node = nullptr) {
  ProductStream stream(line, per_tick);
  InspectionCell cell(goal, mv, edge, plc, mes, shadow);
  LineRun run;
  for (int t = 0; t < ticks; ++t) {
    const auto tick = static_cast<std::uint64_t>(stream.tick());
    for (const auto& p : stream.next_tick()) run.traces.push_back(cell.inspect(p, tick));
    if (node) node->close_tick(plc.scrap_or_repair().size(), plc.next_process().size());
  }
  run.counters = cell.counters();
  run.framing_errors = cell.framing_errors().size();
  return run;
}

struct AuditOptions {
  std::size_t products = 1000;
  std::size_t per_tick = 20;
  std::uint64_t seed = 5;
  MachineVisionSim mv{0.95, 0.10, 5};
};

// Small classifier for exercising the plumbing; its accuracy is irrelevant.
inline Deployment plumbing_model(const SyntheticLineConfig& line, std::uint64_t seed) {
  const auto data = generate_balanced(line, 0, 10, 10, 9);
  ModelWeights m = train(make_model(ModelKind::classifier, {line.height, line.width, line.channels}, seed), data, {1.0, 50});
  return {1, m, bytes_digest(encode_weights(m))};
}

inline Outcome protocol_audit(const AuditOptions& o = {}) {
  detail::Stopwatch clock;
  Outcome out{"protocol_audit", {}, {}, 0.0};
  SyntheticLineConfig line;
  line.name = "audit";
  line.seed = o.seed;
  const Deployment dep = plumbing_model(line, o.seed);
  nlohmann::json per_goal = nlohmann::json::object();

  for (GoalMode goal : {GoalMode::goal1, GoalMode::goal2, GoalMode::goal3}) {
    EdgeServerConfig ecfg;
    ecfg.goal = goal;
    ecfg.registry = "memory";
    EdgeNode node(ecfg, dep, [](const ModelWeights&, Origin, std::uint64_t, nlohmann::json) -> std::uint64_t {
      throw Error("audit edge does not register models");
    });
    std::set<std::string> edge_saw;
    EdgeHandler handler = [&](const ProtocolMessage& m) {
      edge_saw.insert(m.product_id);
      return node.handle(m);
    };
    PlcSim plc;
    MesSim mes;
    line.name = std::string("audit-") + to_string(goal);
    const int ticks = static_cast<int>((o.products + o.per_tick - 1) / o.per_tick);
    const auto run = run_line(line, o.per_tick, ticks, goal, o.mv, handler, plc, mes, false, &node);

    // Recompute what the machine vision said, independently of the cell.
    ProductStream replay(line, o.per_tick);
    std::size_t mv_ok_at_edge = 0, mv_ng_at_edge = 0, products = 0, missing_result = 0, duplicate_result = 0;
    std::set<std::string> ids;
    for (int t = 0; t < ticks; ++t) {
      for (const auto& p : replay.next_tick()) {
        ++products;
        ids.insert(p.id);
        const int mv_label = mv_inspect(o.mv, p);
        if (edge_saw.count(p.id)) ++(mv_label == 1 ? mv_ok_at_edge : mv_ng_at_edge);
        const auto n = mes.count_for(p.id);
        if (n == 0) ++missing_result;
        if (n > 1) ++duplicate_result;
      }
    }
    const std::string g = to_string(goal);
    if (goal == GoalMode::goal1) out.checks.push_back(exactly("goal1_edge_received_mv_ok", double(mv_ok_at_edge), 0));
    if (goal == GoalMode::goal2) out.checks.push_back(exactly("goal2_edge_received_mv_ng", double(mv_ng_at_edge), 0));
    if (goal == GoalMode::goal3) {
      out.checks.push_back(exactly("goal3_edge_received_all", double(edge_saw.size()), double(products)));
    }
    out.checks.push_back(at_least(g + "_products", double(products), double(o.products)));
    out.checks.push_back(exactly(g + "_test_results", double(run.counters.test_results), double(products)));
    out.checks.push_back(exactly(g + "_mes_records", double(mes.records().size()), double(products)));
    out.checks.push_back(exactly(g + "_products_without_record", double(missing_result), 0));
    out.checks.push_back(exactly(g + "_products_with_several_records", double(duplicate_result), 0));
    out.checks.push_back(exactly(g + "_plc_entries", double(plc.total()), double(products)));
    out.checks.push_back(exactly(g + "_framing_errors", double(run.framing_errors), 0));
    per_goal[g] = {{"products", products}, {"edge_received", edge_saw.size()}, {"edge_mv_ok", mv_ok_at_edge},
                   {"edge_mv_ng", mv_ng_at_edge}, {"timeouts", run.counters.timeouts},
                   {"scrap_or_repair", plc.scrap_or_repair().size()}, {"next_process", plc.next_process().size()}};
  }
  out.seconds = clock.seconds();
  out.detail = per_goal;
  return out;
}

// ---- finite-difference gradient check ----

struct GradientCheckOptions {
  std::size_t pairs = 50;
  double epsilon = 1e-4;
  double max_relative_error = 1e-4;
  double init_scale = 0.5;
  std::uint64_t seed = 3;
};

// Relative error |a - n| / max(|a| + |n|, floor) per parameter on random
// (model, batch) pairs covering both model kinds and input layouts. The loss
// is piecewise smooth; coordinates whose +-epsilon stencil flips any ReLU are
// not differentiable there and are counted as skipped instead of compared.
inline std::vector<bool> relu_pattern(const ModelWeights& m, std::span<const Sample> batch) {
  std::vector<bool> out;
  for (const auto& s : batch) {
    for (double z : forward(m, s.image).pre) out.push_back(z > 0.0);
  }
  return out;
}

inline Outcome gradient_check(const GradientCheckOptions& o = {}) {
  detail::Stopwatch clock;
  Outcome out{"gradient_check", {}, {}, 0.0};
  Rng rng(o.seed);
  double worst = 0.0;
  std::size_t compared = 0, skipped = 0;
  for (std::size_t pair = 0; pair < o.pairs; ++pair) {
    SyntheticLineConfig cfg;
    cfg.seed = o.seed + pair;
    cfg.height = cfg.width = 8 + static_cast<int>(rng.below(5));
    cfg.channels = pair % 3 == 2 ? 3 : 1;
    const auto batch = generate_line_images(cfg, 0, 3, pair);
    ModelWeights m = make_model(pair % 2 ? ModelKind::detector : ModelKind::classifier,
                                {cfg.height, cfg.width, cfg.channels}, o.seed * 1000 + pair, 3, o.init_scale);
    const auto analytic = loss_and_gradients(m, batch).gradients;
    auto params = m.params.blocks();
    auto grads = analytic.values.blocks();
    for (std::size_t b = 0; b < params.size(); ++b) {
      for (std::size_t i = 0; i < params[b].size(); ++i) {
        const double keep = params[b][i];
        params[b][i] = keep + o.epsilon;
        const double up = mean_loss(m, batch);
        const auto pattern_up = relu_pattern(m, batch);
        params[b][i] = keep - o.epsilon;
        const double down = mean_loss(m, batch);
        const auto pattern_down = relu_pattern(m, batch);
        params[b][i] = keep;
        if (pattern_up != pattern_down) {
          ++skipped;
          continue;
        }
        const double numeric = (up - down) / (2.0 * o.epsilon);
        const double a = grads[b][i];
        worst = std::max(worst, std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), 1e-7));
        ++compared;
      }
    }
  }
  out.seconds = clock.seconds();
  const double share = static_cast<double>(compared) / static_cast<double>(compared + skipped);
  out.checks.push_back(exactly("pairs", double(o.pairs), 50));
  out.checks.push_back(below("max_relative_error", worst, o.max_relative_error));
  out.checks.push_back(at_least("share_of_coordinates_compared", share, 0.9));
  out.detail = {{"compared", compared}, {"skipped_at_relu_kinks", skipped}, {"epsilon", o.epsilon}};
  return out;
}

// ---- determinism and bit-exact persistence ----

struct DeterminismOptions {
  std::filesystem::path workdir = std::filesystem::temp_directory_path() / "inspect-determinism";
  std::size_t products = 200;
  std::uint64_t seed = 11;
};

inline Outcome determinism(const DeterminismOptions& o = {}) {
  detail::Stopwatch clock;
  Outcome out{"determinism", {}, {}, 0.0};
  std::filesystem::remove_all(o.workdir);
  std::filesystem::create_directories(o.workdir);
  SyntheticLineConfig line;
  line.name = "replay";
  line.seed = o.seed;
  const Deployment dep = plumbing_model(line, o.seed);

  auto replay = [&](const std::string& log) {
    EdgeServerConfig ecfg;
    ecfg.goal = GoalMode::goal3;
    ecfg.registry = "memory";
    EdgeNode node(ecfg, dep, [](const ModelWeights&, Origin, std::uint64_t, nlohmann::json) -> std::uint64_t { return 0; });
    PlcSim plc;
    MesSim mes(log);
    run_line(line, 20, static_cast<int>(o.products / 20), GoalMode::goal3, MachineVisionSim{0.95, 0.1, o.seed},
             [&](const ProtocolMessage& m) { return node.handle(m); }, plc, mes, false, &node);
  };
  const auto log_a = (o.workdir / "mes-a.log").string();
  const auto log_b = (o.workdir / "mes-b.log").string();
  replay(log_a);
  replay(log_b);
  const Bytes a = read_file(log_a), b = read_file(log_b);
  out.checks.push_back(exactly("mes_logs_identical", a == b && !a.empty() ? 1.0 : 0.0, 1.0));

  const auto weights_path = (o.workdir / "model.inspw").string();
  save_weights(dep.weights, weights_path);
  const Bytes w1 = read_file(weights_path);
  const ModelWeights back = load_weights(weights_path);
  const bool weights_equal = back == dep.weights && encode_weights(back) == w1;
  out.checks.push_back(exactly("weights_round_trip_bit_exact", weights_equal ? 1.0 : 0.0, 1.0));

  Dataset ds{"roundtrip", generate_line_images(line, 0, 16)};
  auto spot = local_spot_line(o.seed, 16);
  spot.channels = 3;
  for (auto& s : generate_balanced(spot, 0, 4, 4, 1)) ds.samples.push_back(s);
  save_dataset(ds, o.workdir / "dataset");
  const Dataset loaded = load_dataset(o.workdir / "dataset");
  bool data_equal = loaded.size() == ds.size();
  for (std::size_t i = 0; data_equal && i < ds.size(); ++i) {
    const auto& x = ds.samples[i];
    const auto& y = loaded.samples[i];
    data_equal = x.id == y.id && x.label == y.label && x.defect_box == y.defect_box &&
                 encode_image(x.image) == encode_image(y.image);
  }
  out.checks.push_back(exactly("dataset_round_trip_bit_exact", data_equal ? 1.0 : 0.0, 1.0));
  out.seconds = clock.seconds();
  out.detail = {{"mes_log_bytes", a.size()}, {"weight_file_bytes", w1.size()}, {"dataset_samples", ds.size()}};
  std::filesystem::remove_all(o.workdir);
  return out;
}

inline const std::map<std::string, std::function<Outcome()>>& registry() {
  static const std::map<std::string, std::function<Outcome()>> all{
      {"forgetting", [] { return forgetting(); }},
      {"augmentation", [] { return augmentation(); }},
      {"classifier-vs-detector", [] { return classifier_vs_detector(); }},
      {"protocol-audit", [] { return protocol_audit(); }},
      {"gradient-check", [] { return gradient_check(); }},
      {"saliency", [] { return saliency_localisation(); }},
      {"expansion", [] { return expansion(); }},
      {"determinism", [] { return determinism(); }},
  };
  return all;
}

}  // namespace inspect::experiments
