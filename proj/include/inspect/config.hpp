#pragma once

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "inspect/binary_io.hpp"
#include "inspect/data.hpp"
#include "inspect/error.hpp"
#include "inspect/model.hpp"
#include "inspect/plant.hpp"
#include "inspect/protocol.hpp"
#include "inspect/training.hpp"

namespace inspect {

struct Endpoint {
  std::string host = "127.0.0.1";
  int port = 0;

  static Endpoint parse(const std::string& text) {
    const auto colon = text.rfind(':');
    if (colon == std::string::npos || colon == 0) throw ConfigError("address '" + text + "' is not host:port");
    Endpoint e{text.substr(0, colon), 0};
    try {
      std::size_t used = 0;
      e.port = std::stoi(text.substr(colon + 1), &used);
      if (used != text.size() - colon - 1) throw ConfigError("bad port");
    } catch (const std::exception&) {
      throw ConfigError("address '" + text + "' has a bad port");
    }
    if (e.port < 0 || e.port > 65535) throw ConfigError("port out of range in '" + text + "'");
    return e;
  }

  std::string str() const { return host + ":" + std::to_string(port); }
  friend bool operator==(const Endpoint&, const Endpoint&) = default;
};

// Replaces the port when the environment variable holds one.
inline void apply_port_override(Endpoint& e, const char* env_name) {
  if (const char* v = std::getenv(env_name); v != nullptr && *v != '\0') {
    e.port = Endpoint::parse("h:" + std::string(v)).port;
  }
}

inline constexpr const char* kEnvEdgePort = "INSPECT_EDGE_PORT";
inline constexpr const char* kEnvEdgeApiPort = "INSPECT_EDGE_API_PORT";
inline constexpr const char* kEnvMainPort = "INSPECT_MAIN_PORT";

struct EdgeServerConfig {
  std::string line_id = "line-a";
  GoalMode goal = GoalMode::goal1;
  std::optional<std::uint64_t> model_version;  // registry version; latest when absent
  int cycle_budget_ms = 500;
  Endpoint listen{"127.0.0.1", 7301};           // line protocol
  Endpoint api{"127.0.0.1", 8301};              // HTTP API
  std::optional<Endpoint> main;                 // main-server API
  std::string registry;
  std::string frozen_test;                      // optional dataset directory
  bool shadow = false;
  double alpha = 0.05;
  TrainOptions fine_tune{0.05, 5};
  Window window{8, 8, 1};                       // detector models only

  void validate() const {
    if (line_id.empty()) throw ConfigError("edge line_id is empty");
    if (cycle_budget_ms <= 0) throw ConfigError("cycle budget must be positive");
    if (registry.empty()) throw ConfigError("edge needs a registry path");
    if (!(alpha >= 0.0 && alpha <= 0.5)) throw ConfigError("alpha must lie in [0, 0.5]");
  }
};

struct MainServerConfig {
  std::string registry;
  std::string dataset;
  std::string frozen_test;
  double alpha = 0.05;
  double beta = 0.2;
  TrainOptions fine_tune{0.05, 5};
  TrainOptions re_train{1.0, 1000};
  std::uint64_t seed = 1;
  Endpoint api{"127.0.0.1", 8300};
  std::vector<Endpoint> edges;
  int push_attempts = 5;
  int push_backoff_ms = 100;

  void validate() const {
    if (registry.empty()) throw ConfigError("main needs a registry path");
    if (dataset.empty() || !std::filesystem::exists(dataset)) throw ConfigError("training dataset '" + dataset + "' does not exist");
    if (!frozen_test.empty() && !std::filesystem::exists(frozen_test)) throw ConfigError("frozen test set '" + frozen_test + "' does not exist");
    if (edges.empty()) throw ConfigError("main needs a nonempty edge roster");
    if (!(alpha >= 0.0 && alpha <= 0.5)) throw ConfigError("alpha must lie in [0, 0.5]");
    if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("beta must lie in (0,1)");
    if (push_attempts < 1) throw ConfigError("push_attempts must be at least 1");
  }
};

struct PlantConfig {
  SyntheticLineConfig line;
  std::size_t products_per_tick = 20;
  int ticks = 1;
  int start_tick = 0;
  MachineVisionSim mv;
  GoalMode goal = GoalMode::goal1;
  bool shadow = false;
  Endpoint edge{"127.0.0.1", 7301};
  Endpoint edge_api{"127.0.0.1", 8301};
  int cycle_budget_ms = 500;
  std::string mes_log = "mes.log";
  bool auto_review = false;        // answer review requests from ground truth
  double review_mass_threshold = 0.5;
};

struct AppConfig {
  std::optional<EdgeServerConfig> edge;
  std::optional<MainServerConfig> main;
  std::optional<PlantConfig> plant;
};

namespace detail {

inline TrainOptions train_options_from(const nlohmann::json& j, TrainOptions def) {
  def.mu = j.value("mu", def.mu);
  def.epochs = j.value("epochs", def.epochs);
  if (!(def.mu > 0.0)) throw ConfigError("mu must be positive");
  if (def.epochs < 0) throw ConfigError("epochs must be nonnegative");
  return def;
}

inline double required_alpha(const nlohmann::json& j, const char* section) {
  if (!j.contains("alpha")) throw ConfigError(std::string(section) + ".alpha must be set explicitly");
  return j["alpha"].get<double>();
}

}  // namespace detail

inline SyntheticLineConfig line_config_from_json(const nlohmann::json& j) {
  SyntheticLineConfig c;
  c.name = j.value("name", c.name);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.channels = j.value("channels", c.channels);
  const std::string mode = j.value("mode", std::string(to_string(c.mode)));
  if (mode == "global-shape") c.mode = DefectMode::global_shape;
  else if (mode == "local-spot") c.mode = DefectMode::local_spot;
  else throw ConfigError("unknown defect mode '" + mode + "'");
  c.defect_rate = j.value("defect_rate", c.defect_rate);
  if (j.contains("drift")) {
    c.drift.brightness_per_tick = j["drift"].value("brightness_per_tick", 0.0);
    c.drift.position_noise_per_tick = j["drift"].value("position_noise_per_tick", 0.0);
  }
  c.seed = j.value("seed", c.seed);
  c.background = j.value("background", c.background);
  c.brightness = j.value("brightness", c.brightness);
  c.noise = j.value("noise", c.noise);
  c.position_noise = j.value("position_noise", c.position_noise);
  c.part_radius = j.value("part_radius", c.part_radius);
  c.spot_radius = j.value("spot_radius", c.spot_radius);
  c.spot_contrast = j.value("spot_contrast", c.spot_contrast);
  c.benign_marks = j.value("benign_marks", c.benign_marks);
  c.benign_dots = j.value("benign_dots", c.benign_dots);
  c.validate();
  return c;
}

inline nlohmann::json line_config_to_json(const SyntheticLineConfig& c) {
  return {{"name", c.name},
          {"height", c.height},
          {"width", c.width},
          {"channels", c.channels},
          {"mode", to_string(c.mode)},
          {"defect_rate", c.defect_rate},
          {"drift", {{"brightness_per_tick", c.drift.brightness_per_tick},
                     {"position_noise_per_tick", c.drift.position_noise_per_tick}}},
          {"seed", c.seed},
          {"background", c.background},
          {"brightness", c.brightness},
          {"noise", c.noise},
          {"position_noise", c.position_noise},
          {"part_radius", c.part_radius},
          {"spot_radius", c.spot_radius},
          {"spot_contrast", c.spot_contrast},
          {"benign_marks", c.benign_marks},
          {"benign_dots", c.benign_dots}};
}

inline EdgeServerConfig edge_config_from_json(const nlohmann::json& j) {
  EdgeServerConfig c;
  c.line_id = j.value("line_id", c.line_id);
  c.goal = goal_from_string(j.value("goal", std::string("goal1")));
  if (j.contains("model_version") && !j["model_version"].is_null()) c.model_version = j["model_version"].get<std::uint64_t>();
  c.cycle_budget_ms = j.value("cycle_budget_ms", c.cycle_budget_ms);
  if (j.contains("listen")) c.listen = Endpoint::parse(j["listen"].get<std::string>());
  if (j.contains("api")) c.api = Endpoint::parse(j["api"].get<std::string>());
  if (j.contains("main") && !j["main"].is_null()) c.main = Endpoint::parse(j["main"].get<std::string>());
  c.registry = j.value("registry", c.registry);
  c.frozen_test = j.value("frozen_test", c.frozen_test);
  c.shadow = j.value("shadow", c.shadow);
  c.alpha = detail::required_alpha(j, "edge");
  if (j.contains("fine_tune")) c.fine_tune = detail::train_options_from(j["fine_tune"], c.fine_tune);
  if (j.contains("window")) {
    c.window.height = j["window"].value("height", c.window.height);
    c.window.width = j["window"].value("width", c.window.width);
    c.window.stride = j["window"].value("stride", c.window.stride);
  }
  apply_port_override(c.listen, kEnvEdgePort);
  apply_port_override(c.api, kEnvEdgeApiPort);
  if (c.main) apply_port_override(*c.main, kEnvMainPort);
  c.validate();
  return c;
}

// Paths are checked by validate() when the server starts, not at parse time.
inline MainServerConfig main_config_from_json(const nlohmann::json& j) {
  MainServerConfig c;
  c.registry = j.value("registry", c.registry);
  c.dataset = j.value("dataset", c.dataset);
  c.frozen_test = j.value("frozen_test", c.frozen_test);
  c.alpha = detail::required_alpha(j, "main");
  c.beta = j.value("beta", c.beta);
  if (j.contains("fine_tune")) c.fine_tune = detail::train_options_from(j["fine_tune"], c.fine_tune);
  if (j.contains("re_train")) c.re_train = detail::train_options_from(j["re_train"], c.re_train);
  c.seed = j.value("seed", c.seed);
  if (j.contains("api")) c.api = Endpoint::parse(j["api"].get<std::string>());
  for (const auto& e : j.value("edges", nlohmann::json::array())) c.edges.push_back(Endpoint::parse(e.get<std::string>()));
  c.push_attempts = j.value("push_attempts", c.push_attempts);
  c.push_backoff_ms = j.value("push_backoff_ms", c.push_backoff_ms);
  apply_port_override(c.api, kEnvMainPort);
  return c;
}

inline PlantConfig plant_config_from_json(const nlohmann::json& j) {
  PlantConfig c;
  if (j.contains("line")) c.line = line_config_from_json(j["line"]);
  c.products_per_tick = j.value("products_per_tick", c.products_per_tick);
  c.ticks = j.value("ticks", c.ticks);
  c.start_tick = j.value("start_tick", c.start_tick);
  if (j.contains("machine_vision")) {
    const auto& mv = j["machine_vision"];
    c.mv.true_positive_rate = mv.value("true_positive_rate", c.mv.true_positive_rate);
    c.mv.false_positive_rate = mv.value("false_positive_rate", c.mv.false_positive_rate);
    c.mv.seed = mv.value("seed", c.mv.seed);
  }
  c.mv.validate();
  c.goal = goal_from_string(j.value("goal", std::string("goal1")));
  c.shadow = j.value("shadow", c.shadow);
  if (j.contains("edge")) c.edge = Endpoint::parse(j["edge"].get<std::string>());
  if (j.contains("edge_api")) c.edge_api = Endpoint::parse(j["edge_api"].get<std::string>());
  c.cycle_budget_ms = j.value("cycle_budget_ms", c.cycle_budget_ms);
  c.mes_log = j.value("mes_log", c.mes_log);
  c.auto_review = j.value("auto_review", c.auto_review);
  c.review_mass_threshold = j.value("review_mass_threshold", c.review_mass_threshold);
  if (c.products_per_tick == 0 || c.ticks < 0) throw ConfigError("plant needs positive products_per_tick and ticks >= 0");
  apply_port_override(c.edge, kEnvEdgePort);
  apply_port_override(c.edge_api, kEnvEdgeApiPort);
  return c;
}

inline AppConfig load_config(const std::string& path) {
  const Bytes raw = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(raw.begin(), raw.end(), nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  AppConfig c;
  try {
    if (j.contains("edge")) c.edge = edge_config_from_json(j["edge"]);
    if (j.contains("main")) c.main = main_config_from_json(j["main"]);
    if (j.contains("plant")) c.plant = plant_config_from_json(j["plant"]);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

}  // namespace inspect
