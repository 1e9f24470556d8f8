// inspectctl: run the edge server, the main server, a simulated plant,
// the experiments, and dataset utilities.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <iostream>
#include <map>
#include <thread>

#include <CLI11.hpp>

#include "inspect/inspect.hpp"

namespace {

using namespace inspect;
using nlohmann::json;

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

void wait_for_signal() {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
}

template <class T>
T require_section(const std::optional<T>& section, const char* name, const std::string& path) {
  if (!section) throw ConfigError(path + " has no '" + name + "' section");
  return *section;
}

std::optional<Dataset> load_optional_dataset(const std::string& dir) {
  if (dir.empty()) return std::nullopt;
  return load_dataset(dir);
}

// ---- edge ----

int run_edge(const std::string& config_path) {
  const EdgeServerConfig cfg = require_section(load_config(config_path).edge, "edge", config_path);
  EdgeBoot boot = boot_edge(cfg);
  const Deployment& dep = boot.deployment;
  EdgeNode node(cfg, dep, boot.register_fn, load_optional_dataset(cfg.frozen_test));
  node.annotate_last_metrics(node.frozen_accuracy());
  EdgeServer server(node, boot.main.get(), boot.local.get());
  std::printf("edge %s ready: line %s:%d, api %s:%d, model v%llu, goal %s%s\n", cfg.line_id.c_str(),
              cfg.listen.host.c_str(), server.line_port(), cfg.api.host.c_str(), server.api_port(),
              static_cast<unsigned long long>(dep.registry_version), to_string(cfg.goal), cfg.shadow ? " (shadow)" : "");
  std::fflush(stdout);
  wait_for_signal();
  server.stop();
  return 0;
}

// ---- main ----

int run_main(const std::string& config_path, bool push_on_start) {
  const MainServerConfig cfg = require_section(load_config(config_path).main, "main", config_path);
  cfg.validate();
  ModelRegistry registry(cfg.registry);
  MainNode node(cfg, registry, load_dataset(cfg.dataset), load_optional_dataset(cfg.frozen_test));
  const auto v = node.bootstrap();
  MainServer server(node);
  std::printf("main ready: api %s:%d, deployed v%llu, |D| = %zu, %zu edge(s)\n", cfg.api.host.c_str(), server.port(),
              static_cast<unsigned long long>(v), node.training_size(), cfg.edges.size());
  std::fflush(stdout);
  if (push_on_start) {
    for (const auto& p : server.push_deployed()) {
      std::printf("push v%llu to %s: %s after %d attempt(s)\n", static_cast<unsigned long long>(p.version),
                  p.edge.c_str(), p.ok ? "ok" : "failed", p.attempts);
    }
  }
  wait_for_signal();
  server.stop();
  return 0;
}

// ---- plant ----

json http_json(httplib::Client& c, const std::string& method, const std::string& path, const json& body = {}) {
  auto res = method == "GET" ? c.Get(path) : c.Post(path, body.is_null() ? "{}" : body.dump(), "application/json");
  if (!res) throw Error(method + " " + path + " failed: " + httplib::to_string(res.error()));
  json j = res->body.empty() ? json::object() : json::parse(res->body);
  j["_status"] = res->status;
  return j;
}

int run_plant(const std::string& config_path, const std::optional<int> ticks_override, bool idle_at_end) {
  PlantConfig cfg = require_section(load_config(config_path).plant, "plant", config_path);
  if (ticks_override) cfg.ticks = *ticks_override;
  EdgeLink link(cfg.edge, cfg.cycle_budget_ms);
  auto api = api::client_for(cfg.edge_api, 900);
  PlcSim plc;
  MesSim mes(cfg.mes_log);
  InspectionCell cell(cfg.goal, cfg.mv, [&link](const ProtocolMessage& m) { return link.ask(m); }, plc, mes, cfg.shadow);
  ProductStream stream(cfg.line, cfg.products_per_tick, cfg.start_tick);

  std::size_t correct = 0, total = 0;
  for (int t = 0; t < cfg.ticks; ++t) {
    const auto tick = static_cast<std::uint64_t>(stream.tick());
    std::map<std::string, Sample> truth;
    std::size_t tick_correct = 0;
    const auto products = stream.next_tick();
    for (const auto& p : products) {
      truth[p.id] = p;
      const auto tr = cell.inspect(p, tick);
      tick_correct += tr.final_label == p.label ? 1 : 0;
    }
    correct += tick_correct;
    total += products.size();

    std::size_t reviewed = 0;
    if (cfg.auto_review) {
      const json pending = http_json(*api, "GET", "/api/v1/pending");
      for (const auto& item : pending.at("items")) {
        const auto id = item.at("id").get<std::string>();
        auto it = truth.find(id);
        if (it == truth.end()) continue;
        std::optional<SaliencyMap> map;
        if (!item.at("saliency").is_null()) map = wire::saliency_from_json(item["saliency"]);
        const auto d = simulated_review(id, item.at("y_pred").get<int>(), it->second, map, cfg.review_mass_threshold, tick);
        const json r = http_json(*api, "POST", "/api/v1/decisions", wire::decision_to_json(d));
        if (r["_status"] != 200) throw Error("review of " + id + " rejected: " + r.dump());
        ++reviewed;
      }
    }
    const json closed = http_json(*api, "POST", "/api/v1/tick",
                                  {{"scrap_or_repair", plc.scrap_or_repair().size()},
                                   {"next_process", plc.next_process().size()}});
    std::printf("tick %llu: %zu products, line accuracy %.3f, reviewed %zu, failed %s, action %s\n",
                static_cast<unsigned long long>(tick), products.size(),
                static_cast<double>(tick_correct) / static_cast<double>(products.size()), reviewed,
                closed.value("failed", json(0)).dump().c_str(), closed.value("action", std::string("?")).c_str());
    std::fflush(stdout);
  }
  if (idle_at_end) http_json(*api, "POST", "/api/v1/idle", {{"idle", true}});
  const auto& c = cell.counters();
  const json summary{{"products", c.products},
                     {"edge_received", c.edge_received},
                     {"timeouts", c.timeouts},
                     {"test_results", c.test_results},
                     {"scrap_or_repair", plc.scrap_or_repair().size()},
                     {"next_process", plc.next_process().size()},
                     {"line_accuracy", total ? static_cast<double>(correct) / total : 0.0},
                     {"framing_errors", cell.framing_errors().size()}};
  std::printf("%s\n", summary.dump(2).c_str());
  return 0;
}

// ---- experiments ----

int run_experiments(const std::vector<std::string>& names, const std::string& json_out) {
  const auto& all = experiments::registry();
  std::vector<std::string> chosen = names;
  if (chosen.empty() || (chosen.size() == 1 && chosen[0] == "all")) {
    chosen.clear();
    for (const auto& [name, fn] : all) chosen.push_back(name);
  }
  bool ok = true;
  json report = json::array();
  for (const auto& name : chosen) {
    auto it = all.find(name);
    if (it == all.end()) throw ConfigError("unknown experiment '" + name + "'");
    const auto outcome = it->second();
    for (const auto& c : outcome.checks) {
      std::printf("%s %s.%s: %.6g (%s %.6g)\n", c.passed ? "PASS" : "FAIL", outcome.name.c_str(), c.name.c_str(),
                  c.measured, c.relation.c_str(), c.threshold);
    }
    std::printf("%s %s (%.1f s)\n", outcome.passed() ? "PASS" : "FAIL", outcome.name.c_str(), outcome.seconds);
    std::fflush(stdout);
    ok = ok && outcome.passed();
    report.push_back(experiments::to_json(outcome));
  }
  if (!json_out.empty()) {
    const std::string text = report.dump(2) + "\n";
    write_file(json_out, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }
  return ok ? 0 : 1;
}

// ---- datasets ----

int dataset_generate(const std::string& line_path, std::size_t ok, std::size_t ng, int tick, std::uint64_t stream,
                     const std::string& out) {
  SyntheticLineConfig line;
  if (!line_path.empty()) {
    const Bytes raw = read_file(line_path);
    line = line_config_from_json(json::parse(raw.begin(), raw.end(), nullptr, true, true));
  }
  Dataset d{line.name, generate_balanced(line, tick, ok, ng, stream)};
  save_dataset(d, out);
  std::printf("wrote %zu samples to %s\n", d.size(), out.c_str());
  return 0;
}

int dataset_augment(const std::string& in, const std::string& out, int multiplier, std::uint64_t seed) {
  const Dataset d = load_dataset(in);
  const Dataset a = augment(d, experiments::default_augmentation(seed, multiplier));
  save_dataset(a, out);
  std::printf("augmented %zu -> %zu samples into %s\n", d.size(), a.size(), out.c_str());
  return 0;
}

int dataset_info(const std::string& dir) {
  const Dataset d = load_dataset(dir);
  std::size_t ng = 0, boxes = 0;
  for (const auto& s : d.samples) {
    ng += s.label == 0 ? 1 : 0;
    boxes += s.defect_box ? 1 : 0;
  }
  const json j{{"name", d.name}, {"samples", d.size()}, {"ng", ng}, {"ok", d.size() - ng}, {"defect_boxes", boxes},
               {"shape", d.empty() ? json(nullptr)
                                   : json::array({d.samples[0].image.height, d.samples[0].image.width,
                                                  d.samples[0].image.channels})}};
  std::printf("%s\n", j.dump(2).c_str());
  return 0;
}

// Trains a classifier on a dataset and stores it as the registry's initial,
// deployed model.
int dataset_seed_registry(const std::string& dir, const std::string& registry_dir, const TrainOptions& opts,
                          std::uint64_t seed) {
  const Dataset d = load_dataset(dir);
  if (d.empty()) throw ConfigError("dataset is empty");
  ModelRegistry reg(registry_dir);
  if (!reg.empty()) throw ConfigError("registry " + registry_dir + " already holds models");
  const auto& img = d.samples.front().image;
  const ModelWeights m = train(make_model(ModelKind::classifier, {img.height, img.width, img.channels}, seed), d.samples, opts);
  const auto& e = reg.add(m, Origin::initial, std::nullopt, {{"training_accuracy", classifier_accuracy(m, d.samples)}});
  reg.deploy(e.version);
  std::printf("registered v%llu (%s)\n", static_cast<unsigned long long>(e.version), e.digest.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive visual inspection: edge, main, plant simulator and experiments"};
  app.require_subcommand(1);

  std::string config;
  auto* edge = app.add_subcommand("edge", "Run an edge server for one production line");
  edge->add_option("-c,--config", config, "Config file with an 'edge' section")->required();

  bool push_on_start = false;
  auto* main_cmd = app.add_subcommand("main", "Run the main server (registry, scheduling, re-training)");
  main_cmd->add_option("-c,--config", config, "Config file with a 'main' section")->required();
  main_cmd->add_flag("--push", push_on_start, "Push the deployed model to every edge at startup");

  std::optional<int> ticks;
  bool idle_at_end = false;
  auto* plant = app.add_subcommand("plant", "Drive a simulated line against a running edge server");
  plant->add_option("-c,--config", config, "Config file with a 'plant' section")->required();
  plant->add_option("--ticks", ticks, "Override the number of ticks");
  plant->add_flag("--idle", idle_at_end, "Mark the edge idle after the last tick");

  std::vector<std::string> names;
  std::string json_out;
  auto* exp = app.add_subcommand("experiment", "Run experiments; exit status 0 iff every check passes");
  exp->add_option("names", names, "Experiment names, or 'all'")
      ->check(CLI::IsMember([] {
        std::vector<std::string> v{"all"};
        for (const auto& [k, f] : experiments::registry()) v.push_back(k);
        return v;
      }()));
  exp->add_option("--json", json_out, "Write the full report to this file");

  auto* ds = app.add_subcommand("dataset", "Dataset utilities");
  ds->require_subcommand(1);
  std::string line_path, out, in, registry_dir;
  std::size_t n_ok = 50, n_ng = 50;
  int tick = 0, multiplier = 10, epochs = 1000;
  std::uint64_t stream = 1, seed = 1;
  double mu = 1.0;
  auto* gen = ds->add_subcommand("generate", "Render a balanced synthetic dataset");
  gen->add_option("--line", line_path, "Line description (JSON)");
  gen->add_option("--ok", n_ok, "OK samples");
  gen->add_option("--ng", n_ng, "NG samples");
  gen->add_option("--tick", tick, "Production tick (drift)");
  gen->add_option("--stream", stream, "Random stream, to draw disjoint sets");
  gen->add_option("-o,--out", out, "Output directory")->required();
  auto* aug = ds->add_subcommand("augment", "Write an augmented copy of a dataset");
  aug->add_option("-i,--in", in, "Input dataset")->required();
  aug->add_option("-o,--out", out, "Output directory")->required();
  aug->add_option("--multiplier", multiplier, "Outputs per input, original included");
  aug->add_option("--seed", seed, "Augmentation seed");
  auto* info = ds->add_subcommand("info", "Summarise a dataset");
  info->add_option("dir", in, "Dataset directory")->required();
  auto* seed_reg = ds->add_subcommand("seed-registry", "Train an initial model into an empty registry");
  seed_reg->add_option("-i,--in", in, "Training dataset")->required();
  seed_reg->add_option("-r,--registry", registry_dir, "Registry directory")->required();
  seed_reg->add_option("--mu", mu, "Learning rate");
  seed_reg->add_option("--epochs", epochs, "Epochs");
  seed_reg->add_option("--seed", seed, "Initialisation seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*edge) return run_edge(config);
    if (*main_cmd) return run_main(config, push_on_start);
    if (*plant) return run_plant(config, ticks, idle_at_end);
    if (*exp) return run_experiments(names, json_out);
    if (*gen) return dataset_generate(line_path, n_ok, n_ng, tick, stream, out);
    if (*aug) return dataset_augment(in, out, multiplier, seed);
    if (*info) return dataset_info(in);
    if (*seed_reg) return dataset_seed_registry(in, registry_dir, {mu, epochs}, seed);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
