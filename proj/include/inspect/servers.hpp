#pragma once

#include <atomic>
#include <chrono>
#include <cstdio>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "inspect/config.hpp"
#include "inspect/net.hpp"
#include "inspect/nodes.hpp"
#include "inspect/registry.hpp"
#include "inspect/wire_json.hpp"

// HTTP and TCP front ends for EdgeNode and MainNode.
namespace inspect {

namespace api {

inline void reply_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void reply_error(httplib::Response& res, int status, const std::string& code, const std::string& reason) {
  reply_json(res, status, {{"schema_version", wire::kSchemaVersion}, {"error", code}, {"reason", reason}});
}

inline nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  return nlohmann::json::parse(req.body);
}

inline std::unique_ptr<httplib::Client> client_for(const Endpoint& e, int timeout_s = 600) {
  auto c = std::make_unique<httplib::Client>(e.host, e.port);
  c->set_connection_timeout(2, 0);
  c->set_read_timeout(timeout_s, 0);
  c->set_write_timeout(timeout_s, 0);
  return c;
}

// Runs `server` on its own thread and waits until it accepts connections.
inline std::thread start_http(httplib::Server& server, const Endpoint& at, int& bound_port) {
  if (at.port == 0) {
    bound_port = server.bind_to_any_port(at.host);
  } else {
    if (!server.bind_to_port(at.host, at.port)) throw Error("cannot bind HTTP API on " + at.str());
    bound_port = at.port;
  }
  if (bound_port <= 0) throw Error("cannot bind HTTP API on " + at.str());
  std::thread t([&server] { server.listen_after_bind(); });
  server.wait_until_ready();
  return t;
}

}  // namespace api

// Pushes weights to an edge with exponential backoff between attempts.
struct PushResult {
  std::string edge;
  std::uint64_t version = 0;
  int attempts = 0;
  bool ok = false;
};

inline PushResult push_model(const Endpoint& edge, std::uint64_t version, const Bytes& bytes, int attempts, int backoff_ms) {
  PushResult r{edge.str(), version, 0, false};
  const std::string body(bytes.begin(), bytes.end());
  httplib::Headers headers{{"X-Registry-Version", std::to_string(version)}, {"X-Weight-Digest", bytes_digest(bytes)}};
  for (int k = 0; k < attempts; ++k) {
    ++r.attempts;
    auto cli = api::client_for(edge, 30);
    auto res = cli->Post("/api/v1/model", headers, body, "application/octet-stream");
    if (res && res->status == 200) {
      r.ok = true;
      return r;
    }
    std::fprintf(stderr, "push of v%llu to %s failed (attempt %d)\n", static_cast<unsigned long long>(version),
                 edge.str().c_str(), k + 1);
    if (k + 1 < attempts) std::this_thread::sleep_for(std::chrono::milliseconds(backoff_ms << k));
  }
  return r;
}

class MainServer {
 public:
  MainServer(MainNode& node) : node_(node) {
    routes();
    thread_ = api::start_http(http_, node_.config().api, port_);
  }
  ~MainServer() { stop(); }

  void stop() {
    http_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const noexcept { return port_; }
  std::vector<PushResult> pushes() const {
    std::lock_guard lock(mu_);
    return pushes_;
  }

  // Sends the deployed version to every edge in the roster.
  std::vector<PushResult> push_deployed() {
    const auto v = node_.registry().deployed();
    if (!v) return {};
    const Bytes bytes = node_.registry().bytes(*v);
    std::vector<PushResult> out;
    for (const auto& e : node_.config().edges) {
      out.push_back(push_model(e, *v, bytes, node_.config().push_attempts, node_.config().push_backoff_ms));
    }
    std::lock_guard lock(mu_);
    pushes_.insert(pushes_.end(), out.begin(), out.end());
    return out;
  }

 private:
  void routes() {
    http_.Get("/api/v1/health", [](const httplib::Request&, httplib::Response& res) {
      api::reply_json(res, 200, {{"status", "ok"}, {"role", "main"}});
    });
    http_.Get("/api/v1/lineage", [this](const httplib::Request&, httplib::Response& res) {
      api::reply_json(res, 200, node_.registry().lineage_json());
    });
    http_.Get("/api/v1/metrics", [this](const httplib::Request&, httplib::Response& res) {
      api::reply_json(res, 200,
                      {{"schema_version", wire::kSchemaVersion},
                       {"fsr", node_.fsr()},
                       {"training_size", node_.training_size()},
                       {"retrains", node_.retrains()}});
    });
    http_.Get(R"(/api/v1/models/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
      const auto v = std::stoull(req.matches[1]);
      if (!node_.registry().find(v)) return api::reply_error(res, 404, "unknown_version", "no such version");
      const Bytes b = node_.registry().bytes(v);
      res.set_header("X-Weight-Digest", bytes_digest(b));
      res.set_content(std::string(b.begin(), b.end()), "application/octet-stream");
    });
    http_.Post("/api/v1/registry", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        const auto j = api::parse_body(req);
        const Bytes bytes = wire::base64_decode(j.at("weights").get<std::string>());
        const ModelWeights m = decode_weights(bytes);
        const auto v = node_.register_model(m, origin_from_string(j.at("origin").get<std::string>()),
                                            j.at("parent").get<std::uint64_t>(),
                                            j.value("metrics", nlohmann::json::object()));
        api::reply_json(res, 200, {{"version", v}});
      } catch (const std::exception& e) {
        api::reply_error(res, 400, "bad_registration", e.what());
      }
    });
    http_.Post("/api/v1/reports", [this](const httplib::Request& req, httplib::Response& res) {
      FailedSampleSet set;
      try {
        set = wire::failed_set_from_json(api::parse_body(req).at("failed_set"));
      } catch (const std::exception& e) {
        return api::reply_error(res, 400, "bad_report", e.what());
      }
      const auto out = node_.receive_report(set);
      nlohmann::json body{{"schema_version", wire::kSchemaVersion}, {"action", to_string(out.kind)}, {"fsr", out.fsr}};
      if (out.new_version) {
        body["new_version"] = *out.new_version;
        nlohmann::json pushed = nlohmann::json::array();
        for (const auto& p : push_deployed()) {
          pushed.push_back({{"edge", p.edge}, {"version", p.version}, {"attempts", p.attempts}, {"ok", p.ok}});
        }
        body["pushes"] = pushed;
      }
      api::reply_json(res, 200, body);
    });
  }

  MainNode& node_;
  httplib::Server http_;
  std::thread thread_;
  int port_ = 0;
  mutable std::mutex mu_;
  std::vector<PushResult> pushes_;
};

// Registration and model fetches against a remote main server.
class MainClient {
 public:
  explicit MainClient(Endpoint main) : main_(std::move(main)) {}

  std::uint64_t register_model(const ModelWeights& m, Origin origin, std::uint64_t parent, const nlohmann::json& metrics) {
    const nlohmann::json body{{"origin", to_string(origin)},
                              {"parent", parent},
                              {"metrics", metrics},
                              {"weights", wire::base64_encode(encode_weights(m))}};
    auto res = api::client_for(main_)->Post("/api/v1/registry", body.dump(), "application/json");
    if (!res || res->status != 200) throw Error("main server refused registration");
    return nlohmann::json::parse(res->body).at("version").get<std::uint64_t>();
  }

  nlohmann::json lineage() {
    auto res = api::client_for(main_)->Get("/api/v1/lineage");
    if (!res || res->status != 200) throw Error("main server unreachable at " + main_.str());
    return nlohmann::json::parse(res->body);
  }

  Deployment fetch(std::uint64_t version) {
    auto res = api::client_for(main_)->Get("/api/v1/models/" + std::to_string(version));
    if (!res || res->status != 200) throw Error("cannot fetch model version " + std::to_string(version));
    const Bytes b(res->body.begin(), res->body.end());
    const std::string digest = bytes_digest(b);
    if (res->get_header_value("X-Weight-Digest") != digest) throw ConsistencyError("fetched weights fail digest check");
    return {version, decode_weights(b), digest};
  }

  nlohmann::json report(const FailedSampleSet& set, const std::string& line_id) {
    const nlohmann::json body{{"line_id", line_id}, {"failed_set", wire::failed_set_to_json(set)}};
    auto res = api::client_for(main_)->Post("/api/v1/reports", body.dump(), "application/json");
    if (!res || res->status != 200) throw Error("main server did not accept the report");
    return nlohmann::json::parse(res->body);
  }

  const Endpoint& endpoint() const noexcept { return main_; }

 private:
  Endpoint main_;
};

// What an edge needs before it can serve: the model to run and where its
// own fine-tunes get registered. Throws ConfigError when no model exists,
// so an edge never starts without one.
struct EdgeBoot {
  Deployment deployment;
  RegisterFn register_fn;
  std::unique_ptr<MainClient> main;
  std::unique_ptr<ModelRegistry> local;
};

inline EdgeBoot boot_edge(const EdgeServerConfig& cfg) {
  EdgeBoot b;
  if (cfg.main) {
    b.main = std::make_unique<MainClient>(*cfg.main);
    const nlohmann::json lineage = b.main->lineage();
    std::optional<std::uint64_t> v = cfg.model_version;
    if (!v && !lineage.at("deployed").is_null()) v = lineage["deployed"].get<std::uint64_t>();
    if (!v) throw ConfigError("refusing to start: main server has no deployed model");
    b.deployment = b.main->fetch(*v);
    MainClient* client = b.main.get();
    b.register_fn = [client](const ModelWeights& m, Origin o, std::uint64_t parent, nlohmann::json metrics) {
      return client->register_model(m, o, parent, metrics);
    };
    return b;
  }
  b.local = std::make_unique<ModelRegistry>(cfg.registry);
  std::optional<std::uint64_t> v = cfg.model_version ? cfg.model_version : b.local->deployed();
  if (!v) v = b.local->latest();
  if (!v || !b.local->find(*v)) throw ConfigError("refusing to start: no model in registry " + cfg.registry);
  b.deployment = {*v, b.local->load(*v), b.local->get(*v).digest};
  ModelRegistry* reg = b.local.get();
  b.register_fn = [reg](const ModelWeights& m, Origin o, std::uint64_t parent, nlohmann::json metrics) {
    const auto& e = reg->add(m, o, parent, std::move(metrics));
    reg->deploy(e.version);
    return e.version;
  };
  return b;
}

class EdgeServer {
 public:
  // `main` may be null for a standalone edge, which then fine-tunes on every
  // nonempty failed set.
  EdgeServer(EdgeNode& node, MainClient* main, ModelRegistry* local_registry = nullptr)
      : node_(node), main_(main), local_(local_registry) {
    routes();
    line_ = std::make_unique<net::FrameServer>(node_.config().listen.host, node_.config().listen.port,
                                               [this](const ProtocolMessage& m) { return node_.handle(m); });
    http_thread_ = api::start_http(http_, node_.config().api, api_port_);
    worker_ = std::thread([this] { idle_loop(); });
  }
  ~EdgeServer() { stop(); }

  void stop() {
    if (stopping_.exchange(true)) return;
    if (worker_.joinable()) worker_.join();
    http_.stop();
    if (http_thread_.joinable()) http_thread_.join();
    if (line_) line_->stop();
  }

  int line_port() const noexcept { return line_->port(); }
  int api_port() const noexcept { return api_port_; }

 private:
  void idle_loop() {
    while (!stopping_) {
      try {
        if (node_.run_idle_work() > 0) node_.annotate_last_metrics(node_.frozen_accuracy());
      } catch (const std::exception& e) {
        std::fprintf(stderr, "idle fine-tune failed: %s\n", e.what());
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  }

  nlohmann::json pending_json() const {
    nlohmann::json items = nlohmann::json::array();
    const auto d = node_.deployment();
    for (const auto& u : node_.pending()) {
      nlohmann::json item{{"id", u.sample.id},
                          {"tick", u.tick},
                          {"y_pred", u.y_pred},
                          {"probability", u.probability},
                          {"image", wire::image_to_json(u.sample.image)}};
      item["saliency"] = d->weights.kind == ModelKind::classifier
                             ? wire::saliency_to_json(saliency(d->weights, u.sample.image))
                             : nlohmann::json(nullptr);
      items.push_back(std::move(item));
    }
    return {{"schema_version", wire::kSchemaVersion}, {"tick", node_.tick()}, {"items", items}};
  }

  void routes() {
    http_.Get("/api/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      api::reply_json(res, 200, {{"status", "ok"}, {"role", "edge"}, {"line_id", node_.config().line_id},
                                 {"model_version", node_.deployment()->registry_version}});
    });
    http_.Get("/api/v1/pending", [this](const httplib::Request&, httplib::Response& res) {
      api::reply_json(res, 200, pending_json());
    });
    http_.Post("/api/v1/decisions", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        const ReviewDecision d = wire::decision_from_json(api::parse_body(req));
        const auto outcome = node_.post_decision(d);
        api::reply_json(res, 200, {{"schema_version", wire::kSchemaVersion},
                                   {"sample_id", d.sample_id},
                                   {"applied", outcome == EdgeNode::DecisionOutcome::applied}});
      } catch (const MalformedDecision& e) {
        api::reply_error(res, 400, "malformed_decision", e.what());
      } catch (const nlohmann::json::exception& e) {
        api::reply_error(res, 400, "malformed_decision", e.what());
      } catch (const UnknownSample& e) {
        api::reply_error(res, 404, "unknown_sample", e.what());
      } catch (const LedgerError& e) {
        api::reply_error(res, 409, "conflicting_decision", e.what());
      }
    });
    http_.Get("/api/v1/failed", [this](const httplib::Request&, httplib::Response& res) {
      const auto set = node_.preview_failed();
      nlohmann::json f = nlohmann::json::array(), g = nlohmann::json::array();
      for (const auto& m : set.members) {
        (m.kind == FailureKind::prediction_failed ? f : g).push_back({{"id", m.sample.id}, {"y_gt", m.y_gt}});
      }
      api::reply_json(res, 200, {{"schema_version", wire::kSchemaVersion}, {"tick", set.tick},
                                 {"prediction_failed", f}, {"poorly_explained", g}});
    });
    http_.Get("/api/v1/metrics", [this](const httplib::Request&, httplib::Response& res) {
      api::reply_json(res, 200, node_.metrics_json());
    });
    http_.Get("/api/v1/lineage", [this](const httplib::Request&, httplib::Response& res) {
      try {
        if (main_) return api::reply_json(res, 200, main_->lineage());
        if (local_) return api::reply_json(res, 200, local_->lineage_json());
        api::reply_error(res, 404, "no_registry", "edge has no registry");
      } catch (const std::exception& e) {
        api::reply_error(res, 502, "main_unreachable", e.what());
      }
    });
    http_.Get("/api/v1/model", [this](const httplib::Request&, httplib::Response& res) {
      const auto d = node_.deployment();
      api::reply_json(res, 200, {{"version", d->registry_version},
                                 {"digest", bytes_digest(encode_weights(d->weights))},
                                 {"kind", to_string(d->weights.kind)},
                                 {"updates", d->weights.version}});
    });
    http_.Post("/api/v1/model", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        const Bytes b(req.body.begin(), req.body.end());
        const std::string digest = bytes_digest(b);
        if (req.get_header_value("X-Weight-Digest") != digest) {
          return api::reply_error(res, 400, "digest_mismatch", "weight bytes do not match their digest");
        }
        const auto version = std::stoull(req.get_header_value("X-Registry-Version"));
        node_.install({version, decode_weights(b), digest});
        node_.annotate_last_metrics(node_.frozen_accuracy());
        api::reply_json(res, 200, {{"installed", version}, {"digest", digest}});
      } catch (const std::exception& e) {
        api::reply_error(res, 400, "bad_model", e.what());
      }
    });
    http_.Post("/api/v1/idle", [this](const httplib::Request& req, httplib::Response& res) {
      bool idle = true;
      try {
        idle = api::parse_body(req).value("idle", true);
      } catch (const std::exception& e) {
        return api::reply_error(res, 400, "bad_request", e.what());
      }
      node_.set_idle(idle);
      api::reply_json(res, 200, {{"idle", idle}, {"queued", node_.queued()}});
    });
    http_.Post("/api/v1/tick", [this](const httplib::Request& req, httplib::Response& res) {
      nlohmann::json body;
      try {
        body = api::parse_body(req);
      } catch (const std::exception& e) {
        return api::reply_error(res, 400, "bad_request", e.what());
      }
      const auto set = node_.close_tick(body.value("scrap_or_repair", std::size_t{0}),
                                        body.value("next_process", std::size_t{0}));
      nlohmann::json out{{"schema_version", wire::kSchemaVersion}, {"closed_tick", set.tick}, {"failed", set.size()}};
      UpdateKind kind = set.empty() ? UpdateKind::none : UpdateKind::fine_tune;
      double fsr = 0.0;
      if (main_) {
        try {
          const auto reply = main_->report(set, node_.config().line_id);
          const std::string a = reply.at("action").get<std::string>();
          kind = a == "re_train" ? UpdateKind::re_train : a == "fine_tune" ? UpdateKind::fine_tune : UpdateKind::none;
          fsr = reply.value("fsr", 0.0);
          out["main"] = reply;
        } catch (const std::exception& e) {
          return api::reply_error(res, 502, "main_unreachable", e.what());
        }
      }
      if (kind == UpdateKind::fine_tune) node_.queue_fine_tune(set.samples());
      node_.record_outcome(set.tick, kind, fsr);
      node_.annotate_last_metrics(node_.frozen_accuracy());
      out["action"] = to_string(kind);
      out["fsr"] = fsr;
      api::reply_json(res, 200, out);
    });
  }

  EdgeNode& node_;
  MainClient* main_;
  ModelRegistry* local_;
  httplib::Server http_;
  std::unique_ptr<net::FrameServer> line_;
  std::thread http_thread_;
  std::thread worker_;
  int api_port_ = 0;
  std::atomic<bool> stopping_{false};
};

// Plant-side client for the edge: one TCP connection, one request in flight.
class EdgeLink {
 public:
  EdgeLink(const Endpoint& edge, int budget_ms) : chan_(net::connect_to(edge.host, edge.port)), budget_ms_(budget_ms) {}

  // Sends the ImageSending frame and waits for the matching reply within the
  // cycle budget. Late replies for earlier products are discarded.
  std::optional<ProtocolMessage> ask(const ProtocolMessage& image_msg) {
    chan_.send(image_msg);
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(budget_ms_);
    while (true) {
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) return std::nullopt;
      auto m = chan_.receive(static_cast<int>(left.count()));
      if (!m) return std::nullopt;
      if (m->kind == MessageKind::deep_prediction && m->product_id == image_msg.product_id) return m;
    }
  }

 private:
  net::FrameChannel chan_;
  int budget_ms_;
};

}  // namespace inspect
