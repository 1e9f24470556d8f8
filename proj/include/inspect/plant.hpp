#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "inspect/data.hpp"
#include "inspect/error.hpp"
#include "inspect/protocol.hpp"
#include "inspect/random.hpp"
#include "inspect/sample.hpp"

namespace inspect {

// Labeled-coin stand-in for the legacy optical inspector.
struct MachineVisionSim {
  double true_positive_rate = 0.95;   // P(call NG | truly NG)
  double false_positive_rate = 0.10;  // P(call NG | truly OK)
  std::uint64_t seed = 1;

  void validate() const {
    if (!(true_positive_rate >= 0.0 && true_positive_rate <= 1.0) ||
        !(false_positive_rate >= 0.0 && false_positive_rate <= 1.0)) {
      throw ConfigError("machine-vision rates must lie in [0,1]");
    }
  }
};

inline int mv_inspect(const MachineVisionSim& sim, const Sample& s) {
  sim.validate();
  Rng coin(hash_combine(sim.seed, 0x6d76), hash_string(s.id));
  const double u = coin.uniform();
  const double p_ng = s.label == 0 ? sim.true_positive_rate : sim.false_positive_rate;
  return u < p_ng ? 0 : 1;
}

class PlcSim {
 public:
  void dispatch(const std::string& product_id, int label) {
    if (!seen_.insert(product_id).second) {
      throw ProtocolViolation("duplicate TestResult for product " + product_id);
    }
    (label == 0 ? scrap_or_repair_ : next_process_).push_back(product_id);
  }

  void dispatch(const ProtocolMessage& result) {
    if (result.kind != MessageKind::test_result) throw ProtocolViolation("PLC dispatch needs a TestResult");
    dispatch(result.product_id, result.verdict->label);
  }

  const std::vector<std::string>& scrap_or_repair() const noexcept { return scrap_or_repair_; }
  const std::vector<std::string>& next_process() const noexcept { return next_process_; }
  std::size_t total() const noexcept { return scrap_or_repair_.size() + next_process_.size(); }

 private:
  std::vector<std::string> scrap_or_repair_;
  std::vector<std::string> next_process_;
  std::set<std::string> seen_;
};

// Timestamps are logical: (tick, seq) where seq counts records in arrival order.
struct MesRecord {
  std::uint64_t seq = 0;
  std::uint64_t tick = 0;
  std::string product_id;
  int label = 1;
  std::string decided_by;
  std::uint64_t model_version = 0;

  friend bool operator==(const MesRecord&, const MesRecord&) = default;
};

inline nlohmann::json to_json(const MesRecord& r) {
  return {{"seq", r.seq},           {"tick", r.tick},         {"product_id", r.product_id},
          {"label", r.label},       {"decided_by", r.decided_by}, {"model_version", r.model_version}};
}

inline MesRecord mes_record_from_json(const nlohmann::json& j) {
  return {j.at("seq").get<std::uint64_t>(),        j.at("tick").get<std::uint64_t>(),
          j.at("product_id").get<std::string>(),  j.at("label").get<int>(),
          j.at("decided_by").get<std::string>(),  j.at("model_version").get<std::uint64_t>()};
}

// Append-only record store, optionally mirrored to a JSON-lines log file.
class MesSim {
 public:
  MesSim() = default;
  explicit MesSim(const std::string& log_path) : log_(log_path, std::ios::binary | std::ios::app) {
    if (!log_) throw Error("cannot open MES log " + log_path);
  }

  const MesRecord& record(const ProtocolMessage& result) {
    if (result.kind != MessageKind::test_result) throw ProtocolViolation("MES records only TestResults");
    MesRecord r{records_.size(), result.verdict->tick, result.product_id, result.verdict->label, result.sender,
                result.verdict->model_version};
    by_id_[r.product_id].push_back(records_.size());
    records_.push_back(r);
    if (log_.is_open()) {
      log_ << to_json(r).dump() << '\n';
      log_.flush();
    }
    return records_.back();
  }

  // Latest record for the product, if any.
  std::optional<MesRecord> query(const std::string& product_id) const {
    auto it = by_id_.find(product_id);
    if (it == by_id_.end()) return std::nullopt;
    return records_[it->second.back()];
  }

  std::size_t count_for(const std::string& product_id) const {
    auto it = by_id_.find(product_id);
    return it == by_id_.end() ? 0 : it->second.size();
  }

  std::vector<MesRecord> query_tick(std::uint64_t tick) const {
    std::vector<MesRecord> out;
    for (const auto& r : records_)
      if (r.tick == tick) out.push_back(r);
    return out;
  }

  const std::vector<MesRecord>& records() const noexcept { return records_; }

 private:
  std::vector<MesRecord> records_;
  std::map<std::string, std::vector<std::size_t>> by_id_;
  std::ofstream log_;
};

inline std::vector<MesRecord> load_mes_log(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open MES log " + path);
  std::vector<MesRecord> out;
  std::string line;
  std::size_t offset = 0;
  while (std::getline(in, line)) {
    if (!line.empty()) {
      try {
        out.push_back(mes_record_from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad MES log line: ") + e.what(), offset);
      }
    }
    offset += line.size() + 1;
  }
  return out;
}

// Products leaving the line, `per_tick` at a time.
class ProductStream {
 public:
  ProductStream(SyntheticLineConfig cfg, std::size_t per_tick, int start_tick = 0)
      : cfg_(std::move(cfg)), per_tick_(per_tick), tick_(start_tick) {
    cfg_.validate();
    if (per_tick_ == 0) throw ConfigError("products per tick must be positive");
  }

  std::vector<Sample> next_tick() { return generate_line_images(cfg_, tick_++, per_tick_); }

  int tick() const noexcept { return tick_; }
  const SyntheticLineConfig& config() const noexcept { return cfg_; }

 private:
  SyntheticLineConfig cfg_;
  std::size_t per_tick_;
  int tick_;
};

// ---- one inspection cycle, wired through encoded frames ----

// Receives an ImageSending message; returns the DeepModelPrediction reply, or
// nothing when the cycle-time budget ran out.
using EdgeHandler = std::function<std::optional<ProtocolMessage>(const ProtocolMessage&)>;

struct CycleTrace {
  std::string product_id;
  int truth = 1;
  int mv_label = 1;
  bool sent_to_edge = false;
  std::optional<Prediction> edge_prediction;
  bool timed_out = false;
  int final_label = 1;
  std::string decided_by;
  std::uint64_t model_version = 0;
};

struct CellCounters {
  std::size_t products = 0;
  std::size_t edge_received = 0;
  std::size_t edge_received_mv_ok = 0;
  std::size_t edge_received_mv_ng = 0;
  std::size_t timeouts = 0;
  std::size_t test_results = 0;
  std::size_t frames = 0;
};

// One inspection station: PLC trigger, machine vision, optional edge check,
// final TestResult to PLC and MES. Every hop is encoded and decoded as a frame.
// In shadow mode the edge still predicts but the machine-vision call is final.
class InspectionCell {
 public:
  InspectionCell(GoalMode goal, MachineVisionSim mv, EdgeHandler edge, PlcSim& plc, MesSim& mes, bool shadow = false)
      : goal_(goal), mv_(mv), edge_(std::move(edge)), plc_(plc), mes_(mes), shadow_(shadow) {
    mv_.validate();
  }

  CycleTrace inspect(const Sample& product, std::uint64_t tick) {
    CycleTrace tr;
    tr.product_id = product.id;
    tr.truth = product.label;
    ++counters_.products;

    hop(make_trigger(product.id));
    tr.mv_label = mv_inspect(mv_, product);
    hop(make_mv_prediction(product.id, tr.mv_label));

    int final_label = tr.mv_label;
    std::string decider(station::machine_vision);
    if (route(goal_, tr.mv_label) == RouteDecision::send_to_edge) {
      const ProtocolMessage request = hop(make_image_sending(product.id, product.image));
      tr.sent_to_edge = true;
      ++counters_.edge_received;
      ++(tr.mv_label == 1 ? counters_.edge_received_mv_ok : counters_.edge_received_mv_ng);
      std::optional<ProtocolMessage> reply = edge_ ? edge_(request) : std::nullopt;
      if (reply) {
        const ProtocolMessage got = hop(*reply);
        if (got.kind != MessageKind::deep_prediction || got.product_id != product.id) {
          throw ProtocolViolation("edge replied with an unexpected message for " + product.id);
        }
        tr.edge_prediction = got.prediction;
        tr.model_version = got.model_version;
        if (!shadow_) {
          final_label = got.prediction->label;
          decider = station::edge;
        }
      } else {
        tr.timed_out = true;
        ++counters_.timeouts;
        final_label = timeout_label(goal_, tr.mv_label);
      }
    }

    const Verdict v{final_label, tick, decider == station::edge ? tr.model_version : 0};
    plc_.dispatch(hop(make_test_result(product.id, decider, station::plc, v)));
    mes_.record(hop(make_test_result(product.id, decider, station::mes, v)));
    ++counters_.test_results;
    tr.final_label = final_label;
    tr.decided_by = decider;
    return tr;
  }

  const CellCounters& counters() const noexcept { return counters_; }
  const std::vector<FramingCode>& framing_errors() const noexcept { return wire_.errors(); }

 private:
  // Pushes the message through the codec; a lossless wire returns it unchanged.
  ProtocolMessage hop(const ProtocolMessage& m) {
    wire_.feed(encode_frame(m));
    auto out = wire_.next();
    if (!out) throw ProtocolViolation("frame lost on the wire");
    ++counters_.frames;
    return std::move(*out);
  }

  GoalMode goal_;
  MachineVisionSim mv_;
  EdgeHandler edge_;
  PlcSim& plc_;
  MesSim& mes_;
  bool shadow_;
  StreamDecoder wire_;
  CellCounters counters_;
};

}  // namespace inspect
