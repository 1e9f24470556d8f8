#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "inspect/data.hpp"
#include "inspect/plant.hpp"
#include "inspect/protocol.hpp"
#include "inspect/random.hpp"

using namespace inspect;
namespace fs = std::filesystem;

namespace {

// Independent frame builder: plain byte pushes and a bitwise CRC.
struct RefFrame {
  Bytes body;
  void u8(std::uint8_t v) { body.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) body.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) body.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    body.insert(body.end(), s.begin(), s.end());
  }
  Bytes finish() const {
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::uint8_t b : body) {
      c ^= b;
      for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
    }
    c = ~c;
    Bytes out{'I', 'N', 'S', 'P'};
    const std::uint32_t len = static_cast<std::uint32_t>(body.size() + 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
    out.insert(out.end(), body.begin(), body.end());
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(c >> (8 * i)));
    return out;
  }
};

std::vector<ProtocolMessage> one_of_each() {
  TensorImage img(3, 2, 1);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = i / 10.0;
  return {make_trigger("p1"), make_image_sending("p1", img), make_mv_prediction("p1", 0),
          make_deep_prediction("p1", {1, 0.73}, 9), make_test_result("p1", station::edge, station::mes, {0, 4, 9})};
}

}  // namespace

TEST(Frame, TriggerLayoutMatchesReferenceEncoder) {
  RefFrame r;
  r.u8(1);
  r.str("prod-7");
  r.str("plc");
  r.str("mv");
  EXPECT_EQ(encode_frame(make_trigger("prod-7")), r.finish());
}

TEST(Frame, TestResultLayoutMatchesReferenceEncoder) {
  RefFrame r;
  r.u8(5);
  r.str("x");
  r.str("edge");
  r.str("plc");
  r.u8(0);
  r.u64(12);
  r.u64(3);
  EXPECT_EQ(encode_frame(make_test_result("x", station::edge, station::plc, {0, 12, 3})), r.finish());
}

TEST(Frame, RoundTripEveryKind) {
  for (const auto& m : one_of_each()) {
    const Bytes b = encode_frame(m);
    EXPECT_EQ(decode_frame(b), m) << to_string(m.kind);
    EXPECT_EQ(encode_frame(decode_frame(b)), b);
  }
}

TEST(Frame, EveryProperPrefixIsTruncated) {
  for (const auto& m : one_of_each()) {
    const Bytes b = encode_frame(m);
    for (std::size_t n = 4; n < b.size(); ++n) {
      try {
        decode_frame(std::span(b).first(n));
        FAIL() << "prefix " << n << " decoded";
      } catch (const FramingError& e) {
        EXPECT_EQ(e.code(), FramingCode::truncated) << n;
      }
    }
  }
}

TEST(Frame, AnySingleByteFlipInBodyIsRejected) {
  const Bytes b = encode_frame(make_deep_prediction("abc", {0, 0.2}, 4));
  for (std::size_t i = kFrameHeader; i < b.size(); ++i) {
    Bytes c = b;
    c[i] ^= 0x40;
    try {
      decode_frame(c);
      FAIL() << "flip at " << i << " accepted";
    } catch (const FramingError& e) {
      EXPECT_EQ(e.code(), FramingCode::bad_checksum) << i;
    }
  }
}

TEST(Frame, HeaderErrors) {
  Bytes b = encode_frame(make_trigger("p"));
  Bytes magic = b;
  magic[0] = 'J';
  EXPECT_THROW(decode_frame(magic), FramingError);
  Bytes small = b;
  small[4] = 2;
  small[5] = small[6] = small[7] = 0;
  try {
    decode_frame(small);
    FAIL();
  } catch (const FramingError& e) {
    EXPECT_EQ(e.code(), FramingCode::bad_length);
  }
  Bytes extra = b;
  extra.push_back(0);
  EXPECT_THROW(decode_frame(extra), FramingError);
}

TEST(Frame, ValidChecksumWithBadPayloadIsRejected) {
  RefFrame r;
  r.u8(9);
  r.str("p");
  r.str("a");
  r.str("b");
  try {
    decode_frame(r.finish());
    FAIL();
  } catch (const FramingError& e) {
    EXPECT_EQ(e.code(), FramingCode::bad_payload);
  }
  RefFrame t;
  t.u8(3);
  t.str("p");
  t.str("mv");
  t.str("plc");
  t.u8(2);  // label must be binary
  t.u64(0);
  EXPECT_THROW(decode_frame(t.finish()), FramingError);
}

TEST(Frame, RejectsInconsistentMessages) {
  auto m = make_trigger("");
  EXPECT_THROW(encode_frame(m), RejectedInput);
  m = make_mv_prediction("p", 1);
  m.prediction->probability = 1.5;
  EXPECT_THROW(encode_frame(m), RejectedInput);
  m = make_trigger("p");
  m.model_version = 2;
  EXPECT_THROW(encode_frame(m), RejectedInput);
}

// Concatenated frames split at arbitrary points decode to the same sequence.
TEST(StreamDecoder, ArbitraryChunkingPreservesSequence) {
  const auto msgs = one_of_each();
  Bytes all;
  for (const auto& m : msgs) {
    const auto b = encode_frame(m);
    all.insert(all.end(), b.begin(), b.end());
  }
  Rng rng(3, 1);
  for (int trial = 0; trial < 50; ++trial) {
    StreamDecoder d;
    std::vector<ProtocolMessage> got;
    std::size_t at = 0;
    while (at < all.size()) {
      const std::size_t n = std::min<std::size_t>(all.size() - at, 1 + rng.below(40));
      d.feed(std::span(all).subspan(at, n));
      at += n;
      for (auto& m : d.drain()) got.push_back(std::move(m));
    }
    EXPECT_EQ(got, msgs);
    EXPECT_TRUE(d.errors().empty());
    EXPECT_EQ(d.buffered(), 0u);
  }
}

TEST(StreamDecoder, ResynchronisesAfterGarbageAndCorruption) {
  const Bytes a = encode_frame(make_trigger("a"));
  Bytes bad = encode_frame(make_trigger("b"));
  bad[bad.size() - 1] ^= 1;
  const Bytes c = encode_frame(make_trigger("c"));
  Bytes stream{'x', 'y', 'I', 'N'};
  for (const Bytes* part : std::initializer_list<const Bytes*>{&a, &bad, &c}) stream.insert(stream.end(), part->begin(), part->end());
  StreamDecoder d;
  d.feed(stream);
  const auto got = d.drain();
  ASSERT_EQ(got.size(), 2u);
  EXPECT_EQ(got[0].product_id, "a");
  EXPECT_EQ(got[1].product_id, "c");
  ASSERT_EQ(d.errors().size(), 2u);
  EXPECT_EQ(d.errors()[0], FramingCode::bad_magic);
  EXPECT_EQ(d.errors()[1], FramingCode::bad_checksum);
}

TEST(StreamDecoder, WaitsOnPartialMagic) {
  StreamDecoder d;
  const Bytes b = encode_frame(make_trigger("z"));
  d.feed(std::span(b).first(2));
  EXPECT_FALSE(d.next());
  EXPECT_TRUE(d.errors().empty());
  d.feed(std::span(b).subspan(2));
  ASSERT_TRUE(d.next());
}

TEST(Routing, TableForEveryGoalAndLabel) {
  EXPECT_EQ(route(GoalMode::goal1, 0), RouteDecision::send_to_edge);
  EXPECT_EQ(route(GoalMode::goal1, 1), RouteDecision::finalize_with_mv_result);
  EXPECT_EQ(route(GoalMode::goal2, 1), RouteDecision::send_to_edge);
  EXPECT_EQ(route(GoalMode::goal2, 0), RouteDecision::finalize_with_mv_result);
  EXPECT_EQ(route(GoalMode::goal3, 0), RouteDecision::send_to_edge);
  EXPECT_EQ(route(GoalMode::goal3, 1), RouteDecision::send_to_edge);
  EXPECT_EQ(timeout_label(GoalMode::goal3, 1), 0);
  EXPECT_EQ(timeout_label(GoalMode::goal1, 0), 0);
  EXPECT_EQ(timeout_label(GoalMode::goal2, 1), 1);
  EXPECT_EQ(goal_from_string("goal2"), GoalMode::goal2);
  EXPECT_THROW(goal_from_string("goal4"), ConfigError);
}

namespace {

struct CellRun {
  PlcSim plc;
  MesSim mes;
  std::vector<CycleTrace> traces;
  CellCounters counters;
};

std::unique_ptr<CellRun> run_cell(GoalMode goal, EdgeHandler edge, std::size_t n, bool shadow = false,
                                  const std::string& log = "") {
  auto r = std::make_unique<CellRun>();
  if (!log.empty()) r->mes = MesSim(log);
  SyntheticLineConfig cfg;
  cfg.seed = 4;
  InspectionCell cell(goal, MachineVisionSim{0.9, 0.2, 3}, std::move(edge), r->plc, r->mes, shadow);
  ProductStream stream(cfg, 10);
  while (r->traces.size() < n) {
    const auto tick = static_cast<std::uint64_t>(stream.tick());
    for (const auto& s : stream.next_tick()) r->traces.push_back(cell.inspect(s, tick));
  }
  r->counters = cell.counters();
  return r;
}

EdgeHandler constant_edge(int label, std::uint64_t version) {
  return [=](const ProtocolMessage& m) -> std::optional<ProtocolMessage> {
    return make_deep_prediction(m.product_id, {label, label == 1 ? 0.9 : 0.1}, version);
  };
}

}  // namespace

TEST(InspectionCell, EveryProductGetsExactlyOneResultEverywhere) {
  for (auto goal : {GoalMode::goal1, GoalMode::goal2, GoalMode::goal3}) {
    auto r = run_cell(goal, constant_edge(1, 2), 60);
    EXPECT_EQ(r->plc.total(), 60u);
    EXPECT_EQ(r->mes.records().size(), 60u);
    for (const auto& t : r->traces) {
      EXPECT_EQ(r->mes.count_for(t.product_id), 1u);
      EXPECT_EQ(r->mes.query(t.product_id)->label, t.final_label);
      EXPECT_EQ(t.sent_to_edge, route(goal, t.mv_label) == RouteDecision::send_to_edge);
      EXPECT_EQ(t.decided_by, t.sent_to_edge ? "edge" : "mv");
    }
    EXPECT_EQ(r->counters.frames, 60u * 4 + 2 * r->counters.edge_received);
    if (goal == GoalMode::goal1) EXPECT_EQ(r->counters.edge_received_mv_ok, 0u);
    if (goal == GoalMode::goal2) EXPECT_EQ(r->counters.edge_received_mv_ng, 0u);
  }
}

TEST(InspectionCell, ShadowModeKeepsMachineVisionVerdict) {
  auto r = run_cell(GoalMode::goal3, constant_edge(0, 5), 30, true);
  for (const auto& t : r->traces) {
    EXPECT_TRUE(t.edge_prediction.has_value());
    EXPECT_EQ(t.final_label, t.mv_label);
    EXPECT_EQ(t.decided_by, "mv");
    EXPECT_EQ(r->mes.query(t.product_id)->model_version, 0u);
  }
}

TEST(InspectionCell, TimeoutFinalisesPerGoal) {
  EdgeHandler silent = [](const ProtocolMessage&) { return std::optional<ProtocolMessage>{}; };
  auto g3 = run_cell(GoalMode::goal3, silent, 30);
  for (const auto& t : g3->traces) {
    EXPECT_TRUE(t.timed_out);
    EXPECT_EQ(t.final_label, 0);
  }
  auto g2 = run_cell(GoalMode::goal2, silent, 30);
  for (const auto& t : g2->traces) EXPECT_EQ(t.final_label, t.mv_label);
  EXPECT_EQ(g3->counters.timeouts, 30u);
}

TEST(InspectionCell, EdgeReplyForOtherProductIsViolation) {
  PlcSim plc;
  MesSim mes;
  EdgeHandler wrong = [](const ProtocolMessage&) -> std::optional<ProtocolMessage> {
    return make_deep_prediction("someone-else", {1, 0.9}, 1);
  };
  InspectionCell cell(GoalMode::goal3, {}, wrong, plc, mes);
  SyntheticLineConfig cfg;
  EXPECT_THROW(cell.inspect(generate_line_images(cfg, 0, 1)[0], 0), ProtocolViolation);
}

TEST(Plc, DuplicateDispatchIsViolation) {
  PlcSim plc;
  plc.dispatch("a", 0);
  plc.dispatch("b", 1);
  EXPECT_THROW(plc.dispatch("a", 1), ProtocolViolation);
  EXPECT_EQ(plc.scrap_or_repair(), std::vector<std::string>{"a"});
  EXPECT_EQ(plc.next_process(), std::vector<std::string>{"b"});
}

TEST(Mes, LogReloadsToSameRecordsAndAppends) {
  const auto path = (fs::temp_directory_path() / "inspect-test-mes.log").string();
  fs::remove(path);
  auto r = run_cell(GoalMode::goal1, constant_edge(1, 3), 40, false, path);
  EXPECT_EQ(load_mes_log(path), r->mes.records());
  const auto size_before = fs::file_size(path);
  {
    MesSim again(path);
    again.record(make_test_result("extra", station::machine_vision, station::mes, {1, 99, 0}));
  }
  EXPECT_GT(fs::file_size(path), size_before);
  EXPECT_EQ(load_mes_log(path).size(), 41u);
  std::ofstream(path, std::ios::app) << "{broken\n";
  EXPECT_THROW(load_mes_log(path), FormatError);
  fs::remove(path);
}

TEST(Mes, SequenceAndTickQueries) {
  auto r = run_cell(GoalMode::goal3, constant_edge(1, 1), 30);
  const auto& recs = r->mes.records();
  for (std::size_t i = 0; i < recs.size(); ++i) EXPECT_EQ(recs[i].seq, i);
  EXPECT_EQ(r->mes.query_tick(1).size(), 10u);
  EXPECT_FALSE(r->mes.query("nope"));
  MesSim m;
  EXPECT_THROW(m.record(make_trigger("p")), ProtocolViolation);
}

TEST(MachineVision, RatesAreRoughlyHonoured) {
  SyntheticLineConfig cfg;
  const auto v = generate_line_images(cfg, 0, 2000);
  MachineVisionSim mv{0.9, 0.2, 7};
  double ng_called_ng = 0, ng = 0, ok_called_ng = 0, ok = 0;
  for (const auto& s : v) {
    const int call = mv_inspect(mv, s);
    EXPECT_EQ(call, mv_inspect(mv, s));
    if (s.label == 0) ng += 1, ng_called_ng += call == 0;
    else ok += 1, ok_called_ng += call == 0;
  }
  EXPECT_NEAR(ng_called_ng / ng, 0.9, 0.04);
  EXPECT_NEAR(ok_called_ng / ok, 0.2, 0.04);
  EXPECT_THROW(mv_inspect(MachineVisionSim{1.2, 0.1, 1}, v[0]), ConfigError);
}
