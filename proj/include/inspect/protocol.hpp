#pragma once

#include <array>
#include <cstdint>
#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "inspect/binary_io.hpp"
#include "inspect/error.hpp"
#include "inspect/tensor.hpp"

namespace inspect {

enum class MessageKind : std::uint8_t {
  shooting_trigger = 1,
  image_sending = 2,
  mv_prediction = 3,
  deep_prediction = 4,
  test_result = 5,
};

inline const char* to_string(MessageKind k) noexcept {
  switch (k) {
    case MessageKind::shooting_trigger: return "ShootingTrigger";
    case MessageKind::image_sending: return "ImageSending";
    case MessageKind::mv_prediction: return "MachineVisionPrediction";
    case MessageKind::deep_prediction: return "DeepModelPrediction";
    case MessageKind::test_result: return "TestResult";
  }
  return "?";
}

enum class GoalMode : std::uint8_t {
  goal1 = 1,  // edge re-checks machine-vision NG calls (reduce false positives)
  goal2 = 2,  // edge re-checks machine-vision OK calls (catch missed defects)
  goal3 = 3,  // edge replaces machine vision
};

inline const char* to_string(GoalMode g) noexcept {
  switch (g) {
    case GoalMode::goal1: return "goal1";
    case GoalMode::goal2: return "goal2";
    case GoalMode::goal3: return "goal3";
  }
  return "?";
}

inline GoalMode goal_from_string(std::string_view s) {
  if (s == "goal1" || s == "1") return GoalMode::goal1;
  if (s == "goal2" || s == "2") return GoalMode::goal2;
  if (s == "goal3" || s == "3") return GoalMode::goal3;
  throw ConfigError("unknown goal mode '" + std::string(s) + "'");
}

namespace station {
inline constexpr std::string_view plc = "plc";
inline constexpr std::string_view machine_vision = "mv";
inline constexpr std::string_view edge = "edge";
inline constexpr std::string_view mes = "mes";
}  // namespace station

struct Prediction {
  int label = 1;
  double probability = 1.0;
  friend bool operator==(const Prediction&, const Prediction&) = default;
};

// Final verdict for one product. The deciding station is the message sender.
struct Verdict {
  int label = 1;
  std::uint64_t tick = 0;
  std::uint64_t model_version = 0;  // 0 when machine vision decided
  friend bool operator==(const Verdict&, const Verdict&) = default;
};

struct ProtocolMessage {
  MessageKind kind = MessageKind::shooting_trigger;
  std::string product_id;
  std::string sender;
  std::string receiver;
  std::optional<TensorImage> image;       // image_sending
  std::optional<Prediction> prediction;   // mv_prediction, deep_prediction
  std::uint64_t model_version = 0;        // deep_prediction
  std::optional<Verdict> verdict;         // test_result

  friend bool operator==(const ProtocolMessage&, const ProtocolMessage&) = default;
};

inline void validate_message(const ProtocolMessage& m) {
  if (m.product_id.empty()) throw RejectedInput("message has empty product_id");
  const bool wants_image = m.kind == MessageKind::image_sending;
  const bool wants_prediction =
      m.kind == MessageKind::mv_prediction || m.kind == MessageKind::deep_prediction;
  const bool wants_verdict = m.kind == MessageKind::test_result;
  if (m.image.has_value() != wants_image) throw RejectedInput("image payload mismatch for kind");
  if (m.prediction.has_value() != wants_prediction) throw RejectedInput("prediction payload mismatch for kind");
  if (m.verdict.has_value() != wants_verdict) throw RejectedInput("verdict payload mismatch for kind");
  if (m.model_version != 0 && m.kind != MessageKind::deep_prediction) {
    throw RejectedInput("model_version only travels with DeepModelPrediction");
  }
  if (m.image) validate_image(*m.image);
  if (m.prediction) {
    if (m.prediction->label != 0 && m.prediction->label != 1) throw RejectedInput("prediction label not binary");
    const double p = m.prediction->probability;
    if (!(p >= 0.0 && p <= 1.0)) throw RejectedInput("prediction probability outside [0,1]");
  }
  if (m.verdict && m.verdict->label != 0 && m.verdict->label != 1) throw RejectedInput("verdict label not binary");
}

// ---- framing ----

inline constexpr std::array<std::uint8_t, 4> kFrameMagic{'I', 'N', 'S', 'P'};
inline constexpr std::size_t kFrameHeader = 8;          // magic + length
inline constexpr std::uint32_t kMinFrameLength = 5;     // kind + checksum
inline constexpr std::uint32_t kMaxFrameLength = 64u << 20;

enum class FramingCode { bad_magic, bad_checksum, truncated, bad_length, bad_payload };

inline const char* to_string(FramingCode c) noexcept {
  switch (c) {
    case FramingCode::bad_magic: return "bad_magic";
    case FramingCode::bad_checksum: return "bad_checksum";
    case FramingCode::truncated: return "truncated";
    case FramingCode::bad_length: return "bad_length";
    case FramingCode::bad_payload: return "bad_payload";
  }
  return "?";
}

class FramingError : public Error {
 public:
  FramingError(FramingCode code, const std::string& what)
      : Error(std::string(to_string(code)) + ": " + what), code_(code) {}
  FramingCode code() const noexcept { return code_; }

 private:
  FramingCode code_;
};

namespace detail {

inline void write_payload(ByteWriter& w, const ProtocolMessage& m) {
  w.str(m.product_id);
  w.str(m.sender);
  w.str(m.receiver);
  switch (m.kind) {
    case MessageKind::shooting_trigger: break;
    case MessageKind::image_sending: {
      const auto& img = *m.image;
      w.u32(static_cast<std::uint32_t>(img.height));
      w.u32(static_cast<std::uint32_t>(img.width));
      w.u32(static_cast<std::uint32_t>(img.channels));
      for (double v : img.data) w.f64(v);
      break;
    }
    case MessageKind::mv_prediction:
    case MessageKind::deep_prediction:
      w.u8(static_cast<std::uint8_t>(m.prediction->label));
      w.f64(m.prediction->probability);
      if (m.kind == MessageKind::deep_prediction) w.u64(m.model_version);
      break;
    case MessageKind::test_result:
      w.u8(static_cast<std::uint8_t>(m.verdict->label));
      w.u64(m.verdict->tick);
      w.u64(m.verdict->model_version);
      break;
  }
}

inline ProtocolMessage read_payload(std::uint8_t kind_byte, std::span<const std::uint8_t> payload) {
  if (kind_byte < 1 || kind_byte > 5) throw FramingError(FramingCode::bad_payload, "unknown kind " + std::to_string(kind_byte));
  ProtocolMessage m;
  m.kind = static_cast<MessageKind>(kind_byte);
  try {
    ByteReader r(payload);
    m.product_id = r.str(4096);
    m.sender = r.str(4096);
    m.receiver = r.str(4096);
    switch (m.kind) {
      case MessageKind::shooting_trigger: break;
      case MessageKind::image_sending: {
        const std::uint32_t h = r.u32(), w = r.u32(), c = r.u32();
        if (h == 0 || w == 0 || h > 65536 || w > 65536) throw FramingError(FramingCode::bad_payload, "bad image extent");
        const std::uint64_t n = std::uint64_t{h} * w * c;
        if (n * 8 > r.remaining()) throw FramingError(FramingCode::bad_payload, "image data shorter than extent");
        TensorImage img(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
        for (auto& v : img.data) v = r.f64();
        m.image = std::move(img);
        break;
      }
      case MessageKind::mv_prediction:
      case MessageKind::deep_prediction: {
        Prediction p;
        p.label = r.u8();
        p.probability = r.f64();
        m.prediction = p;
        if (m.kind == MessageKind::deep_prediction) m.model_version = r.u64();
        break;
      }
      case MessageKind::test_result: {
        Verdict v;
        v.label = r.u8();
        v.tick = r.u64();
        v.model_version = r.u64();
        m.verdict = v;
        break;
      }
    }
    if (!r.done()) throw FramingError(FramingCode::bad_payload, "trailing bytes after payload");
    validate_message(m);
  } catch (const FormatError& e) {
    throw FramingError(FramingCode::bad_payload, e.what());
  } catch (const RejectedInput& e) {
    throw FramingError(FramingCode::bad_payload, e.what());
  }
  return m;
}

inline std::uint32_t read_le32(std::span<const std::uint8_t> b, std::size_t at) noexcept {
  return std::uint32_t{b[at]} | std::uint32_t{b[at + 1]} << 8 | std::uint32_t{b[at + 2]} << 16 |
         std::uint32_t{b[at + 3]} << 24;
}

inline bool starts_with_magic(std::span<const std::uint8_t> b) noexcept {
  return b.size() >= 4 && b[0] == kFrameMagic[0] && b[1] == kFrameMagic[1] && b[2] == kFrameMagic[2] &&
         b[3] == kFrameMagic[3];
}

}  // namespace detail

// Layout: "INSP" | u32 length | kind | payload | u32 crc32(kind + payload).
// length counts every byte after the length field.
inline Bytes encode_frame(const ProtocolMessage& m) {
  validate_message(m);
  ByteWriter body;
  body.u8(static_cast<std::uint8_t>(m.kind));
  detail::write_payload(body, m);
  const Bytes inner = body.take();
  if (inner.size() + 4 > kMaxFrameLength) throw RejectedInput("message too large for one frame");
  ByteWriter w;
  w.raw(std::span<const std::uint8_t>(kFrameMagic));
  w.u32(static_cast<std::uint32_t>(inner.size() + 4));
  w.raw(inner);
  w.u32(crc32(inner));
  return w.take();
}

// Parses the frame at the start of `bytes`; returns the message and its size in bytes.
inline std::pair<ProtocolMessage, std::size_t> decode_frame_prefix(std::span<const std::uint8_t> bytes) {
  for (std::size_t i = 0; i < std::min<std::size_t>(4, bytes.size()); ++i) {
    if (bytes[i] != kFrameMagic[i]) throw FramingError(FramingCode::bad_magic, "frame does not start with INSP");
  }
  if (bytes.size() < kFrameHeader) throw FramingError(FramingCode::truncated, "incomplete frame header");
  const std::uint32_t len = detail::read_le32(bytes, 4);
  if (len < kMinFrameLength || len > kMaxFrameLength) {
    throw FramingError(FramingCode::bad_length, "frame length " + std::to_string(len) + " out of range");
  }
  const std::size_t total = kFrameHeader + len;
  if (bytes.size() < total) throw FramingError(FramingCode::truncated, "frame body incomplete");
  const auto inner = bytes.subspan(kFrameHeader, len - 4);
  if (crc32(inner) != detail::read_le32(bytes, kFrameHeader + len - 4)) {
    throw FramingError(FramingCode::bad_checksum, "checksum mismatch");
  }
  return {detail::read_payload(inner[0], inner.subspan(1)), total};
}

// Decodes exactly one frame; extra trailing bytes are a length error.
inline ProtocolMessage decode_frame(std::span<const std::uint8_t> bytes) {
  auto [m, used] = decode_frame_prefix(bytes);
  if (used != bytes.size()) throw FramingError(FramingCode::bad_length, "trailing bytes after frame");
  return std::move(m);
}

// Incremental decoder for one byte stream. Corrupt input is skipped up to the
// next magic; each skip is recorded as an error rather than thrown.
class StreamDecoder {
 public:
  void feed(std::span<const std::uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }

  std::optional<ProtocolMessage> next() {
    while (true) {
      if (buf_.empty()) return std::nullopt;
      if (!detail::starts_with_magic(buf_)) {
        if (buf_.size() < 4 && is_magic_prefix()) return std::nullopt;
        errors_.push_back(FramingCode::bad_magic);
        drop_to_next_magic(1);
        continue;
      }
      try {
        auto [m, used] = decode_frame_prefix(buf_);
        buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(used));
        return std::move(m);
      } catch (const FramingError& e) {
        if (e.code() == FramingCode::truncated) return std::nullopt;
        errors_.push_back(e.code());
        drop_to_next_magic(1);
      }
    }
  }

  std::vector<ProtocolMessage> drain() {
    std::vector<ProtocolMessage> out;
    while (auto m = next()) out.push_back(std::move(*m));
    return out;
  }

  const std::vector<FramingCode>& errors() const noexcept { return errors_; }
  std::size_t buffered() const noexcept { return buf_.size(); }

 private:
  bool is_magic_prefix() const noexcept {
    for (std::size_t i = 0; i < buf_.size(); ++i)
      if (buf_[i] != kFrameMagic[i]) return false;
    return true;
  }

  void drop_to_next_magic(std::size_t from) {
    std::size_t i = from;
    for (; i < buf_.size(); ++i) {
      const std::size_t n = std::min<std::size_t>(4, buf_.size() - i);
      bool match = true;
      for (std::size_t k = 0; k < n; ++k) match = match && buf_[i + k] == kFrameMagic[k];
      if (match) break;
    }
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(i));
  }

  Bytes buf_;
  std::vector<FramingCode> errors_;
};

// ---- routing ----

enum class RouteDecision { send_to_edge, finalize_with_mv_result };

constexpr RouteDecision route(GoalMode mode, int mv_label) noexcept {
  switch (mode) {
    case GoalMode::goal1: return mv_label == 0 ? RouteDecision::send_to_edge : RouteDecision::finalize_with_mv_result;
    case GoalMode::goal2: return mv_label == 1 ? RouteDecision::send_to_edge : RouteDecision::finalize_with_mv_result;
    case GoalMode::goal3: return RouteDecision::send_to_edge;
  }
  return RouteDecision::send_to_edge;
}

// Label finalized when the edge misses the cycle-time budget. Without a
// machine-vision verdict to fall back on, the product is failed safe.
constexpr int timeout_label(GoalMode mode, int mv_label) noexcept {
  return mode == GoalMode::goal3 ? 0 : mv_label;
}

// ---- message builders ----

inline ProtocolMessage make_trigger(std::string product_id) {
  return {MessageKind::shooting_trigger, std::move(product_id), std::string(station::plc),
          std::string(station::machine_vision), {}, {}, 0, {}};
}

inline ProtocolMessage make_image_sending(std::string product_id, TensorImage image) {
  return {MessageKind::image_sending, std::move(product_id), std::string(station::machine_vision),
          std::string(station::edge), std::move(image), {}, 0, {}};
}

inline ProtocolMessage make_mv_prediction(std::string product_id, int label) {
  return {MessageKind::mv_prediction, std::move(product_id), std::string(station::machine_vision),
          std::string(station::plc), {}, Prediction{label, label == 1 ? 1.0 : 0.0}, 0, {}};
}

inline ProtocolMessage make_deep_prediction(std::string product_id, Prediction p, std::uint64_t version) {
  return {MessageKind::deep_prediction, std::move(product_id), std::string(station::edge),
          std::string(station::plc), {}, p, version, {}};
}

inline ProtocolMessage make_test_result(std::string product_id, std::string_view decider, std::string_view receiver,
                                        Verdict v) {
  return {MessageKind::test_result, std::move(product_id), std::string(decider), std::string(receiver), {}, {}, 0, v};
}

}  // namespace inspect
