#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <sodium.h>

#include "inspect/binary_io.hpp"
#include "inspect/dataset_io.hpp"
#include "inspect/error.hpp"
#include "inspect/model.hpp"
#include "inspect/sample.hpp"
#include "inspect/update.hpp"

// JSON shapes shared by the HTTP API, the CLI and the review client.
// Tensors travel as base64 of little-endian f64 values plus their shape.
namespace inspect::wire {

inline constexpr int kSchemaVersion = 1;

inline std::string base64_encode(std::span<const std::uint8_t> bytes) {
  const int variant = sodium_base64_VARIANT_ORIGINAL;
  std::string out(sodium_base64_encoded_len(bytes.size(), variant), '\0');
  sodium_bin2base64(out.data(), out.size(), bytes.data(), bytes.size(), variant);
  out.resize(out.size() - 1);  // drop the terminator
  return out;
}

inline Bytes base64_decode(const std::string& text) {
  Bytes out(text.size() / 4 * 3 + 3);
  std::size_t len = 0;
  if (sodium_base642bin(out.data(), out.size(), text.data(), text.size(), nullptr, &len, nullptr,
                        sodium_base64_VARIANT_ORIGINAL) != 0) {
    throw FormatError("invalid base64", 0);
  }
  out.resize(len);
  return out;
}

inline std::string encode_f64s(std::span<const double> values) {
  ByteWriter w;
  for (double v : values) w.f64(v);
  return base64_encode(w.bytes());
}

inline std::vector<double> decode_f64s(const std::string& text, std::size_t expected) {
  const Bytes raw = base64_decode(text);
  if (raw.size() != expected * 8) throw FormatError("tensor payload has the wrong length", raw.size());
  ByteReader r(raw);
  std::vector<double> out(expected);
  for (auto& v : out) v = r.f64();
  return out;
}

inline nlohmann::json image_to_json(const TensorImage& img) {
  return {{"height", img.height}, {"width", img.width}, {"channels", img.channels}, {"data", encode_f64s(img.data)}};
}

inline TensorImage image_from_json(const nlohmann::json& j) {
  TensorImage img(j.at("height").get<int>(), j.at("width").get<int>(), j.at("channels").get<int>());
  img.data = decode_f64s(j.at("data").get<std::string>(), img.data.size());
  validate_image(img);
  return img;
}

inline nlohmann::json saliency_to_json(const SaliencyMap& s) {
  return {{"height", s.height}, {"width", s.width}, {"data", encode_f64s(s.mass)}};
}

inline SaliencyMap saliency_from_json(const nlohmann::json& j) {
  SaliencyMap s{j.at("height").get<int>(), j.at("width").get<int>(), {}};
  if (s.height <= 0 || s.width <= 0) throw FormatError("saliency map needs a positive shape", 0);
  s.mass = decode_f64s(j.at("data").get<std::string>(), static_cast<std::size_t>(s.height) * s.width);
  return s;
}

inline nlohmann::json sample_to_json(const Sample& s) {
  return {{"id", s.id},
          {"label", s.label},
          {"source", to_string(s.source)},
          {"defect_box", box_to_json(s.defect_box)},
          {"image", image_to_json(s.image)}};
}

inline Sample sample_from_json(const nlohmann::json& j) {
  Sample s;
  s.id = j.at("id").get<std::string>();
  s.label = j.at("label").get<int>();
  if (s.label != 0 && s.label != 1) throw FormatError("sample label must be 0 or 1", 0);
  s.source = source_from_string(j.value("source", "captured"));
  s.defect_box = box_from_json(j.value("defect_box", nlohmann::json(nullptr)));
  s.image = image_from_json(j.at("image"));
  return s;
}

inline nlohmann::json decision_to_json(const ReviewDecision& d) {
  nlohmann::json j{{"sample_id", d.sample_id}, {"stage1", to_string(d.stage1)}, {"reviewer", d.reviewer},
                   {"timestamp", d.timestamp}};
  if (d.y_gt) j["y_gt"] = *d.y_gt;
  if (d.g) j["stage2"] = {{"G", *d.g}};
  return j;
}

// Throws MalformedDecision for anything that is not a well-formed decision.
inline ReviewDecision decision_from_json(const nlohmann::json& j) {
  try {
    ReviewDecision d;
    d.sample_id = j.at("sample_id").get<std::string>();
    const auto s1 = j.at("stage1").get<std::string>();
    if (s1 == "label_right") d.stage1 = Stage1::label_right;
    else if (s1 == "label_wrong") d.stage1 = Stage1::label_wrong;
    else throw MalformedDecision("stage1 must be label_right or label_wrong");
    if (j.contains("y_gt") && !j["y_gt"].is_null()) d.y_gt = j["y_gt"].get<int>();
    if (j.contains("stage2") && !j["stage2"].is_null()) d.g = j["stage2"].at("G").get<int>();
    d.reviewer = j.value("reviewer", "");
    d.timestamp = j.value("timestamp", std::uint64_t{0});
    validate_decision(d);
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw MalformedDecision(std::string("decision JSON: ") + e.what());
  }
}

inline nlohmann::json failed_set_to_json(const FailedSampleSet& set) {
  nlohmann::json members = nlohmann::json::array();
  for (const auto& m : set.members) {
    members.push_back({{"kind", m.kind == FailureKind::prediction_failed ? "prediction_failed" : "poorly_explained"},
                       {"y_gt", m.y_gt},
                       {"sample", sample_to_json(m.sample)}});
  }
  return {{"schema_version", kSchemaVersion}, {"tick", set.tick}, {"members", members}};
}

inline FailedSampleSet failed_set_from_json(const nlohmann::json& j) {
  FailedSampleSet set;
  set.tick = j.at("tick").get<std::uint64_t>();
  for (const auto& m : j.at("members")) {
    FailedSample f;
    f.sample = sample_from_json(m.at("sample"));
    f.y_gt = m.at("y_gt").get<int>();
    f.kind = m.at("kind").get<std::string>() == "prediction_failed" ? FailureKind::prediction_failed
                                                                    : FailureKind::poorly_explained;
    if (f.sample.label != f.y_gt) throw FormatError("failed sample label differs from y_gt", 0);
    set.members.push_back(std::move(f));
  }
  return set;
}

}  // namespace inspect::wire
