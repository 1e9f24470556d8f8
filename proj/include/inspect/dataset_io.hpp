#pragma once

#include <cstdio>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "inspect/binary_io.hpp"
#include "inspect/error.hpp"
#include "inspect/sample.hpp"
#include "inspect/tensor_file.hpp"

namespace inspect {

// On-disk dataset: a directory holding `manifest` (JSON index of ids,
// labels, boxes and sources) and images/NNNNNN.tensor, each a tensor file
// with a single "image" block of shape [height, width, channels].
inline constexpr int kDatasetFormatVersion = 1;

inline Bytes encode_image(const TensorImage& img) {
  const TensorBlock block{"image",
                          {static_cast<std::uint64_t>(img.height), static_cast<std::uint64_t>(img.width),
                           static_cast<std::uint64_t>(img.channels)},
                          img.data};
  return encode_tensor_blocks(std::span(&block, 1));
}

inline TensorImage decode_image(std::span<const std::uint8_t> bytes) {
  const auto blocks = decode_tensor_blocks(bytes);
  if (blocks.size() != 1 || blocks[0].name != "image" || blocks[0].shape.size() != 3) {
    throw FormatError("image file must hold exactly one rank-3 'image' block", bytes.size());
  }
  const auto& b = blocks[0];
  TensorImage img(static_cast<int>(b.shape[0]), static_cast<int>(b.shape[1]), static_cast<int>(b.shape[2]));
  img.data = b.values;
  return img;
}

inline SampleSource source_from_string(const std::string& s) {
  if (s == "synthetic") return SampleSource::synthetic;
  if (s == "augmented") return SampleSource::augmented;
  if (s == "captured") return SampleSource::captured;
  throw Error("unknown sample source '" + s + "'");
}

inline nlohmann::json box_to_json(const std::optional<RoiBox>& b) {
  if (!b) return nullptr;
  return nlohmann::json::array({b->cx, b->cy, b->height, b->width});
}

inline std::optional<RoiBox> box_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return RoiBox{j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>()};
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  nlohmann::json manifest{{"format", "inspect-dataset"},
                          {"version", kDatasetFormatVersion},
                          {"name", d.name},
                          {"samples", nlohmann::json::array()}};
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const Sample& s = d.samples[i];
    char file[32];
    std::snprintf(file, sizeof file, "images/%06zu.tensor", i);
    write_file((dir / file).string(), encode_image(s.image));
    manifest["samples"].push_back({{"id", s.id},
                                   {"label", s.label},
                                   {"source", to_string(s.source)},
                                   {"defect_box", box_to_json(s.defect_box)},
                                   {"file", file}});
  }
  const std::string text = manifest.dump(1);
  write_file((dir / "manifest").string(),
             std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const Bytes raw = read_file((dir / "manifest").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(raw.begin(), raw.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("dataset manifest is not valid JSON: ") + e.what(), e.byte);
  }
  Dataset d;
  std::size_t index = 0;
  try {
    if (manifest.at("format") != "inspect-dataset") throw FormatError("not a dataset manifest", 0);
    if (manifest.at("version").get<int>() != kDatasetFormatVersion) {
      throw FormatError("unsupported dataset version", 0);
    }
    d.name = manifest.at("name").get<std::string>();
    for (const auto& entry : manifest.at("samples")) {
      Sample s;
      s.id = entry.at("id").get<std::string>();
      s.label = entry.at("label").get<int>();
      s.source = source_from_string(entry.at("source").get<std::string>());
      s.defect_box = box_from_json(entry.at("defect_box"));
      const std::string file = entry.at("file").get<std::string>();
      try {
        s.image = decode_image(read_file((dir / file).string()));
      } catch (const FormatError& e) {
        throw FormatError(file + ": " + e.what(), e.offset());
      }
      d.samples.push_back(std::move(s));
      ++index;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset manifest entry " + std::to_string(index) + " is malformed: " + e.what(), 0);
  }
  return d;
}

}  // namespace inspect
