#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "inspect/binary_io.hpp"
#include "inspect/error.hpp"

namespace inspect {

// Named, shaped block of 64-bit floats. Weight files and dataset image files
// share this layout:
//
//   "INSPW1"
//   repeat until EOF:
//     u32 name_length, name bytes
//     u32 rank, u64 dims[rank]
//     f64 values[prod(dims)]        (all integers/floats little-endian)
struct TensorBlock {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<double> values;

  friend bool operator==(const TensorBlock&, const TensorBlock&) = default;
};

inline constexpr std::string_view kTensorFileMagic = "INSPW1";

inline std::uint64_t element_count(std::span<const std::uint64_t> shape) {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline Bytes encode_tensor_blocks(std::span<const TensorBlock> blocks) {
  ByteWriter w;
  w.raw(kTensorFileMagic);
  for (const auto& b : blocks) {
    if (element_count(b.shape) != b.values.size()) {
      throw ConsistencyError("block '" + b.name + "' shape does not match value count");
    }
    w.str(b.name);
    w.u32(static_cast<std::uint32_t>(b.shape.size()));
    for (auto d : b.shape) w.u64(d);
    for (double v : b.values) w.f64(v);
  }
  return w.take();
}

inline std::vector<TensorBlock> decode_tensor_blocks(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.raw(kTensorFileMagic.size());
  if (std::string_view(reinterpret_cast<const char*>(magic.data()), magic.size()) != kTensorFileMagic) {
    throw FormatError("bad tensor file magic", 0);
  }
  std::vector<TensorBlock> blocks;
  while (!r.done()) {
    TensorBlock b;
    b.name = r.str(4096);
    const std::size_t rank_at = r.offset();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError("implausible block rank " + std::to_string(rank), rank_at);
    b.shape.resize(rank);
    for (auto& d : b.shape) d = r.u64();
    const std::uint64_t n = element_count(b.shape);
    if (n > r.remaining() / 8) throw FormatError("block '" + b.name + "' truncated", r.offset());
    b.values.resize(n);
    for (auto& v : b.values) v = r.f64();
    blocks.push_back(std::move(b));
  }
  return blocks;
}

}  // namespace inspect
