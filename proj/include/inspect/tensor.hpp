#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "inspect/error.hpp"

namespace inspect {

// Row-major image, interleaved channels: data[(y * width + x) * channels + c].
struct TensorImage {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<double> data;

  TensorImage() = default;
  TensorImage(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t index(int y, int x, int c = 0) const noexcept {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double& at(int y, int x, int c = 0) noexcept { return data[index(y, x, c)]; }
  double at(int y, int x, int c = 0) const noexcept { return data[index(y, x, c)]; }

  std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(height) * width; }

  friend bool operator==(const TensorImage&, const TensorImage&) = default;
};

// Throws RejectedInput unless the image is well formed with every element in [0,1].
inline void validate_image(const TensorImage& img) {
  if (img.height <= 0 || img.width <= 0) throw RejectedInput("image has empty extent");
  if (img.channels != 1 && img.channels != 3) {
    throw RejectedInput("image must have 1 or 3 channels, got " + std::to_string(img.channels));
  }
  if (img.data.size() != static_cast<std::size_t>(img.height) * img.width * img.channels) {
    throw RejectedInput("image data length does not match height*width*channels");
  }
  for (double v : img.data) {
    if (!std::isfinite(v)) throw RejectedInput("image contains a non-finite intensity");
    if (v < 0.0 || v > 1.0) throw RejectedInput("image intensity outside [0,1]");
  }
}

inline void clamp_unit(TensorImage& img) noexcept {
  for (double& v : img.data) v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
}

}  // namespace inspect
