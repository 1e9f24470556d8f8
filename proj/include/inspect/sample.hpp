#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "inspect/tensor.hpp"

namespace inspect {

// Rectangle given by its center and extent. The top-left pixel is
// (cy - height/2, cx - width/2) with integer division, so even extents put
// the center just below/right of the geometric middle.
struct RoiBox {
  int cx = 0;
  int cy = 0;
  int height = 0;
  int width = 0;

  int top() const noexcept { return cy - height / 2; }
  int left() const noexcept { return cx - width / 2; }
  int bottom() const noexcept { return top() + height; }  // exclusive
  int right() const noexcept { return left() + width; }   // exclusive

  bool contains(int y, int x) const noexcept {
    return y >= top() && y < bottom() && x >= left() && x < right();
  }
  bool inside(int image_height, int image_width) const noexcept {
    return height > 0 && width > 0 && top() >= 0 && left() >= 0 && bottom() <= image_height &&
           right() <= image_width;
  }

  static RoiBox from_corner(int top, int left, int height, int width) noexcept {
    return {left + width / 2, top + height / 2, height, width};
  }

  friend bool operator==(const RoiBox&, const RoiBox&) = default;
};

inline double iou(const RoiBox& a, const RoiBox& b) noexcept {
  const int y0 = std::max(a.top(), b.top());
  const int x0 = std::max(a.left(), b.left());
  const int y1 = std::min(a.bottom(), b.bottom());
  const int x1 = std::min(a.right(), b.right());
  if (y1 <= y0 || x1 <= x0) return 0.0;
  const double inter = static_cast<double>(y1 - y0) * (x1 - x0);
  const double uni = static_cast<double>(a.height) * a.width + static_cast<double>(b.height) * b.width - inter;
  return inter / uni;
}

enum class Label : int { ng = 0, ok = 1 };

enum class SampleSource { synthetic, augmented, captured };

inline const char* to_string(SampleSource s) noexcept {
  switch (s) {
    case SampleSource::synthetic: return "synthetic";
    case SampleSource::augmented: return "augmented";
    case SampleSource::captured: return "captured";
  }
  return "?";
}

// One labeled inspection image. label: 0 = NG (defective), 1 = OK.
struct Sample {
  std::string id;
  TensorImage image;
  int label = 1;
  std::optional<RoiBox> defect_box;  // ground truth for local defects; implies label 0
  SampleSource source = SampleSource::synthetic;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  std::string name;
  std::vector<Sample> samples;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

}  // namespace inspect
