#pragma once

#include <span>
#include <vector>

#include "inspect/model.hpp"
#include "inspect/random.hpp"
#include "inspect/sample.hpp"

namespace inspect {

struct TrainOptions {
  double mu = 0.05;
  int epochs = 100;
};

// Full-batch gradient descent: one sgd_step per epoch over the whole batch.
inline ModelWeights train(ModelWeights model, std::span<const Sample> batch, const TrainOptions& opts) {
  if (opts.epochs < 0) throw ConfigError("epochs must be nonnegative");
  if (opts.epochs > 0 && batch.empty()) throw RejectedInput("cannot train on an empty batch");
  for (int e = 0; e < opts.epochs; ++e) {
    const auto lg = loss_and_gradients(model, batch);
    model = sgd_step(model, lg.gradients, opts.mu);
  }
  return model;
}

inline double classifier_accuracy(const ModelWeights& m, std::span<const Sample> samples) {
  if (samples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& s : samples) correct += decide_label(predict_proba(m, s.image)) == s.label ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

inline double detector_accuracy(const ModelWeights& m, std::span<const Sample> samples, const Window& win) {
  if (samples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    correct += label_from_detections(detect_defects(m, s.image, win)) == s.label ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

// Copies the window at (top, left) out of `img`.
inline TensorImage window_at(const TensorImage& img, int top, int left, int height, int width) {
  TensorImage out(height, width, img.channels);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(top + y, left + x, c);
    }
  }
  return out;
}

struct WindowSampling {
  int negatives_per_image = 4;  // random windows disjoint from any defect
  int positive_repeats = 4;     // copies of each window fully containing a defect
  int near_miss_min_cut = 1;    // windows cutting this many..
  int near_miss_max_cut = 2;    // ..to this many box rows+columns are negatives
  std::uint64_t seed = 0;
};

// Rows plus columns of `box` that fall outside the window at (top, left).
inline int box_rows_cols_cut(const RoiBox& box, int top, int left, int height, int width) noexcept {
  const int rows = std::max(0, top - box.top()) + std::max(0, box.bottom() - (top + height));
  const int cols = std::max(0, left - box.left()) + std::max(0, box.right() - (left + width));
  return rows + cols;
}

// Window crops for training a detector.
//
// A window fully containing the defect box is NG (0). Windows that overlap
// the box but cut a few of its rows/columns are OK (1), so the detector
// fires only on complete defects and overlapping detections collapse under
// suppression. Random windows disjoint from the defect are OK as well.
inline std::vector<Sample> detector_training_windows(std::span<const Sample> images, const Window& win,
                                                     const WindowSampling& sampling = {}) {
  std::vector<Sample> out;
  auto crop = [&](const Sample& s, int y, int x, int label) {
    out.push_back({s.id + "@" + std::to_string(y) + "," + std::to_string(x),
                   window_at(s.image, y, x, win.height, win.width), label, std::nullopt, s.source});
  };
  for (const Sample& s : images) {
    if (win.height > s.image.height || win.width > s.image.width) throw ConfigError("window larger than image");
    const int max_top = s.image.height - win.height;
    const int max_left = s.image.width - win.width;
    if (s.defect_box) {
      const RoiBox& b = *s.defect_box;
      for (int y = 0; y <= max_top; ++y) {
        for (int x = 0; x <= max_left; ++x) {
          if (iou(RoiBox::from_corner(y, x, win.height, win.width), b) <= 0.0) continue;
          const int cut = box_rows_cols_cut(b, y, x, win.height, win.width);
          if (cut == 0) {
            for (int k = 0; k < sampling.positive_repeats; ++k) crop(s, y, x, 0);
          } else if (cut >= sampling.near_miss_min_cut && cut <= sampling.near_miss_max_cut) {
            crop(s, y, x, 1);
          }
        }
      }
    } else if (s.label == 0) {
      continue;  // global defect without a box: no clean window exists
    }
    Rng rng(sampling.seed, hash_string(s.id));
    int drawn = 0;
    for (int attempt = 0; drawn < sampling.negatives_per_image && attempt < 50 * sampling.negatives_per_image;
         ++attempt) {
      const int y = rng.between(0, max_top);
      const int x = rng.between(0, max_left);
      if (s.defect_box && iou(RoiBox::from_corner(y, x, win.height, win.width), *s.defect_box) > 0.0) continue;
      crop(s, y, x, 1);
      ++drawn;
    }
  }
  return out;
}

}  // namespace inspect
