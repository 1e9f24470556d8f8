#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "inspect/error.hpp"
#include "inspect/random.hpp"
#include "inspect/sample.hpp"
#include "inspect/tensor.hpp"

namespace inspect {

enum class DefectMode { global_shape, local_spot };

inline const char* to_string(DefectMode m) noexcept {
  return m == DefectMode::global_shape ? "global-shape" : "local-spot";
}

// Per-tick change of the capture conditions.
struct DriftSchedule {
  double brightness_per_tick = 0.0;
  double position_noise_per_tick = 0.0;
};

// Synthetic production line with known ground truth.
//
// global-shape: a bright round part on a dark background; NG parts have a
// broken (missing wedge) or shrunken silhouette.
// local-spot: a flat surface with benign bright pads; NG parts carry one
// small dark disc whose bounding box is recorded as the defect box.
struct SyntheticLineConfig {
  std::string name = "line";
  int height = 16;
  int width = 16;
  int channels = 1;
  DefectMode mode = DefectMode::global_shape;
  double defect_rate = 0.5;
  DriftSchedule drift{};
  std::uint64_t seed = 1;

  double background = 0.15;
  double brightness = 0.7;       // part intensity at tick 0
  double noise = 0.03;           // per-pixel gaussian sigma
  double position_noise = 0.5;   // part center jitter (pixels) at tick 0
  double part_radius = 0.36;     // fraction of min(height, width)
  int spot_radius = 3;           // local-spot: defect box is (2r+1) x (2r+1)
  double spot_contrast = 0.35;   // local-spot: peak darkening
  int benign_marks = 2;          // local-spot: max bright pads per image (not defects)
  int benign_dots = 4;           // local-spot: max faint dark specks per image (not defects)

  void validate() const {
    if (height < 8 || width < 8) throw ConfigError("synthetic images must be at least 8x8");
    if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
    if (!(defect_rate >= 0.0 && defect_rate <= 1.0)) throw ConfigError("defect rate must lie in [0,1]");
    if (!std::isfinite(drift.brightness_per_tick) || !std::isfinite(drift.position_noise_per_tick)) {
      throw ConfigError("drift magnitudes must be finite");
    }
    if (mode == DefectMode::local_spot && 2 * spot_radius + 3 > std::min(height, width)) {
      throw ConfigError("spot does not fit in the image");
    }
  }
};

namespace detail {

inline void finish_channels(const std::vector<double>& gray, TensorImage& img) {
  static constexpr std::array<double, 3> tint = {1.0, 0.94, 0.88};
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double g = gray[static_cast<std::size_t>(y) * img.width + x];
      for (int c = 0; c < img.channels; ++c) img.at(y, x, c) = img.channels == 1 ? g : g * tint[c];
    }
  }
  clamp_unit(img);
}

inline double tick_brightness(const SyntheticLineConfig& cfg, int tick) {
  return std::clamp(cfg.brightness + cfg.drift.brightness_per_tick * tick, 0.02, 0.98);
}

inline Sample render_global(const SyntheticLineConfig& cfg, int tick, int label, Rng& rng) {
  const int h = cfg.height, w = cfg.width;
  const double jitter = std::max(0.0, cfg.position_noise + cfg.drift.position_noise_per_tick * tick);
  const double cy = h / 2.0 + rng.normal(0.0, jitter);
  const double cx = w / 2.0 + rng.normal(0.0, jitter);
  double r0 = cfg.part_radius * std::min(h, w) * rng.normal(1.0, 0.03);
  const double wobble_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double bright = tick_brightness(cfg, tick) * rng.normal(1.0, 0.03);

  // NG silhouettes: 0 = missing wedge, 1 = shrunken part.
  int defect_kind = -1;
  double wedge_start = 0.0, wedge_width = 0.0;
  if (label == 0) {
    defect_kind = static_cast<int>(rng.below(2));
    if (defect_kind == 0) {
      wedge_start = rng.uniform(0.0, 2.0 * std::numbers::pi);
      wedge_width = rng.uniform(1.2, 2.0);
    } else {
      r0 *= rng.uniform(0.66, 0.76);
    }
  }
  auto inside = [&](double py, double px) {
    const double dy = py - cy, dx = px - cx;
    const double theta = std::atan2(dy, dx);
    const double radius = r0 * (1.0 + 0.04 * std::cos(2.0 * theta + wobble_phase));
    if (dy * dy + dx * dx > radius * radius) return false;
    if (defect_kind == 0) {
      double rel = std::fmod(theta - wedge_start + 4.0 * std::numbers::pi, 2.0 * std::numbers::pi);
      if (rel < wedge_width) return false;
    }
    return true;
  };

  std::vector<double> gray(static_cast<std::size_t>(h) * w);
  constexpr int kSuper = 4;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          hits += inside(y + (sy + 0.5) / kSuper, x + (sx + 0.5) / kSuper) ? 1 : 0;
        }
      }
      const double cover = hits / double(kSuper * kSuper);
      gray[static_cast<std::size_t>(y) * w + x] =
          cfg.background + cover * (bright - cfg.background) + rng.normal(0.0, cfg.noise);
    }
  }
  Sample s;
  s.label = label;
  s.image = TensorImage(h, w, cfg.channels);
  finish_channels(gray, s.image);
  return s;
}

inline Sample render_local(const SyntheticLineConfig& cfg, int tick, int label, Rng& rng) {
  const int h = cfg.height, w = cfg.width;
  const double base = tick_brightness(cfg, tick) * rng.normal(1.0, 0.03);
  const double gy = rng.normal(0.0, 0.04) / h, gx = rng.normal(0.0, 0.04) / w;
  std::vector<double> gray(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      gray[static_cast<std::size_t>(y) * w + x] = base + gy * (y - h / 2.0) + gx * (x - w / 2.0);
    }
  }
  // benign bright pads: legitimate surface structure, never defects
  const int marks = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.benign_marks) + 1));
  for (int k = 0; k < marks; ++k) {
    const bool horizontal = rng.bernoulli(0.5);
    const int ph = horizontal ? 2 : 5, pw = horizontal ? 5 : 2;
    const int top = rng.between(0, h - ph), left = rng.between(0, w - pw);
    const double lift = rng.uniform(0.08, 0.15);
    for (int y = top; y < top + ph; ++y) {
      for (int x = left; x < left + pw; ++x) gray[static_cast<std::size_t>(y) * w + x] += lift;
    }
  }
  // faint specks: darker than the surface but far shallower and smaller than a defect
  const int dots = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.benign_dots) + 1));
  for (int k = 0; k < dots; ++k) {
    const int cy = rng.between(1, h - 2), cx = rng.between(1, w - 2);
    const double depth = cfg.spot_contrast * rng.uniform(0.3, 0.5);
    for (int y = cy - 1; y <= cy + 1; ++y) {
      for (int x = cx - 1; x <= cx + 1; ++x) {
        gray[static_cast<std::size_t>(y) * w + x] -= (y == cy || x == cx) ? depth : 0.0;
      }
    }
  }
  Sample s;
  s.label = label;
  if (label == 0) {
    const int r = cfg.spot_radius;
    const int cy = rng.between(r + 1, h - r - 2);
    const int cx = rng.between(r + 1, w - r - 2);
    const double depth = cfg.spot_contrast * rng.uniform(0.8, 1.2);
    for (int y = cy - r; y <= cy + r; ++y) {
      for (int x = cx - r; x <= cx + r; ++x) {
        const double d2 = double(y - cy) * (y - cy) + double(x - cx) * (x - cx);
        if (d2 <= (r + 0.5) * (r + 0.5)) gray[static_cast<std::size_t>(y) * w + x] -= depth;
      }
    }
    s.defect_box = RoiBox{cx, cy, 2 * r + 1, 2 * r + 1};
  }
  for (double& v : gray) v += rng.normal(0.0, cfg.noise);
  s.image = TensorImage(h, w, cfg.channels);
  finish_channels(gray, s.image);
  return s;
}

}  // namespace detail

inline std::string sample_id(const SyntheticLineConfig& cfg, int tick, std::uint64_t stream, std::size_t index) {
  std::string id = cfg.name + "-t" + std::to_string(tick);
  if (stream != 0) id += "-s" + std::to_string(stream);
  return id + "-" + std::to_string(index);
}

// Renders one product with a fixed ground-truth label. The image depends only
// on (cfg, tick, stream, index).
inline Sample render_product(const SyntheticLineConfig& cfg, int tick, int label, std::uint64_t stream,
                             std::size_t index) {
  cfg.validate();
  Rng rng(hash_combine(hash_combine(cfg.seed, static_cast<std::uint64_t>(tick) + 0x7431), stream),
          static_cast<std::uint64_t>(index));
  rng.next();
  Sample s = cfg.mode == DefectMode::global_shape ? detail::render_global(cfg, tick, label, rng)
                                                  : detail::render_local(cfg, tick, label, rng);
  s.id = sample_id(cfg, tick, stream, index);
  s.source = SampleSource::synthetic;
  return s;
}

// `count` products from the line at `tick`; each is NG with probability
// cfg.defect_rate.
inline std::vector<Sample> generate_line_images(const SyntheticLineConfig& cfg, int tick, std::size_t count,
                                                std::uint64_t stream = 0) {
  cfg.validate();
  if (count == 0) throw RejectedInput("generate_line_images needs a positive count");
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng coin(hash_combine(cfg.seed ^ 0x5eed, hash_combine(static_cast<std::uint64_t>(tick), stream)), i);
    const int label = coin.uniform() < cfg.defect_rate ? 0 : 1;
    out.push_back(render_product(cfg, tick, label, stream, i));
  }
  return out;
}

// Exactly `ok` OK products followed by `ng` NG products, interleaved.
inline std::vector<Sample> generate_balanced(const SyntheticLineConfig& cfg, int tick, std::size_t ok,
                                             std::size_t ng, std::uint64_t stream = 0) {
  std::vector<Sample> out;
  out.reserve(ok + ng);
  std::size_t made_ok = 0, made_ng = 0;
  for (std::size_t i = 0; made_ok < ok || made_ng < ng; ++i) {
    const bool want_ng = made_ng < ng && (made_ok >= ok || i % 2 == 1);
    out.push_back(render_product(cfg, tick, want_ng ? 0 : 1, stream, i));
    (want_ng ? made_ng : made_ok) += 1;
  }
  return out;
}

// Crop of size b.height x b.width; output (i, j) is raw pixel
// (b.cy - b.height/2 + i, b.cx - b.width/2 + j).
inline TensorImage crop_roi(const TensorImage& raw, const RoiBox& b) {
  if (b.height <= 0 || b.width <= 0) throw RoiOutOfBounds("ROI extent must be positive");
  if (!b.inside(raw.height, raw.width)) {
    throw RoiOutOfBounds("ROI {" + std::to_string(b.cx) + "," + std::to_string(b.cy) + "," +
                         std::to_string(b.height) + "," + std::to_string(b.width) + "} exceeds " +
                         std::to_string(raw.height) + "x" + std::to_string(raw.width) + " image");
  }
  TensorImage out(b.height, b.width, raw.channels);
  for (int i = 0; i < b.height; ++i) {
    const double* src = &raw.data[raw.index(b.top() + i, b.left(), 0)];
    std::copy(src, src + static_cast<std::ptrdiff_t>(b.width) * raw.channels, &out.data[out.index(i, 0, 0)]);
  }
  return out;
}

// ---- augmentation ----

// 3x3 projective matrix with h33 fixed to 1; the eight free entries are the
// parameters, row-major: {h11, h12, h13, h21, h22, h23, h31, h32}.
struct Homography {
  std::array<double, 8> h = {1, 0, 0, 0, 1, 0, 0, 0};

  static Homography identity() noexcept { return {}; }

  // Maps (x, y) in continuous pixel coordinates.
  std::array<double, 2> apply(double x, double y) const noexcept {
    const double den = h[6] * x + h[7] * y + 1.0;
    return {(h[0] * x + h[1] * y + h[2]) / den, (h[3] * x + h[4] * y + h[5]) / den};
  }

  std::optional<Homography> inverse() const noexcept {
    const double a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5], g = h[6], k = h[7];
    const double det = a * (e - f * k) - b * (d - f * g) + c * (d * k - e * g);
    if (std::abs(det) < 1e-12) return std::nullopt;
    std::array<double, 9> inv = {(e - f * k), -(b - c * k), (b * f - c * e),
                                 -(d - f * g), (a - c * g), -(a * f - c * d),
                                 (d * k - e * g), -(a * k - b * g), (a * e - b * d)};
    Homography out;
    for (int i = 0; i < 8; ++i) out.h[i] = inv[i] / inv[8];
    return out;
  }
};

struct ProjectiveOp {
  // Per-parameter jitter, applied to the matrix expressed about the image
  // center: parameter i is identity_i + base_offset_i + uniform(-jitter_i, jitter_i).
  std::array<double, 8> base_offset{};
  std::array<double, 8> jitter{};
};

// out = gain_c * in + bias_c per channel, gain_c in 1 +- gain_jitter, bias_c in +- bias_jitter.
struct ColorOp {
  double gain_jitter = 0.0;
  double bias_jitter = 0.0;
};

enum class NoiseKind { gaussian, salt_pepper, poisson };

struct NoiseOp {
  NoiseKind kind = NoiseKind::gaussian;
  double strength = 0.0;  // sigma, flip probability, or variance scale
};

using AugmentOp = std::variant<ProjectiveOp, ColorOp, NoiseOp>;

struct AugmentationSpec {
  std::vector<AugmentOp> ops;
  int multiplier = 1;  // outputs per input, original included
  std::uint64_t seed = 0;

  void validate() const {
    if (multiplier < 1) throw ConfigError("augmentation multiplier must be >= 1");
    for (const auto& op : ops) {
      if (const auto* n = std::get_if<NoiseOp>(&op); n && !(n->strength >= 0.0)) {
        throw ConfigError("noise strength must be >= 0");
      }
      if (const auto* c = std::get_if<ColorOp>(&op); c && !(c->gain_jitter >= 0.0 && c->bias_jitter >= 0.0)) {
        throw ConfigError("color jitter must be >= 0");
      }
      if (const auto* p = std::get_if<ProjectiveOp>(&op)) {
        for (double j : p->jitter) {
          if (!(j >= 0.0)) throw ConfigError("projective jitter must be >= 0");
        }
      }
    }
  }
};

// Builds the pixel-space homography from parameters expressed in coordinates
// centered on the image middle.
inline Homography centered_homography(const std::array<double, 8>& params, int height, int width) {
  const double cx = width / 2.0, cy = height / 2.0;
  // T(c) * P * T(-c)
  const auto& p = params;
  const double g = p[6], k = p[7];
  std::array<double, 9> m = {
      p[0] + cx * g, p[1] + cx * k, p[2] + cx * 1.0 - (p[0] + cx * g) * cx - (p[1] + cx * k) * cy,
      p[3] + cy * g, p[4] + cy * k, p[5] + cy * 1.0 - (p[3] + cy * g) * cx - (p[4] + cy * k) * cy,
      g,             k,             1.0 - g * cx - k * cy};
  Homography out;
  for (int i = 0; i < 8; ++i) out.h[i] = m[i] / m[8];
  return out;
}

// Backward warp with bilinear sampling; coordinates outside the source clamp
// to the border. Pixel (y, x) has center (x + 0.5, y + 0.5).
inline TensorImage warp_image(const TensorImage& src, const Homography& forward_map) {
  const auto inv = forward_map.inverse();
  if (!inv) throw ConfigError("homography is singular");
  TensorImage out(src.height, src.width, src.channels);
  for (int y = 0; y < src.height; ++y) {
    for (int x = 0; x < src.width; ++x) {
      const auto [sx, sy] = inv->apply(x + 0.5, y + 0.5);
      const double fx = std::clamp(sx - 0.5, 0.0, src.width - 1.0);
      const double fy = std::clamp(sy - 0.5, 0.0, src.height - 1.0);
      const int x0 = std::min(static_cast<int>(fx), src.width - 1), y0 = std::min(static_cast<int>(fy), src.height - 1);
      const int x1 = std::min(x0 + 1, src.width - 1), y1 = std::min(y0 + 1, src.height - 1);
      const double ax = fx - x0, ay = fy - y0;
      for (int c = 0; c < src.channels; ++c) {
        const double top = src.at(y0, x0, c) * (1 - ax) + src.at(y0, x1, c) * ax;
        const double bot = src.at(y1, x0, c) * (1 - ax) + src.at(y1, x1, c) * ax;
        out.at(y, x, c) = top * (1 - ay) + bot * ay;
      }
    }
  }
  return out;
}

// Bounding box, in the warped image, of every output pixel whose bilinear
// footprint touches the source box. Clipped to the image.
inline RoiBox transform_box(const RoiBox& box, const Homography& forward_map, int height, int width) {
  // Pixels whose sample point lands within one pixel of the box can read it.
  const double x0 = box.left() - 0.5, x1 = box.right() + 0.5;
  const double y0 = box.top() - 0.5, y1 = box.bottom() + 0.5;
  double min_x = 1e300, min_y = 1e300, max_x = -1e300, max_y = -1e300;
  // Projective maps keep straight lines straight, so sampling the boundary
  // densely bounds the image of the rectangle.
  constexpr int kSteps = 16;
  for (int i = 0; i <= kSteps; ++i) {
    const double t = static_cast<double>(i) / kSteps;
    const std::array<std::array<double, 2>, 4> pts = {{{x0 + t * (x1 - x0), y0},
                                                       {x0 + t * (x1 - x0), y1},
                                                       {x0, y0 + t * (y1 - y0)},
                                                       {x1, y0 + t * (y1 - y0)}}};
    for (const auto& p : pts) {
      const auto q = forward_map.apply(p[0], p[1]);
      min_x = std::min(min_x, q[0]);
      max_x = std::max(max_x, q[0]);
      min_y = std::min(min_y, q[1]);
      max_y = std::max(max_y, q[1]);
    }
  }
  // output pixel centers (x + 0.5) inside [min, max]
  const int left = std::clamp(static_cast<int>(std::floor(min_x - 0.5)), 0, width - 1);
  const int right = std::clamp(static_cast<int>(std::ceil(max_x - 0.5)) + 1, left + 1, width);
  const int top = std::clamp(static_cast<int>(std::floor(min_y - 0.5)), 0, height - 1);
  const int bottom = std::clamp(static_cast<int>(std::ceil(max_y - 0.5)) + 1, top + 1, height);
  return RoiBox::from_corner(top, left, bottom - top, right - left);
}

namespace detail {

inline void apply_op(const ProjectiveOp& op, Sample& s, Rng& rng) {
  std::array<double, 8> params = {1, 0, 0, 0, 1, 0, 0, 0};
  bool identity = true;
  for (int i = 0; i < 8; ++i) {
    const double delta = op.base_offset[i] + (op.jitter[i] > 0.0 ? rng.uniform(-op.jitter[i], op.jitter[i]) : 0.0);
    params[i] += delta;
    identity = identity && delta == 0.0;
  }
  if (identity) return;
  const Homography hm = centered_homography(params, s.image.height, s.image.width);
  s.image = warp_image(s.image, hm);
  if (s.defect_box) s.defect_box = transform_box(*s.defect_box, hm, s.image.height, s.image.width);
}

inline void apply_op(const ColorOp& op, Sample& s, Rng& rng) {
  for (int c = 0; c < s.image.channels; ++c) {
    const double gain = 1.0 + (op.gain_jitter > 0.0 ? rng.uniform(-op.gain_jitter, op.gain_jitter) : 0.0);
    const double bias = op.bias_jitter > 0.0 ? rng.uniform(-op.bias_jitter, op.bias_jitter) : 0.0;
    if (gain == 1.0 && bias == 0.0) continue;
    for (std::size_t i = c; i < s.image.data.size(); i += s.image.channels) {
      s.image.data[i] = gain * s.image.data[i] + bias;
    }
  }
}

inline void apply_op(const NoiseOp& op, Sample& s, Rng& rng) {
  if (op.strength == 0.0) return;
  for (double& v : s.image.data) {
    switch (op.kind) {
      case NoiseKind::gaussian: v += rng.normal(0.0, op.strength); break;
      case NoiseKind::salt_pepper:
        if (rng.bernoulli(op.strength)) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
        break;
      case NoiseKind::poisson:
        // variance proportional to intensity
        v += std::sqrt(std::max(v, 0.0)) * op.strength * rng.normal();
        break;
    }
  }
}

}  // namespace detail

// Each input yields itself plus (multiplier - 1) transformed copies, applied
// in op order and clamped to [0,1]. Labels never change; defect boxes follow
// projective ops.
inline Dataset augment(const Dataset& d, const AugmentationSpec& spec) {
  spec.validate();
  if (d.empty()) throw RejectedInput("cannot augment an empty dataset");
  Dataset out;
  out.name = d.name + "+aug";
  out.samples.reserve(d.size() * spec.multiplier);
  for (const auto& s : d.samples) out.samples.push_back(s);
  for (int k = 1; k < spec.multiplier; ++k) {
    for (const auto& s : d.samples) {
      Sample a = s;
      a.id = s.id + "#aug" + std::to_string(k);
      a.source = SampleSource::augmented;
      Rng rng(hash_combine(spec.seed, hash_string(s.id)), static_cast<std::uint64_t>(k));
      for (const auto& op : spec.ops) std::visit([&](const auto& o) { detail::apply_op(o, a, rng); }, op);
      clamp_unit(a.image);
      out.samples.push_back(std::move(a));
    }
  }
  return out;
}

}  // namespace inspect
