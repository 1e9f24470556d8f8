#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "inspect/error.hpp"
#include "inspect/random.hpp"
#include "inspect/sample.hpp"
#include "inspect/tensor.hpp"
#include "inspect/tensor_file.hpp"

namespace inspect {

// The network used for both model kinds:
//
//   image (H x W x C) - 0.5 -> conv 3x3 valid, F filters -> ReLU
//                     -> global average pool (F) -> dense (F -> 1) -> sigmoid
//
// The output is p(y = OK | x). A detector is the same network applied to
// fixed-size windows; its defect probability for a window is 1 - p.

enum class ModelKind : int { classifier = 0, detector = 1 };

inline const char* to_string(ModelKind k) noexcept {
  return k == ModelKind::classifier ? "classifier" : "detector";
}

struct InputShape {
  int height = 0;
  int width = 0;
  int channels = 1;

  friend bool operator==(const InputShape&, const InputShape&) = default;
};

inline constexpr int kKernelSize = 3;
inline constexpr int kDefaultFilters = 8;
inline constexpr double kDecisionThreshold = 0.5;
inline constexpr double kDetectionThreshold = 0.8;
inline constexpr double kSuppressionIou = 0.5;
// Intensities are shifted by this constant before the convolution.
inline constexpr double kInputCenter = 0.5;

struct Parameters {
  std::vector<double> conv_kernel;   // [filters][3][3][channels]
  std::vector<double> conv_bias;     // [filters]
  std::vector<double> dense_weight;  // [1][filters]
  std::vector<double> dense_bias;    // [1]

  static constexpr std::array<std::string_view, 4> kNames = {"conv.kernel", "conv.bias", "dense.weight",
                                                             "dense.bias"};

  std::array<std::span<double>, 4> blocks() noexcept {
    return {conv_kernel, conv_bias, dense_weight, dense_bias};
  }
  std::array<std::span<const double>, 4> blocks() const noexcept {
    return {conv_kernel, conv_bias, dense_weight, dense_bias};
  }

  std::size_t count() const noexcept {
    return conv_kernel.size() + conv_bias.size() + dense_weight.size() + dense_bias.size();
  }

  bool congruent(const Parameters& o) const noexcept {
    return conv_kernel.size() == o.conv_kernel.size() && conv_bias.size() == o.conv_bias.size() &&
           dense_weight.size() == o.dense_weight.size() && dense_bias.size() == o.dense_bias.size();
  }

  friend bool operator==(const Parameters&, const Parameters&) = default;
};

struct ModelWeights {
  ModelKind kind = ModelKind::classifier;
  std::uint64_t version = 0;  // incremented by every parameter update
  InputShape input{};
  int filters = kDefaultFilters;
  Parameters params;

  int feature_height() const noexcept { return input.height - kKernelSize + 1; }
  int feature_width() const noexcept { return input.width - kKernelSize + 1; }

  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

// dE/dw, one block per parameter block.
struct GradientSet {
  Parameters values;
};

inline void validate_model(const ModelWeights& m) {
  if (m.filters <= 0) throw ConsistencyError("model has no filters");
  if (m.input.height < kKernelSize || m.input.width < kKernelSize) {
    throw ConsistencyError("model input smaller than the convolution kernel");
  }
  if (m.input.channels != 1 && m.input.channels != 3) throw ConsistencyError("model channels must be 1 or 3");
  const auto f = static_cast<std::size_t>(m.filters);
  const auto& p = m.params;
  if (p.conv_kernel.size() != f * kKernelSize * kKernelSize * m.input.channels || p.conv_bias.size() != f ||
      p.dense_weight.size() != f || p.dense_bias.size() != 1) {
    throw ConsistencyError("model parameter blocks have inconsistent shapes");
  }
  for (auto block : p.blocks()) {
    for (double v : block) {
      if (!std::isfinite(v)) throw ConsistencyError("model contains a non-finite parameter");
    }
  }
}

inline ModelWeights zero_model(ModelKind kind, InputShape input, int filters = kDefaultFilters) {
  ModelWeights m;
  m.kind = kind;
  m.input = input;
  m.filters = filters;
  const auto f = static_cast<std::size_t>(filters);
  m.params.conv_kernel.assign(f * kKernelSize * kKernelSize * input.channels, 0.0);
  m.params.conv_bias.assign(f, 0.0);
  m.params.dense_weight.assign(f, 0.0);
  m.params.dense_bias.assign(1, 0.0);
  validate_model(m);
  return m;
}

// Every parameter uniform in [-scale, scale], drawn from `seed`.
inline ModelWeights make_model(ModelKind kind, InputShape input, std::uint64_t seed, int filters = kDefaultFilters,
                               double scale = 0.05) {
  ModelWeights m = zero_model(kind, input, filters);
  Rng rng(seed, 0x1417);
  for (auto block : m.params.blocks()) {
    for (double& v : block) v = rng.uniform(-scale, scale);
  }
  return m;
}

inline double sigmoid(double z) noexcept {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow.
inline double softplus(double z) noexcept { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

// OK iff p >= 0.5; the boundary counts as OK.
constexpr int decide_label(double p) noexcept { return p >= kDecisionThreshold ? 1 : 0; }

struct ForwardPass {
  int feature_height = 0;
  int feature_width = 0;
  std::vector<double> pre;     // [filters][fh][fw] before ReLU
  std::vector<double> act;     // after ReLU
  std::vector<double> pooled;  // [filters]
  double logit = 0.0;
  double probability = 0.5;  // p(OK | x)
};

namespace detail {

inline void check_input(const ModelWeights& m, const TensorImage& img) {
  validate_image(img);
  if (img.height != m.input.height || img.width != m.input.width || img.channels != m.input.channels) {
    throw RejectedInput("image shape " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                        std::to_string(img.channels) + " does not match model input " +
                        std::to_string(m.input.height) + "x" + std::to_string(m.input.width) + "x" +
                        std::to_string(m.input.channels));
  }
}

// Forward pass on a region of `img` whose top-left is (oy, ox) and whose
// extent equals the model input. Inputs are assumed validated.
inline void forward_region(const ModelWeights& m, const TensorImage& img, int oy, int ox, ForwardPass& out) {
  const int fh = m.feature_height();
  const int fw = m.feature_width();
  const int c = m.input.channels;
  const int taps = kKernelSize * kKernelSize * c;
  const std::size_t plane = static_cast<std::size_t>(fh) * fw;
  out.feature_height = fh;
  out.feature_width = fw;
  out.pre.resize(plane * m.filters);
  out.act.resize(plane * m.filters);
  out.pooled.assign(m.filters, 0.0);

  std::vector<double> patch(taps);
  for (int y = 0; y < fh; ++y) {
    for (int x = 0; x < fw; ++x) {
      int t = 0;
      for (int ky = 0; ky < kKernelSize; ++ky) {
        const double* row = &img.data[img.index(oy + y + ky, ox + x, 0)];
        for (int k = 0; k < kKernelSize * c; ++k) patch[t++] = row[k] - kInputCenter;
      }
      const std::size_t pos = static_cast<std::size_t>(y) * fw + x;
      for (int f = 0; f < m.filters; ++f) {
        const double* kernel = &m.params.conv_kernel[static_cast<std::size_t>(f) * taps];
        double s = m.params.conv_bias[f];
        for (int k = 0; k < taps; ++k) s += kernel[k] * patch[k];
        out.pre[f * plane + pos] = s;
        const double a = s > 0.0 ? s : 0.0;
        out.act[f * plane + pos] = a;
        out.pooled[f] += a;
      }
    }
  }
  double z = m.params.dense_bias[0];
  for (int f = 0; f < m.filters; ++f) {
    out.pooled[f] /= static_cast<double>(plane);
    z += m.params.dense_weight[f] * out.pooled[f];
  }
  out.logit = z;
  out.probability = sigmoid(z);
}

// Accumulates dL/dw for one sample given dL/dz (= p - y for cross-entropy).
inline void backward_region(const ModelWeights& m, const TensorImage& img, int oy, int ox, const ForwardPass& fp,
                            double dz, Parameters& grad) {
  const int fh = fp.feature_height;
  const int fw = fp.feature_width;
  const int c = m.input.channels;
  const int taps = kKernelSize * kKernelSize * c;
  const std::size_t plane = static_cast<std::size_t>(fh) * fw;
  const double inv_plane = 1.0 / static_cast<double>(plane);

  grad.dense_bias[0] += dz;
  for (int f = 0; f < m.filters; ++f) {
    grad.dense_weight[f] += dz * fp.pooled[f];
    const double dact = dz * m.params.dense_weight[f] * inv_plane;
    if (dact == 0.0) continue;
    double* gk = &grad.conv_kernel[static_cast<std::size_t>(f) * taps];
    double gb = 0.0;
    for (int y = 0; y < fh; ++y) {
      for (int x = 0; x < fw; ++x) {
        if (fp.pre[f * plane + static_cast<std::size_t>(y) * fw + x] <= 0.0) continue;
        gb += dact;
        int t = 0;
        for (int ky = 0; ky < kKernelSize; ++ky) {
          const double* row = &img.data[img.index(oy + y + ky, ox + x, 0)];
          for (int k = 0; k < kKernelSize * c; ++k) gk[t++] += dact * (row[k] - kInputCenter);
        }
      }
    }
    grad.conv_bias[f] += gb;
  }
}

}  // namespace detail

inline ForwardPass forward(const ModelWeights& m, const TensorImage& img) {
  validate_model(m);
  detail::check_input(m, img);
  ForwardPass fp;
  detail::forward_region(m, img, 0, 0, fp);
  return fp;
}

// p(y = OK | x; w) for a classifier.
inline double predict_proba(const ModelWeights& m, const TensorImage& img) {
  if (m.kind != ModelKind::classifier) throw RejectedInput("predict_proba requires a classifier model");
  return forward(m, img).probability;
}

struct LossAndGradients {
  double loss = 0.0;
  GradientSet gradients;
};

// Mean binary cross-entropy over the batch and its exact gradient.
inline LossAndGradients loss_and_gradients(const ModelWeights& m, std::span<const Sample> batch) {
  if (batch.empty()) throw RejectedInput("loss_and_gradients needs a nonempty batch");
  validate_model(m);
  LossAndGradients out;
  Parameters& g = out.gradients.values;
  g = zero_model(m.kind, m.input, m.filters).params;
  ForwardPass fp;
  for (const auto& s : batch) {
    if (s.label != 0 && s.label != 1) throw RejectedInput("sample '" + s.id + "' has a non-binary label");
    detail::check_input(m, s.image);
    detail::forward_region(m, s.image, 0, 0, fp);
    out.loss += softplus(fp.logit) - s.label * fp.logit;
    detail::backward_region(m, s.image, 0, 0, fp, fp.probability - s.label, g);
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv_n;
  for (auto block : g.blocks()) {
    for (double& v : block) v *= inv_n;
  }
  return out;
}

inline double mean_loss(const ModelWeights& m, std::span<const Sample> batch) {
  if (batch.empty()) throw RejectedInput("mean_loss needs a nonempty batch");
  double total = 0.0;
  for (const auto& s : batch) {
    const double z = forward(m, s.image).logit;
    total += softplus(z) - s.label * z;
  }
  return total / static_cast<double>(batch.size());
}

// w+ <- w - mu * dE/dw
inline ModelWeights sgd_step(const ModelWeights& m, const GradientSet& grads, double mu) {
  if (!(mu > 0.0) || !std::isfinite(mu)) throw ConfigError("learning rate must be positive and finite");
  if (!m.params.congruent(grads.values)) throw ConsistencyError("gradient shapes do not match the model");
  ModelWeights next = m;
  auto dst = next.params.blocks();
  auto src = grads.values.blocks();
  for (std::size_t b = 0; b < dst.size(); ++b) {
    for (std::size_t i = 0; i < dst[b].size(); ++i) dst[b][i] -= mu * src[b][i];
  }
  ++next.version;
  return next;
}

struct SaliencyMap {
  int height = 0;
  int width = 0;
  std::vector<double> mass;  // row-major, nonnegative, sums to 1

  double at(int y, int x) const noexcept { return mass[static_cast<std::size_t>(y) * width + x]; }

  double mass_inside(const RoiBox& box) const noexcept {
    double s = 0.0;
    for (int y = std::max(0, box.top()); y < std::min(height, box.bottom()); ++y) {
      for (int x = std::max(0, box.left()); x < std::min(width, box.right()); ++x) s += at(y, x);
    }
    return s;
  }
};

// Gradient-weighted activation map for the predicted class.
//
// The class score is the logit for OK and its negation for NG. Each channel
// weight is the spatial mean of d(score)/d(activation); the map is
// ReLU(sum_f weight_f * activation_f), resized to the image by nearest
// neighbour (half-pixel centers) and normalized to unit mass. An all-zero map
// becomes uniform.
inline SaliencyMap saliency(const ModelWeights& m, const TensorImage& img) {
  if (m.kind != ModelKind::classifier) throw RejectedInput("saliency requires a classifier model");
  const ForwardPass fp = forward(m, img);
  const int fh = fp.feature_height;
  const int fw = fp.feature_width;
  const std::size_t plane = static_cast<std::size_t>(fh) * fw;
  const double sign = decide_label(fp.probability) == 1 ? 1.0 : -1.0;

  std::vector<double> channel_weight(m.filters);
  for (int f = 0; f < m.filters; ++f) {
    // d(score)/d(act_f(y,x)) is identical at every position.
    const double grad_at_position = sign * m.params.dense_weight[f] / static_cast<double>(plane);
    channel_weight[f] = grad_at_position;
  }
  std::vector<double> cam(plane, 0.0);
  for (std::size_t pos = 0; pos < plane; ++pos) {
    double s = 0.0;
    for (int f = 0; f < m.filters; ++f) s += channel_weight[f] * fp.act[f * plane + pos];
    cam[pos] = s > 0.0 ? s : 0.0;
  }

  SaliencyMap out{img.height, img.width, std::vector<double>(img.pixel_count(), 0.0)};
  double total = 0.0;
  for (int y = 0; y < img.height; ++y) {
    const int sy = std::min(fh - 1, static_cast<int>((y + 0.5) * fh / img.height));
    for (int x = 0; x < img.width; ++x) {
      const int sx = std::min(fw - 1, static_cast<int>((x + 0.5) * fw / img.width));
      const double v = cam[static_cast<std::size_t>(sy) * fw + sx];
      out.mass[static_cast<std::size_t>(y) * img.width + x] = v;
      total += v;
    }
  }
  if (!(total > 0.0) || !std::isfinite(total)) {
    std::fill(out.mass.begin(), out.mass.end(), 1.0 / static_cast<double>(out.mass.size()));
  } else {
    for (double& v : out.mass) v /= total;
  }
  return out;
}

struct Window {
  int height = 0;
  int width = 0;
  int stride = 1;
};

struct Detection {
  RoiBox box;
  double probability = 0.0;  // defect probability
};

// Greedy suppression: keep the most probable box, drop everything overlapping
// it by IoU > threshold, repeat. Ties broken by position for determinism.
inline std::vector<Detection> suppress_overlaps(std::vector<Detection> candidates,
                                                double iou_threshold = kSuppressionIou) {
  std::stable_sort(candidates.begin(), candidates.end(), [](const Detection& a, const Detection& b) {
    if (a.probability != b.probability) return a.probability > b.probability;
    if (a.box.top() != b.box.top()) return a.box.top() < b.box.top();
    return a.box.left() < b.box.left();
  });
  std::vector<Detection> kept;
  std::vector<bool> dropped(candidates.size(), false);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (dropped[i]) continue;
    kept.push_back(candidates[i]);
    for (std::size_t j = i + 1; j < candidates.size(); ++j) {
      if (!dropped[j] && iou(candidates[i].box, candidates[j].box) > iou_threshold) dropped[j] = true;
    }
  }
  return kept;
}

// Defect probability for every window position, before thresholding.
inline std::vector<Detection> scan_windows(const ModelWeights& m, const TensorImage& img, const Window& win) {
  if (m.kind != ModelKind::detector) throw RejectedInput("detect_defects requires a detector model");
  validate_model(m);
  validate_image(img);
  if (win.height <= 0 || win.width <= 0 || win.stride <= 0) throw ConfigError("window extent and stride must be positive");
  if (win.height > img.height || win.width > img.width) throw ConfigError("window larger than image");
  if (win.height != m.input.height || win.width != m.input.width || img.channels != m.input.channels) {
    throw ConfigError("window shape does not match detector input");
  }
  std::vector<Detection> all;
  ForwardPass fp;
  for (int y = 0; y + win.height <= img.height; y += win.stride) {
    for (int x = 0; x + win.width <= img.width; x += win.stride) {
      detail::forward_region(m, img, y, x, fp);
      all.push_back({RoiBox::from_corner(y, x, win.height, win.width), 1.0 - fp.probability});
    }
  }
  return all;
}

// Windows with defect probability strictly above 0.8, after overlap
// suppression. An empty result means the image is judged non-defective.
inline std::vector<Detection> detect_defects(const ModelWeights& m, const TensorImage& img, const Window& win) {
  auto all = scan_windows(m, img, win);
  std::erase_if(all, [](const Detection& d) { return !(d.probability > kDetectionThreshold); });
  return suppress_overlaps(std::move(all));
}

inline int label_from_detections(std::span<const Detection> detections) noexcept {
  return detections.empty() ? 1 : 0;
}

// ---- weight files ----

inline Bytes encode_weights(const ModelWeights& m) {
  validate_model(m);
  const auto f = static_cast<std::uint64_t>(m.filters);
  std::vector<TensorBlock> blocks;
  blocks.push_back({"model.meta",
                    {5},
                    {static_cast<double>(m.kind), static_cast<double>(m.version), static_cast<double>(m.input.height),
                     static_cast<double>(m.input.width), static_cast<double>(m.input.channels)}});
  blocks.push_back({std::string(Parameters::kNames[0]),
                    {f, kKernelSize, kKernelSize, static_cast<std::uint64_t>(m.input.channels)},
                    m.params.conv_kernel});
  blocks.push_back({std::string(Parameters::kNames[1]), {f}, m.params.conv_bias});
  blocks.push_back({std::string(Parameters::kNames[2]), {1, f}, m.params.dense_weight});
  blocks.push_back({std::string(Parameters::kNames[3]), {1}, m.params.dense_bias});
  return encode_tensor_blocks(blocks);
}

inline ModelWeights decode_weights(std::span<const std::uint8_t> bytes) {
  const auto blocks = decode_tensor_blocks(bytes);
  auto find = [&](std::string_view name) -> const TensorBlock& {
    for (const auto& b : blocks) {
      if (b.name == name) return b;
    }
    throw FormatError("weight file lacks block '" + std::string(name) + "'", bytes.size());
  };
  const auto& meta = find("model.meta");
  if (meta.values.size() != 5) throw FormatError("bad model.meta block", 0);
  ModelWeights m;
  m.kind = meta.values[0] == 1.0 ? ModelKind::detector : ModelKind::classifier;
  m.version = static_cast<std::uint64_t>(meta.values[1]);
  m.input = {static_cast<int>(meta.values[2]), static_cast<int>(meta.values[3]), static_cast<int>(meta.values[4])};
  const auto& kernel = find(Parameters::kNames[0]);
  if (kernel.shape.empty()) throw FormatError("conv.kernel has no shape", 0);
  m.filters = static_cast<int>(kernel.shape[0]);
  m.params.conv_kernel = kernel.values;
  m.params.conv_bias = find(Parameters::kNames[1]).values;
  m.params.dense_weight = find(Parameters::kNames[2]).values;
  m.params.dense_bias = find(Parameters::kNames[3]).values;
  try {
    validate_model(m);
  } catch (const ConsistencyError& e) {
    throw FormatError(std::string("weight file describes an invalid model: ") + e.what(), 0);
  }
  return m;
}

inline void save_weights(const ModelWeights& m, const std::string& path) { write_file(path, encode_weights(m)); }
inline ModelWeights load_weights(const std::string& path) { return decode_weights(read_file(path)); }

}  // namespace inspect
