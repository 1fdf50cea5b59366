#pragma once

// Integrated gradients along the straight path from a baseline, midpoint rule:
//   IG_i = (x_i - x'_i) / m * sum_{k=1..m} dF/dx_i at x' + (k - 1/2)/m (x - x').

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "beamsight/dataset.hpp"
#include "beamsight/error.hpp"
#include "beamsight/graph.hpp"
#include "beamsight/image.hpp"
#include "beamsight/resnet.hpp"

namespace beamsight {

struct AttributionMap {
  Tensor<double> attributions;
  double f_x = 0.0;
  double f_baseline = 0.0;
  double completeness_residual = 0.0;
  std::size_t steps = 0;
  std::size_t target = 0;

  double attribution_sum() const {
    double s = 0.0;
    for (double v : attributions.values()) s += v;
    return s;
  }
};

/// F at a point.
using ScalarFn = std::function<double(const Tensor<double>&)>;
/// dF/dx at each of several points, in order.
using BatchGradientFn = std::function<std::vector<Tensor<double>>(const std::vector<Tensor<double>>&)>;

/// Core quadrature over an arbitrary differentiable scalar function.
inline AttributionMap integrated_gradients(const ScalarFn& f, const BatchGradientFn& grad, const Tensor<double>& x,
                                           const Tensor<double>& baseline, std::size_t steps,
                                           std::size_t steps_per_batch = 8) {
  x.require_same_shape(baseline, "integrated_gradients baseline");
  if (steps < 1) fail(ErrorKind::InvalidConfig, "integrated gradients needs at least one step");
  if (!x.all_finite() || !baseline.all_finite()) fail(ErrorKind::NonFinite, "non-finite attribution input");
  steps_per_batch = std::max<std::size_t>(1, steps_per_batch);

  Tensor<double> grad_sum(x.shape());
  for (std::size_t k0 = 0; k0 < steps; k0 += steps_per_batch) {
    const std::size_t k1 = std::min(steps, k0 + steps_per_batch);
    std::vector<Tensor<double>> points;
    for (std::size_t k = k0; k < k1; ++k) {
      const double alpha = (static_cast<double>(k) + 0.5) / static_cast<double>(steps);
      Tensor<double> p(x.shape(), uninitialized);
      for (std::size_t i = 0; i < x.size(); ++i) p[i] = baseline[i] + alpha * (x[i] - baseline[i]);
      points.push_back(std::move(p));
    }
    const auto grads = grad(points);
    if (grads.size() != points.size()) fail(ErrorKind::ShapeMismatch, "gradient callback returned the wrong count");
    for (const auto& g : grads) grad_sum += g;  // ascending k: fixed accumulation order
  }

  AttributionMap map;
  map.steps = steps;
  map.attributions = Tensor<double>(x.shape(), uninitialized);
  for (std::size_t i = 0; i < x.size(); ++i)
    map.attributions[i] = (x[i] - baseline[i]) * grad_sum[i] / static_cast<double>(steps);
  if (!map.attributions.all_finite()) fail(ErrorKind::NonFinite, "non-finite attributions");
  map.f_x = f(x);
  map.f_baseline = f(baseline);
  map.completeness_residual = std::fabs(map.attribution_sum() - (map.f_x - map.f_baseline));
  return map;
}

/// Pre-softmax logit of `target`, evaluated in eval mode on a 1 x C x S x S image.
template <typename T>
AttributionMap integrated_gradients(const Model<T>& model, const Tensor<double>& x, const Tensor<double>& baseline,
                                    std::size_t target, std::size_t steps = 64, std::size_t steps_per_batch = 8) {
  const std::size_t k = model.config().num_classes;
  if (target >= k) fail(ErrorKind::InvalidConfig, "target class out of range");
  if (x.rank() != 4 || x.dim(0) != 1) fail(ErrorKind::ShapeMismatch, "attribution input must be 1 x C x H x W");
  const std::size_t plane = x.size();

  auto stack = [&](const std::vector<Tensor<double>>& pts) {
    Tensor<T> batch({pts.size(), x.dim(1), x.dim(2), x.dim(3)}, uninitialized);
    for (std::size_t n = 0; n < pts.size(); ++n)
      for (std::size_t i = 0; i < plane; ++i) batch[n * plane + i] = static_cast<T>(pts[n][i]);
    return batch;
  };
  ScalarFn f = [&](const Tensor<double>& p) {
    const Tensor<T> logits = model.classify(stack({p}));
    return static_cast<double>(logits[target]);
  };
  BatchGradientFn grad = [&](const std::vector<Tensor<double>>& pts) {
    Graph<T> g;
    ForwardOptions opt;
    opt.param_grads = false;
    opt.input_grad = true;
    const ForwardPass<T> pass = model.forward_eval(g, stack(pts), opt);
    Tensor<T> seed(g.value(pass.logits).shape());
    for (std::size_t n = 0; n < pts.size(); ++n) seed[n * k + target] = T{1};
    const Gradients<T> grads = g.backward(pass.logits, seed);
    const Tensor<T>& gx = grads.of(pass.input);
    std::vector<Tensor<double>> out;
    for (std::size_t n = 0; n < pts.size(); ++n) {
      Tensor<double> t(x.shape(), uninitialized);
      for (std::size_t i = 0; i < plane; ++i) t[i] = static_cast<double>(gx[n * plane + i]);
      out.push_back(std::move(t));
    }
    return out;
  };
  AttributionMap map = integrated_gradients(f, grad, x, baseline, steps, steps_per_batch);
  map.target = target;
  return map;
}

template <typename T>
AttributionMap integrated_gradients(const Model<T>& model, const ImageSample& sample, std::size_t target,
                                    std::size_t steps = 64) {
  const Tensor<double> x = to_batch<double>(sample);
  return integrated_gradients(model, x, Tensor<double>(x.shape()), target, steps);
}

/// Passes iff residual <= tol_fraction * max(|F_x - F_baseline|, 1e-8).
inline bool completeness_check(const AttributionMap& map, double tol_fraction = 0.01) {
  return map.completeness_residual <= tol_fraction * std::max(std::fabs(map.f_x - map.f_baseline), 1e-8);
}

/// Square (Chebyshev) dilation by `radius` pixels.
inline Mask dilate_mask(const Mask& m, std::size_t radius = 2) {
  Mask rows(m.height, m.width), out(m.height, m.width);
  const long r = static_cast<long>(radius);
  for (std::size_t y = 0; y < m.height; ++y)
    for (long x = 0; x < static_cast<long>(m.width); ++x)
      for (long d = -r; d <= r; ++d) {
        const long xx = x + d;
        if (xx >= 0 && xx < static_cast<long>(m.width) && m.at(y, static_cast<std::size_t>(xx))) {
          rows.at(y, static_cast<std::size_t>(x)) = 1;
          break;
        }
      }
  for (long y = 0; y < static_cast<long>(m.height); ++y)
    for (std::size_t x = 0; x < m.width; ++x)
      for (long d = -r; d <= r; ++d) {
        const long yy = y + d;
        if (yy >= 0 && yy < static_cast<long>(m.height) && rows.at(static_cast<std::size_t>(yy), x)) {
          out.at(static_cast<std::size_t>(y), x) = 1;
          break;
        }
      }
  return out;
}

/// Fraction of total |attribution| that falls inside the mask dilated by
/// `dilation` pixels; 0 for an all-zero map. Channels are summed per pixel.
inline double beam_alignment_score(const AttributionMap& map, const std::optional<Mask>& mask, std::size_t dilation = 2) {
  if (!mask) fail(ErrorKind::MissingMask, "beam alignment needs a beam mask");
  const Tensor<double>& a = map.attributions;
  const std::size_t H = a.dim(a.rank() - 2), W = a.dim(a.rank() - 1);
  if (mask->height != H || mask->width != W) fail(ErrorKind::ShapeMismatch, "mask and attribution sizes differ");
  const Mask grown = dilation ? dilate_mask(*mask, dilation) : *mask;
  double inside = 0.0, total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double v = std::fabs(a[i]);
    total += v;
    if (grown.bits[i % (H * W)]) inside += v;
  }
  return total > 0.0 ? inside / total : 0.0;
}

inline double mask_area_fraction(const Mask& m, std::size_t dilation = 2) {
  const Mask grown = dilation ? dilate_mask(m, dilation) : m;
  return static_cast<double>(grown.count()) / static_cast<double>(grown.bits.size());
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

// Blue (negative) -> white (zero) -> red (positive).
inline void diverging(double t, float& r, float& g, float& b) {
  t = std::clamp(t, -1.0, 1.0);
  if (t >= 0) {
    r = 1.0f;
    g = b = static_cast<float>(1.0 - t);
  } else {
    b = 1.0f;
    r = g = static_cast<float>(1.0 + t);
  }
}

}  // namespace detail

inline constexpr float kHeatmapOpacity = 0.6f;

/// RGB overlay: the diverging colour of the signed attribution (scaled by the
/// 99th percentile of |a|) blended over the grayscale underlay. A zero map
/// yields the neutral (white) tint everywhere.
inline Image heatmap_image(const AttributionMap& map, const Image& underlay) {
  const Tensor<double>& a = map.attributions;
  const std::size_t H = a.dim(a.rank() - 2), W = a.dim(a.rank() - 1);
  if (underlay.height != H || underlay.width != W) fail(ErrorKind::ShapeMismatch, "underlay size differs from the map");
  const Image gray = to_gray(underlay);
  std::vector<double> per_pixel(H * W, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) per_pixel[i % (H * W)] += a[i];
  std::vector<double> mags(per_pixel.size());
  for (std::size_t i = 0; i < mags.size(); ++i) mags[i] = std::fabs(per_pixel[i]);
  const std::size_t q = std::min(mags.size() - 1, mags.size() * 99 / 100);
  std::nth_element(mags.begin(), mags.begin() + static_cast<long>(q), mags.end());
  const double scale = mags[q] > 0 ? mags[q] : 1.0;
  Image out(H, W, 3);
  for (std::size_t i = 0; i < H * W; ++i) {
    float r, g, b;
    detail::diverging(per_pixel[i] / scale, r, g, b);
    const float base = gray.pixels[i];
    out.pixels[3 * i + 0] = (1 - kHeatmapOpacity) * base + kHeatmapOpacity * r;
    out.pixels[3 * i + 1] = (1 - kHeatmapOpacity) * base + kHeatmapOpacity * g;
    out.pixels[3 * i + 2] = (1 - kHeatmapOpacity) * base + kHeatmapOpacity * b;
  }
  return out;
}

inline nlohmann::json attribution_sidecar(const AttributionMap& map) {
  return {{"target", map.target},
          {"steps", map.steps},
          {"baseline", "black"},
          {"f_x", map.f_x},
          {"f_baseline", map.f_baseline},
          {"attribution_sum", map.attribution_sum()},
          {"completeness_residual", map.completeness_residual}};
}

/// Writes `<stem>.png` and `<stem>.json`.
inline void render_heatmap(const AttributionMap& map, const Image& underlay, const std::filesystem::path& stem,
                           const nlohmann::json& extra = nlohmann::json::object()) {
  save_png(heatmap_image(map, underlay), stem.string() + ".png");
  nlohmann::json side = attribution_sidecar(map);
  for (auto it = extra.begin(); it != extra.end(); ++it) side[it.key()] = it.value();
  std::ofstream out(stem.string() + ".json", std::ios::trunc);
  if (!out) fail(ErrorKind::IOError, "cannot write " + stem.string() + ".json");
  out << side.dump(2) << '\n';
}

}  // namespace beamsight
