#pragma once

// Procedural roof textures. Safe images are smooth correlated noise;
// hazardous ones add dark elongated streaks (a shadowed groove with a lit
// ledge) whose width and darkness grow with a per-beam depth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "beamsight/dataset.hpp"
#include "beamsight/error.hpp"
#include "beamsight/parallel.hpp"
#include "beamsight/random.hpp"

namespace beamsight {

struct SynthConfig {
  std::size_t image_size = 448;
  double beam_count_mean = 8.0;
  double depth_lo = 1.0;
  double depth_hi = 3.0;
  double principal_orientation_deg = 35.0;
  double orientation_sd_deg = 10.0;
  double noise_amplitude = 0.10;
  double noise_correlation = 32.0;  // pixels, coarsest lattice spacing
  std::uint64_t seed = 0;

  void validate() const {
    if (image_size < 8) fail(ErrorKind::InvalidConfig, "image_size must be at least 8");
    if (!(beam_count_mean > 0)) fail(ErrorKind::InvalidConfig, "beam_count_mean must be positive");
    if (!(depth_lo >= 0 && depth_hi <= 3 && depth_lo <= depth_hi))
      fail(ErrorKind::InvalidConfig, "depth_range must satisfy 0 <= lo <= hi <= 3");
    if (!(noise_amplitude >= 0 && noise_amplitude <= 0.5)) fail(ErrorKind::InvalidConfig, "noise_amplitude must be in [0, 0.5]");
    if (!(noise_correlation >= 1)) fail(ErrorKind::InvalidConfig, "noise_correlation must be >= 1");
    if (!(orientation_sd_deg >= 0)) fail(ErrorKind::InvalidConfig, "orientation_sd_deg must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"image_size", c.image_size},
       {"beam_count_mean", c.beam_count_mean},
       {"depth_range", {c.depth_lo, c.depth_hi}},
       {"principal_orientation_deg", c.principal_orientation_deg},
       {"orientation_sd_deg", c.orientation_sd_deg},
       {"noise_amplitude", c.noise_amplitude},
       {"noise_correlation", c.noise_correlation},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.image_size = j.value("image_size", c.image_size);
  c.beam_count_mean = j.value("beam_count_mean", c.beam_count_mean);
  if (j.contains("depth_range")) {
    const auto& r = j.at("depth_range");
    c.depth_lo = r.at(0).get<double>();
    c.depth_hi = r.at(1).get<double>();
  }
  c.principal_orientation_deg = j.value("principal_orientation_deg", c.principal_orientation_deg);
  c.orientation_sd_deg = j.value("orientation_sd_deg", c.orientation_sd_deg);
  c.noise_amplitude = j.value("noise_amplitude", c.noise_amplitude);
  c.noise_correlation = j.value("noise_correlation", c.noise_correlation);
  c.seed = j.value("seed", c.seed);
}

namespace synth {

/// Three octaves of smoothstep value noise around mid-gray.
inline Image value_noise(std::size_t size, double amplitude, double spacing, RandomStream rng) {
  Image img(size, size, 1, 0.5f);
  double scale = 1.0, norm = 0.0;
  for (int octave = 0; octave < 3; ++octave, scale *= 0.5) norm += scale;
  scale = 1.0;
  for (int octave = 0; octave < 3; ++octave, scale *= 0.5, spacing *= 0.5) {
    if (spacing < 1.0) break;
    const std::size_t cells = static_cast<std::size_t>(std::ceil(static_cast<double>(size) / spacing)) + 2;
    std::vector<double> lattice(cells * cells);
    RandomStream octave_rng = rng.split(static_cast<std::uint64_t>(octave));
    for (auto& v : lattice) v = octave_rng.uniform(-1.0, 1.0);
    for (std::size_t y = 0; y < size; ++y) {
      const double gy = static_cast<double>(y) / spacing;
      const std::size_t iy = static_cast<std::size_t>(gy);
      double ty = gy - static_cast<double>(iy);
      ty = ty * ty * (3 - 2 * ty);
      for (std::size_t x = 0; x < size; ++x) {
        const double gx = static_cast<double>(x) / spacing;
        const std::size_t ix = static_cast<std::size_t>(gx);
        double tx = gx - static_cast<double>(ix);
        tx = tx * tx * (3 - 2 * tx);
        const double a = lattice[iy * cells + ix], b = lattice[iy * cells + ix + 1];
        const double c = lattice[(iy + 1) * cells + ix], d = lattice[(iy + 1) * cells + ix + 1];
        const double v = (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
        img.at(y, x) += static_cast<float>(amplitude * scale / norm * v);
      }
    }
  }
  return img;
}

struct Streak {
  double cx, cy;         // midpoint
  double angle_rad;      // direction of the long axis, image coordinates (y down)
  double length;
  double half_width;
  double darkness;       // negative values brighten
  double ledge = 0.5;    // lit-side change relative to darkness; -1 gives a symmetric profile
};

/// Draws a streak; returns the number of pixels it touched. `mask` may be null.
inline std::size_t draw_streak(Image& img, Mask* mask, const Streak& s) {
  const double ux = std::cos(s.angle_rad), uy = std::sin(s.angle_rad);
  const double half = 0.5 * s.length;
  const double ax = s.cx - ux * half, ay = s.cy - uy * half;
  const double reach = half + s.half_width + 1;
  const long y0 = std::max(0L, static_cast<long>(std::floor(s.cy - reach)));
  const long y1 = std::min(static_cast<long>(img.height) - 1, static_cast<long>(std::ceil(s.cy + reach)));
  const long x0 = std::max(0L, static_cast<long>(std::floor(s.cx - reach)));
  const long x1 = std::min(static_cast<long>(img.width) - 1, static_cast<long>(std::ceil(s.cx + reach)));
  std::size_t touched = 0;
  for (long y = y0; y <= y1; ++y) {
    for (long x = x0; x <= x1; ++x) {
      const double px = static_cast<double>(x) - ax, py = static_cast<double>(y) - ay;
      const double along = std::clamp(px * ux + py * uy, 0.0, s.length);
      const double dx = px - along * ux, dy = py - along * uy;
      const double r = std::hypot(dx, dy);
      if (r >= s.half_width) continue;
      const double side = dx * -uy + dy * ux;  // signed offset across the streak
      const double falloff = 1.0 - (r / s.half_width) * (r / s.half_width);
      const double delta = side >= 0 ? -s.darkness * falloff : s.ledge * s.darkness * falloff;
      float& v = img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
      v = static_cast<float>(v + delta);
      if (mask) mask->at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1;
      ++touched;
    }
  }
  return touched;
}

inline void clamp01(Image& img) {
  for (float& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
}

inline constexpr double kHalfWidthPerDepth = 1.5;  // pixels per map unit
inline constexpr double kDarknessPerDepth = 0.10;

inline Streak beam_streak(const SynthConfig& cfg, RandomStream& rng, double depth, double angle_deg) {
  const double n = static_cast<double>(cfg.image_size);
  Streak s{};
  s.cx = rng.uniform(0.1 * n, 0.9 * n);
  s.cy = rng.uniform(0.1 * n, 0.9 * n);
  // compass heading measured from image north (up), rotating toward west (left)
  s.angle_rad = (-90.0 - angle_deg) * std::numbers::pi / 180.0;
  s.length = rng.uniform(0.4, 0.9) * n;
  s.half_width = kHalfWidthPerDepth * depth;
  s.darkness = kDarknessPerDepth * depth;
  return s;
}

inline ImageSample roof_image(const SynthConfig& cfg, int label, std::size_t index) {
  const std::string id = std::string(label == Hazardous ? "haz_" : "safe_") + std::to_string(100000 + index).substr(1);
  RandomStream rng = keyed_stream(cfg.seed, hash_label("roof"), hash_label(id));
  ImageSample s;
  s.label = label;
  s.source_id = id;
  s.image = value_noise(cfg.image_size, cfg.noise_amplitude, cfg.noise_correlation, rng.split("noise"));
  Mask mask(cfg.image_size, cfg.image_size);
  if (label == Hazardous) {
    RandomStream beams = rng.split("beams");
    const std::uint32_t count = beams.poisson(cfg.beam_count_mean);
    for (std::uint32_t k = 0; k < count; ++k) {
      const double depth = beams.uniform(cfg.depth_lo, cfg.depth_hi);
      const double angle = beams.normal(cfg.principal_orientation_deg, cfg.orientation_sd_deg);
      const Streak st = beam_streak(cfg, beams, depth, angle);
      if (depth <= 0.0) continue;
      draw_streak(s.image, &mask, st);
      ++s.beam_count;
    }
  }
  clamp01(s.image);
  s.beam_mask = std::move(mask);
  return s;
}

}  // namespace synth

/// Hazardous images first (haz_00000, ...), then safe ones (safe_00000, ...).
/// Each image has its own keyed stream, so generation order and workers do not matter.
inline std::vector<ImageSample> generate_synthetic(std::size_t n_hazard, std::size_t n_safe, const SynthConfig& cfg) {
  if (n_hazard == 0 || n_safe == 0) fail(ErrorKind::InvalidConfig, "image counts must be positive");
  cfg.validate();
  std::vector<ImageSample> out(n_hazard + n_safe);
  parallel_for(0, out.size(), [&](std::size_t i) {
    out[i] = i < n_hazard ? synth::roof_image(cfg, Hazardous, i) : synth::roof_image(cfg, NonHazardous, i - n_hazard);
  }, 1);
  return out;
}

/// Four texture families for source-task pretraining: 0 plain texture,
/// 1 dark lines at arbitrary orientation, 2 dark blobs, 3 bright lines.
inline constexpr int kSourceClasses = 4;

inline std::vector<ImageSample> generate_source_task(std::size_t per_class, std::size_t side, const SynthConfig& cfg,
                                                     std::uint64_t seed) {
  if (per_class == 0) fail(ErrorKind::InvalidConfig, "per_class must be positive");
  cfg.validate();
  std::vector<ImageSample> out(per_class * kSourceClasses);
  parallel_for(0, out.size(), [&](std::size_t i) {
    const int cls = static_cast<int>(i % kSourceClasses);
    RandomStream rng = keyed_stream(seed, hash_label("source-task"), i);
    ImageSample s;
    s.label = cls;
    s.source_id = "src_" + std::to_string(i);
    s.image = synth::value_noise(side, cfg.noise_amplitude, cfg.noise_correlation * static_cast<double>(side) /
                                                               static_cast<double>(cfg.image_size), rng.split("noise"));
    const double n = static_cast<double>(side);
    const std::uint32_t count = 1 + rng.poisson(std::max(1.0, cfg.beam_count_mean / 2.0));
    for (std::uint32_t k = 0; k < count && cls != 0; ++k) {
      const double depth = rng.uniform(1.0, 3.0);
      synth::Streak st{};
      st.cx = rng.uniform(0.1 * n, 0.9 * n);
      st.cy = rng.uniform(0.1 * n, 0.9 * n);
      st.angle_rad = rng.uniform(0.0, std::numbers::pi);
      st.half_width = synth::kHalfWidthPerDepth * depth;
      st.darkness = synth::kDarknessPerDepth * depth;
      if (cls == 1) {
        st.length = rng.uniform(0.4, 0.9) * n;
      } else if (cls == 2) {
        st.length = rng.uniform(0.0, 0.06) * n;
        st.half_width *= 3.0;
        st.ledge = -1.0;
      } else {
        st.length = rng.uniform(0.4, 0.9) * n;
        st.darkness = -st.darkness;
        st.ledge = -1.0;
      }
      synth::draw_streak(s.image, nullptr, st);
    }
    synth::clamp01(s.image);
    out[i] = std::move(s);
  }, 1);
  return out;
}

}  // namespace beamsight
