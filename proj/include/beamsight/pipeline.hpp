#pragma once

// Stage glue shared by the CLI and the acceptance runner: corpus -> tiles ->
// model-sized samples -> split, the source task, and per-image attribution.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "beamsight/attribution.hpp"
#include "beamsight/config.hpp"
#include "beamsight/dataset.hpp"
#include "beamsight/parallel.hpp"
#include "beamsight/synth.hpp"
#include "beamsight/trainer.hpp"

namespace beamsight {

/// Keeps freed activation buffers in the heap instead of returning them to the
/// kernel after every step; without this glibc re-faults multi-megabyte blocks
/// on each forward pass.
inline void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

inline void apply_worker_policy(const RunConfig& c) {
  set_workers(c.workers == 0 ? std::max(1u, std::thread::hardware_concurrency()) : c.workers);
}

/// Tiles every photograph and resamples the tiles to the model input side.
inline std::vector<ImageSample> model_tiles(const std::vector<ImageSample>& photos, std::size_t side) {
  std::vector<ImageSample> tiles = tile_all(photos);
  parallel_for(0, tiles.size(), [&](std::size_t i) { tiles[i] = resize_sample(tiles[i], side); });
  return tiles;
}

inline Split target_split(const std::vector<ImageSample>& photos, const RunConfig& c) {
  return split(model_tiles(photos, c.model.input_size), c.split);
}

inline std::vector<ImageSample> source_task(const RunConfig& c) {
  return generate_source_task(c.source.per_class, c.model.input_size, c.synth,
                              keyed_stream(c.seed, hash_label("source-task")).next_u64());
}

inline TransferOptions transfer_options(const RunConfig& c) {
  TransferOptions o;
  o.model = c.model;
  o.seed = c.seed;
  o.source_hparams = c.source.hparams;
  o.target_hparams = c.hparams;
  return o;
}

/// Placeholder photographs for count-only runs: 2x2 pixels so each tiles into four.
inline std::vector<ImageSample> manifest_placeholders(const std::vector<ManifestRow>& rows) {
  std::vector<ImageSample> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    ImageSample s;
    s.image = Image(2, 2, 1, 0.5f);
    s.label = r.label;
    s.source_id = r.source_id;
    out.push_back(std::move(s));
  }
  return out;
}

struct AttributionRecord {
  std::string key;
  int label = 0;
  std::size_t predicted = 0;
  std::size_t target = 0;
  double f_x = 0.0;
  double f_baseline = 0.0;
  double residual = 0.0;
  double relative_residual = 0.0;  // residual / max(|F_x - F_baseline|, 1e-8)
  bool complete = false;
  std::optional<double> alignment;
  std::optional<double> mask_area;
};

inline AttributionRecord attribution_record(const AttributionMap& map, const ImageSample& s, std::size_t predicted,
                                     const AttributionConfig& a) {
  AttributionRecord r;
  r.key = s.key();
  r.label = s.label;
  r.predicted = predicted;
  r.target = map.target;
  r.f_x = map.f_x;
  r.f_baseline = map.f_baseline;
  r.residual = map.completeness_residual;
  r.relative_residual = map.completeness_residual / std::max(std::fabs(map.f_x - map.f_baseline), 1e-8);
  r.complete = completeness_check(map, a.tolerance);
  if (s.beam_mask) {
    r.alignment = beam_alignment_score(map, s.beam_mask, a.dilation);
    r.mask_area = mask_area_fraction(*s.beam_mask, a.dilation);
  }
  return r;
}

inline std::string attribution_tsv_header() {
  return "key\tlabel\tpredicted\ttarget\tf_x\tf_baseline\tresidual\trelative_residual\tcomplete\talignment\tmask_area\n";
}

inline std::string attribution_tsv_row(const AttributionRecord& r) {
  auto g = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  std::string line = r.key + '\t' + label_name(r.label) + '\t' + std::to_string(r.predicted) + '\t' +
                     std::to_string(r.target) + '\t' + g(r.f_x) + '\t' + g(r.f_baseline) + '\t' + g(r.residual) + '\t' +
                     g(r.relative_residual) + '\t' + (r.complete ? "1" : "0") + '\t' +
                     (r.alignment ? g(*r.alignment) : "") + '\t' + (r.mask_area ? g(*r.mask_area) : "") + '\n';
  return line;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

}  // namespace beamsight
