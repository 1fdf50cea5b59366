#pragma once

// Labelled samples, quadrant tiling, training-time augmentation, grouped
// stratified splitting and the on-disk corpus layout.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "beamsight/error.hpp"
#include "beamsight/image.hpp"
#include "beamsight/random.hpp"
#include "beamsight/tensor.hpp"

namespace beamsight {

enum Label : int { Hazardous = 0, NonHazardous = 1 };

inline const char* label_name(int label) {
  switch (label) {
    case Hazardous: return "hazard";
    case NonHazardous: return "nonhazard";
  }
  return "class";
}

inline int parse_label(const std::string& s) {
  if (s == "hazard" || s == "hazardous" || s == "0") return Hazardous;
  if (s == "nonhazard" || s == "nonhazardous" || s == "safe" || s == "1") return NonHazardous;
  fail(ErrorKind::ParseError, "unknown label '" + s + "'");
}

/// Binary H x W mask, 1 on beam pixels.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}
  std::uint8_t& at(std::size_t y, std::size_t x) { return bits[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return bits[y * width + x]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
  friend bool operator==(const Mask&, const Mask&) = default;
};

struct ImageSample {
  Image image;
  int label = Hazardous;
  std::string source_id;
  std::optional<int> tile_index;
  std::optional<Mask> beam_mask;  // synthetic samples only
  std::size_t beam_count = 0;     // streaks drawn by the generator

  std::string key() const { return tile_index ? source_id + "#" + std::to_string(*tile_index) : source_id; }
};

// ---------------------------------------------------------------------------
// Tiling

/// Four quadrants of floor(H/2) x floor(W/2), row-major; an odd trailing row or column is dropped.
inline std::vector<ImageSample> tile4(const ImageSample& s) {
  const Image& img = s.image;
  if (img.height < 2 || img.width < 2) fail(ErrorKind::TooSmall, "tile4 needs at least 2x2 pixels");
  const std::size_t th = img.height / 2, tw = img.width / 2, c = img.channels;
  std::vector<ImageSample> out;
  for (int t = 0; t < 4; ++t) {
    const std::size_t oy = (t / 2) * th, ox = (t % 2) * tw;
    ImageSample tile;
    tile.label = s.label;
    tile.source_id = s.source_id;
    tile.tile_index = t;
    tile.image = Image(th, tw, c);
    for (std::size_t y = 0; y < th; ++y)
      std::copy_n(&img.pixels[((oy + y) * img.width + ox) * c], tw * c, &tile.image.pixels[y * tw * c]);
    if (s.beam_mask) {
      Mask m(th, tw);
      for (std::size_t y = 0; y < th; ++y)
        for (std::size_t x = 0; x < tw; ++x) m.at(y, x) = s.beam_mask->at(oy + y, ox + x);
      tile.beam_mask = std::move(m);
    }
    out.push_back(std::move(tile));
  }
  return out;
}

inline std::vector<ImageSample> tile_all(const std::vector<ImageSample>& samples) {
  std::vector<ImageSample> out;
  out.reserve(samples.size() * 4);
  for (const auto& s : samples)
    for (auto& t : tile4(s)) out.push_back(std::move(t));
  return out;
}

inline ImageSample resize_sample(const ImageSample& s, std::size_t side) {
  if (s.image.height == side && s.image.width == side) return s;
  ImageSample out = s;
  out.image = resize(s.image, side);
  if (s.beam_mask) {
    Mask m(side, side);
    const double sy = static_cast<double>(s.beam_mask->height) / side, sx = static_cast<double>(s.beam_mask->width) / side;
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x)
        m.at(y, x) = s.beam_mask->at(std::min(s.beam_mask->height - 1, static_cast<std::size_t>((y + 0.5) * sy)),
                                     std::min(s.beam_mask->width - 1, static_cast<std::size_t>((x + 0.5) * sx)));
    out.beam_mask = std::move(m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentParams {
  double angle_deg = 0.0;
  bool flip = false;
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;

  static AugmentParams draw(RandomStream& rng) {
    AugmentParams p;
    p.angle_deg = rng.uniform(0.0, 15.0);
    p.flip = rng.bernoulli(0.5);
    p.brightness = rng.uniform(0.8, 1.2);
    p.contrast = rng.uniform(0.8, 1.2);
    p.saturation = rng.uniform(0.8, 1.2);
    return p;
  }
};

/// Stream for one sample in one epoch; independent of worker count and visiting order.
inline RandomStream augment_stream(std::uint64_t seed, std::uint64_t epoch, const ImageSample& s) {
  return keyed_stream(seed, hash_label("augment"), epoch, hash_label(s.key()));
}

namespace detail {

// Bilinear sample where out-of-range neighbours read as black.
inline float sample_black(const Image& img, double y, double x, std::size_t c) {
  const double fy0 = std::floor(y), fx0 = std::floor(x);
  const double fy = y - fy0, fx = x - fx0;
  const long y0 = static_cast<long>(fy0), x0 = static_cast<long>(fx0);
  auto px = [&](long yy, long xx) -> double {
    if (yy < 0 || xx < 0 || yy >= static_cast<long>(img.height) || xx >= static_cast<long>(img.width)) return 0.0;
    return img.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), c);
  };
  const double top = px(y0, x0) * (1 - fx) + px(y0, x0 + 1) * fx;
  const double bot = px(y0 + 1, x0) * (1 - fx) + px(y0 + 1, x0 + 1) * fx;
  return static_cast<float>(top * (1 - fy) + bot * fy);
}

}  // namespace detail

/// Rotation (counter-clockwise about the centre, bilinear, black fill), then
/// horizontal flip, brightness, contrast and saturation, then clamp to [0,1].
inline ImageSample apply_augment(const ImageSample& s, const AugmentParams& p) {
  ImageSample out = s;
  const Image& src = s.image;
  const std::size_t H = src.height, W = src.width, C = src.channels;
  const double cy = 0.5 * static_cast<double>(H - 1), cx = 0.5 * static_cast<double>(W - 1);
  const double th = p.angle_deg * std::numbers::pi / 180.0, cs = std::cos(th), sn = std::sin(th);

  auto source_of = [&](std::size_t y, std::size_t x) {
    double xx = p.flip ? static_cast<double>(W - 1 - x) : static_cast<double>(x);
    const double dx = xx - cx, dy = static_cast<double>(y) - cy;
    // inverse rotation of the output coordinate (image y axis points down)
    return std::pair<double, double>{cy - sn * dx + cs * dy, cx + cs * dx + sn * dy};
  };

  if (p.angle_deg != 0.0 || p.flip) {
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const auto [sy, sx] = source_of(y, x);
        for (std::size_t c = 0; c < C; ++c)
          out.image.at(y, x, c) = p.angle_deg == 0.0 ? src.at(y, static_cast<std::size_t>(sx), c)
                                                     : detail::sample_black(src, sy, sx, c);
      }
    if (s.beam_mask) {
      Mask m(H, W);
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const auto [sy, sx] = source_of(y, x);
          const long ry = std::lround(sy), rx = std::lround(sx);
          if (ry >= 0 && rx >= 0 && ry < static_cast<long>(H) && rx < static_cast<long>(W))
            m.at(y, x) = s.beam_mask->at(static_cast<std::size_t>(ry), static_cast<std::size_t>(rx));
        }
      out.beam_mask = std::move(m);
    }
  }

  Image& img = out.image;
  if (p.brightness != 1.0)
    for (float& v : img.pixels) v = static_cast<float>(v * p.brightness);
  if (p.contrast != 1.0) {
    double mean = 0.0;
    for (float v : to_gray(img).pixels) mean += v;
    mean /= static_cast<double>(H * W);
    for (float& v : img.pixels) v = static_cast<float>((v - mean) * p.contrast + mean);
  }
  if (p.saturation != 1.0 && C == 3) {
    const Image gray = to_gray(img);
    for (std::size_t i = 0; i < H * W; ++i)
      for (std::size_t c = 0; c < 3; ++c) {
        float& v = img.pixels[i * 3 + c];
        v = static_cast<float>(gray.pixels[i] + (v - gray.pixels[i]) * p.saturation);
      }
  }
  for (float& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

inline ImageSample augment(const ImageSample& s, RandomStream& rng) { return apply_augment(s, AugmentParams::draw(rng)); }

// ---------------------------------------------------------------------------
// Splitting

struct SplitSpec {
  double val_fraction = 0.20;
  std::uint64_t seed = 0;
  bool stratify_by_label = true;
  bool group_by_source = true;
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Validation gets floor(val_fraction * n) samples per label (or overall when
/// not stratified). With grouping, whole source groups are moved to the
/// validation side in seeded order while they fit under that target.
inline SplitIndices split_indices(const std::vector<ImageSample>& samples, const SplitSpec& spec) {
  if (!(spec.val_fraction > 0.0 && spec.val_fraction < 1.0))
    fail(ErrorKind::InvalidConfig, "val_fraction must be in (0, 1)");
  if (samples.empty()) fail(ErrorKind::EmptyDataset, "nothing to split");

  std::map<int, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < samples.size(); ++i) strata[spec.stratify_by_label ? samples[i].label : 0].push_back(i);

  std::vector<bool> in_val(samples.size(), false);
  for (const auto& [label, members] : strata) {
    const auto target = static_cast<std::size_t>(std::floor(spec.val_fraction * static_cast<double>(members.size()) + 1e-9));
    std::vector<std::vector<std::size_t>> groups;
    if (spec.group_by_source) {
      std::map<std::string, std::size_t> slot;
      for (std::size_t i : members) {
        auto [it, fresh] = slot.try_emplace(samples[i].source_id, groups.size());
        if (fresh) groups.emplace_back();
        groups[it->second].push_back(i);
      }
      if (groups.size() < 2)
        fail(ErrorKind::InsufficientGroups, std::string("label ") + label_name(label) + " has fewer than 2 source groups");
    } else {
      for (std::size_t i : members) groups.push_back({i});
    }
    RandomStream rng = keyed_stream(spec.seed, hash_label("split"), static_cast<std::uint64_t>(label));
    for (std::size_t i = groups.size(); i > 1; --i) std::swap(groups[i - 1], groups[rng.below(i)]);
    std::size_t taken = 0;
    for (const auto& g : groups) {
      if (taken + g.size() > target) continue;
      for (std::size_t i : g) in_val[i] = true;
      taken += g.size();
      if (taken == target) break;
    }
  }
  SplitIndices out;
  for (std::size_t i = 0; i < samples.size(); ++i) (in_val[i] ? out.val : out.train).push_back(i);
  return out;
}

struct Split {
  std::vector<ImageSample> train;
  std::vector<ImageSample> val;
};

inline Split split(const std::vector<ImageSample>& samples, const SplitSpec& spec) {
  const SplitIndices idx = split_indices(samples, spec);
  Split out;
  for (std::size_t i : idx.train) out.train.push_back(samples[i]);
  for (std::size_t i : idx.val) out.val.push_back(samples[i]);
  return out;
}

inline std::map<int, std::size_t> label_counts(const std::vector<ImageSample>& samples) {
  std::map<int, std::size_t> c;
  for (const auto& s : samples) ++c[s.label];
  return c;
}

// ---------------------------------------------------------------------------
// Batching

/// Stacks grayscale samples into an N x 1 x H x W tensor.
template <typename T = float>
Tensor<T> to_batch(const std::vector<const ImageSample*>& samples) {
  if (samples.empty()) fail(ErrorKind::EmptyDataset, "empty batch");
  const std::size_t H = samples[0]->image.height, W = samples[0]->image.width;
  Tensor<T> out({samples.size(), 1, H, W}, uninitialized);
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const Image& img = samples[n]->image;
    if (img.height != H || img.width != W || img.channels != 1)
      fail(ErrorKind::ShapeMismatch, "batch images must share a single-channel size");
    std::copy(img.pixels.begin(), img.pixels.end(), out.data() + n * H * W);
  }
  return out;
}

template <typename T = float>
Tensor<T> to_batch(const ImageSample& s) {
  return to_batch<T>(std::vector<const ImageSample*>{&s});
}

// ---------------------------------------------------------------------------
// Corpus directory layout: <root>/hazard, <root>/nonhazard, <root>/masks, manifest.tsv

inline Image mask_image(const Mask& m) {
  Image img(m.height, m.width, 1);
  for (std::size_t i = 0; i < m.bits.size(); ++i) img.pixels[i] = m.bits[i] ? 1.0f : 0.0f;
  return img;
}

inline Mask mask_from_image(const Image& img) {
  const Image g = to_gray(img);
  Mask m(g.height, g.width);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) m.bits[i] = g.pixels[i] >= 0.5f ? 1 : 0;
  return m;
}

inline std::vector<ImageSample> load_corpus(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) fail(ErrorKind::IOError, "corpus root " + root.string() + " is not a directory");
  std::vector<ImageSample> out;
  for (int label : {Hazardous, NonHazardous}) {
    const fs::path dir = root / label_name(label);
    if (!fs::is_directory(dir)) continue;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      const auto ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".png" || ext == ".pgm")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      ImageSample s;
      s.image = load_image_file(f);
      s.label = label;
      s.source_id = f.stem().string();
      const fs::path mask = root / "masks" / (s.source_id + ".png");
      if (fs::exists(mask)) s.beam_mask = mask_from_image(load_image_file(mask));
      out.push_back(std::move(s));
    }
  }
  if (out.empty()) fail(ErrorKind::EmptyDataset, "no images under " + root.string());
  return out;
}

struct ManifestRow {
  std::string source_id;
  int label = Hazardous;
  std::map<std::string, std::string> fields;  // remaining columns by header name
};

inline std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IOError, "cannot open " + path.string());
  std::string line;
  std::vector<std::string> header;
  std::vector<ManifestRow> rows;
  std::size_t lineno = 0;
  auto split_tabs = [](const std::string& l) {
    std::vector<std::string> cols;
    std::stringstream ss(l);
    std::string c;
    while (std::getline(ss, c, '\t')) cols.push_back(c);
    return cols;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto cols = split_tabs(line);
    if (header.empty()) {
      header = cols;
      if (header.size() < 2 || header[0] != "source_id" || header[1] != "label")
        fail(ErrorKind::ParseError, path.string() + ":" + std::to_string(lineno) + ": header must start with source_id, label");
      continue;
    }
    if (cols.size() != header.size())
      fail(ErrorKind::ParseError, path.string() + ":" + std::to_string(lineno) + ": expected " +
                                      std::to_string(header.size()) + " columns");
    ManifestRow r;
    r.source_id = cols[0];
    try {
      r.label = parse_label(cols[1]);
    } catch (const Error& e) {
      fail(ErrorKind::ParseError, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    for (std::size_t i = 2; i < cols.size(); ++i) r.fields[header[i]] = cols[i];
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<std::string>& extra_columns,
                           const std::vector<ManifestRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::IOError, "cannot open " + path.string() + " for writing");
  out << "source_id\tlabel";
  for (const auto& c : extra_columns) out << '\t' << c;
  out << '\n';
  for (const auto& r : rows) {
    out << r.source_id << '\t' << label_name(r.label);
    for (const auto& c : extra_columns) out << '\t' << (r.fields.count(c) ? r.fields.at(c) : "");
    out << '\n';
  }
}

}  // namespace beamsight
