#pragma once

// Beam maps, circle-neighborhood summaries and the two t-tests used to
// compare roof-fall locations against controls.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "beamsight/error.hpp"
#include "beamsight/random.hpp"
#include "beamsight/tdist.hpp"

namespace beamsight {

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

struct Beam {
  std::vector<Point> points;         // meters
  std::vector<double> depth_ticks;   // map units
  friend bool operator==(const Beam&, const Beam&) = default;
};

struct BeamMap {
  std::vector<Beam> beams;
  std::vector<Point> falls;
  std::vector<Point> controls;
  friend bool operator==(const BeamMap&, const BeamMap&) = default;
};

// ---------------------------------------------------------------------------
// Beam-map file IO

namespace detail {

inline std::string line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

[[noreturn]] inline void bad_field(const std::string& where, const std::string& path, const std::string& what) {
  fail(ErrorKind::ParseError, where + ": field " + path + ": " + what);
}

inline double finite_number(const nlohmann::json& j, const std::string& where, const std::string& path) {
  if (!j.is_number()) bad_field(where, path, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) bad_field(where, path, "value is not finite");
  return v;
}

inline Point parse_point(const nlohmann::json& j, const std::string& where, const std::string& path) {
  if (!j.is_array() || j.size() != 2) bad_field(where, path, "expected [x, y]");
  return {finite_number(j[0], where, path + "[0]"), finite_number(j[1], where, path + "[1]")};
}

inline std::vector<Point> parse_points(const nlohmann::json& root, const char* key, const std::string& where) {
  if (!root.contains(key)) bad_field(where, key, "missing");
  const auto& arr = root.at(key);
  if (!arr.is_array()) bad_field(where, key, "expected an array");
  std::vector<Point> out;
  for (std::size_t i = 0; i < arr.size(); ++i)
    out.push_back(parse_point(arr[i], where, std::string(key) + "[" + std::to_string(i) + "]"));
  return out;
}

}  // namespace detail

/// Parses a beam map. Syntax errors report line and column; schema errors
/// report the offending field path.
inline BeamMap parse_beam_map_text(const std::string& text, const std::string& where = "<beam map>") {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::ParseError, where + ": " + detail::line_col(text, e.byte ? e.byte - 1 : 0) + ": malformed document");
  }
  if (!root.is_object()) detail::bad_field(where, "<root>", "expected an object");

  BeamMap map;
  if (!root.contains("beams")) detail::bad_field(where, "beams", "missing");
  const auto& beams = root.at("beams");
  if (!beams.is_array()) detail::bad_field(where, "beams", "expected an array");
  for (std::size_t b = 0; b < beams.size(); ++b) {
    const std::string path = "beams[" + std::to_string(b) + "]";
    const auto& jb = beams[b];
    if (!jb.is_object()) detail::bad_field(where, path, "expected an object");
    Beam beam;
    beam.points = detail::parse_points(jb, "points", where + ": " + path);
    if (beam.points.empty()) detail::bad_field(where, path + ".points", "a beam needs at least one point");
    if (jb.contains("depth_ticks")) {
      const auto& ticks = jb.at("depth_ticks");
      if (!ticks.is_array()) detail::bad_field(where, path + ".depth_ticks", "expected an array");
      for (std::size_t i = 0; i < ticks.size(); ++i) {
        const std::string tp = path + ".depth_ticks[" + std::to_string(i) + "]";
        const double d = detail::finite_number(ticks[i], where, tp);
        if (d < 0) detail::bad_field(where, tp, "depth tick must be >= 0");
        beam.depth_ticks.push_back(d);
      }
    }
    map.beams.push_back(std::move(beam));
  }
  map.falls = detail::parse_points(root, "falls", where);
  map.controls = detail::parse_points(root, "controls", where);
  return map;
}

inline BeamMap parse_beam_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IOError, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_beam_map_text(ss.str(), path.string());
}

inline std::string beam_map_text(const BeamMap& map) {
  auto pts = [](const std::vector<Point>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const Point& p : v) a.push_back({p.x, p.y});
    return a;
  };
  nlohmann::json beams = nlohmann::json::array();
  for (const Beam& b : map.beams) beams.push_back({{"points", pts(b.points)}, {"depth_ticks", b.depth_ticks}});
  const nlohmann::json root = {{"beams", beams}, {"falls", pts(map.falls)}, {"controls", pts(map.controls)}};
  return root.dump(2) + "\n";
}

inline void write_beam_map(const BeamMap& map, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::IOError, "cannot open " + path.string() + " for writing");
  out << beam_map_text(map);
}

// ---------------------------------------------------------------------------
// Geometry

inline double point_segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = 0.0;
  if (len2 > 0) t = std::clamp(((p.x - a.x) * dx + (p.y - a.y) * dy) / len2, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

inline double beam_distance(const Beam& beam, Point p) {
  if (beam.points.size() == 1) return std::hypot(p.x - beam.points[0].x, p.y - beam.points[0].y);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < beam.points.size(); ++i)
    best = std::min(best, point_segment_distance(p, beam.points[i], beam.points[i + 1]));
  return best;
}

struct CircleStats {
  Point center;
  double radius = 0.0;
  std::size_t frequency = 0;
  std::size_t tick_count = 0;
  std::optional<double> mean_depth;  // empty when the counted beams carry no ticks
};

/// Beams whose polyline meets the closed disc, and the mean of their pooled depth ticks.
inline CircleStats circle_stats(const BeamMap& map, Point center, double radius = 9.0) {
  if (!(radius > 0) || !std::isfinite(radius)) fail(ErrorKind::InvalidConfig, "radius must be positive");
  CircleStats s{center, radius};
  double sum = 0.0;
  for (const Beam& b : map.beams) {
    if (beam_distance(b, center) > radius) continue;
    ++s.frequency;
    for (double d : b.depth_ticks) sum += d;
    s.tick_count += b.depth_ticks.size();
  }
  if (s.tick_count) s.mean_depth = sum / static_cast<double>(s.tick_count);
  return s;
}

// ---------------------------------------------------------------------------
// Hypothesis tests

struct GroupSummary {
  std::size_t n = 0;
  double mean = 0.0;
  double sd = 0.0;
};

inline GroupSummary summarize(const std::vector<double>& v) {
  if (v.size() < 2) fail(ErrorKind::TooSmall, "a group summary needs at least 2 values");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {v.size(), mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

enum class TestKind { paired, welch };

inline const char* to_string(TestKind k) { return k == TestKind::paired ? "paired" : "welch"; }

struct TTestResult {
  TestKind kind = TestKind::welch;
  double t = 0.0;
  double df = 0.0;
  double p_two_sided = 1.0;
  GroupSummary a;
  GroupSummary b;
};

/// Paired t on a[i] - b[i]. All-zero differences give t = 0, p = 1.
inline TTestResult paired_t(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    fail(ErrorKind::LengthMismatch, "paired samples differ in length: " + std::to_string(a.size()) + " vs " +
                                        std::to_string(b.size()));
  if (a.size() < 2) fail(ErrorKind::TooSmall, "paired test needs at least 2 pairs");
  std::vector<double> diff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
  const GroupSummary d = summarize(diff);
  TTestResult r{TestKind::paired};
  r.a = summarize(a);
  r.b = summarize(b);
  r.df = static_cast<double>(a.size() - 1);
  if (d.sd == 0.0) {
    if (d.mean != 0.0) fail(ErrorKind::ZeroVariance, "paired differences are constant and nonzero");
    return r;
  }
  r.t = d.mean / (d.sd / std::sqrt(static_cast<double>(d.n)));
  r.p_two_sided = two_sided_p(r.t, r.df);
  return r;
}

/// Welch's unequal-variance t with Satterthwaite degrees of freedom.
inline TTestResult welch_t(const GroupSummary& a, const GroupSummary& b) {
  if (a.n < 2 || b.n < 2) fail(ErrorKind::TooSmall, "each group needs n >= 2");
  if (a.sd < 0 || b.sd < 0 || !std::isfinite(a.mean) || !std::isfinite(b.mean))
    fail(ErrorKind::InvalidConfig, "invalid group summary");
  const double va = a.sd * a.sd / static_cast<double>(a.n);
  const double vb = b.sd * b.sd / static_cast<double>(b.n);
  if (va + vb == 0.0) fail(ErrorKind::ZeroVariance, "both groups have zero variance");
  TTestResult r{TestKind::welch};
  r.a = a;
  r.b = b;
  r.t = (a.mean - b.mean) / std::sqrt(va + vb);
  r.df = (va + vb) * (va + vb) /
         (va * va / static_cast<double>(a.n - 1) + vb * vb / static_cast<double>(b.n - 1));
  r.p_two_sided = two_sided_p(r.t, r.df);
  return r;
}

inline TTestResult welch_t(const std::vector<double>& a, const std::vector<double>& b) {
  return welch_t(summarize(a), summarize(b));
}

// ---------------------------------------------------------------------------
// Fall-versus-control report

struct FeatureSamples {
  std::vector<double> fall;
  std::vector<double> control;
};

struct SummaryTable {
  double radius = 9.0;
  TestKind kind = TestKind::welch;
  TTestResult frequency;
  TTestResult depth;
  std::size_t depth_dropped = 0;  // locations without ticks, excluded from the depth test
};

/// Frequency and mean depth at every fall and control location. For the
/// paired test, falls[i] is paired with controls[i] and a pair is dropped from
/// the depth feature when either side has no ticks.
inline SummaryTable summary_table(const BeamMap& map, double radius, TestKind kind) {
  if (map.falls.empty() || map.controls.empty()) fail(ErrorKind::EmptyDataset, "summary needs falls and controls");
  if (kind == TestKind::paired && map.falls.size() != map.controls.size())
    fail(ErrorKind::LengthMismatch, "paired test needs as many controls as falls");
  std::vector<CircleStats> fs, cs;
  for (Point p : map.falls) fs.push_back(circle_stats(map, p, radius));
  for (Point p : map.controls) cs.push_back(circle_stats(map, p, radius));

  FeatureSamples freq, depth;
  SummaryTable t{radius, kind};
  for (const auto& s : fs) freq.fall.push_back(static_cast<double>(s.frequency));
  for (const auto& s : cs) freq.control.push_back(static_cast<double>(s.frequency));
  if (kind == TestKind::paired) {
    for (std::size_t i = 0; i < fs.size(); ++i) {
      if (!fs[i].mean_depth || !cs[i].mean_depth) {
        ++t.depth_dropped;
        continue;
      }
      depth.fall.push_back(*fs[i].mean_depth);
      depth.control.push_back(*cs[i].mean_depth);
    }
    t.frequency = paired_t(freq.fall, freq.control);
    t.depth = paired_t(depth.fall, depth.control);
  } else {
    for (const auto& s : fs) s.mean_depth ? depth.fall.push_back(*s.mean_depth) : void(++t.depth_dropped);
    for (const auto& s : cs) s.mean_depth ? depth.control.push_back(*s.mean_depth) : void(++t.depth_dropped);
    t.frequency = welch_t(freq.fall, freq.control);
    t.depth = welch_t(depth.fall, depth.control);
  }
  return t;
}

inline std::string format_p(double p) {
  if (p < 0.001) return "<.001";
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << p;
  return os.str();
}

namespace detail {

inline std::string num(double v, int prec) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

inline std::vector<std::vector<std::string>> table_cells(const SummaryTable& t, bool exact) {
  const int prec = exact ? 6 : 2;
  auto row = [&](const char* label, auto fa, auto fb) {
    return std::vector<std::string>{label, fa(t.frequency), fb(t.frequency), fa(t.depth), fb(t.depth)};
  };
  auto blank = [](const TTestResult&) { return std::string(); };
  return {
      {"", "frequency_fall", "frequency_control", "depth_fall", "depth_control"},
      row("Mean", [&](const TTestResult& r) { return num(r.a.mean, prec); },
          [&](const TTestResult& r) { return num(r.b.mean, prec); }),
      row("SD", [&](const TTestResult& r) { return num(r.a.sd, prec); },
          [&](const TTestResult& r) { return num(r.b.sd, prec); }),
      row("df", [&](const TTestResult& r) { return num(r.df, r.kind == TestKind::paired ? 0 : prec); }, blank),
      row("t", [&](const TTestResult& r) { return num(r.t, prec); }, blank),
      row("P-val",
          [&](const TTestResult& r) { return exact ? num(r.p_two_sided, 8) : format_p(r.p_two_sided); }, blank),
  };
}

}  // namespace detail

/// Rows Mean, SD, df, t, P-val; columns frequency/depth by fall/control.
inline std::string summary_tsv(const SummaryTable& t) {
  std::string out;
  for (const auto& row : detail::table_cells(t, true)) {
    for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "\t" : "") + row[i];
    out += '\n';
  }
  return out;
}

inline std::string summary_text(const SummaryTable& t) {
  const auto cells = detail::table_cells(t, false);
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& row : cells)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  std::ostringstream os;
  os << to_string(t.kind) << " t-test, radius " << t.radius << " m\n";
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      os << (i ? "  " : "");
      if (i == 0)
        os << std::left << std::setw(static_cast<int>(width[i])) << row[i];
      else
        os << std::right << std::setw(static_cast<int>(width[i])) << row[i];
    }
    os << '\n';
  }
  if (t.depth_dropped) os << "depth: " << t.depth_dropped << " location(s) without ticks excluded\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Synthetic maps with a planted effect

struct PlantedMapConfig {
  double extent = 600.0;             // square side, meters
  std::size_t locations = 40;        // falls and controls each
  std::size_t background_beams = 500;
  std::size_t beams_per_hotspot = 6; // extra beams clustered around each fall
  double hotspot_spread = 6.0;       // meters, sd of the cluster
  double orientation_deg = 35.0;
  double beam_length = 14.0;
};

/// Background beams are uniform over the map; every fall sits in a hotspot
/// with extra beams, controls are uniform. Frequency differs by construction.
inline BeamMap planted_beam_map(const PlantedMapConfig& cfg, std::uint64_t seed) {
  RandomStream rng = keyed_stream(seed, hash_label("planted-map"));
  BeamMap map;
  auto add_beam = [&](Point mid) {
    const double theta = (90.0 + cfg.orientation_deg + rng.normal() * 10.0) * std::numbers::pi / 180.0;
    const double half = 0.5 * cfg.beam_length * rng.uniform(0.5, 1.5);
    const Point a{mid.x - half * std::cos(theta), mid.y - half * std::sin(theta)};
    const Point b{mid.x + half * std::cos(theta), mid.y + half * std::sin(theta)};
    Beam beam{{a, b}, {}};
    const std::size_t ticks = 1 + rng.below(3);
    for (std::size_t i = 0; i < ticks; ++i) beam.depth_ticks.push_back(rng.uniform(0.5, 2.5));
    map.beams.push_back(std::move(beam));
  };
  for (std::size_t i = 0; i < cfg.background_beams; ++i)
    add_beam({rng.uniform(0.0, cfg.extent), rng.uniform(0.0, cfg.extent)});
  for (std::size_t i = 0; i < cfg.locations; ++i) {
    const Point fall{rng.uniform(0.1, 0.9) * cfg.extent, rng.uniform(0.1, 0.9) * cfg.extent};
    map.falls.push_back(fall);
    for (std::size_t k = 0; k < cfg.beams_per_hotspot; ++k)
      add_beam({fall.x + rng.normal() * cfg.hotspot_spread, fall.y + rng.normal() * cfg.hotspot_spread});
  }
  for (std::size_t i = 0; i < cfg.locations; ++i)
    map.controls.push_back({rng.uniform(0.1, 0.9) * cfg.extent, rng.uniform(0.1, 0.9) * cfg.extent});
  return map;
}

}  // namespace beamsight
