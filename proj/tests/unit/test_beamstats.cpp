#include <gtest/gtest.h>

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <numbers>

#include "beamsight/beamstats.hpp"
#include "beamsight/tdist.hpp"

using namespace beamsight;

namespace {

double boost_cdf(double t, double df) { return boost::math::cdf(boost::math::students_t(df), t); }

double boost_two_sided(double t, double df) {
  return 2.0 * boost::math::cdf(boost::math::complement(boost::math::students_t(df), std::fabs(t)));
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::IOError;
}

}  // namespace

// --- t distribution --------------------------------------------------------

TEST(TDist, ZeroIsHalf) {
  for (double df : {0.5, 1.0, 3.0, 57.0, 1e6}) EXPECT_EQ(t_cdf(0.0, df), 0.5);
}

TEST(TDist, MatchesBoostAcrossGrid) {
  double worst = 0.0;
  for (double df : {0.3, 1.0, 1.5, 2.0, 5.0, 10.0, 30.0, 57.0, 111.3, 1000.0, 1e5}) {
    for (double t = -40.0; t <= 40.0; t += 0.37) worst = std::max(worst, std::fabs(t_cdf(t, df) - boost_cdf(t, df)));
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(TDist, CauchyClosedForm) {
  for (double t : {-30.0, -2.0, -0.1, 0.7, 12.706, 100.0})
    EXPECT_NEAR(t_cdf(t, 1.0), 0.5 + std::atan(t) / std::numbers::pi, 1e-12);
  EXPECT_NEAR(two_sided_p(12.706, 1.0), 0.0500, 1e-4);
}

TEST(TDist, NormalLimit) {
  const double z = 1.95996;
  EXPECT_NEAR(two_sided_p(z, 1e6), std::erfc(z / std::sqrt(2.0)), 1e-5);
  EXPECT_NEAR(two_sided_p(z, 1e6), 0.0500, 1e-4);
}

TEST(TDist, SymmetryAndMonotone) {
  for (double df : {1.0, 4.0, 57.0}) {
    double prev = 0.0;
    for (double t = -20.0; t <= 20.0; t += 0.05) {
      const double c = t_cdf(t, df);
      EXPECT_NEAR(c + t_cdf(-t, df), 1.0, 1e-10);
      EXPECT_GE(c, prev);
      prev = c;
    }
  }
}

TEST(TDist, TwoSidedByConstruction) {
  for (double t : {-3.0, 0.4, 2.28, 4.07}) EXPECT_EQ(two_sided_p(t, 57.0), 2.0 * (1.0 - t_cdf(std::fabs(t), 57.0)));
}

TEST(TDist, TableOnePValues) {
  EXPECT_LT(two_sided_p(4.07, 57.0), 0.001);
  EXPECT_NEAR(two_sided_p(2.28, 57.0), boost_two_sided(2.28, 57.0), 1e-10);
}

TEST(TDist, InvalidDf) {
  EXPECT_EQ(kind_of([] { t_cdf(1.0, 0.0); }), ErrorKind::InvalidDf);
  EXPECT_EQ(kind_of([] { t_cdf(1.0, -3.0); }), ErrorKind::InvalidDf);
  EXPECT_EQ(kind_of([] { t_cdf(1.0, NAN); }), ErrorKind::InvalidDf);
}

TEST(TDist, IncompleteBetaEdges) {
  EXPECT_EQ(incomplete_beta(2.0, 3.0, 0.0), 0.0);
  EXPECT_EQ(incomplete_beta(2.0, 3.0, 1.0), 1.0);
  // I_x(1, 1) = x
  EXPECT_NEAR(incomplete_beta(1.0, 1.0, 0.3), 0.3, 1e-14);
}

// --- tests -------------------------------------------------------------------

TEST(PairedT, IdenticalSamples) {
  const std::vector<double> a{1, 4, 2, 8, 5};
  const auto r = paired_t(a, a);
  EXPECT_EQ(r.t, 0.0);
  EXPECT_EQ(r.p_two_sided, 1.0);
  EXPECT_EQ(r.df, 4.0);
}

TEST(PairedT, ShiftInvariant) {
  const std::vector<double> a{3.1, 4.2, 5.0, 2.2, 7.7, 6.1}, b{2.0, 4.5, 3.3, 1.9, 6.0, 5.2};
  const auto r0 = paired_t(a, b);
  auto a2 = a, b2 = b;
  for (auto& v : a2) v += 1000.0;
  for (auto& v : b2) v += 1000.0;
  const auto r1 = paired_t(a2, b2);
  EXPECT_NEAR(r0.t, r1.t, 1e-9);
  EXPECT_EQ(r0.df, r1.df);
  EXPECT_NEAR(r0.p_two_sided, r1.p_two_sided, 1e-10);
}

TEST(PairedT, ScaleInvariant) {
  const std::vector<double> a{3.1, 4.2, 5.0, 2.2, 7.7}, b{2.0, 4.5, 3.3, 1.9, 6.0};
  auto a2 = a, b2 = b;
  for (auto& v : a2) v *= 7.5;
  for (auto& v : b2) v *= 7.5;
  EXPECT_NEAR(paired_t(a, b).t, paired_t(a2, b2).t, 1e-12);
  EXPECT_NEAR(paired_t(a, b).p_two_sided, paired_t(a2, b2).p_two_sided, 1e-12);
}

TEST(PairedT, HandComputed) {
  // differences 1, 2, 3 -> mean 2, sd 1, t = 2 / (1 / sqrt 3)
  const auto r = paired_t({2, 4, 6}, {1, 2, 3});
  EXPECT_NEAR(r.t, 2.0 * std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(r.p_two_sided, boost_two_sided(r.t, 2.0), 1e-10);
}

TEST(PairedT, Errors) {
  EXPECT_EQ(kind_of([] { paired_t({1, 2, 3}, {1, 2}); }), ErrorKind::LengthMismatch);
  EXPECT_EQ(kind_of([] { paired_t({2, 3, 4}, {1, 2, 3}); }), ErrorKind::ZeroVariance);
}

TEST(WelchT, IdenticalSummaries) {
  const auto r = welch_t(GroupSummary{10, 3.0, 1.5}, GroupSummary{10, 3.0, 1.5});
  EXPECT_EQ(r.t, 0.0);
  EXPECT_EQ(r.p_two_sided, 1.0);
}

TEST(WelchT, Antisymmetric) {
  const GroupSummary a{12, 5.0, 2.0}, b{20, 3.5, 1.1};
  const auto ab = welch_t(a, b), ba = welch_t(b, a);
  EXPECT_EQ(ab.t, -ba.t);
  EXPECT_EQ(ab.df, ba.df);
  EXPECT_EQ(ab.p_two_sided, ba.p_two_sided);
}

TEST(WelchT, TableOneFrequencySummaries) {
  // Reference values from the formulas evaluated in long double.
  const long double va = 3.76L * 3.76L / 58, vb = 3.21L * 3.21L / 58;
  const long double t = (9.76L - 7.05L) / std::sqrt(va + vb);
  const long double df = (va + vb) * (va + vb) / (va * va / 57 + vb * vb / 57);
  const auto r = welch_t(GroupSummary{58, 9.76, 3.76}, GroupSummary{58, 7.05, 3.21});
  EXPECT_NEAR(r.t, static_cast<double>(t), 1e-12);
  EXPECT_NEAR(r.df, static_cast<double>(df), 1e-9);
  EXPECT_NEAR(r.t, 4.17, 0.01);
  EXPECT_NEAR(r.df, 111.3, 0.1);
  EXPECT_LT(r.p_two_sided, 0.001);
  EXPECT_NEAR(r.p_two_sided, boost_two_sided(r.t, r.df), 1e-10);
}

TEST(WelchT, MeanShiftAndScaleInvariant) {
  const GroupSummary a{9, 4.0, 1.0}, b{14, 2.5, 2.0};
  const auto r = welch_t(a, b);
  const auto shifted = welch_t(GroupSummary{9, 104.0, 1.0}, GroupSummary{14, 102.5, 2.0});
  const auto scaled = welch_t(GroupSummary{9, 12.0, 3.0}, GroupSummary{14, 7.5, 6.0});
  EXPECT_NEAR(r.t, shifted.t, 1e-12);
  EXPECT_NEAR(r.t, scaled.t, 1e-12);
  EXPECT_NEAR(r.df, scaled.df, 1e-9);
  EXPECT_NEAR(r.p_two_sided, scaled.p_two_sided, 1e-12);
}

TEST(WelchT, ZeroVariance) {
  EXPECT_EQ(kind_of([] { welch_t(GroupSummary{5, 1.0, 0.0}, GroupSummary{5, 2.0, 0.0}); }), ErrorKind::ZeroVariance);
}

TEST(Summarize, SampleSd) {
  const auto s = summarize({2, 4, 4, 4, 5, 5, 7, 9});
  EXPECT_DOUBLE_EQ(s.mean, 5.0);
  EXPECT_NEAR(s.sd, std::sqrt(32.0 / 7.0), 1e-14);
}

// --- beam maps -------------------------------------------------------------------

TEST(BeamMapIO, EmptyMapIsValid) {
  const auto m = parse_beam_map_text(R"({"beams": [], "falls": [], "controls": []})");
  EXPECT_TRUE(m.beams.empty());
  EXPECT_TRUE(m.falls.empty());
}

TEST(BeamMapIO, NegativeTickRejectedWithPath) {
  try {
    parse_beam_map_text(R"({"beams": [{"points": [[0,0],[1,1]], "depth_ticks": [1.0, -0.5]}], "falls": [], "controls": []})");
    FAIL() << "expected ParseError";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ParseError);
    EXPECT_NE(std::string(e.what()).find("beams[0].depth_ticks[1]"), std::string::npos) << e.what();
  }
}

TEST(BeamMapIO, SyntaxErrorReportsLine) {
  try {
    parse_beam_map_text("{\n  \"beams\": [\n    {\"points\": [[0, 0]] \n  ],\n}");
    FAIL() << "expected ParseError";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ParseError);
    EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos) << e.what();
  }
}

TEST(BeamMapIO, MissingFieldAndBadPoint) {
  EXPECT_EQ(kind_of([] { parse_beam_map_text(R"({"beams": [], "falls": []})"); }), ErrorKind::ParseError);
  EXPECT_EQ(kind_of([] { parse_beam_map_text(R"({"beams": [], "falls": [[1]], "controls": []})"); }),
            ErrorKind::ParseError);
}

TEST(BeamMapIO, RoundTrip) {
  const BeamMap m = planted_beam_map(PlantedMapConfig{}, 7);
  EXPECT_EQ(parse_beam_map_text(beam_map_text(m)), m);
}

TEST(CircleStats, ExampleBeamMapFixture) {
  const BeamMap m = parse_beam_map(BEAMSIGHT_TEST_DATA "/example_beam_map.json");
  ASSERT_EQ(m.falls.size(), 1u);
  const CircleStats s = circle_stats(m, m.falls[0], 9.0);
  EXPECT_EQ(s.frequency, 9u);
  ASSERT_TRUE(s.mean_depth.has_value());
  EXPECT_NEAR(*s.mean_depth, 2.2, 1e-12);
}

TEST(CircleStats, EmptyMap) {
  const CircleStats s = circle_stats(BeamMap{}, {0, 0});
  EXPECT_EQ(s.frequency, 0u);
  EXPECT_FALSE(s.mean_depth.has_value());
}

TEST(CircleStats, TangentBeamCounts) {
  BeamMap m;
  m.beams.push_back({{{-20.0, 9.0}, {20.0, 9.0}}, {1.0}});
  EXPECT_EQ(circle_stats(m, {0, 0}, 9.0).frequency, 1u);
  EXPECT_EQ(circle_stats(m, {0, 0}, 8.999).frequency, 0u);
}

TEST(CircleStats, AgreesWithPointSampling) {
  // Brute force: sample each polyline densely and test sampled points against the disc.
  const BeamMap m = planted_beam_map(PlantedMapConfig{}, 11);
  RandomStream rng = keyed_stream(3, 1);
  for (int trial = 0; trial < 30; ++trial) {
    const Point c{rng.uniform(0, 600), rng.uniform(0, 600)};
    const double r = rng.uniform(3, 25);
    std::size_t brute = 0, near_boundary = 0;
    for (const Beam& b : m.beams) {
      double best = 1e300;
      for (std::size_t i = 0; i + 1 < b.points.size(); ++i) {
        for (int k = 0; k <= 4000; ++k) {
          const double s = k / 4000.0;
          const double x = b.points[i].x + s * (b.points[i + 1].x - b.points[i].x);
          const double y = b.points[i].y + s * (b.points[i + 1].y - b.points[i].y);
          best = std::min(best, std::hypot(x - c.x, y - c.y));
        }
      }
      if (best <= r) ++brute;
      if (std::fabs(best - r) < 0.01) ++near_boundary;
    }
    const std::size_t f = circle_stats(m, c, r).frequency;
    EXPECT_LE(f, brute + near_boundary);
    EXPECT_GE(f + near_boundary, brute);
  }
}

TEST(CircleStats, MonotoneInRadius) {
  const BeamMap m = planted_beam_map(PlantedMapConfig{}, 5);
  for (const Point& p : m.controls) {
    std::size_t prev = 0;
    for (double r = 1.0; r <= 40.0; r += 1.5) {
      const std::size_t f = circle_stats(m, p, r).frequency;
      EXPECT_GE(f, prev);
      prev = f;
    }
  }
}

TEST(SummaryTable, SymmetricFixtureGivesZeroT) {
  BeamMap m = planted_beam_map(PlantedMapConfig{}, 2);
  m.controls = m.falls;
  const auto t = summary_table(m, 9.0, TestKind::welch);
  EXPECT_EQ(t.frequency.t, 0.0);
  EXPECT_EQ(t.depth.t, 0.0);
  const auto p = summary_table(m, 9.0, TestKind::paired);
  EXPECT_EQ(p.frequency.t, 0.0);
  EXPECT_EQ(p.depth.t, 0.0);
}

TEST(SummaryTable, ColumnsAndRows) {
  const auto t = summary_table(planted_beam_map(PlantedMapConfig{}, 9), 9.0, TestKind::welch);
  const std::string tsv = summary_tsv(t);
  std::istringstream in(tsv);
  std::string line;
  std::vector<std::string> labels;
  std::getline(in, line);
  EXPECT_EQ(line, "\tfrequency_fall\tfrequency_control\tdepth_fall\tdepth_control");
  while (std::getline(in, line)) {
    labels.push_back(line.substr(0, line.find('\t')));
    EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 4) << line;
  }
  EXPECT_EQ(labels, (std::vector<std::string>{"Mean", "SD", "df", "t", "P-val"}));
  EXPECT_NE(summary_text(t).find("P-val"), std::string::npos);
}

TEST(SummaryTable, PlantedEffectHasPower) {
  // Monte-Carlo power over independent planted maps.
  int significant = 0;
  const int trials = 60;
  for (int s = 0; s < trials; ++s) {
    const auto t = summary_table(planted_beam_map(PlantedMapConfig{}, 1000 + s), 9.0, TestKind::welch);
    EXPECT_GT(t.frequency.t, 0.0);
    if (t.frequency.p_two_sided < 0.05) ++significant;
  }
  EXPECT_GE(significant, trials * 95 / 100);
}

TEST(SummaryTable, NoEffectControlsFalseAlarms) {
  PlantedMapConfig cfg;
  cfg.beams_per_hotspot = 0;
  int significant = 0;
  const int trials = 200;
  for (int s = 0; s < trials; ++s)
    if (summary_table(planted_beam_map(cfg, 5000 + s), 9.0, TestKind::welch).frequency.p_two_sided < 0.05) ++significant;
  EXPECT_LE(significant, 25);  // nominal 10 of 200
}
