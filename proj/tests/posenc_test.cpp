#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "rgbdseg/posenc.hpp"
#include "rgbdseg/rng.hpp"
#include "testutil.hpp"

using namespace rgbdseg;
using testutil::expect_bitwise_equal;
using testutil::expect_near_all;

namespace {

// Independent evaluation of the same formula: plain powl instead of the
// exp2/log2 path, natural (unsorted) summation order, all in extended
// precision.
std::vector<double> oracle_pe(const std::vector<double>& coords, int C, double I) {
  std::vector<double> out(static_cast<std::size_t>(C), 0.0);
  for (int c = 0; c < C; ++c) {
    long double s = 0.0L;
    for (double coord : coords) {
      const long double freq = std::pow(static_cast<long double>(I),
                                        static_cast<long double>(c) / static_cast<long double>(C));
      const long double arg =
          static_cast<long double>(coord) * std::numbers::pi_v<long double> * freq;
      s += (c % 2 == 0) ? std::sin(arg) : std::cos(arg);
    }
    out[static_cast<std::size_t>(c)] = static_cast<double>(s);
  }
  return out;
}

}  // namespace

TEST(Pe1d, ZeroCoordinate) {
  expect_near_all(pe1d(0.0, {4, 512.0}), {0, 1, 0, 1}, 0);
}

TEST(Pe1d, HalfCoordinateChannelZeroIsExactlyOne) {
  const auto v = pe1d(0.5, {4, 512.0});
  EXPECT_EQ(v[0], 1.0);  // sin(pi/2) with unit frequency
}

TEST(Pe1d, FrozenHighPrecisionValues) {
  // Reference values computed with a 50-digit arbitrary-precision evaluation.
  expect_near_all(pe1d(0.5, {4, 512.0}),
                  {1.0, 0.37275196615331779808, -0.83357289908696447943, 0.83987292950165273214},
                  1e-12);
  expect_near_all(pe1d(0.25, {8, 512.0}),
                  {0.70710678118654752440, -0.14169077506944296721, -0.56002144327100645491,
                   -0.29007155016597530464, -0.88102482071238928664, 0.48810967297246379749,
                   0.28295500569732572577, -0.55755065249487253872},
                  1e-12);
}

TEST(Pe1d, RangeAndDomain) {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const double i = rng.uniform();
    for (double x : pe1d(i, {16, 512.0})) {
      EXPECT_GE(x, -1.0);
      EXPECT_LE(x, 1.0);
    }
  }
  EXPECT_THROW(pe1d(-0.001, {4, 512.0}), std::domain_error);
  EXPECT_THROW(pe1d(1.001, {4, 512.0}), std::domain_error);
  EXPECT_THROW(pe1d(std::nan(""), {4, 512.0}), std::domain_error);
}

TEST(Pe1d, SpecValidation) {
  EXPECT_THROW(pe1d(0.5, {3, 512.0}), std::invalid_argument);   // odd channels
  EXPECT_THROW(pe1d(0.5, {0, 512.0}), std::invalid_argument);
  EXPECT_THROW(pe1d(0.5, {4, 1.0}), std::invalid_argument);     // log2(scale) must be positive
  EXPECT_THROW(pe1d(0.5, {4, -2.0}), std::invalid_argument);
}

TEST(Pe1d, MatchesOracleOnRandomTriples) {
  Rng rng(17);
  for (int t = 0; t < 1000; ++t) {
    const double i = rng.uniform();
    const int C = 2 * static_cast<int>(rng.uniform_int(1, 64));
    const double I = rng.uniform(2.0, 512.0);
    expect_near_all(pe1d(i, {C, I}), oracle_pe({i}, C, I), 1e-12);
  }
}

TEST(Pe1d, FrequencyStaysBelowScaleLimit) {
  for (const double I : {2.0, 512.0, 65535.0}) {
    const int C = 32;
    const double top_freq = std::exp2(std::log2(I) * (C - 1) / C);
    EXPECT_LT(top_freq, I);
    EXPECT_GT(top_freq, I / 2.0);  // the sweep really approaches the limit
  }
}

TEST(Pe1d, InjectiveOnUniformGrid) {
  const PeSpec spec{16, 512.0};
  const int n = 512;
  std::vector<std::vector<double>> enc;
  enc.reserve(n);
  for (int k = 0; k < n; ++k) enc.push_back(pe1d(static_cast<double>(k) / (n - 1), spec));
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b) {
      ASSERT_NE(enc[static_cast<std::size_t>(a)], enc[static_cast<std::size_t>(b)])
          << "positions " << a << " and " << b << " collide";
    }
}

TEST(Pe2d, CompositionAndSymmetry) {
  expect_near_all(pe2d(0.0, 0.0, {4, 512.0}), {0, 2, 0, 2}, 0);
  Rng rng(23);
  for (int t = 0; t < 50; ++t) {
    const double a = rng.uniform(), b = rng.uniform();
    expect_bitwise_equal(pe2d(a, b, {16, 512.0}), pe2d(b, a, {16, 512.0}));
  }
  expect_near_all(pe2d(0.25, 0.75, {64, 512.0}), oracle_pe({0.25, 0.75}, 64, 512.0), 1e-12);
}

TEST(Pe3d, FrozenHighPrecisionValues) {
  const auto v = pe3d(0.2, 0.7, 0.4, {32, 512.0});
  EXPECT_NEAR(v[0], 2.3478587629625741254, 1e-12);
  EXPECT_NEAR(v[1], -0.12592986300427485753, 1e-12);
  EXPECT_NEAR(v[7], -1.2557685325994838259, 1e-12);
  EXPECT_NEAR(v[16], 0.35338657735462896341, 1e-12);
  EXPECT_NEAR(v[31], -0.36930352744357497462, 1e-12);
}

TEST(Pe3d, AdditiveDecompositionAndRange) {
  Rng rng(31);
  const PeSpec spec{16, 512.0};
  for (int t = 0; t < 50; ++t) {
    const double u = rng.uniform(), v = rng.uniform();
    const auto lhs = pe3d(u, v, 0.0, spec);
    auto rhs = pe2d(u, v, spec);
    const auto zero = pe1d(0.0, spec);
    for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] += zero[i];
    expect_near_all(lhs, rhs, 1e-12);
    for (double x : lhs) {
      EXPECT_GE(x, -3.0);
      EXPECT_LE(x, 3.0);
    }
  }
}

TEST(Pe3d, PermutationSymmetryIsBitwise) {
  Rng rng(37);
  const PeSpec spec{32, 512.0};
  for (int t = 0; t < 100; ++t) {
    const double u = rng.uniform(), v = rng.uniform(), d = rng.uniform();
    const auto base = pe3d(u, v, d, spec);
    expect_bitwise_equal(base, pe3d(u, d, v, spec));
    expect_bitwise_equal(base, pe3d(v, u, d, spec));
    expect_bitwise_equal(base, pe3d(v, d, u, spec));
    expect_bitwise_equal(base, pe3d(d, u, v, spec));
    expect_bitwise_equal(base, pe3d(d, v, u, spec));
  }
}

TEST(Pe3d, MatchesOracleOnRandomTriples) {
  Rng rng(41);
  for (int t = 0; t < 1000; ++t) {
    const double u = rng.uniform(), v = rng.uniform(), d = rng.uniform();
    const int C = 2 * static_cast<int>(rng.uniform_int(1, 32));
    const double I = rng.uniform(2.0, 512.0);
    expect_near_all(pe3d(u, v, d, {C, I}), oracle_pe({u, v, d}, C, I), 1e-12);
  }
}

TEST(Coords, GridCentresAndValidation) {
  const TokenCoords tc = grid_coords(2, 4);
  ASSERT_EQ(tc.size(), 8u);
  EXPECT_EQ(tc.u[0], 0.125);
  EXPECT_EQ(tc.v[0], 0.25);
  EXPECT_EQ(tc.u[7], 0.875);
  EXPECT_EQ(tc.v[7], 0.75);
  EXPECT_EQ(tc.d[3], 0.0);
  EXPECT_THROW(grid_coords(0, 4), std::invalid_argument);
}

TEST(PeMatrix, RowsMatchPointEvaluations) {
  TokenCoords tc = grid_coords(3, 3);
  Rng rng(43);
  for (double& d : tc.d) d = rng.uniform();
  const PeSpec spec{8, 512.0};

  const Tensor m2 = pe_matrix(tc, spec, PeMode::two_d);
  const Tensor m3 = pe_matrix(tc, spec, PeMode::three_d);
  const Tensor m0 = pe_matrix(tc, spec, PeMode::none);
  ASSERT_EQ(m2.shape(), (Shape{9, 8}));
  for (int t = 0; t < 9; ++t) {
    const auto want2 = pe2d(tc.u[static_cast<std::size_t>(t)], tc.v[static_cast<std::size_t>(t)], spec);
    const auto want3 = pe3d(tc.u[static_cast<std::size_t>(t)], tc.v[static_cast<std::size_t>(t)],
                            tc.d[static_cast<std::size_t>(t)], spec);
    for (int c = 0; c < 8; ++c) {
      EXPECT_EQ(m2.at({t, c}), want2[static_cast<std::size_t>(c)]);
      EXPECT_EQ(m3.at({t, c}), want3[static_cast<std::size_t>(c)]);
      EXPECT_EQ(m0.at({t, c}), 0.0);
    }
  }
}

TEST(PeTable, ShapeAndFirstRow) {
  const Tensor t = pe_table(4, {6, 512.0});
  ASSERT_EQ(t.shape(), (Shape{4, 6}));
  const auto want = pe1d(0.125, {6, 512.0});
  for (int c = 0; c < 6; ++c) EXPECT_EQ(t.at({0, c}), want[static_cast<std::size_t>(c)]);
}

TEST(SimilarityMap, SelfSimilarityAndBounds) {
  TokenCoords tc = grid_coords(8, 8);
  const Tensor m = pe_matrix(tc, {16, 512.0}, PeMode::two_d);
  const auto sim = similarity_map(m, 27);
  ASSERT_EQ(sim.size(), 64u);
  EXPECT_DOUBLE_EQ(sim[27], 1.0);
  for (double s : sim) {
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
  }
  EXPECT_THROW(similarity_map(m, 64), std::invalid_argument);
  EXPECT_THROW(similarity_map(m, -1), std::invalid_argument);
}

TEST(SimilarityMap, ZeroRowsScoreZero) {
  Tensor m = Tensor::from_data({3, 2}, {1, 0, 0, 0, 0, 1});
  const auto sim = similarity_map(m, 0);
  EXPECT_DOUBLE_EQ(sim[0], 1.0);
  EXPECT_DOUBLE_EQ(sim[1], 0.0);
  EXPECT_DOUBLE_EQ(sim[2], 0.0);
  const auto from_zero = similarity_map(m, 1);
  for (double s : from_zero) EXPECT_DOUBLE_EQ(s, 0.0);
}

TEST(SimilarityMap, FlatDepthKeepsNearestNeighbourRanking) {
  TokenCoords tc = grid_coords(16, 16);
  for (double& d : tc.d) d = 0.6;
  const PeSpec spec{32, 512.0};
  const Tensor m2 = pe_matrix(tc, spec, PeMode::two_d);
  const Tensor m3 = pe_matrix(tc, spec, PeMode::three_d);
  for (int target : {0, 37, 255}) {
    const auto s2 = similarity_map(m2, target);
    const auto s3 = similarity_map(m3, target);
    auto argmax_excluding_self = [target](const std::vector<double>& s) {
      int best = -1;
      double bv = -2.0;
      for (int i = 0; i < static_cast<int>(s.size()); ++i) {
        if (i == target) continue;
        if (s[static_cast<std::size_t>(i)] > bv) {
          bv = s[static_cast<std::size_t>(i)];
          best = i;
        }
      }
      return best;
    };
    EXPECT_EQ(argmax_excluding_self(s2), argmax_excluding_self(s3)) << "target " << target;
  }
}

TEST(SimilarityMap, DepthSharingPixelScoresHigherIn3d) {
  // Target and two probes equidistant in the image plane; one probe shares
  // the target's depth, the other sits on a different plane.
  const PeSpec spec{32, 512.0};
  const double u = 0.5, v = 0.5;
  const double near_d = 0.3, far_d = 0.8;
  TokenCoords tc;
  tc.grid_h = 1;
  tc.grid_w = 3;
  tc.u = {u, u - 0.1, u + 0.1};
  tc.v = {v, v, v};
  tc.d = {near_d, near_d, far_d};
  const Tensor m = pe_matrix(tc, spec, PeMode::three_d);
  const auto sim = similarity_map(m, 0);
  EXPECT_GT(sim[1], sim[2]);

  // In 2d mode the two probes are nearly symmetric; depth cannot separate them.
  const Tensor m2 = pe_matrix(tc, spec, PeMode::two_d);
  const auto sim2 = similarity_map(m2, 0);
  EXPECT_NEAR(sim2[1], sim2[2], 0.2);
}

TEST(DisparityUtils, FillNearestValid) {
  // 3x3 with two valid seeds; BFS assigns each hole its nearest seed value.
  std::vector<double> m = {
      5, 0, 0,
      0, 0, 0,
      0, 0, 9,
  };
  const auto filled = fill_invalid_disparity(m, 3, 3);
  EXPECT_EQ(filled[0], 5.0);
  EXPECT_EQ(filled[1], 5.0);
  EXPECT_EQ(filled[3], 5.0);
  EXPECT_EQ(filled[8], 9.0);
  EXPECT_EQ(filled[5], 9.0);
  EXPECT_EQ(filled[7], 9.0);
  for (double x : filled) EXPECT_NE(x, 0.0);

  EXPECT_THROW(fill_invalid_disparity(std::vector<double>(9, 0.0), 3, 3), std::invalid_argument);
  EXPECT_THROW(fill_invalid_disparity(m, 2, 3), std::invalid_argument);

  const std::vector<double> no_holes = {1, 2, 3, 4};
  expect_bitwise_equal(fill_invalid_disparity(no_holes, 2, 2), no_holes);
}

TEST(DisparityUtils, PoolAndNormalize) {
  const std::vector<double> m = {1, 2, 3, 4, 5, 6, 7, 8};
  const auto pooled = avg_pool_map(m, 2, 4, 2);
  expect_near_all(pooled, {(1 + 2 + 5 + 6) / 4.0, (3 + 4 + 7 + 8) / 4.0}, 1e-15);
  EXPECT_THROW(avg_pool_map(m, 2, 4, 3), std::invalid_argument);

  const auto norm = normalize_disparity({0.0, 5.0, 10.0, 20.0}, 10.0);
  expect_near_all(norm, {0.0, 0.5, 1.0, 1.0}, 0);
  EXPECT_THROW(normalize_disparity({1.0}, 0.0), std::invalid_argument);
}
