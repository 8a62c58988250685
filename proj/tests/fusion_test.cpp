#include <algorithm>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "rgbdseg/fusion.hpp"
#include "rgbdseg/gradcheck.hpp"
#include "rgbdseg/rng.hpp"
#include "testutil.hpp"

using namespace rgbdseg;
using testutil::expect_bitwise_equal;
using testutil::expect_near_all;

namespace {

Tensor random_map(int h, int w, int c, Rng& rng, double span = 1.0) {
  std::vector<double> d(static_cast<std::size_t>(h) * w * c);
  for (double& x : d) x = rng.uniform(-span, span);
  return Tensor::from_data({h, w, c}, std::move(d));
}

AmParams zero_params(int c) {
  AmParams p;
  p.weight = Tensor::zeros({c, c});
  p.bias = Tensor::zeros({c});
  return p;
}

}  // namespace

TEST(AttentionMix, ZeroParametersGiveBalancedMix) {
  Rng rng(3);
  Tensor oc = random_map(3, 4, 5, rng);
  Tensor od = random_map(3, 4, 5, rng);
  Tensor out = attention_mix(oc, od, zero_params(5));
  Tensor want = scale(add(oc, od), 0.5);
  expect_bitwise_equal(out.data(), want.data());
}

TEST(AttentionMix, EqualInputsPassThrough) {
  Rng rng(5);
  AmParams p = AmParams::init(6, rng);
  Tensor oc = random_map(2, 2, 6, rng, 2.0);
  Tensor out = attention_mix(oc, oc, p);
  expect_near_all(out.data(), oc.data(), 1e-12);
}

TEST(AttentionMix, ScalarHandComputedExample) {
  AmParams p;
  p.weight = Tensor::from_data({1, 1}, {1.0});
  p.bias = Tensor::zeros({1});
  Tensor oc = Tensor::from_data({1, 1, 1}, {2.0});
  Tensor od = Tensor::from_data({1, 1, 1}, {4.0});
  EXPECT_NEAR(attention_mix(oc, od, p).item(), 2.2384058440442351119, 1e-12);
}

TEST(AttentionMix, SaturatedGatePassesColorStream) {
  Rng rng(7);
  AmParams p = zero_params(4);
  p.bias = Tensor::full({4}, 100.0);
  Tensor oc = random_map(3, 3, 4, rng);
  Tensor od = random_map(3, 3, 4, rng);
  expect_near_all(attention_mix(oc, od, p).data(), oc.data(), 1e-10);

  p.bias = Tensor::full({4}, -100.0);
  expect_near_all(attention_mix(oc, od, p).data(), od.data(), 1e-10);
}

TEST(AttentionMix, OutputStaysInsideInputEnvelope) {
  Rng rng(11);
  for (int t = 0; t < 100; ++t) {
    AmParams p = AmParams::init(3, rng);
    Tensor oc = random_map(2, 3, 3, rng, 2.0);
    Tensor od = random_map(2, 3, 3, rng, 2.0);
    const auto out = attention_mix(oc, od, p).data();
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double lo = std::min(oc.data()[i], od.data()[i]);
      const double hi = std::max(oc.data()[i], od.data()[i]);
      EXPECT_GE(out[i], lo - 1e-12);
      EXPECT_LE(out[i], hi + 1e-12);
    }
  }
}

TEST(AttentionMix, LinearInDepthStream) {
  // The gate ignores o_d, so the output is affine in o_d: its second
  // difference along any o_d direction vanishes.
  Rng rng(13);
  AmParams p = AmParams::init(4, rng);
  Tensor oc = random_map(2, 2, 4, rng);
  Tensor od = random_map(2, 2, 4, rng);
  Tensor dir = random_map(2, 2, 4, rng);
  auto eval = [&](double t) {
    return attention_mix(oc, add(od, scale(dir, t)), p).data();
  };
  const auto y0 = eval(0.0);
  const auto y1 = eval(0.5);
  const auto y2 = eval(1.0);
  for (std::size_t i = 0; i < y0.size(); ++i) {
    EXPECT_NEAR(y2[i] - 2.0 * y1[i] + y0[i], 0.0, 1e-10);
  }
}

TEST(AttentionMix, Validation) {
  Rng rng(17);
  AmParams p = AmParams::init(4, rng);
  Tensor oc = random_map(2, 2, 4, rng);
  Tensor od3 = random_map(2, 2, 3, rng);
  EXPECT_THROW(attention_mix(oc, od3, p), std::invalid_argument);
  Tensor wide = random_map(2, 2, 6, rng);
  EXPECT_THROW(attention_mix(wide, wide, p), std::invalid_argument);
  AmParams broken;
  broken.weight = Tensor::zeros({4, 4});
  EXPECT_THROW(attention_mix(oc, oc, broken), std::invalid_argument);
}

TEST(AttentionMix, InitializationShape) {
  Rng rng(19);
  AmParams p = AmParams::init(5, rng);
  EXPECT_EQ(p.weight.shape(), (Shape{5, 5}));
  EXPECT_EQ(p.bias.shape(), (Shape{5}));
  for (double b : p.bias.data()) EXPECT_EQ(b, 0.0);
  // Small-weight init: comfortably inside a 6-sigma band for std 0.02.
  for (double w : p.weight.data()) EXPECT_LT(std::abs(w), 0.12);
  EXPECT_TRUE(p.weight.requires_grad());
  EXPECT_TRUE(p.bias.requires_grad());
}

TEST(AttentionMix, FiniteDifferenceGradients) {
  Rng rng(23);
  auto mk = [&rng](Shape s) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(s)));
    for (double& x : d) x = rng.uniform(-1.0, 1.0);
    return Tensor::from_data(std::move(s), std::move(d));
  };
  const auto r = check_gradient(
      "attention_mix", {mk({2, 3, 4}), mk({2, 3, 4}), mk({4, 4}), mk({4})},
      [](const std::vector<Tensor>& p) {
        AmParams am;
        am.weight = p[2];
        am.bias = p[3];
        Tensor out = attention_mix(p[0], p[1], am);
        return mean(mul(out, out));
      },
      1e-4, 1e-5);
  EXPECT_TRUE(r.ok()) << r.max_rel_err;
}

TEST(AttentionMix, SuiteChecksGateAndBranches) {
  for (std::uint64_t seed : {11ull, 12ull, 13ull})
    for (const auto& r : run_fusion_gradient_suite(seed))
      EXPECT_TRUE(r.ok()) << r.name << " seed " << seed << ": " << r.max_rel_err;
}
