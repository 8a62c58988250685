#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include <gtest/gtest.h>

#include "rgbdseg/errors.hpp"
#include "rgbdseg/gradcheck.hpp"
#include "rgbdseg/tensor.hpp"
#include "rgbdseg/tensor_io.hpp"
#include "testutil.hpp"

using namespace rgbdseg;
using testutil::expect_bitwise_equal;
using testutil::expect_near_all;

TEST(TensorCore, ConstructionValidation) {
  EXPECT_THROW(Tensor::from_data({2, 3}, {1.0, 2.0}), std::invalid_argument);
  EXPECT_THROW(Tensor::from_data({0}, {}), std::invalid_argument);
  EXPECT_THROW(Tensor::from_data({2}, {1.0, std::nan("")}), DivergenceError);
  EXPECT_THROW(Tensor::from_data({1}, {INFINITY}), DivergenceError);

  Tensor s = Tensor::scalar(2.5);
  EXPECT_EQ(s.rank(), 0);
  EXPECT_EQ(s.item(), 2.5);

  Tensor t = Tensor::full({2, 2}, 3.0);
  EXPECT_EQ(t.at({1, 1}), 3.0);
  EXPECT_THROW(t.item(), std::invalid_argument);
}

TEST(TensorCore, DivergencePropagatesThroughOps) {
  Tensor big = Tensor::full({2}, 1e308);
  EXPECT_THROW(add(big, big), DivergenceError);
  Tensor z = Tensor::full({2}, 0.0);
  EXPECT_NO_THROW(add(z, big));
}

TEST(TensorCore, AddMulBroadcastSuffix) {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({3}, {10, 20, 30});
  expect_near_all(add(a, b).data(), {11, 22, 33, 14, 25, 36}, 0);
  expect_near_all(add(b, a).data(), {11, 22, 33, 14, 25, 36}, 0);
  expect_near_all(mul(a, b).data(), {10, 40, 90, 40, 100, 180}, 0);

  Tensor bad = Tensor::from_data({2}, {1, 2});
  EXPECT_THROW(add(a, bad), std::invalid_argument);
  Tensor same_rank = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_THROW(add(a, same_rank), std::invalid_argument);
}

TEST(TensorCore, SubNegScale) {
  Tensor a = Tensor::from_data({3}, {1, -2, 3});
  expect_near_all(neg(a).data(), {-1, 2, -3}, 0);
  expect_near_all(sub(a, a).data(), {0, 0, 0}, 0);
  expect_near_all(scale(a, -2.0).data(), {-2, 4, -6}, 0);
  expect_near_all(add_scalar(a, 0.5).data(), {1.5, -1.5, 3.5}, 0);
}

TEST(TensorCore, MatmulRank2) {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 2}));
  expect_near_all(c.data(), {58, 64, 139, 154}, 1e-12);

  EXPECT_THROW(matmul(a, a), std::invalid_argument);
  Tensor v = Tensor::from_data({3}, {1, 2, 3});
  EXPECT_THROW(matmul(a, v), std::invalid_argument);
}

TEST(TensorCore, MatmulBatched) {
  Tensor a = Tensor::from_data({2, 2, 2}, {1, 0, 0, 1, 2, 0, 0, 2});
  Tensor b = Tensor::from_data({2, 2, 2}, {1, 2, 3, 4, 1, 1, 1, 1});
  Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 2, 2}));
  expect_near_all(c.data(), {1, 2, 3, 4, 2, 2, 2, 2}, 1e-12);

  Tensor wrong_batch = Tensor::from_data({1, 2, 2}, {1, 0, 0, 1});
  EXPECT_THROW(matmul(a, wrong_batch), std::invalid_argument);
}

TEST(TensorCore, PermuteTransposeReshape) {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor t = transpose(a);
  ASSERT_EQ(t.shape(), (Shape{3, 2}));
  expect_near_all(t.data(), {1, 4, 2, 5, 3, 6}, 0);

  Tensor r3 = Tensor::from_data({2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  Tensor p = permute(r3, {2, 0, 1});
  ASSERT_EQ(p.shape(), (Shape{2, 2, 2}));
  // p[i,j,k] = r3[j,k,i]
  EXPECT_EQ(p.at({0, 1, 1}), r3.at({1, 1, 0}));
  EXPECT_EQ(p.at({1, 0, 1}), r3.at({0, 1, 1}));

  EXPECT_THROW(permute(a, {0, 0}), std::invalid_argument);
  EXPECT_THROW(permute(a, {0}), std::invalid_argument);

  Tensor rs = reshape(a, {3, 2});
  expect_bitwise_equal(rs.data(), a.data());
  EXPECT_THROW(reshape(a, {4, 2}), std::invalid_argument);
}

TEST(TensorCore, Concat) {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 1}, {9, 10});
  Tensor c = concat({a, b}, 1);
  ASSERT_EQ(c.shape(), (Shape{2, 3}));
  expect_near_all(c.data(), {1, 2, 9, 3, 4, 10}, 0);

  Tensor d = concat({a, a}, 0);
  ASSERT_EQ(d.shape(), (Shape{4, 2}));
  expect_near_all(d.data(), {1, 2, 3, 4, 1, 2, 3, 4}, 0);

  EXPECT_THROW(concat({a, b}, 0), std::invalid_argument);
  EXPECT_THROW(concat({}, 0), std::invalid_argument);
}

TEST(TensorCore, SoftmaxValuesAndRowSums) {
  Tensor x = Tensor::from_data({1, 2}, {1.0, 2.0});
  Tensor s = softmax(x, 1);
  EXPECT_NEAR(s.data()[0], 0.26894142136999512075, 1e-15);
  EXPECT_NEAR(s.data()[1], 0.73105857863000487925, 1e-15);

  Rng rng(7);
  std::vector<double> d(5 * 9);
  for (double& v : d) v = rng.uniform(-30.0, 30.0);
  Tensor big = Tensor::from_data({5, 9}, std::move(d));
  Tensor sm = softmax(big, -1);
  for (int r = 0; r < 5; ++r) {
    double row = 0.0;
    for (int c = 0; c < 9; ++c) row += sm.at({r, c});
    EXPECT_NEAR(row, 1.0, 1e-12);
  }

  // Middle-axis softmax columns sum to one as well.
  Tensor mid = softmax(reshape(big, {5, 3, 3}), 1);
  for (int o = 0; o < 5; ++o)
    for (int i = 0; i < 3; ++i) {
      double col = 0.0;
      for (int l = 0; l < 3; ++l) col += mid.at({o, l, i});
      EXPECT_NEAR(col, 1.0, 1e-12);
    }
}

TEST(TensorCore, PointwiseNonlinearities) {
  Tensor x = Tensor::from_data({3}, {2.0, 1.0, -0.5});
  EXPECT_NEAR(sigmoid(x).data()[0], 0.88079707797788244406, 1e-15);
  EXPECT_NEAR(gelu(x).data()[1], 0.84134474606854294859, 1e-15);
  EXPECT_NEAR(gelu(x).data()[2], -0.15426876936299344818, 1e-15);
  expect_near_all(relu(Tensor::from_data({3}, {-1.0, 0.0, 2.0})).data(), {0, 0, 2}, 0);

  // Extreme logits stay finite.
  Tensor hot = Tensor::from_data({2}, {-745.0, 745.0});
  EXPECT_NO_THROW(sigmoid(hot));
  EXPECT_NEAR(sigmoid(hot).data()[0], 0.0, 1e-300);
  EXPECT_NEAR(sigmoid(hot).data()[1], 1.0, 1e-15);
}

TEST(TensorCore, LayerNormNormalizesLastAxis) {
  Tensor x = Tensor::from_data({2, 4}, {1, 2, 3, 4, -5, 0, 5, 10});
  Tensor g1 = Tensor::full({4}, 1.0);
  Tensor b0 = Tensor::zeros({4});
  Tensor y = layer_norm(x, g1, b0);
  for (int r = 0; r < 2; ++r) {
    double mu = 0.0, var = 0.0;
    for (int c = 0; c < 4; ++c) mu += y.at({r, c});
    mu /= 4.0;
    for (int c = 0; c < 4; ++c) var += (y.at({r, c}) - mu) * (y.at({r, c}) - mu);
    var /= 4.0;
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-4);  // eps shifts the variance slightly below one
  }

  Tensor g2 = Tensor::full({4}, 2.0);
  Tensor b3 = Tensor::full({4}, 3.0);
  Tensor y2 = layer_norm(x, g2, b3);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 4; ++c)
      EXPECT_NEAR(y2.at({r, c}), 2.0 * y.at({r, c}) + 3.0, 1e-12);

  EXPECT_THROW(layer_norm(x, Tensor::full({3}, 1.0), b0), std::invalid_argument);
}

TEST(TensorCore, GridOps) {
  // avg_pool2 on one 2x2 block with two channels
  Tensor x = Tensor::from_data({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor p = avg_pool2(x);
  ASSERT_EQ(p.shape(), (Shape{1, 1, 2}));
  expect_near_all(p.data(), {4, 5}, 1e-15);
  EXPECT_THROW(avg_pool2(Tensor::full({3, 2, 1}, 0.0)), std::invalid_argument);

  Tensor row = Tensor::from_data({1, 2, 1}, {0.0, 1.0});
  Tensor un = upsample_nearest(row, 2);
  ASSERT_EQ(un.shape(), (Shape{2, 4, 1}));
  expect_near_all(un.data(), {0, 0, 1, 1, 0, 0, 1, 1}, 0);

  Tensor ub = upsample_bilinear(row, 2);
  ASSERT_EQ(ub.shape(), (Shape{2, 4, 1}));
  expect_near_all(ub.data(), {0, 0.25, 0.75, 1, 0, 0.25, 0.75, 1}, 1e-15);

  Tensor img = Tensor::from_data({2, 4, 1}, {0, 1, 2, 3, 4, 5, 6, 7});
  Tensor patches = extract_patches(img, 2);
  ASSERT_EQ(patches.shape(), (Shape{2, 4}));
  expect_near_all(patches.data(), {0, 1, 4, 5, 2, 3, 6, 7}, 0);
  EXPECT_THROW(extract_patches(img, 3), std::invalid_argument);
}

TEST(TensorCore, CrossEntropy) {
  Tensor uniform = Tensor::zeros({3, 4});
  std::vector<int> labels{0, 1, 3};
  EXPECT_NEAR(cross_entropy(uniform, labels).item(), 1.3862943611198906188, 1e-15);

  Tensor confident = Tensor::from_data({2, 2}, {50.0, -50.0, -50.0, 50.0});
  std::vector<int> right{0, 1};
  EXPECT_NEAR(cross_entropy(confident, right).item(), 0.0, 1e-12);

  std::vector<int> bad{0, 4, 0};
  EXPECT_THROW(cross_entropy(uniform, bad), std::invalid_argument);
  std::vector<int> neg{0, -1, 0};
  EXPECT_THROW(cross_entropy(uniform, neg), std::invalid_argument);
}

TEST(Backward, AccumulatesOverReuse) {
  Tensor x = Tensor::from_data({2}, {3.0, -1.5}, /*requires_grad=*/true);
  Tensor y = sum(add(x, x));
  backward(y);
  expect_near_all(x.grad(), {2.0, 2.0}, 0);

  Tensor z = Tensor::from_data({2}, {3.0, -1.5}, true);
  Tensor sq = sum(mul(z, z));
  backward(sq);
  expect_near_all(z.grad(), {6.0, -3.0}, 1e-15);
}

TEST(Backward, GuardsMisuse) {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor loss = sum(x);
  backward(loss);
  EXPECT_THROW(backward(loss), std::logic_error);

  Tensor vec = add(x, x);
  EXPECT_THROW(backward(vec), std::invalid_argument);

  Tensor detached = sum(Tensor::from_data({2}, {1.0, 2.0}));
  EXPECT_THROW(backward(detached), std::invalid_argument);
}

TEST(Backward, ZeroGradResets) {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  backward(sum(x));
  expect_near_all(x.grad(), {1.0, 1.0}, 0);
  backward(scale(sum(x), 2.0));
  expect_near_all(x.grad(), {3.0, 3.0}, 0);  // accumulates across tapes
  x.zero_grad();
  expect_near_all(x.grad(), {0.0, 0.0}, 0);
}

TEST(Backward, MutationGuards) {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  Tensor y = add(x, x);
  EXPECT_THROW(y.mutable_data(), std::logic_error);
  EXPECT_THROW(y.set_requires_grad(false), std::logic_error);
  EXPECT_NO_THROW(x.mutable_data());
}

TEST(GradCheck, AllOpsMatchFiniteDifferences) {
  for (std::uint64_t seed : {11ull, 22ull, 33ull}) {
    for (const auto& r : run_op_gradient_suite(seed)) {
      EXPECT_TRUE(r.ok()) << r.name << " seed " << seed << " max rel err " << r.max_rel_err;
    }
  }
}

TEST(TensorIo, RoundTripIsBitwise) {
  testutil::TempDir dir("tnsr");
  Rng rng(99);
  Tensor t = Tensor::randn({3, 4, 5}, rng);
  const auto path = dir.path() / "t.tnsr";
  save_tensor(path, t);
  Tensor back = load_tensor(path);
  ASSERT_EQ(back.shape(), t.shape());
  expect_bitwise_equal(back.data(), t.data());

  Tensor s = Tensor::scalar(-0.0625);
  save_tensor(dir.path() / "s.tnsr", s);
  EXPECT_EQ(load_tensor(dir.path() / "s.tnsr").item(), -0.0625);
}

TEST(TensorIo, RejectsMalformedFiles) {
  testutil::TempDir dir("tnsr-bad");
  const auto path = dir.path() / "t.tnsr";
  save_tensor(path, Tensor::full({4, 4}, 1.0));

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  EXPECT_THROW(load_tensor(path), IoError);

  {
    std::ofstream os(dir.path() / "bad.tnsr", std::ios::binary);
    os << "NOPE" << std::string(64, '\0');
  }
  EXPECT_THROW(load_tensor(dir.path() / "bad.tnsr"), IoError);
  EXPECT_THROW(load_tensor(dir.path() / "missing.tnsr"), IoError);

  {
    std::ofstream os(path, std::ios::binary | std::ios::app);
    os << "x";
  }
  EXPECT_THROW(load_tensor(path), IoError);
}
