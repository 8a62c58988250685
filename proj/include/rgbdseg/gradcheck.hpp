#pragma once

// Central finite-difference verification of the analytic gradients. The same
// harness backs the unit tests and the `grad-check` CLI subcommand.

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "rgbdseg/model.hpp"
#include "rgbdseg/rng.hpp"
#include "rgbdseg/tensor.hpp"

namespace rgbdseg {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool ok() const { return max_rel_err < tolerance; }
};

// Discrepancies below this are inside the central difference's own truncation
// noise (about step^2 * f'''), so a ratio against a near-zero gradient would
// only measure the probe, not the tape. Such coordinates pass outright.
inline constexpr double kGradAbsFloor = 1e-8;

// Runs f twice per coordinate with a central difference and compares against
// the tape's gradient. f must rebuild its graph from scratch on every call and
// return a scalar tensor.
inline GradCheckResult check_gradient(const std::string& name, std::vector<Tensor> params,
                                      const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                      double step = 1e-4, double tolerance = 1e-5) {
  for (Tensor& p : params) p.set_requires_grad(true);

  Tensor loss = f(params);
  backward(loss);

  GradCheckResult r{name, 0.0, tolerance};
  for (Tensor& p : params) {
    auto& data = p.mutable_data();
    const std::vector<double> analytic =
        p.has_grad() ? p.grad() : std::vector<double>(data.size(), 0.0);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + step;
      const double up = f(params).item();
      data[i] = keep - step;
      const double down = f(params).item();
      data[i] = keep;
      const double numeric = (up - down) / (2.0 * step);
      const double diff = std::abs(analytic[i] - numeric);
      if (diff < kGradAbsFloor) continue;
      r.max_rel_err = std::max(r.max_rel_err, diff / (std::abs(analytic[i]) + 1e-8));
    }
    p.zero_grad();
  }
  return r;
}

// Like check_gradient, but probes a random subset of coordinates. Deep models
// have too many parameters for an exhaustive sweep; sampling keeps the check
// inside a test-suite time budget while still touching every parameter group.
inline GradCheckResult check_gradient_sampled(
    const std::string& name, std::vector<Tensor> params,
    const std::function<Tensor(const std::vector<Tensor>&)>& f, Rng& rng, int coords,
    double step = 1e-4, double tolerance = 1e-5) {
  if (coords < 1) throw std::invalid_argument("check_gradient_sampled: need at least one probe");
  for (Tensor& p : params) p.set_requires_grad(true);

  Tensor loss = f(params);
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (Tensor& p : params)
    analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.data().size(), 0.0));

  std::int64_t total = 0;
  for (const Tensor& p : params) total += p.size();
  if (total > std::numeric_limits<int>::max())
    throw std::invalid_argument("check_gradient_sampled: parameter space too large");

  GradCheckResult r{name, 0.0, tolerance};
  for (int probe = 0; probe < coords; ++probe) {
    std::int64_t flat = rng.uniform_int(0, static_cast<int>(total) - 1);
    std::size_t k = 0;
    while (flat >= params[k].size()) flat -= params[k++].size();
    auto& data = params[k].mutable_data();
    const auto i = static_cast<std::size_t>(flat);
    const double keep = data[i];
    data[i] = keep + step;
    const double up = f(params).item();
    data[i] = keep - step;
    const double down = f(params).item();
    data[i] = keep;
    const double numeric = (up - down) / (2.0 * step);
    const double diff = std::abs(analytic[k][i] - numeric);
    if (diff < kGradAbsFloor) continue;
    r.max_rel_err = std::max(r.max_rel_err, diff / (std::abs(analytic[k][i]) + 1e-8));
  }
  for (Tensor& p : params) p.zero_grad();
  return r;
}

// Standard per-op battery. Inputs are sampled away from relu's kink so the
// finite difference stays one-sided-consistent.
inline std::vector<GradCheckResult> run_op_gradient_suite(std::uint64_t seed,
                                                          double tolerance = 1e-5) {
  std::vector<GradCheckResult> out;
  Rng rng(seed);

  auto sample = [&rng](Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
    for (double& x : d) x = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(d));
  };
  auto sample_off_kink = [&rng](Shape shape) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
    for (double& x : d) {
      const double mag = rng.uniform(0.2, 1.2);
      x = rng.bernoulli(0.5) ? mag : -mag;
    }
    return Tensor::from_data(std::move(shape), std::move(d));
  };

  // Projects the op output onto a random direction frozen before the check so
  // the loss is deterministic across the finite-difference evaluations and
  // every output element influences it.
  auto run = [&](const std::string& name, std::vector<Tensor> params,
                 std::function<Tensor(const std::vector<Tensor>&)> raw) {
    const Tensor probe = raw(params);
    std::vector<double> wdata(probe.data().size());
    for (double& x : wdata) x = rng.uniform(-1.0, 1.0);
    const Tensor w = Tensor::from_data(probe.shape(), std::move(wdata));
    auto f = [raw = std::move(raw), w](const std::vector<Tensor>& p) {
      return sum(mul(raw(p), w));
    };
    out.push_back(check_gradient(name, std::move(params), f, 1e-4, tolerance));
  };

  run("add_broadcast", {sample({3, 4, 5}), sample({5})},
      [](const auto& p) { return add(p[0], p[1]); });
  run("mul_broadcast", {sample({3, 4, 5}), sample({4, 5})},
      [](const auto& p) { return mul(p[0], p[1]); });
  run("sub_neg", {sample({4, 3}), sample({4, 3})},
      [](const auto& p) { return sub(p[0], neg(p[1])); });
  run("scale_add_scalar", {sample({2, 3, 4})},
      [](const auto& p) { return add_scalar(scale(p[0], -1.7), 0.3); });
  run("matmul", {sample({4, 6}), sample({6, 3})},
      [](const auto& p) { return matmul(p[0], p[1]); });
  run("matmul_batched", {sample({2, 3, 5}), sample({2, 5, 4})},
      [](const auto& p) { return matmul(p[0], p[1]); });
  run("permute", {sample({2, 3, 4, 5})},
      [](const auto& p) { return permute(p[0], {2, 0, 3, 1}); });
  run("reshape", {sample({3, 8})}, [](const auto& p) { return reshape(p[0], {2, 3, 4}); });
  run("concat", {sample({3, 2}), sample({3, 5})},
      [](const auto& p) { return concat({p[0], p[1]}, 1); });
  run("softmax_last", {sample({4, 7}, -3.0, 3.0)},
      [](const auto& p) { return softmax(p[0], 1); });
  run("softmax_mid", {sample({3, 5, 2}, -3.0, 3.0)},
      [](const auto& p) { return softmax(p[0], 1); });
  run("sigmoid", {sample({4, 4}, -4.0, 4.0)}, [](const auto& p) { return sigmoid(p[0]); });
  run("relu", {sample_off_kink({5, 6})}, [](const auto& p) { return relu(p[0]); });
  run("gelu", {sample({5, 6}, -2.5, 2.5)}, [](const auto& p) { return gelu(p[0]); });
  run("sum", {sample({3, 4})}, [](const auto& p) { return sum(p[0]); });
  run("mean", {sample({3, 4})}, [](const auto& p) { return mean(p[0]); });
  run("layer_norm", {sample({6, 5}, -2.0, 2.0), sample({5}, 0.5, 1.5), sample({5})},
      [](const auto& p) { return layer_norm(p[0], p[1], p[2]); });
  run("conv1x1", {sample({4, 4, 3}), sample({3, 5}), sample({5})},
      [](const auto& p) { return conv1x1(p[0], p[1], p[2]); });
  run("avg_pool2", {sample({4, 6, 3})}, [](const auto& p) { return avg_pool2(p[0]); });
  run("upsample_nearest", {sample({3, 4, 2})},
      [](const auto& p) { return upsample_nearest(p[0], 2); });
  run("upsample_bilinear", {sample({3, 4, 2})},
      [](const auto& p) { return upsample_bilinear(p[0], 2); });
  run("extract_patches", {sample({4, 6, 3})},
      [](const auto& p) { return extract_patches(p[0], 2); });
  {
    std::vector<int> labels(6);
    for (int& y : labels) y = static_cast<int>(rng.uniform_int(0, 3));
    run("cross_entropy", {sample({6, 4}, -2.0, 2.0)}, [labels](const auto& p) {
      return cross_entropy(p[0], std::span<const int>(labels));
    });
  }
  return out;
}

// Attention battery: raw scaled-dot, the multi-head projection stack, and the
// dual-branch exchange under every swap routing.
inline std::vector<GradCheckResult> run_attention_gradient_suite(std::uint64_t seed,
                                                                 double tolerance = 1e-5) {
  std::vector<GradCheckResult> out;
  Rng rng(derive_seed(seed, 0xA77Eull));
  constexpr int n = 5, c = 4, heads = 2;

  auto sample = [&rng](Shape shape, double lo, double hi) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
    for (double& x : d) x = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(d));
  };
  auto probe_like = [&rng](const Tensor& t) {
    std::vector<double> d(t.data().size());
    for (double& x : d) x = rng.uniform(-1.0, 1.0);
    return Tensor::from_data(t.shape(), std::move(d));
  };

  {
    std::vector<Tensor> qkv = {sample({n, c}, -1.0, 1.0), sample({n, c}, -1.0, 1.0),
                               sample({n, c}, -1.0, 1.0)};
    const Tensor w = probe_like(qkv[0]);
    out.push_back(check_gradient(
        "scaled_dot_attention", qkv,
        [w](const std::vector<Tensor>& p) {
          return sum(mul(scaled_dot_attention(p[0], p[1], p[2]), w));
        },
        1e-4, tolerance));
  }
  {
    AttentionParams ap = AttentionParams::init(c, heads, rng);
    std::vector<Tensor> params = {sample({n, c}, -1.0, 1.0), sample({n, c}, -1.0, 1.0),
                                  sample({n, c}, -1.0, 1.0), ap.w_q, ap.w_k, ap.w_v, ap.w_o};
    const Tensor w = probe_like(params[0]);
    out.push_back(check_gradient(
        "multi_head", params,
        [w, heads](const std::vector<Tensor>& p) {
          AttentionParams a;
          a.num_heads = heads;
          a.w_q = p[3];
          a.w_k = p[4];
          a.w_v = p[5];
          a.w_o = p[6];
          return sum(mul(multi_head(p[0], p[1], p[2], a), w));
        },
        1e-4, tolerance));
  }
  for (const SwapMode mode : {SwapMode::none, SwapMode::cross_q, SwapMode::cross_k,
                              SwapMode::cross_v, SwapMode::cross_qk}) {
    AttentionParams ap = AttentionParams::init(c, heads, rng);
    std::vector<Tensor> params = {sample({n, c}, -1.0, 1.0), sample({n, c}, -1.0, 1.0), ap.w_q,
                                  ap.w_k, ap.w_v, ap.w_o};
    const Tensor wc = probe_like(params[0]);
    const Tensor wd = probe_like(params[0]);
    out.push_back(check_gradient(
        std::string("cia_") + to_string(mode), params,
        [wc, wd, heads, mode](const std::vector<Tensor>& p) {
          AttentionParams a;
          a.num_heads = heads;
          a.w_q = p[2];
          a.w_k = p[3];
          a.w_v = p[4];
          a.w_o = p[5];
          const auto [oc, od] = cia(p[0], p[1], a, mode);
          return add(sum(mul(oc, wc)), sum(mul(od, wd)));
        },
        1e-4, tolerance));
  }
  return out;
}

// Gated-mix battery: gradients must flow through both branch inputs and the
// gate projection.
inline std::vector<GradCheckResult> run_fusion_gradient_suite(std::uint64_t seed,
                                                              double tolerance = 1e-5) {
  std::vector<GradCheckResult> out;
  Rng rng(derive_seed(seed, 0xF05Eull));
  constexpr int h = 3, w = 4, c = 5;

  auto sample = [&rng](Shape shape, double lo, double hi) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
    for (double& x : d) x = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(d));
  };

  AmParams am = AmParams::init(c, rng);
  for (double& x : am.bias.mutable_data()) x = rng.uniform(-0.5, 0.5);
  std::vector<Tensor> params = {sample({h, w, c}, -1.0, 1.0), sample({h, w, c}, -1.0, 1.0),
                                am.weight, am.bias};
  std::vector<double> wdata(static_cast<std::size_t>(h) * w * c);
  for (double& x : wdata) x = rng.uniform(-1.0, 1.0);
  const Tensor probe = Tensor::from_data({h, w, c}, std::move(wdata));
  out.push_back(check_gradient(
      "attention_mix", params,
      [probe](const std::vector<Tensor>& p) {
        AmParams a;
        a.weight = p[2];
        a.bias = p[3];
        return sum(mul(attention_mix(p[0], p[1], a), probe));
      },
      1e-4, tolerance));
  return out;
}

// End-to-end check on a 16x16 instance of the full dual-branch model with
// every mechanism enabled. Coordinates are sampled; the classifier starts at
// zero, so it gets a random kick first or no gradient would reach the encoder.
inline GradCheckResult run_model_gradient_check(std::uint64_t seed, int coords = 48,
                                                double tolerance = 1e-4) {
  Rng rng(derive_seed(seed, 0x6EAD1ull));
  ModelConfig cfg;
  cfg.image_side = 16;
  cfg.patch_size = 4;
  cfg.stage_channels = {4, 8};
  cfg.stage_blocks = {1, 1};
  cfg.stage_heads = {1, 2};
  cfg.num_classes = 3;
  cfg.pe_mode = PeMode::three_d;
  cfg.swap_mode = SwapMode::cross_k;
  cfg.fusion = FusionKind::attention_mix;
  cfg.branches = BranchMode::dual;
  cfg.decoder_dim = 8;
  cfg.mlp_ratio = 2;
  SegModel m = SegModel::init(cfg, derive_seed(seed, 0xF00Dull));
  for (double& x : m.dec_cls_weight.mutable_data()) x = rng.normal(0.0, 0.3);
  for (double& x : m.dec_cls_bias.mutable_data()) x = rng.normal(0.0, 0.1);

  const int side = cfg.image_side;
  const auto n = static_cast<std::size_t>(side) * side;
  std::vector<double> rgb_data(n * 3), disp(n);
  for (double& x : rgb_data) x = rng.uniform(0.0, 1.0);
  for (double& x : disp) x = rng.uniform(0.05, 0.95);
  const Tensor rgb = Tensor::from_data({side, side, 3}, std::move(rgb_data));
  std::vector<int> labels(n);
  for (int& y : labels) y = static_cast<int>(rng.uniform_int(0, cfg.num_classes - 1));

  auto f = [&m, rgb, disp, labels, side, k = cfg.num_classes](const std::vector<Tensor>&) {
    Tensor logits = forward(m, rgb, disp);
    return cross_entropy(reshape(logits, {side * side, k}), std::span<const int>(labels));
  };
  return check_gradient_sampled("model_16x16", param_list(m), f, rng, coords, 1e-4, tolerance);
}

}  // namespace rgbdseg
