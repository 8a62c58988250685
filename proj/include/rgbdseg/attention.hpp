#pragma once

// Scaled dot-product attention, its multi-head wrapper with independently
// selectable Q/K/V sources, and the cross-input module that routes one
// branch's projections into the other. The Q/K/V routing is what lets the
// color branch attend with depth-derived keys (and the other swap variants).

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

#include "rgbdseg/rng.hpp"
#include "rgbdseg/tensor.hpp"

namespace rgbdseg {

struct AttentionParams {
  Tensor w_q, w_k, w_v, w_o;  // [C, C] projections, bias-free
  int num_heads = 1;

  static AttentionParams init(int channels, int num_heads, Rng& rng) {
    AttentionParams p;
    p.num_heads = num_heads;
    const double stddev = std::sqrt(1.0 / channels);
    p.w_q = Tensor::randn({channels, channels}, rng, stddev, true);
    p.w_k = Tensor::randn({channels, channels}, rng, stddev, true);
    p.w_v = Tensor::randn({channels, channels}, rng, stddev, true);
    p.w_o = Tensor::randn({channels, channels}, rng, stddev, true);
    p.validate();
    return p;
  }

  int channels() const { return w_q.defined() ? w_q.shape()[0] : 0; }
  int head_dim() const { return channels() / num_heads; }

  void validate() const {
    if (!w_q.defined() || !w_k.defined() || !w_v.defined() || !w_o.defined())
      throw std::invalid_argument("AttentionParams: missing projection");
    const int c = channels();
    const Shape want{c, c};
    if (w_q.shape() != want || w_k.shape() != want || w_v.shape() != want || w_o.shape() != want)
      throw std::invalid_argument("AttentionParams: projections must all be square and equal-sized");
    if (num_heads < 1 || c % num_heads != 0)
      throw std::invalid_argument("AttentionParams: head count must divide channel count");
  }
};

enum class SwapMode { none, cross_q, cross_k, cross_v, cross_qk };

inline const char* to_string(SwapMode m) {
  switch (m) {
    case SwapMode::none: return "none";
    case SwapMode::cross_q: return "cross_q";
    case SwapMode::cross_k: return "cross_k";
    case SwapMode::cross_v: return "cross_v";
    case SwapMode::cross_qk: return "cross_qk";
  }
  throw std::logic_error("unreachable");
}

inline SwapMode parse_swap_mode(const std::string& s) {
  if (s == "none") return SwapMode::none;
  if (s == "cross_q") return SwapMode::cross_q;
  if (s == "cross_k") return SwapMode::cross_k;
  if (s == "cross_v") return SwapMode::cross_v;
  if (s == "cross_qk") return SwapMode::cross_qk;
  throw std::invalid_argument("unknown swap mode '" + s +
                              "' (expected none|cross_q|cross_k|cross_v|cross_qk)");
}

namespace detail {

inline void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, const char* op) {
  if (q.rank() != k.rank() || q.rank() != v.rank() || (q.rank() != 2 && q.rank() != 3))
    throw std::invalid_argument(std::string(op) + ": Q, K, V must share rank 2 or 3");
  if (q.shape() != k.shape() || q.shape() != v.shape())
    throw std::invalid_argument(std::string(op) + ": Q, K, V must share token count and head dim");
}

}  // namespace detail

// Row-stochastic weights softmax(Q K^T / sqrt(d_head)); [n,n] or [h,n,n].
inline Tensor attention_weights(const Tensor& q, const Tensor& k) {
  detail::check_qkv(q, k, k, "attention_weights");
  const int d_head = q.shape().back();
  return softmax(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d_head))), -1);
}

inline Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  detail::check_qkv(q, k, v, "scaled_dot_attention");
  return matmul(attention_weights(q, k), v);
}

// Multi-head attention over [n, C] token matrices with separately chosen
// sources for the Q, K and V projections.
struct MultiHeadDetail {
  Tensor output;   // [n, C]
  Tensor weights;  // [heads, n, n]
};

inline MultiHeadDetail multi_head_detail(const Tensor& x_q, const Tensor& x_k, const Tensor& x_v,
                                         const AttentionParams& params) {
  params.validate();
  const int c = params.channels();
  if (x_q.rank() != 2 || x_q.shape()[1] != c)
    throw std::invalid_argument("multi_head: expected [n," + std::to_string(c) + "] inputs");
  if (x_k.shape() != x_q.shape() || x_v.shape() != x_q.shape())
    throw std::invalid_argument("multi_head: Q/K/V sources must share shape");
  const int n = x_q.shape()[0];
  const int h = params.num_heads;
  const int dh = params.head_dim();

  auto split_heads = [&](const Tensor& x, const Tensor& w) {
    // [n,C] -> [h,n,dh]
    return permute(reshape(matmul(x, w), {n, h, dh}), {1, 0, 2});
  };
  const Tensor q = split_heads(x_q, params.w_q);
  const Tensor k = split_heads(x_k, params.w_k);
  const Tensor v = split_heads(x_v, params.w_v);

  const Tensor a = attention_weights(q, k);       // [h,n,n]
  const Tensor mixed = matmul(a, v);              // [h,n,dh]
  const Tensor merged = reshape(permute(mixed, {1, 0, 2}), {n, c});
  return {matmul(merged, params.w_o), a};
}

inline Tensor multi_head(const Tensor& x_q, const Tensor& x_k, const Tensor& x_v,
                         const AttentionParams& params) {
  return multi_head_detail(x_q, x_k, x_v, params).output;
}

// Dual-branch attention. Returns (out_color, out_depth); `mode` names which
// projection source is taken from the opposite branch.
inline std::pair<Tensor, Tensor> cia(const Tensor& x_c, const Tensor& x_d,
                                     const AttentionParams& params, SwapMode mode) {
  if (x_c.shape() != x_d.shape())
    throw std::invalid_argument("cia: branch inputs must share shape");
  switch (mode) {
    case SwapMode::none:
      return {multi_head(x_c, x_c, x_c, params), multi_head(x_d, x_d, x_d, params)};
    case SwapMode::cross_q:
      return {multi_head(x_d, x_c, x_c, params), multi_head(x_c, x_d, x_d, params)};
    case SwapMode::cross_k:
      return {multi_head(x_c, x_d, x_c, params), multi_head(x_d, x_c, x_d, params)};
    case SwapMode::cross_v:
      return {multi_head(x_c, x_c, x_d, params), multi_head(x_d, x_d, x_c, params)};
    case SwapMode::cross_qk:
      return {multi_head(x_d, x_d, x_c, params), multi_head(x_c, x_c, x_d, params)};
  }
  throw std::invalid_argument("cia: unknown swap mode");
}

}  // namespace rgbdseg
