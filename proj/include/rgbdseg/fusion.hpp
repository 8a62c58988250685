#pragma once

// Gated fusion of the two branch outputs: a 1x1 convolution of the color
// stream, squashed through a sigmoid, convexly blends color against depth
// per pixel and channel. The gate looks at the color stream only.

#include <stdexcept>
#include <string_view>

#include "rgbdseg/rng.hpp"
#include "rgbdseg/tensor.hpp"

namespace rgbdseg {

enum class FusionKind { sum, attention_mix };

inline const char* to_string(FusionKind k) {
  switch (k) {
    case FusionKind::sum: return "sum";
    case FusionKind::attention_mix: return "attention_mix";
  }
  throw std::invalid_argument("unknown fusion kind");
}

inline FusionKind parse_fusion_kind(std::string_view s) {
  if (s == "sum") return FusionKind::sum;
  if (s == "attention_mix") return FusionKind::attention_mix;
  throw std::invalid_argument("fusion must be sum|attention_mix, got '" + std::string(s) + "'");
}

struct AmParams {
  Tensor weight;  // [C, C]
  Tensor bias;    // [C]

  // Zero bias keeps the initial gate at 0.5, so training starts from the
  // balanced mix.
  static AmParams init(int channels, Rng& rng) {
    AmParams p;
    p.weight = Tensor::randn({channels, channels}, rng, 0.02, true);
    p.bias = Tensor::zeros({channels}, true);
    return p;
  }

  int channels() const { return weight.defined() ? weight.shape()[0] : 0; }

  void validate() const {
    if (!weight.defined() || !bias.defined())
      throw std::invalid_argument("AmParams: missing weight or bias");
    const int c = channels();
    if (weight.shape() != Shape{c, c} || bias.shape() != Shape{c})
      throw std::invalid_argument("AmParams: weight must be [C,C] with matching [C] bias");
  }
};

inline Tensor attention_mix(const Tensor& o_c, const Tensor& o_d, const AmParams& params) {
  params.validate();
  if (o_c.shape() != o_d.shape())
    throw std::invalid_argument("attention_mix: branch outputs must share shape");
  if (o_c.rank() != 3 || o_c.shape()[2] != params.channels())
    throw std::invalid_argument("attention_mix: expected [h,w,C] inputs matching the gate width");
  const Tensor gate = sigmoid(conv1x1(o_c, params.weight, params.bias));
  return add(mul(o_c, gate), mul(o_d, add_scalar(neg(gate), 1.0)));
}

}  // namespace rgbdseg
