#pragma once

// Adam with decoupled weight decay over a fixed parameter list, plus the
// cosine learning-rate schedule used by the trainer.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "rgbdseg/errors.hpp"
#include "rgbdseg/tensor.hpp"

namespace rgbdseg {

inline double cosine_lr(double base, std::int64_t step, std::int64_t total_steps) {
  if (total_steps < 1) throw std::invalid_argument("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) throw std::invalid_argument("cosine_lr: step out of range");
  return base * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                         static_cast<double>(total_steps)));
}

class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr, double weight_decay = 0.0, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    if (params_.empty()) throw std::invalid_argument("Adam: empty parameter list");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("Adam: lr must be positive");
    if (wd_ < 0.0 || !std::isfinite(wd_)) throw std::invalid_argument("Adam: bad weight decay");
    if (b1_ < 0.0 || b1_ >= 1.0 || b2_ < 0.0 || b2_ >= 1.0)
      throw std::invalid_argument("Adam: betas must lie in [0, 1)");
    if (!(eps_ > 0.0)) throw std::invalid_argument("Adam: eps must be positive");
    for (const Tensor& p : params_) {
      if (!p.defined() || !p.requires_grad() || !p.is_leaf())
        throw std::invalid_argument("Adam: every parameter must be a trainable leaf");
      m_.emplace_back(p.data().size(), 0.0);
      v_.emplace_back(p.data().size(), 0.0);
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) {
    if (lr < 0.0 || !std::isfinite(lr)) throw std::invalid_argument("Adam: bad learning rate");
    lr_ = lr;
  }
  std::int64_t step_count() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = params_[k];
      auto& data = p.mutable_data();
      const std::vector<double>* grad = p.has_grad() ? &p.grad() : nullptr;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double g = grad ? (*grad)[i] : 0.0;
        if (!std::isfinite(g))
          throw DivergenceError("non-finite gradient reached the optimizer at step " +
                                std::to_string(t_));
        m[i] = b1_ * m[i] + (1.0 - b1_) * g;
        v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        data[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * data[i]);
      }
    }
  }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
};

}  // namespace rgbdseg
