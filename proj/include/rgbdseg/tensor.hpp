#pragma once

// Dense f64 tensors with a reverse-mode tape.
//
// Every op appends one node to an implicit tape (nodes are ordered by a
// monotonically increasing sequence id); backward() replays the reachable
// nodes strictly in reverse order. Tensors are immutable once created except
// for their gradient buffers; parameter leaves are mutated in place by the
// optimizer between tapes.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <cblas.h>

#include "rgbdseg/errors.hpp"
#include "rgbdseg/rng.hpp"

namespace rgbdseg {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  bool backward_done = false;

  std::uint64_t seq = 0;  // tape position; strictly increasing per op
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backprop;

  std::int64_t numel() const { return shape_numel(shape); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw DivergenceError(std::string("non-finite value in '") + op + "'");
    }
  }
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
      throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("non-positive axis in shape " + shape_str(shape));
    }
    detail::check_finite(data, "from_data");
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    return from_data(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor scalar(double v) { return from_data(Shape{}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
    for (double& x : d) x = rng.normal(0.0, stddev);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t size() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  const char* op_name() const { return node_->op; }

  const std::vector<double>& data() const { return node_->value; }

  // Leaf mutation hook for optimizers; graphs built before the mutation are stale.
  std::vector<double>& mutable_data() {
    if (!node_->is_leaf) throw std::logic_error("only leaf tensors may be mutated");
    return node_->value;
  }

  double item() const {
    if (size() != 1) throw std::invalid_argument("item() requires a one-element tensor");
    return node_->value[0];
  }

  double at(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != rank()) throw std::invalid_argument("at(): rank mismatch");
    std::int64_t flat = 0;
    int axis = 0;
    for (int i : idx) {
      if (i < 0 || i >= node_->shape[axis]) throw std::out_of_range("at(): index out of range");
      flat = flat * node_->shape[axis] + i;
      ++axis;
    }
    return node_->value[static_cast<std::size_t>(flat)];
  }

  bool has_grad() const { return !node_->grad.empty(); }

  const std::vector<double>& grad() const {
    if (node_->grad.empty()) throw std::logic_error("tensor has no gradient buffer");
    return node_->grad;
  }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  void set_requires_grad(bool rg) {
    if (!node_->is_leaf) throw std::logic_error("requires_grad can only be toggled on leaves");
    node_->requires_grad = rg;
  }

  // Identity of the underlying storage; used for parameter-sharing asserts.
  const void* node_id() const { return node_.get(); }

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}

  std::shared_ptr<detail::TensorNode> node_;

  friend Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                        std::vector<Tensor> inputs,
                        std::function<void(detail::TensorNode&)> backprop);
};

inline Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                      std::vector<Tensor> inputs,
                      std::function<void(detail::TensorNode&)> backprop) {
  detail::check_finite(value, op);
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  node->is_leaf = false;
  bool rg = false;
  for (const Tensor& t : inputs) rg = rg || t.requires_grad();
  node->requires_grad = rg;
  if (rg) {
    node->seq = detail::next_seq();
    node->inputs.reserve(inputs.size());
    for (const Tensor& t : inputs) node->inputs.push_back(t.node());
    node->backprop = std::move(backprop);
  }
  return Tensor(std::move(node));
}

namespace detail {

inline void accumulate(const std::shared_ptr<TensorNode>& n, const std::vector<double>& g) {
  if (!n->requires_grad) return;
  n->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) n->grad[i] += g[i];
}

// Leading-axis broadcast: the smaller shape must equal a suffix of the larger.
struct Broadcast {
  Shape out;
  std::int64_t rep = 1;    // repetitions of the smaller operand
  std::int64_t inner = 1;  // elements of the smaller operand
  bool a_is_small = false;
  bool same = false;
};

inline Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  Broadcast r;
  if (a == b) {
    r.out = a;
    r.same = true;
    r.inner = shape_numel(a);
    return r;
  }
  const Shape *big = &a, *small = &b;
  bool a_small = false;
  if (a.size() < b.size()) {
    big = &b;
    small = &a;
    a_small = true;
  } else if (a.size() == b.size()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  const std::size_t off = big->size() - small->size();
  for (std::size_t i = 0; i < small->size(); ++i) {
    if ((*small)[i] != (*big)[off + i]) {
      throw std::invalid_argument(std::string(op) + ": " + shape_str(*small) +
                                  " does not broadcast over " + shape_str(*big));
    }
  }
  r.out = *big;
  r.inner = shape_numel(*small);
  r.rep = shape_numel(*big) / std::max<std::int64_t>(r.inner, 1);
  r.a_is_small = a_small;
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

namespace detail {

template <typename Fwd>
inline Tensor broadcast_binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd,
                               std::function<void(TensorNode&, const Broadcast&)> bwd) {
  const Broadcast bc = broadcast_shapes(a.shape(), b.shape(), op);
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(static_cast<std::size_t>(shape_numel(bc.out)));
  if (bc.same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else if (bc.a_is_small) {
    for (std::int64_t r = 0; r < bc.rep; ++r)
      for (std::int64_t i = 0; i < bc.inner; ++i)
        out[static_cast<std::size_t>(r * bc.inner + i)] =
            fwd(av[static_cast<std::size_t>(i)], bv[static_cast<std::size_t>(r * bc.inner + i)]);
  } else {
    for (std::int64_t r = 0; r < bc.rep; ++r)
      for (std::int64_t i = 0; i < bc.inner; ++i)
        out[static_cast<std::size_t>(r * bc.inner + i)] =
            fwd(av[static_cast<std::size_t>(r * bc.inner + i)], bv[static_cast<std::size_t>(i)]);
  }
  return make_op(op, bc.out, std::move(out), {a, b},
                 [bwd = std::move(bwd), bc](TensorNode& self) { bwd(self, bc); });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](detail::TensorNode& self, const detail::Broadcast& bc) {
        const auto& g = self.grad;
        for (int k = 0; k < 2; ++k) {
          const auto& in = self.inputs[static_cast<std::size_t>(k)];
          if (!in->requires_grad) continue;
          in->ensure_grad();
          const bool small = !bc.same && ((k == 0) == bc.a_is_small);
          if (!small) {
            for (std::size_t i = 0; i < g.size(); ++i) in->grad[i] += g[i];
          } else {
            for (std::int64_t r = 0; r < bc.rep; ++r)
              for (std::int64_t i = 0; i < bc.inner; ++i)
                in->grad[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(r * bc.inner + i)];
          }
        }
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](detail::TensorNode& self, const detail::Broadcast& bc) {
        const auto& g = self.grad;
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        auto other = [&](int k) -> const std::vector<double>& { return k == 0 ? bv : av; };
        for (int k = 0; k < 2; ++k) {
          const auto& in = self.inputs[static_cast<std::size_t>(k)];
          if (!in->requires_grad) continue;
          in->ensure_grad();
          const auto& o = other(k);
          const bool k_small = !bc.same && ((k == 0) == bc.a_is_small);
          if (bc.same) {
            for (std::size_t i = 0; i < g.size(); ++i) in->grad[i] += g[i] * o[i];
          } else if (k_small) {
            // this operand is broadcast; the other is full size
            for (std::int64_t r = 0; r < bc.rep; ++r)
              for (std::int64_t i = 0; i < bc.inner; ++i)
                in->grad[static_cast<std::size_t>(i)] +=
                    g[static_cast<std::size_t>(r * bc.inner + i)] * o[static_cast<std::size_t>(r * bc.inner + i)];
          } else {
            for (std::int64_t r = 0; r < bc.rep; ++r)
              for (std::int64_t i = 0; i < bc.inner; ++i)
                in->grad[static_cast<std::size_t>(r * bc.inner + i)] +=
                    g[static_cast<std::size_t>(r * bc.inner + i)] * o[static_cast<std::size_t>(i)];
          }
        }
      });
}

inline Tensor neg(const Tensor& a) {
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -a.data()[i];
  return make_op("neg", a.shape(), std::move(out), {a}, [](detail::TensorNode& self) {
    const auto& in = self.inputs[0];
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] -= self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.data()[i];
  return make_op("scale", a.shape(), std::move(out), {a}, [c](detail::TensorNode& self) {
    const auto& in = self.inputs[0];
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += c * self.grad[i];
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
  return make_op("add_scalar", a.shape(), std::move(out), {a}, [](detail::TensorNode& self) {
    const auto& in = self.inputs[0];
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
  });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Matrix multiply (rank 2, or rank 3 with matching batch axis)

namespace detail {

inline void dgemm_rowmajor(bool ta, bool tb, int m, int n, int k, double alpha, const double* a,
                           int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
              k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (!((as.size() == 2 && bs.size() == 2) || (as.size() == 3 && bs.size() == 3))) {
    throw std::invalid_argument("matmul: ranks must both be 2 or both 3, got " + shape_str(as) +
                                " and " + shape_str(bs));
  }
  const bool batched = as.size() == 3;
  const int batch = batched ? as[0] : 1;
  if (batched && bs[0] != batch) {
    throw std::invalid_argument("matmul: batch mismatch " + shape_str(as) + " vs " + shape_str(bs));
  }
  const int m = as[batched ? 1 : 0];
  const int k = as[batched ? 2 : 1];
  const int k2 = bs[batched ? 1 : 0];
  const int n = bs[batched ? 2 : 1];
  if (k != k2) {
    throw std::invalid_argument("matmul: inner axes differ, " + shape_str(as) + " x " + shape_str(bs));
  }
  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  std::vector<double> out(static_cast<std::size_t>(batch) * m * n, 0.0);
  for (int bi = 0; bi < batch; ++bi) {
    detail::dgemm_rowmajor(false, false, m, n, k, 1.0,
                           a.data().data() + static_cast<std::size_t>(bi) * m * k, k,
                           b.data().data() + static_cast<std::size_t>(bi) * k * n, n, 0.0,
                           out.data() + static_cast<std::size_t>(bi) * m * n, n);
  }
  return make_op("matmul", std::move(out_shape), std::move(out), {a, b},
                 [batch, m, n, k](detail::TensorNode& self) {
                   const auto& an = self.inputs[0];
                   const auto& bn = self.inputs[1];
                   const double* g = self.grad.data();
                   if (an->requires_grad) {
                     an->ensure_grad();
                     for (int bi = 0; bi < batch; ++bi) {
                       // dA += G * B^T
                       detail::dgemm_rowmajor(false, true, m, k, n, 1.0,
                                              g + static_cast<std::size_t>(bi) * m * n, n,
                                              bn->value.data() + static_cast<std::size_t>(bi) * k * n, n,
                                              1.0, an->grad.data() + static_cast<std::size_t>(bi) * m * k, k);
                     }
                   }
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     for (int bi = 0; bi < batch; ++bi) {
                       // dB += A^T * G
                       detail::dgemm_rowmajor(true, false, k, n, m, 1.0,
                                              an->value.data() + static_cast<std::size_t>(bi) * m * k, k,
                                              g + static_cast<std::size_t>(bi) * m * n, n, 1.0,
                                              bn->grad.data() + static_cast<std::size_t>(bi) * k * n, n);
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Shape ops

namespace detail {

inline std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// dst[i] = src[perm_index(i)] mapping for an axis permutation
inline std::vector<std::int64_t> permute_index(const Shape& in, const std::vector<int>& perm) {
  const auto rank = in.size();
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) out[i] = in[static_cast<std::size_t>(perm[i])];
  const auto in_st = strides_of(in);
  const auto out_sh = out;
  const std::int64_t n = shape_numel(in);
  std::vector<std::int64_t> map(static_cast<std::size_t>(n));
  std::vector<int> idx(rank, 0);
  for (std::int64_t flat = 0; flat < n; ++flat) {
    std::int64_t src = 0;
    for (std::size_t d = 0; d < rank; ++d)
      src += static_cast<std::int64_t>(idx[d]) * in_st[static_cast<std::size_t>(perm[d])];
    map[static_cast<std::size_t>(flat)] = src;
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      if (++idx[static_cast<std::size_t>(d)] < out_sh[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
  return map;
}

}  // namespace detail

inline Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  const Shape& s = a.shape();
  if (perm.size() != s.size()) throw std::invalid_argument("permute: axis list rank mismatch");
  std::vector<bool> seen(s.size(), false);
  for (int p : perm) {
    if (p < 0 || p >= static_cast<int>(s.size()) || seen[static_cast<std::size_t>(p)])
      throw std::invalid_argument("permute: invalid axis permutation");
    seen[static_cast<std::size_t>(p)] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[static_cast<std::size_t>(perm[i])];
  const auto map = detail::permute_index(s, perm);
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[static_cast<std::size_t>(map[i])];
  return make_op("permute", std::move(out_shape), std::move(out), {a},
                 [map](detail::TensorNode& self) {
                   const auto& in = self.inputs[0];
                   if (!in->requires_grad) return;
                   in->ensure_grad();
                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                     in->grad[static_cast<std::size_t>(map[i])] += self.grad[i];
                 });
}

// Swaps the last two axes.
inline Tensor transpose(const Tensor& a) {
  std::vector<int> perm(static_cast<std::size_t>(a.rank()));
  std::iota(perm.begin(), perm.end(), 0);
  if (perm.size() < 2) throw std::invalid_argument("transpose: rank must be >= 2");
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(shape));
  }
  return make_op("reshape", std::move(shape), a.data(), {a}, [](detail::TensorNode& self) {
    const auto& in = self.inputs[0];
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const int rank = static_cast<int>(s0.size());
  if (axis < 0 || axis >= rank) throw std::invalid_argument("concat: axis out of range");
  Shape out_shape = s0;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= s0[static_cast<std::size_t>(i)];
  std::vector<std::int64_t> widths;
  for (const Tensor& p : parts) {
    const Shape& ps = p.shape();
    if (static_cast<int>(ps.size()) != rank) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && ps[static_cast<std::size_t>(i)] != s0[static_cast<std::size_t>(i)])
        throw std::invalid_argument("concat: shape mismatch on non-concat axis");
    }
    widths.push_back(ps[static_cast<std::size_t>(axis)] * inner);
    out_shape[static_cast<std::size_t>(axis)] += ps[static_cast<std::size_t>(axis)];
  }
  const std::int64_t out_width = out_shape[static_cast<std::size_t>(axis)] * inner;
  std::vector<double> out(static_cast<std::size_t>(outer * out_width));
  std::int64_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = parts[p].data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(v.begin() + o * widths[p], v.begin() + (o + 1) * widths[p],
                out.begin() + o * out_width + off);
    }
    off += widths[p];
  }
  return make_op("concat", std::move(out_shape), std::move(out), parts,
                 [outer, out_width, widths](detail::TensorNode& self) {
                   std::int64_t off = 0;
                   for (std::size_t p = 0; p < self.inputs.size(); ++p) {
                     const auto& in = self.inputs[p];
                     if (in->requires_grad) {
                       in->ensure_grad();
                       for (std::int64_t o = 0; o < outer; ++o)
                         for (std::int64_t i = 0; i < widths[p]; ++i)
                           in->grad[static_cast<std::size_t>(o * widths[p] + i)] +=
                               self.grad[static_cast<std::size_t>(o * out_width + off + i)];
                     }
                     off += widths[p];
                   }
                 });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization

inline Tensor softmax(const Tensor& a, int axis) {
  const Shape& s = a.shape();
  const int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw std::invalid_argument("softmax: axis out of range");
  std::int64_t outer = 1, inner = 1;
  const std::int64_t len = s[static_cast<std::size_t>(axis)];
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= s[static_cast<std::size_t>(i)];
  const auto& v = a.data();
  std::vector<double> out(v.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * len * inner + i;
      double mx = v[static_cast<std::size_t>(base)];
      for (std::int64_t l = 1; l < len; ++l)
        mx = std::max(mx, v[static_cast<std::size_t>(base + l * inner)]);
      double sum = 0.0;
      for (std::int64_t l = 0; l < len; ++l) {
        const double e = std::exp(v[static_cast<std::size_t>(base + l * inner)] - mx);
        out[static_cast<std::size_t>(base + l * inner)] = e;
        sum += e;
      }
      for (std::int64_t l = 0; l < len; ++l) out[static_cast<std::size_t>(base + l * inner)] /= sum;
    }
  }
  return make_op("softmax", s, std::move(out), {a},
                 [outer, inner, len](detail::TensorNode& self) {
                   const auto& in = self.inputs[0];
                   if (!in->requires_grad) return;
                   in->ensure_grad();
                   const auto& sm = self.value;
                   const auto& g = self.grad;
                   for (std::int64_t o = 0; o < outer; ++o) {
                     for (std::int64_t i = 0; i < inner; ++i) {
                       const std::int64_t base = o * len * inner + i;
                       double dot = 0.0;
                       for (std::int64_t l = 0; l < len; ++l) {
                         const auto k = static_cast<std::size_t>(base + l * inner);
                         dot += g[k] * sm[k];
                       }
                       for (std::int64_t l = 0; l < len; ++l) {
                         const auto k = static_cast<std::size_t>(base + l * inner);
                         in->grad[k] += sm[k] * (g[k] - dot);
                       }
                     }
                   }
                 });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return make_op("sigmoid", a.shape(), std::move(out), {a}, [](detail::TensorNode& self) {
    const auto& in = self.inputs[0];
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double s = self.value[i];
      in->grad[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, a.data()[i]);
  return make_op("relu", a.shape(), std::move(out), {a}, [](detail::TensorNode& self) {
    const auto& in = self.inputs[0];
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (in->value[i] > 0.0) in->grad[i] += self.grad[i];
  });
}

// Exact erf form.
inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  return make_op("gelu", a.shape(), std::move(out), {a}, [=](detail::TensorNode& self) {
    const auto& in = self.inputs[0];
    if (!in->requires_grad) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = in->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      in->grad[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return make_op("sum", Shape{}, {s}, {a}, [](detail::TensorNode& self) {
    const auto& in = self.inputs[0];
    if (!in->requires_grad) return;
    in->ensure_grad();
    const double g = self.grad[0];
    for (double& d : in->grad) d += g;
  });
}

inline Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.size());
  double s = 0.0;
  for (double x : a.data()) s += x;
  return make_op("mean", Shape{}, {s / n}, {a}, [n](detail::TensorNode& self) {
    const auto& in = self.inputs[0];
    if (!in->requires_grad) return;
    in->ensure_grad();
    const double g = self.grad[0] / n;
    for (double& d : in->grad) d += g;
  });
}

// Normalizes over the last axis; gain/bias have that axis's length.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  const Shape& s = x.shape();
  if (s.empty()) throw std::invalid_argument("layer_norm: rank must be >= 1");
  const std::int64_t c = s.back();
  if (gain.shape() != Shape{static_cast<int>(c)} || bias.shape() != Shape{static_cast<int>(c)})
    throw std::invalid_argument("layer_norm: gain/bias must match last axis");
  const std::int64_t rows = x.size() / c;
  const auto& v = x.data();
  std::vector<double> out(v.size());
  std::vector<double> xhat(v.size());
  std::vector<double> inv_sigma(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t base = r * c;
    double mu = 0.0;
    for (std::int64_t i = 0; i < c; ++i) mu += v[static_cast<std::size_t>(base + i)];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t i = 0; i < c; ++i) {
      const double d = v[static_cast<std::size_t>(base + i)] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[static_cast<std::size_t>(r)] = is;
    for (std::int64_t i = 0; i < c; ++i) {
      const auto k = static_cast<std::size_t>(base + i);
      xhat[k] = (v[k] - mu) * is;
      out[k] = gain.data()[static_cast<std::size_t>(i)] * xhat[k] +
               bias.data()[static_cast<std::size_t>(i)];
    }
  }
  return make_op("layer_norm", s, std::move(out), {x, gain, bias},
                 [rows, c, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](
                     detail::TensorNode& self) {
                   const auto& xn = self.inputs[0];
                   const auto& gn = self.inputs[1];
                   const auto& bn = self.inputs[2];
                   const auto& g = self.grad;
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     for (std::int64_t r = 0; r < rows; ++r)
                       for (std::int64_t i = 0; i < c; ++i)
                         bn->grad[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(r * c + i)];
                   }
                   if (gn->requires_grad) {
                     gn->ensure_grad();
                     for (std::int64_t r = 0; r < rows; ++r)
                       for (std::int64_t i = 0; i < c; ++i)
                         gn->grad[static_cast<std::size_t>(i)] +=
                             g[static_cast<std::size_t>(r * c + i)] * xhat[static_cast<std::size_t>(r * c + i)];
                   }
                   if (xn->requires_grad) {
                     xn->ensure_grad();
                     for (std::int64_t r = 0; r < rows; ++r) {
                       const std::int64_t base = r * c;
                       double m1 = 0.0, m2 = 0.0;
                       for (std::int64_t i = 0; i < c; ++i) {
                         const auto k = static_cast<std::size_t>(base + i);
                         const double gg = g[k] * gn->value[static_cast<std::size_t>(i)];
                         m1 += gg;
                         m2 += gg * xhat[k];
                       }
                       m1 /= static_cast<double>(c);
                       m2 /= static_cast<double>(c);
                       const double is = inv_sigma[static_cast<std::size_t>(r)];
                       for (std::int64_t i = 0; i < c; ++i) {
                         const auto k = static_cast<std::size_t>(base + i);
                         const double gg = g[k] * gn->value[static_cast<std::size_t>(i)];
                         xn->grad[k] += is * (gg - m1 - xhat[k] * m2);
                       }
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Image-grid ops on [h, w, c] tensors

namespace detail {

inline void require_hwc(const Tensor& t, const char* op) {
  if (t.rank() != 3) throw std::invalid_argument(std::string(op) + ": expected [h,w,c] tensor");
}

}  // namespace detail

// Per-pixel linear map: x [h,w,cin] * w [cin,cout] + b [cout].
inline Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::require_hwc(x, "conv1x1");
  const int h = x.shape()[0], wd = x.shape()[1], cin = x.shape()[2];
  if (w.rank() != 2 || w.shape()[0] != cin)
    throw std::invalid_argument("conv1x1: weight shape " + shape_str(w.shape()) +
                                " does not accept " + std::to_string(cin) + " channels");
  const int cout = w.shape()[1];
  Tensor flat = reshape(x, {h * wd, cin});
  Tensor y = add(matmul(flat, w), b);
  return reshape(y, {h, wd, cout});
}

inline Tensor avg_pool2(const Tensor& x) {
  detail::require_hwc(x, "avg_pool2");
  const int h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  if (h % 2 || w % 2) throw std::invalid_argument("avg_pool2: odd spatial extent");
  const int oh = h / 2, ow = w / 2;
  const auto& v = x.data();
  std::vector<double> out(static_cast<std::size_t>(oh) * ow * c);
  for (int y = 0; y < oh; ++y)
    for (int xw = 0; xw < ow; ++xw)
      for (int ch = 0; ch < c; ++ch) {
        const auto src = [&](int dy, int dx) {
          return v[(static_cast<std::size_t>(2 * y + dy) * w + (2 * xw + dx)) * c + ch];
        };
        out[(static_cast<std::size_t>(y) * ow + xw) * c + ch] =
            0.25 * (src(0, 0) + src(0, 1) + src(1, 0) + src(1, 1));
      }
  return make_op("avg_pool2", {oh, ow, c}, std::move(out), {x},
                 [h, w, c, oh, ow](detail::TensorNode& self) {
                   const auto& in = self.inputs[0];
                   if (!in->requires_grad) return;
                   in->ensure_grad();
                   for (int y = 0; y < oh; ++y)
                     for (int xw = 0; xw < ow; ++xw)
                       for (int ch = 0; ch < c; ++ch) {
                         const double g =
                             0.25 * self.grad[(static_cast<std::size_t>(y) * ow + xw) * c + ch];
                         for (int dy = 0; dy < 2; ++dy)
                           for (int dx = 0; dx < 2; ++dx)
                             in->grad[(static_cast<std::size_t>(2 * y + dy) * w + (2 * xw + dx)) * c +
                                      ch] += g;
                       }
                 });
}

inline Tensor upsample_nearest(const Tensor& x, int factor) {
  detail::require_hwc(x, "upsample_nearest");
  if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be >= 1");
  const int h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  const int oh = h * factor, ow = w * factor;
  const auto& v = x.data();
  std::vector<double> out(static_cast<std::size_t>(oh) * ow * c);
  for (int y = 0; y < oh; ++y)
    for (int xw = 0; xw < ow; ++xw) {
      const std::size_t src = (static_cast<std::size_t>(y / factor) * w + (xw / factor)) * c;
      const std::size_t dst = (static_cast<std::size_t>(y) * ow + xw) * c;
      for (int ch = 0; ch < c; ++ch) out[dst + ch] = v[src + ch];
    }
  return make_op("upsample_nearest", {oh, ow, c}, std::move(out), {x},
                 [w, c, factor, oh, ow](detail::TensorNode& self) {
                   const auto& in = self.inputs[0];
                   if (!in->requires_grad) return;
                   in->ensure_grad();
                   for (int y = 0; y < oh; ++y)
                     for (int xw = 0; xw < ow; ++xw) {
                       const std::size_t src =
                           (static_cast<std::size_t>(y / factor) * w + (xw / factor)) * c;
                       const std::size_t dst = (static_cast<std::size_t>(y) * ow + xw) * c;
                       for (int ch = 0; ch < c; ++ch) in->grad[src + ch] += self.grad[dst + ch];
                     }
                 });
}

inline Tensor upsample_bilinear(const Tensor& x, int factor) {
  detail::require_hwc(x, "upsample_bilinear");
  if (factor < 1) throw std::invalid_argument("upsample_bilinear: factor must be >= 1");
  const int h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  const int oh = h * factor, ow = w * factor;
  // Half-pixel-centre source coordinates, clamped at the border.
  struct Lerp {
    int i0, i1;
    double t;
  };
  auto axis_map = [factor](int out_len, int in_len) {
    std::vector<Lerp> m(static_cast<std::size_t>(out_len));
    for (int o = 0; o < out_len; ++o) {
      double s = (o + 0.5) / factor - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in_len - 1));
      const int i0 = static_cast<int>(std::floor(s));
      m[static_cast<std::size_t>(o)] = {i0, std::min(i0 + 1, in_len - 1), s - i0};
    }
    return m;
  };
  const auto ym = axis_map(oh, h);
  const auto xm = axis_map(ow, w);
  const auto& v = x.data();
  std::vector<double> out(static_cast<std::size_t>(oh) * ow * c);
  for (int y = 0; y < oh; ++y)
    for (int xw = 0; xw < ow; ++xw) {
      const auto& ly = ym[static_cast<std::size_t>(y)];
      const auto& lx = xm[static_cast<std::size_t>(xw)];
      const std::size_t dst = (static_cast<std::size_t>(y) * ow + xw) * c;
      for (int ch = 0; ch < c; ++ch) {
        auto src = [&](int yy, int xx) {
          return v[(static_cast<std::size_t>(yy) * w + xx) * c + ch];
        };
        const double top = (1.0 - lx.t) * src(ly.i0, lx.i0) + lx.t * src(ly.i0, lx.i1);
        const double bot = (1.0 - lx.t) * src(ly.i1, lx.i0) + lx.t * src(ly.i1, lx.i1);
        out[dst + ch] = (1.0 - ly.t) * top + ly.t * bot;
      }
    }
  return make_op("upsample_bilinear", {oh, ow, c}, std::move(out), {x},
                 [w, c, oh, ow, ym, xm](detail::TensorNode& self) {
                   const auto& in = self.inputs[0];
                   if (!in->requires_grad) return;
                   in->ensure_grad();
                   for (int y = 0; y < oh; ++y)
                     for (int xw = 0; xw < ow; ++xw) {
                       const auto& ly = ym[static_cast<std::size_t>(y)];
                       const auto& lx = xm[static_cast<std::size_t>(xw)];
                       const std::size_t dst = (static_cast<std::size_t>(y) * ow + xw) * c;
                       for (int ch = 0; ch < c; ++ch) {
                         const double g = self.grad[dst + ch];
                         auto acc = [&](int yy, int xx, double wgt) {
                           in->grad[(static_cast<std::size_t>(yy) * w + xx) * c + ch] += wgt * g;
                         };
                         acc(ly.i0, lx.i0, (1.0 - ly.t) * (1.0 - lx.t));
                         acc(ly.i0, lx.i1, (1.0 - ly.t) * lx.t);
                         acc(ly.i1, lx.i0, ly.t * (1.0 - lx.t));
                         acc(ly.i1, lx.i1, ly.t * lx.t);
                       }
                     }
                 });
}

// [h,w,c] -> [(h/p)*(w/p), p*p*c] with tokens in raster order.
inline Tensor extract_patches(const Tensor& x, int p) {
  detail::require_hwc(x, "extract_patches");
  const int h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  if (p < 1 || h % p || w % p)
    throw std::invalid_argument("extract_patches: patch size must divide spatial extent");
  const int gh = h / p, gw = w / p;
  const auto& v = x.data();
  std::vector<double> out(v.size());
  std::size_t k = 0;
  for (int py = 0; py < gh; ++py)
    for (int px = 0; px < gw; ++px)
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx)
          for (int ch = 0; ch < c; ++ch)
            out[k++] = v[(static_cast<std::size_t>(py * p + dy) * w + (px * p + dx)) * c + ch];
  return make_op("extract_patches", {gh * gw, p * p * c}, std::move(out), {x},
                 [h, w, c, p, gh, gw](detail::TensorNode& self) {
                   const auto& in = self.inputs[0];
                   if (!in->requires_grad) return;
                   in->ensure_grad();
                   std::size_t k = 0;
                   for (int py = 0; py < gh; ++py)
                     for (int px = 0; px < gw; ++px)
                       for (int dy = 0; dy < p; ++dy)
                         for (int dx = 0; dx < p; ++dx)
                           for (int ch = 0; ch < c; ++ch)
                             in->grad[(static_cast<std::size_t>(py * p + dy) * w + (px * p + dx)) * c +
                                      ch] += self.grad[k++];
                 });
}

// ---------------------------------------------------------------------------
// Loss

// Mean softmax cross-entropy over rows of [n, k] logits against integer labels.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: expected [n,k] logits");
  const int n = logits.shape()[0], k = logits.shape()[1];
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= k) throw std::invalid_argument("cross_entropy: label out of range");
  const auto& v = logits.data();
  std::vector<double> probs(v.size());
  double loss = 0.0;
  for (int r = 0; r < n; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * k;
    double mx = v[base];
    for (int i = 1; i < k; ++i) mx = std::max(mx, v[base + i]);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
      probs[base + i] = std::exp(v[base + i] - mx);
      sum += probs[base + i];
    }
    for (int i = 0; i < k; ++i) probs[base + i] /= sum;
    loss += std::log(sum) + mx - v[base + static_cast<std::size_t>(labels[r])];
  }
  loss /= static_cast<double>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_op("cross_entropy", Shape{}, {loss}, {logits},
                 [n, k, probs = std::move(probs), lab = std::move(lab)](detail::TensorNode& self) {
                   const auto& in = self.inputs[0];
                   if (!in->requires_grad) return;
                   in->ensure_grad();
                   const double g = self.grad[0] / static_cast<double>(n);
                   for (int r = 0; r < n; ++r) {
                     const std::size_t base = static_cast<std::size_t>(r) * k;
                     for (int i = 0; i < k; ++i) {
                       const double onehot = (i == lab[static_cast<std::size_t>(r)]) ? 1.0 : 0.0;
                       in->grad[base + i] += g * (probs[base + i] - onehot);
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Backward

inline void backward(const Tensor& loss) {
  auto root = loss.node();
  if (!root) throw std::invalid_argument("backward: undefined tensor");
  if (root->numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
  if (!root->requires_grad)
    throw std::invalid_argument("backward: loss is detached from any differentiable input");
  if (root->backward_done)
    throw std::logic_error("backward: already ran for this loss; rebuild the graph or reset");
  root->backward_done = true;

  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> seen;
  std::vector<detail::TensorNode*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    detail::TensorNode* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && !in->is_leaf && seen.insert(in.get()).second)
        stack.push_back(in.get());
    }
  }
  // Tape replay: reverse append order.
  std::sort(order.begin(), order.end(),
            [](const detail::TensorNode* a, const detail::TensorNode* b) { return a->seq > b->seq; });

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (detail::TensorNode* n : order) {
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

}  // namespace rgbdseg
