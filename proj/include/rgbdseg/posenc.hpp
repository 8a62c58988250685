#pragma once

// Depth-aware sinusoidal position encodings.
//
// A coordinate i in [0,1] maps to a C-vector whose channel c carries
// sin(i * pi * I^(c/C)) for even c and cos of the same argument for odd c;
// the per-channel frequency sweep runs from pi up to (just below) pi * I.
// The 2-D form sums the encodings of the two spatial coordinates; the 3-D
// form adds a third encoding of normalized disparity, so depth enters the
// token stream without any learned parameters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "rgbdseg/tensor.hpp"

namespace rgbdseg {

struct PeSpec {
  int channels = 64;  // C: even, >= 2
  double scale = 512.0;  // I: maximum pre-normalization coordinate, > 1

  void validate() const {
    if (channels < 2 || channels % 2 != 0)
      throw std::invalid_argument("PeSpec: channels must be even and >= 2, got " +
                                  std::to_string(channels));
    if (!(scale > 1.0))
      throw std::invalid_argument("PeSpec: scale must exceed 1, got " + std::to_string(scale));
  }
};

enum class PeMode { none, two_d, three_d };

inline const char* to_string(PeMode m) {
  switch (m) {
    case PeMode::none: return "none";
    case PeMode::two_d: return "2d";
    case PeMode::three_d: return "3d";
  }
  throw std::logic_error("unreachable");
}

inline PeMode parse_pe_mode(const std::string& s) {
  if (s == "none") return PeMode::none;
  if (s == "2d") return PeMode::two_d;
  if (s == "3d") return PeMode::three_d;
  throw std::invalid_argument("unknown pe mode '" + s + "' (expected none|2d|3d)");
}

namespace detail {

// Shared kernel for the 1-, 2- and 3-coordinate encodings. The whole row is
// evaluated in extended precision and rounded to double once; the per-channel
// addends are summed in sorted order, which makes the result bitwise
// invariant under any permutation of the coordinates.
inline void pe_sum_row(const double* coords, int ncoords, const PeSpec& spec, double* out) {
  const long double log2_scale = std::log2(static_cast<long double>(spec.scale));
  const long double pi = std::numbers::pi_v<long double>;
  for (int c = 0; c < spec.channels; ++c) {
    const long double freq =
        std::exp2(log2_scale * static_cast<long double>(c) / static_cast<long double>(spec.channels));
    long double vals[3];
    for (int k = 0; k < ncoords; ++k) {
      const long double arg = static_cast<long double>(coords[k]) * pi * freq;
      vals[k] = (c % 2 == 0) ? std::sin(arg) : std::cos(arg);
    }
    std::sort(vals, vals + ncoords);
    long double s = 0.0L;
    for (int k = 0; k < ncoords; ++k) s += vals[k];
    out[c] = static_cast<double>(s);
  }
}

inline void check_unit(double x, const char* name) {
  if (!(x >= 0.0 && x <= 1.0))
    throw std::domain_error(std::string(name) + " must lie in [0,1], got " + std::to_string(x));
}

}  // namespace detail

inline std::vector<double> pe1d(double i, const PeSpec& spec) {
  spec.validate();
  detail::check_unit(i, "coordinate");
  std::vector<double> out(static_cast<std::size_t>(spec.channels));
  detail::pe_sum_row(&i, 1, spec, out.data());
  return out;
}

inline std::vector<double> pe2d(double u, double v, const PeSpec& spec) {
  spec.validate();
  detail::check_unit(u, "u");
  detail::check_unit(v, "v");
  const double coords[2] = {u, v};
  std::vector<double> out(static_cast<std::size_t>(spec.channels));
  detail::pe_sum_row(coords, 2, spec, out.data());
  return out;
}

inline std::vector<double> pe3d(double u, double v, double d, const PeSpec& spec) {
  spec.validate();
  detail::check_unit(u, "u");
  detail::check_unit(v, "v");
  detail::check_unit(d, "d");
  const double coords[3] = {u, v, d};
  std::vector<double> out(static_cast<std::size_t>(spec.channels));
  detail::pe_sum_row(coords, 3, spec, out.data());
  return out;
}

// Per-token normalized coordinates for one grid resolution, raster order.
struct TokenCoords {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<double> u;  // horizontal token-centre fraction
  std::vector<double> v;  // vertical token-centre fraction
  std::vector<double> d;  // normalized disparity, zero unless set

  std::size_t size() const { return u.size(); }
};

inline TokenCoords grid_coords(int grid_h, int grid_w) {
  if (grid_h < 1 || grid_w < 1) throw std::invalid_argument("grid_coords: empty grid");
  TokenCoords tc;
  tc.grid_h = grid_h;
  tc.grid_w = grid_w;
  tc.u.reserve(static_cast<std::size_t>(grid_h) * grid_w);
  tc.v.reserve(tc.u.capacity());
  for (int y = 0; y < grid_h; ++y)
    for (int x = 0; x < grid_w; ++x) {
      tc.u.push_back((x + 0.5) / grid_w);
      tc.v.push_back((y + 0.5) / grid_h);
    }
  tc.d.assign(tc.u.size(), 0.0);
  return tc;
}

// [n, C] encoding matrix for a coordinate grid. Mode `none` yields zeros so
// callers can add it unconditionally.
inline Tensor pe_matrix(const TokenCoords& coords, const PeSpec& spec, PeMode mode) {
  spec.validate();
  const std::size_t n = coords.size();
  if (n == 0) throw std::invalid_argument("pe_matrix: empty grid");
  if (coords.v.size() != n || coords.d.size() != n)
    throw std::invalid_argument("pe_matrix: ragged coordinate arrays");
  std::vector<double> out(n * static_cast<std::size_t>(spec.channels), 0.0);
  if (mode != PeMode::none) {
    for (std::size_t t = 0; t < n; ++t) {
      double* row = out.data() + t * static_cast<std::size_t>(spec.channels);
      detail::check_unit(coords.u[t], "u");
      detail::check_unit(coords.v[t], "v");
      double c3[3] = {coords.u[t], coords.v[t], 0.0};
      int nc = 2;
      if (mode == PeMode::three_d) {
        detail::check_unit(coords.d[t], "d");
        c3[2] = coords.d[t];
        nc = 3;
      }
      detail::pe_sum_row(c3, nc, spec, row);
    }
  }
  return Tensor::from_data({static_cast<int>(n), spec.channels}, std::move(out));
}

// [n, C] matrix of 1-D encodings over n token centres; rendered by the
// `embedding-matrix` subcommand.
inline Tensor pe_table(int n, const PeSpec& spec) {
  spec.validate();
  if (n < 1) throw std::invalid_argument("pe_table: need at least one position");
  std::vector<double> out(static_cast<std::size_t>(n) * spec.channels);
  for (int t = 0; t < n; ++t) {
    const double i = (t + 0.5) / n;
    detail::pe_sum_row(&i, 1, spec, out.data() + static_cast<std::size_t>(t) * spec.channels);
  }
  return Tensor::from_data({n, spec.channels}, std::move(out));
}

// Cosine similarity between one row of an [n, C] matrix and every row.
inline std::vector<double> similarity_map(const Tensor& mat, int target) {
  if (mat.rank() != 2) throw std::invalid_argument("similarity_map: expected [n,C] matrix");
  const int n = mat.shape()[0], c = mat.shape()[1];
  if (target < 0 || target >= n) throw std::invalid_argument("similarity_map: target out of range");
  const auto& v = mat.data();
  auto norm = [&](int row) {
    double s = 0.0;
    for (int i = 0; i < c; ++i) {
      const double x = v[static_cast<std::size_t>(row) * c + i];
      s += x * x;
    }
    return std::sqrt(s);
  };
  const double tn = norm(target);
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  if (tn == 0.0) return out;
  for (int r = 0; r < n; ++r) {
    const double rn = norm(r);
    if (rn == 0.0) continue;
    double dot = 0.0;
    for (int i = 0; i < c; ++i)
      dot += v[static_cast<std::size_t>(target) * c + i] * v[static_cast<std::size_t>(r) * c + i];
    out[static_cast<std::size_t>(r)] = std::clamp(dot / (tn * rn), -1.0, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Raw disparity-map utilities (plain row-major [h*w] buffers, not tensors)

// Replaces zero-valued (invalid) pixels with the value of the nearest valid
// pixel by breadth-first distance over the 4-neighborhood; raster order of
// the valid seeds breaks ties deterministically.
inline std::vector<double> fill_invalid_disparity(const std::vector<double>& map, int h, int w) {
  if (h < 1 || w < 1 || map.size() != static_cast<std::size_t>(h) * w)
    throw std::invalid_argument("fill_invalid_disparity: bad extent");
  std::vector<double> out = map;
  std::deque<int> frontier;
  for (int p = 0; p < h * w; ++p)
    if (out[static_cast<std::size_t>(p)] != 0.0) frontier.push_back(p);
  if (frontier.empty())
    throw std::invalid_argument("fill_invalid_disparity: map has no valid pixels");
  while (!frontier.empty()) {
    const int p = frontier.front();
    frontier.pop_front();
    const int y = p / w, x = p % w;
    const int neighbors[4] = {y > 0 ? p - w : -1, x > 0 ? p - 1 : -1, x + 1 < w ? p + 1 : -1,
                              y + 1 < h ? p + w : -1};
    for (int q : neighbors) {
      if (q >= 0 && out[static_cast<std::size_t>(q)] == 0.0) {
        out[static_cast<std::size_t>(q)] = out[static_cast<std::size_t>(p)];
        frontier.push_back(q);
      }
    }
  }
  return out;
}

// Mean over factor x factor blocks; factor must divide both extents.
inline std::vector<double> avg_pool_map(const std::vector<double>& map, int h, int w, int factor) {
  if (factor < 1 || h % factor || w % factor || map.size() != static_cast<std::size_t>(h) * w)
    throw std::invalid_argument("avg_pool_map: bad extent or factor");
  const int oh = h / factor, ow = w / factor;
  std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out[static_cast<std::size_t>(y / factor) * ow + (x / factor)] +=
          map[static_cast<std::size_t>(y) * w + x];
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  for (double& x : out) x *= inv;
  return out;
}

// raw / dscale clamped into [0,1]; dscale is the maximum expected disparity.
inline std::vector<double> normalize_disparity(const std::vector<double>& map, double dscale) {
  if (!(dscale > 0.0)) throw std::invalid_argument("normalize_disparity: dscale must be positive");
  std::vector<double> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = std::clamp(map[i] / dscale, 0.0, 1.0);
  return out;
}

}  // namespace rgbdseg
