#pragma once

// Tensor file format: "TNSR" magic, u32 little-endian rank, u32 little-endian
// axis lengths, then row-major f64 payload, also little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "rgbdseg/errors.hpp"
#include "rgbdseg/tensor.hpp"

namespace rgbdseg {

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "tensor serialization assumes a little-endian host");

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint32_t read_u32(std::istream& is, const std::string& path) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw IoError("truncated tensor file: " + path);
  return v;
}

}  // namespace detail

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os.write("TNSR", 4);
  detail::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) detail::write_u32(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.data().size() * sizeof(double)));
  if (!os) throw IoError("write failed: " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path, bool requires_grad = false) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  char magic[4] = {};
  if (!is.read(magic, 4) || std::memcmp(magic, "TNSR", 4) != 0)
    throw IoError("not a tensor file: " + path.string());
  const std::uint32_t rank = detail::read_u32(is, path.string());
  if (rank > 8) throw IoError("implausible tensor rank in " + path.string());
  Shape shape(rank);
  std::int64_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t d = detail::read_u32(is, path.string());
    if (d == 0 || d > (1u << 28)) throw IoError("implausible axis length in " + path.string());
    shape[i] = static_cast<int>(d);
    n *= d;
  }
  std::vector<double> data(static_cast<std::size_t>(n));
  if (!is.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(double))))
    throw IoError("truncated tensor file: " + path.string());
  char extra = 0;
  if (is.read(&extra, 1)) throw IoError("trailing bytes in tensor file: " + path.string());
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace rgbdseg
