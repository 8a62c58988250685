#pragma once

// Binary NetPBM readers/writers: P6 color (8-bit) and P5 grayscale (8- or
// 16-bit, big-endian samples as the format prescribes). Headers may carry
// '#' comments; a single whitespace byte separates the maxval from the
// payload.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "rgbdseg/errors.hpp"

namespace rgbdseg {

struct PpmImage {
  int h = 0, w = 0;
  std::vector<std::uint8_t> pix;  // rgb interleaved, row-major
};

struct PgmImage {
  int h = 0, w = 0;
  int maxval = 255;
  std::vector<std::uint16_t> pix;  // row-major
};

namespace detail {

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  std::string s((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return s;
}

// Whitespace- and comment-skipping integer scanner over the header bytes.
struct HeaderScanner {
  const std::string& buf;
  std::size_t pos = 0;
  const std::string path;

  void skip_separators() {
    while (pos < buf.size()) {
      const char c = buf[pos];
      if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos;
      } else if (c == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  }

  long next_int() {
    skip_separators();
    if (pos >= buf.size() || !std::isdigit(static_cast<unsigned char>(buf[pos])))
      throw IoError("malformed NetPBM header: " + path);
    long v = 0;
    while (pos < buf.size() && std::isdigit(static_cast<unsigned char>(buf[pos]))) {
      v = v * 10 + (buf[pos] - '0');
      if (v > (1l << 31)) throw IoError("NetPBM header value out of range: " + path);
      ++pos;
    }
    return v;
  }

  // One whitespace byte terminates the header; payload follows immediately.
  std::size_t payload_offset() {
    if (pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[pos])))
      throw IoError("malformed NetPBM header: " + path);
    return pos + 1;
  }
};

inline void check_magic(const std::string& buf, const char* magic, const std::string& path) {
  if (buf.size() < 2 || buf[0] != magic[0] || buf[1] != magic[1])
    throw IoError(std::string("not a ") + magic + " file: " + path);
}

}  // namespace detail

inline void write_ppm(const std::filesystem::path& path, const PpmImage& img) {
  if (img.h < 1 || img.w < 1 ||
      img.pix.size() != static_cast<std::size_t>(img.h) * img.w * 3)
    throw std::invalid_argument("write_ppm: inconsistent image");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "P6\n" << img.w << " " << img.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pix.data()),
           static_cast<std::streamsize>(img.pix.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

inline PpmImage read_ppm(const std::filesystem::path& path) {
  const std::string buf = detail::slurp(path);
  detail::check_magic(buf, "P6", path.string());
  detail::HeaderScanner sc{buf, 2, path.string()};
  const long w = sc.next_int();
  const long h = sc.next_int();
  const long maxval = sc.next_int();
  if (w < 1 || h < 1) throw IoError("bad PPM extent: " + path.string());
  if (maxval != 255) throw IoError("unsupported PPM maxval (expected 255): " + path.string());
  const std::size_t off = sc.payload_offset();
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  if (buf.size() - off < need) throw IoError("truncated PPM payload: " + path.string());
  if (buf.size() - off > need) throw IoError("trailing bytes in PPM: " + path.string());
  PpmImage img;
  img.w = static_cast<int>(w);
  img.h = static_cast<int>(h);
  img.pix.assign(reinterpret_cast<const std::uint8_t*>(buf.data() + off),
                 reinterpret_cast<const std::uint8_t*>(buf.data() + off + need));
  return img;
}

inline void write_pgm(const std::filesystem::path& path, const PgmImage& img) {
  if (img.h < 1 || img.w < 1 ||
      img.pix.size() != static_cast<std::size_t>(img.h) * img.w)
    throw std::invalid_argument("write_pgm: inconsistent image");
  if (img.maxval < 1 || img.maxval > 65535)
    throw std::invalid_argument("write_pgm: maxval out of range");
  for (std::uint16_t v : img.pix)
    if (v > img.maxval) throw std::invalid_argument("write_pgm: sample exceeds maxval");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << "P5\n" << img.w << " " << img.h << "\n" << img.maxval << "\n";
  if (img.maxval <= 255) {
    for (std::uint16_t v : img.pix) os.put(static_cast<char>(v & 0xff));
  } else {
    for (std::uint16_t v : img.pix) {
      os.put(static_cast<char>(v >> 8));
      os.put(static_cast<char>(v & 0xff));
    }
  }
  if (!os) throw IoError("write failed: " + path.string());
}

inline PgmImage read_pgm(const std::filesystem::path& path) {
  const std::string buf = detail::slurp(path);
  detail::check_magic(buf, "P5", path.string());
  detail::HeaderScanner sc{buf, 2, path.string()};
  const long w = sc.next_int();
  const long h = sc.next_int();
  const long maxval = sc.next_int();
  if (w < 1 || h < 1) throw IoError("bad PGM extent: " + path.string());
  if (maxval < 1 || maxval > 65535) throw IoError("bad PGM maxval: " + path.string());
  const std::size_t off = sc.payload_offset();
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  const std::size_t bytes = maxval <= 255 ? n : 2 * n;
  if (buf.size() - off < bytes) throw IoError("truncated PGM payload: " + path.string());
  if (buf.size() - off > bytes) throw IoError("trailing bytes in PGM: " + path.string());
  PgmImage img;
  img.w = static_cast<int>(w);
  img.h = static_cast<int>(h);
  img.maxval = static_cast<int>(maxval);
  img.pix.resize(n);
  const auto* p = reinterpret_cast<const std::uint8_t*>(buf.data() + off);
  if (maxval <= 255) {
    for (std::size_t i = 0; i < n; ++i) img.pix[i] = p[i];
  } else {
    for (std::size_t i = 0; i < n; ++i)
      img.pix[i] = static_cast<std::uint16_t>((p[2 * i] << 8) | p[2 * i + 1]);
  }
  return img;
}

}  // namespace rgbdseg
