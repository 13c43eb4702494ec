// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "dia/tensor.hpp"

namespace dia::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), 4);
}

inline void put_f64(std::ostream& os, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), 8);
}

inline std::uint64_t get_le(std::istream& is, int nbytes, const char* what) {
  std::array<unsigned char, 8> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), nbytes))
    throw FormatError(std::string("DFT1: truncated ") + what);
  std::uint64_t v = 0;
  for (int i = 0; i < nbytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

// DFT1 layout: "DFT1", u32 rank, rank x u32 extents, row-major f64 payload.
// Everything little-endian regardless of host byte order.
inline void write_dft1(std::ostream& os, const Tensor& t) {
  os.write("DFT1", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(t.shape().size()));
  for (auto e : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(e));
  for (double v : t) detail::put_f64(os, v);
  if (!os) throw std::runtime_error("DFT1: write failed");
}

inline Tensor read_dft1(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "DFT1", 4) != 0) throw FormatError("DFT1: bad magic");
  const auto rank = static_cast<std::uint32_t>(detail::get_le(is, 4, "rank"));
  if (rank == 0 || rank > 16) throw FormatError("DFT1: unsupported rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = static_cast<std::size_t>(detail::get_le(is, 4, "extent"));
    if (e == 0) throw FormatError("DFT1: zero extent");
  }
  Tensor t(shape);
  for (auto& v : t) v = std::bit_cast<double>(detail::get_le(is, 8, "payload"));
  return t;
}

inline void save_dft1(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_dft1(os, t);
}

inline Tensor load_dft1(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_dft1(is);
}

// PGM (P5, maxval 255). Pixel p maps to p/255 on load; on save values are
// clamped to [0,1] and rounded to the nearest level.
inline void write_pgm(std::ostream& os, const Tensor& img) {
  if (img.shape().size() != 2) throw std::invalid_argument("PGM: expected rank-2 image, got " + shape_str(img.shape()));
  const auto h = img.shape()[0], w = img.shape()[1];
  os << "P5\n" << w << ' ' << h << "\n255\n";
  for (double v : img) {
    const auto q = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    os.put(static_cast<char>(q));
  }
  if (!os) throw std::runtime_error("PGM: write failed");
}

namespace detail {

inline std::size_t pgm_token(std::istream& is) {
  int c = is.get();
  for (;;) {
    while (c != EOF && std::isspace(c)) c = is.get();
    if (c != '#') break;
    while (c != EOF && c != '\n') c = is.get();
  }
  if (c == EOF || !std::isdigit(c)) throw FormatError("PGM: malformed header");
  std::size_t v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + static_cast<std::size_t>(c - '0');
    if (v > 1'000'000) throw FormatError("PGM: header value out of range");
    c = is.get();
  }
  // exactly one whitespace byte terminates the header field
  if (c == EOF || !std::isspace(c)) throw FormatError("PGM: malformed header");
  return v;
}

}  // namespace detail

inline Tensor read_pgm(std::istream& is) {
  char magic[2];
  if (!is.read(magic, 2) || magic[0] != 'P' || magic[1] != '5') throw FormatError("PGM: expected P5 magic");
  const auto w = detail::pgm_token(is);
  const auto h = detail::pgm_token(is);
  const auto maxval = detail::pgm_token(is);
  if (w == 0 || h == 0) throw FormatError("PGM: zero dimension");
  if (maxval != 255) throw FormatError("PGM: only 8-bit (maxval 255) supported");
  Tensor img({h, w});
  for (auto& v : img) {
    const int c = is.get();
    if (c == EOF) throw FormatError("PGM: truncated pixel data");
    v = static_cast<double>(c) / 255.0;
  }
  return img;
}

inline void save_pgm(const std::filesystem::path& path, const Tensor& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_pgm(os, img);
}

inline Tensor load_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_pgm(is);
}

}  // namespace dia::io
