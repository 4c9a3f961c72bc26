// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include "msgr/tensor_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace msgr {

namespace {

constexpr std::array<char, 4> kMagic = {'M', 'S', 'G', 'R'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "tensor records assume a little-endian host");

template <typename T>
void write_le(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw std::runtime_error("tensor record: truncated stream");
  return value;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  if (!t.defined()) throw std::invalid_argument("write_tensor: undefined tensor");
  os.write(kMagic.data(), kMagic.size());
  write_le<uint32_t>(os, kVersion);
  write_le<uint32_t>(os, static_cast<uint32_t>(t.rank()));
  for (int64_t e : t.shape().extents()) write_le<uint64_t>(os, static_cast<uint64_t>(e));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
  if (!os) throw std::runtime_error("write_tensor: stream write failed");
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw std::runtime_error("tensor record: bad magic");
  const uint32_t version = read_le<uint32_t>(is);
  if (version != kVersion)
    throw std::runtime_error("tensor record: unsupported version " + std::to_string(version));
  const uint32_t rank = read_le<uint32_t>(is);
  if (rank < 1 || rank > 8) throw std::runtime_error("tensor record: implausible rank");
  std::vector<int64_t> extents(rank);
  int64_t numel = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    const uint64_t e = read_le<uint64_t>(is);
    if (e < 1 || e > (1ull << 32)) throw std::runtime_error("tensor record: implausible extent");
    extents[i] = static_cast<int64_t>(e);
    numel *= extents[i];
  }
  if (numel > (1ll << 31)) throw std::runtime_error("tensor record: implausible element count");
  std::vector<double> data(static_cast<size_t>(numel));
  is.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!is) throw std::runtime_error("tensor record: truncated data");
  return Tensor::from(Shape(std::move(extents)), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_tensor: cannot open " + path);
  write_tensor(os, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_tensor: cannot open " + path);
  return read_tensor(is);
}

void write_pgm(const std::string& path, const Tensor& map_hw) {
  if (map_hw.rank() != 2) throw std::invalid_argument("write_pgm: map must be rank 2");
  const int64_t h = map_hw.shape().extent(0), w = map_hw.shape().extent(1);
  double lo = map_hw[0], hi = map_hw[0];
  for (double v : map_hw.span()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double range = hi - lo;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
  os << "P5\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(w));
  const double* p = map_hw.data();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const double v = p[y * w + x];
      const double scaled = range > 0.0 ? (v - lo) / range * 255.0 : 128.0;
      row[static_cast<size_t>(x)] =
          static_cast<unsigned char>(std::clamp(std::lround(scaled), 0l, 255l));
    }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(w));
  }
  if (!os) throw std::runtime_error("write_pgm: stream write failed");
}

void write_ppm(const std::string& path, const Tensor& rgb_chw) {
  if (rgb_chw.rank() != 3 || rgb_chw.shape().extent(0) != 3)
    throw std::invalid_argument("write_ppm: image must have shape (3,H,W)");
  const int64_t h = rgb_chw.shape().extent(1), w = rgb_chw.shape().extent(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_ppm: cannot open " + path);
  os << "P6\n" << w << ' ' << h << "\n255\n";
  const double* p = rgb_chw.data();
  std::vector<unsigned char> row(static_cast<size_t>(3 * w));
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < 3; ++c) {
        const double v = std::clamp(p[(c * h + y) * w + x], 0.0, 1.0);
        row[static_cast<size_t>(3 * x + c)] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(3 * w));
  }
  if (!os) throw std::runtime_error("write_ppm: stream write failed");
}

uint32_t crc32(const void* data, size_t size, uint32_t seed) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t crc = ~seed;
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < size; ++i) crc = table[(crc ^ p[i]) & 0xFFu] ^ (crc >> 8);
  return ~crc;
}

}  // namespace msgr
