// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "msgr/tensor.hpp"

namespace msgr {

// Binary tensor record: magic "MSGR", u32 version (1), u32 rank,
// u64 extent per axis, then numel f64 values. All integers and floats
// little-endian.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// 8-bit binary PGM (magic P5). Values are rescaled so min -> 0 and
// max -> 255; a constant map renders mid-gray.
void write_pgm(const std::string& path, const Tensor& map_hw);

// 8-bit binary PPM (magic P6) from a (3,H,W) tensor with values in [0,1].
void write_ppm(const std::string& path, const Tensor& rgb_chw);

// CRC-32 (IEEE 802.3 polynomial, reflected), used by checkpoint trailers.
uint32_t crc32(const void* data, size_t size, uint32_t seed = 0);

}  // namespace msgr
