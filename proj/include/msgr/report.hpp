// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <vector>

namespace msgr {

// Minimal artifact writers for human review: CSV tables and self-contained
// SVG line charts. Output is deterministic for equal inputs.

// Quotes a field only when it contains a comma, quote or newline.
std::string csv_field(const std::string& value);

// Writes rows as-is; ragged rows are allowed (headers vs data is the
// caller's concern).
void write_csv(const std::string& path, std::span<const std::vector<std::string>> rows);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;  // same length as x
};

// A fixed-size line chart with axes, ticks and a legend. Degenerate ranges
// (single point, constant series) are padded rather than divided by zero.
std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, std::span<const Series> series);

void write_svg_line_chart(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          std::span<const Series> series);

}  // namespace msgr
