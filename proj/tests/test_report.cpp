// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include "msgr/report.hpp"

#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"

using namespace msgr;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("report");

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

size_t count_of(const std::string& hay, const std::string& needle) {
  size_t n = 0;
  for (size_t pos = hay.find(needle); pos != std::string::npos;
       pos = hay.find(needle, pos + needle.size()))
    ++n;
  return n;
}

}  // namespace

TEST_CASE("csv fields are quoted only when they need to be") {
  CHECK(csv_field("plain") == "plain");
  CHECK(csv_field("3.5e-4") == "3.5e-4");
  CHECK(csv_field("a,b") == "\"a,b\"");
  CHECK(csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
  CHECK(csv_field("two\nlines") == "\"two\nlines\"");
}

TEST_CASE("write_csv emits exactly the expected bytes") {
  const fs::path dir = fs::temp_directory_path() / "msgr_test_report";
  fs::create_directories(dir);
  const std::vector<std::vector<std::string>> rows{{"row", "rank1", "widths"},
                                                   {"full", "0.75", "16,32,64,128"}};
  const fs::path file = dir / "t.csv";
  write_csv(file.string(), rows);
  CHECK(slurp(file) == "row,rank1,widths\nfull,0.75,\"16,32,64,128\"\n");
  fs::remove_all(dir);
}

TEST_CASE("a chart has one polyline per series and escapes labels") {
  const std::vector<Series> series{{"a<b", {0, 1, 2}, {0.5, 0.7, 0.6}},
                                   {"base", {0, 1, 2}, {0.4, 0.4, 0.5}}};
  const std::string svg = svg_line_chart("rank-1 & mAP", "epoch", "value", series);
  CHECK(count_of(svg, "<polyline") == 2);
  CHECK(svg.find("a&lt;b") != std::string::npos);
  CHECK(svg.find("rank-1 &amp; mAP") != std::string::npos);
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
}

TEST_CASE("identical inputs render identical charts") {
  const std::vector<Series> series{{"s", {0, 1}, {1.0, 2.0}}};
  CHECK(svg_line_chart("t", "x", "y", series) == svg_line_chart("t", "x", "y", series));
}

TEST_CASE("flat and single-point series render without NaN coordinates") {
  const std::vector<Series> flat{{"flat", {0, 1, 2}, {0.25, 0.25, 0.25}}};
  const std::vector<Series> single{{"dot", {3}, {7.0}}};
  for (const auto& s : {flat, single}) {
    const std::string svg = svg_line_chart("t", "x", "y", s);
    CHECK(svg.find("nan") == std::string::npos);
    CHECK(svg.find("inf") == std::string::npos);
  }
}

TEST_CASE("non-finite points are dropped from the polyline, not drawn") {
  const std::vector<Series> series{
      {"s", {0, 1, 2, 3}, {1.0, std::numeric_limits<double>::quiet_NaN(), 3.0, 4.0}}};
  const std::string svg = svg_line_chart("t", "x", "y", series);
  const size_t start = svg.find("points=\"");
  REQUIRE(start != std::string::npos);
  const size_t end = svg.find('"', start + 8);
  const std::string points = svg.substr(start + 8, end - start - 8);
  CHECK(count_of(points, ",") == 3);  // three finite points survive
  CHECK(svg.find("nan") == std::string::npos);
}

TEST_SUITE_END();
