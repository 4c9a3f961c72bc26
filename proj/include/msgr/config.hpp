// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "msgr/model.hpp"
#include "msgr/objective.hpp"
#include "msgr/regularizer.hpp"
#include "msgr/train.hpp"

namespace msgr {

// One experiment, fully determined: every run writes render() next to its
// artifacts, and parsing that echo reproduces the run bit for bit.
//
// The text format is line-oriented `key = value` with `#` comments. Keys are
// dotted paths from the fixed schema below; unknown keys, malformed values
// and duplicate keys are all collected and rejected together. Lists are
// comma-separated; booleans are on/off (true/false/1/0 accepted on input).
struct ExperimentConfig {
  MsflConfig model;
  RegularizerConfig reg;
  bool dump_eps = false;
  PkBatchSpec batch;
  bool triplet_enabled = false;
  double triplet_margin = 0.3;
  Schedule schedule;      // as written in the file, before scaling
  double schedule_scale = 1.0;
  std::string data_path;
  std::string out_dir;
  uint64_t seed = 1;
  int64_t checkpoint_every = 10;

  // Throws std::invalid_argument listing every problem found, not just the
  // first: unknown keys, duplicates, and per-value parse failures.
  static ExperimentConfig parse_text(const std::string& text);
  static ExperimentConfig parse_file(const std::string& path);

  // Command-line overrides, each "key=value" with schema checking as above.
  void apply_overrides(std::span<const std::string> specs);

  // Semantic validation across fields; delegates to the component
  // validators and reports their complaints in one exception.
  void validate() const;

  // The schedule actually run: floor-scaled by schedule_scale.
  Schedule scaled_schedule() const;

  // Canonical echo: every schema key, fixed order, floats at full
  // precision. parse_text(render()) reproduces *this exactly.
  std::string render() const;
};

// All schema keys in render order (exposed for exhaustive-coverage tests).
std::vector<std::string> config_schema_keys();

}  // namespace msgr
