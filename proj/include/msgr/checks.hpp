// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msgr/autodiff.hpp"
#include "msgr/model.hpp"
#include "msgr/regularizer.hpp"

namespace msgr {

// Reusable verification sweeps shared by the command-line harness and the
// release gate. Each returns raw measurements; pass thresholds live with
// the callers so every gate pins its own tolerances.

// Closed-form perturbation vs the projected-search oracle, per norm order.
struct OracleSweepRow {
  std::string p;
  int64_t trials = 0;
  int64_t dominated = 0;   // closed form attained >= oracle attained
  int64_t degenerate = 0;  // zero-gradient trials (flagged, excluded from ratios)
  double max_tightness_err = 0.0;  // |attained - sigma*dual_norm| / (sigma*dual_norm)
  double min_oracle_ratio = 1.0;   // worst oracle/closed ratio (search quality)
  double max_budget_excess = 0.0;  // max (||eps||_p - sigma) / sigma over both
};

struct OracleSweepReport {
  std::vector<OracleSweepRow> rows;
  double seconds = 0.0;
  bool all_dominated() const;
  double worst_tightness() const;
};

OracleSweepReport oracle_sweep(int64_t trials_per_p, int64_t max_dim, int64_t oracle_samples,
                               uint64_t seed);

// Finite-difference gradient checks over the layer zoo, one row per graph.
struct NamedGradCheck {
  std::string name;
  double tolerance = 0.0;
  GradCheckReport report;
};

std::vector<NamedGradCheck> layer_gradient_checks(uint64_t seed);

// d(penalty)/d(theta) against central differences on a two-conv pipeline
// with the penalty targeting both the input and the mid-stage map — the
// full double-backward path. coord_stride subsamples parameter coordinates
// (1 = every coordinate).
struct PenaltyFdReport {
  double max_rel_error = 0.0;
  int64_t parameter_count = 0;
  int64_t coords_checked = 0;
  double seconds = 0.0;
};

PenaltyFdReport penalty_parameter_fd(uint64_t seed, int64_t coord_stride, double fd_step = 1e-5);

// For loss = sum(x^2) the gradient of ||grad_x loss||_2^2 is 8x with every
// intermediate representable exactly; returns the max absolute deviation.
double quadratic_double_backward_max_abs_err(int64_t n);

// Shared toy topology for the chain and end-to-end checks.
MsflConfig toy_msfl_config();

// End-to-end input gradient vs composed stagewise vector-Jacobian products
// on the toy pyramid model, cut at the backbone/pyramid boundary. The run
// records the gradient magnitude so callers can see the comparison had
// teeth (a dead tiny model would pass vacuously).
struct ChainCheckRun {
  ChainCheckReport report;
  double input_grad_norm = 0.0;
  uint64_t salt_used = 0;
};

ChainCheckRun msfl_chain_check(uint64_t seed);

}  // namespace msgr
