// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include "msgr/checks.hpp"

#include "doctest.h"

using namespace msgr;

TEST_SUITE_BEGIN("checks");

TEST_CASE("oracle sweep: dominance, tightness and budget hold on a small run") {
  const OracleSweepReport report = oracle_sweep(74, 16, 10000, 5);
  REQUIRE(report.rows.size() == 3);
  CHECK(report.all_dominated());
  CHECK(report.worst_tightness() < 1e-10);
  for (const OracleSweepRow& row : report.rows) {
    CAPTURE(row.p);
    CHECK(row.trials == 74);
    CHECK(row.degenerate == 2);  // trials 36 and 73 use an all-zero gradient
    CHECK(row.max_budget_excess <= 1e-12);
    CHECK(row.min_oracle_ratio > 0.9);  // the search gets close but never wins
  }
}

TEST_CASE("the layer zoo passes its gradient checks") {
  const std::vector<NamedGradCheck> checks = layer_gradient_checks(11);
  REQUIRE(checks.size() >= 8);
  for (const NamedGradCheck& c : checks) {
    CAPTURE(c.name);
    CAPTURE(c.report.max_rel_error);
    CHECK(c.report.pass);
    CHECK(c.report.checked > 0);
    CHECK_FALSE(c.report.nonfinite);
  }
}

TEST_CASE("penalty parameter gradients survive a strided finite-difference sweep") {
  const PenaltyFdReport report = penalty_parameter_fd(3, 17);
  CAPTURE(report.max_rel_error);
  CHECK(report.parameter_count > 100);
  CHECK(report.parameter_count < 5000);
  CHECK(report.coords_checked > 10);
  CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("double backward of a quadratic is exact") {
  CHECK(quadratic_double_backward_max_abs_err(129) == 0.0);
}

TEST_CASE("stagewise vector-Jacobian products compose to the end-to-end gradient") {
  const ChainCheckRun run = msfl_chain_check(21);
  REQUIRE(run.report.stage_errors.size() == 2);
  CHECK(run.input_grad_norm > 1e-8);  // the comparison had teeth
  CHECK(run.report.max_rel_error < 1e-8);
}

TEST_SUITE_END();
