// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "msgr/autodiff.hpp"
#include "msgr/model.hpp"
#include "msgr/objective.hpp"
#include "msgr/regularizer.hpp"
#include "msgr/tensor.hpp"

namespace msgr {

// Piecewise-constant step schedule: the rate multiplies by decay_factor AT
// each listed epoch and stays there.
struct Schedule {
  double base_lr = 3.5e-4;
  double decay_factor = 0.1;
  std::vector<int64_t> decay_epochs{40, 70};
  int64_t total_epochs = 120;

  // Throws listing every violation: factor in (0,1], positive base rate and
  // length, decay epochs strictly increasing and inside [1, total).
  void validate() const;
};

// Proportionally shrunk copy for desk-scale runs: epoch counts and decay
// points are floor-scaled, each decay clamped to stay >= 1.
Schedule scaled(const Schedule& canonical, double scale);

double lr_at(const Schedule& schedule, int64_t epoch);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam over a fixed parameter list. A step either applies to
// every parameter or — on any non-finite gradient — to none.
class Adam {
 public:
  explicit Adam(std::vector<Parameter*> params, AdamConfig config = {});

  // grads aligned with the constructor's parameter order.
  void step(double lr, std::span<const Tensor> grads);

  int64_t steps() const { return step_; }
  const std::vector<Parameter*>& params() const { return params_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void restore(int64_t step, std::vector<Tensor> m, std::vector<Tensor> v);

 private:
  std::vector<Parameter*> params_;
  AdamConfig config_;
  std::vector<Tensor> m_, v_;
  int64_t step_ = 0;
};

struct Checkpoint {
  uint32_t version = 1;
  std::string config_text;  // resolved experiment config, verbatim
  uint64_t seed = 0;
  int64_t epoch = 0;  // completed epochs
  int64_t adam_step = 0;
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<std::pair<std::string, Tensor>> state;  // batch-norm running stats
  std::vector<std::pair<std::string, Tensor>> adam_m;
  std::vector<std::pair<std::string, Tensor>> adam_v;
};

// Versioned named-tensor container with a CRC32 trailer; load rejects bad
// magic, unknown versions, and checksum mismatches.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct TrainOptions {
  MsflConfig model;
  RegularizerConfig reg;
  PkBatchSpec batch;
  bool triplet_enabled = false;
  double triplet_margin = 0.3;
  Schedule schedule;  // already desk-scaled if desired
  std::string data_dir;
  std::string out_dir;
  std::string config_text;  // echoed into checkpoints
  uint64_t seed = 1;
  int64_t checkpoint_every = 10;  // epochs between checkpoints
  bool dump_eps = false;          // save the input perturbation once per epoch
  std::string resume;             // checkpoint path; empty = fresh run
};

struct TrainResult {
  int64_t epochs_run = 0;
  double final_train_accuracy = 0.0;
  double final_base_loss = 0.0;
  std::string log_path;
  std::string last_checkpoint;
};

// Deterministic single-threaded loop: PK batches, cross-entropy (+ optional
// triplet), the configured gradient penalty through double backward, Adam.
// Appends line-delimited JSON to out_dir/train_log.jsonl; a non-finite loss
// aborts with a diagnostic dump.
TrainResult train(const TrainOptions& options);

}  // namespace msgr
