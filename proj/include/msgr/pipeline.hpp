// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "msgr/config.hpp"
#include "msgr/data.hpp"
#include "msgr/eval.hpp"
#include "msgr/model.hpp"
#include "msgr/train.hpp"

namespace msgr {

// Run-level glue shared by the command-line tools and the release gate:
// rebuild a trained model from its checkpoint, embed dataset splits, rank.

// Overwrites model parameters and batchnorm state from the checkpoint,
// matched by name; throws std::runtime_error on a missing name or shape
// mismatch.
void restore_model_tensors(MsflModel& model, const Checkpoint& ckpt);

struct LoadedCheckpoint {
  ExperimentConfig config;  // parsed from the checkpoint's embedded echo
  Checkpoint checkpoint;
  std::unique_ptr<MsflModel> model;  // weights and running stats restored
};

LoadedCheckpoint load_trained_model(const std::string& checkpoint_path);

struct SplitEmbeddings {
  Tensor embeddings;  // (N, embedding_dim), manifest order within the split
  std::vector<ItemMeta> meta;
  std::vector<std::string> paths;  // dataset-relative image paths
};

// Eval-mode embeddings for every record of `split`. Batching is a memory
// knob only: eval-mode normalization uses running statistics, so results
// do not depend on batch_size.
SplitEmbeddings embed_split(MsflModel& model, const DatasetManifest& manifest,
                            const std::string& data_dir, const std::string& split,
                            int64_t batch_size = 32);

struct DatasetMetrics {
  RankingResult ranking;
  int64_t num_query = 0;
  int64_t num_gallery = 0;
  int64_t zero_norm_embeddings = 0;

  // CMC at rank k (1-based), clamped to the deepest rank computed.
  double rank_at(int64_t k) const;
};

// Embeds the query and gallery splits and runs the ranking protocol.
DatasetMetrics rank_dataset(MsflModel& model, const std::string& data_dir, int64_t max_rank = 20);

}  // namespace msgr
