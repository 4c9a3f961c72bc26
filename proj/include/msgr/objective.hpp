// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "msgr/autodiff.hpp"

namespace msgr {

// Mean over the batch of -log softmax(logits)[label], stabilized by row-max
// subtraction. logits is (B, C); labels holds B class indices.
NodeId cross_entropy(Tape& t, NodeId logits, std::span<const int32_t> labels);

// PK batch construction: P identities per batch, K images each.
struct PkBatchSpec {
  int p = 8;
  int k = 4;
};

// groups[i] lists the dataset indices belonging to identity i. Produces one
// batch per identity (the anchor), visited in a per-epoch shuffled order;
// the other P-1 identities are drawn at random without repetition. Each
// chosen identity contributes K of its indices, with replacement only when
// it owns fewer than K. Deterministic in (seed, epoch); batches are flat
// index lists grouped K-consecutive per identity, anchor first.
std::vector<std::vector<int64_t>> pk_sampler(const std::vector<std::vector<int64_t>>& groups,
                                             const PkBatchSpec& spec, uint64_t seed,
                                             int64_t epoch);

// Batch-hard ranking loss: mean over anchors of
// relu(hardest-positive-distance - hardest-negative-distance + margin) using
// Euclidean distances between embedding rows. Every anchor needs another
// sample of its label and at least one of a different label.
NodeId batch_hard_triplet(Tape& t, NodeId embeddings, std::span<const int32_t> labels,
                          double margin);

}  // namespace msgr
