// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "msgr/tensor.hpp"

namespace msgr {

// Identity/camera labels for one retrieval item.
struct ItemMeta {
  int64_t identity = 0;
  int64_t camera = 0;
};

struct DistanceMatrix {
  Tensor dist;            // (Q, G), smaller = more similar
  int64_t zero_norm = 0;  // embeddings whose norm needed the epsilon guard
};

// Euclidean distance between L2-normalized rows. Rank-equivalent to cosine
// similarity; zero-norm rows are normalized with an epsilon and counted.
DistanceMatrix distance_matrix(const Tensor& query_emb, const Tensor& gallery_emb);

struct RankingResult {
  Tensor dist;                       // the matrix the ranking was computed from
  std::vector<double> cmc;           // ranks 1..max_rank, non-decreasing
  double map = 0.0;                  // mean AP over queries with >= 1 valid positive
  std::vector<double> per_query_ap;  // -1 marks queries with no valid positive
  int64_t skipped_queries = 0;       // queries excluded for lack of a valid positive
};

// Cross-camera retrieval protocol: per query, gallery entries sharing both
// identity and camera are excluded; the rest rank ascending by distance with
// ties broken by gallery index. CMC@k is the fraction of scored queries whose
// first correct match lands in the top k; AP averages precision at every
// positive position.
RankingResult evaluate(const Tensor& dist, std::span<const ItemMeta> query_meta,
                       std::span<const ItemMeta> gallery_meta, int64_t max_rank);

struct ActivationMaps {
  Tensor maps;            // (N, H, W), each plane unit L2 norm unless zero
  int64_t zero_count = 0; // samples whose map was identically zero
};

// Channel-wise absolute sum followed by per-sample spatial L2 normalization.
ActivationMaps activation_map(const Tensor& feature);

// Writes one (H, W) map as a portable graymap, min mapped to 0 and max to 255.
void export_map(const Tensor& map_hw, const std::string& out_path);

}  // namespace msgr
