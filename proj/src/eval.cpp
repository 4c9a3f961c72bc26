// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include "msgr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "msgr/tensor_io.hpp"

namespace msgr {

namespace {

// Rows scaled to unit L2 norm; rows below the guard are counted and divided
// by the guard instead so downstream distances stay finite.
std::vector<double> normalize_rows(const Tensor& emb, int64_t& flagged) {
  const int64_t n = emb.shape().extent(0), d = emb.shape().extent(1);
  std::vector<double> out(static_cast<size_t>(n * d));
  for (int64_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (int64_t j = 0; j < d; ++j) sq += emb[i * d + j] * emb[i * d + j];
    double norm = std::sqrt(sq);
    if (norm < 1e-12) {
      ++flagged;
      norm = 1e-12;
    }
    for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(i * d + j)] = emb[i * d + j] / norm;
  }
  return out;
}

}  // namespace

DistanceMatrix distance_matrix(const Tensor& query_emb, const Tensor& gallery_emb) {
  if (query_emb.shape().rank() != 2 || gallery_emb.shape().rank() != 2)
    throw std::invalid_argument("distance_matrix: embeddings must be rank 2");
  if (query_emb.shape().extent(1) != gallery_emb.shape().extent(1))
    throw std::invalid_argument("distance_matrix: embedding widths differ");

  const int64_t q = query_emb.shape().extent(0);
  const int64_t g = gallery_emb.shape().extent(0);
  const int64_t d = query_emb.shape().extent(1);

  DistanceMatrix result;
  const std::vector<double> qn = normalize_rows(query_emb, result.zero_norm);
  const std::vector<double> gn = normalize_rows(gallery_emb, result.zero_norm);

  std::vector<double> dist(static_cast<size_t>(q * g));
  for (int64_t i = 0; i < q; ++i)
    for (int64_t j = 0; j < g; ++j) {
      double sq = 0.0;
      for (int64_t k = 0; k < d; ++k) {
        const double diff = qn[static_cast<size_t>(i * d + k)] - gn[static_cast<size_t>(j * d + k)];
        sq += diff * diff;
      }
      dist[static_cast<size_t>(i * g + j)] = std::sqrt(sq);
    }
  result.dist = Tensor::from(Shape({q, g}), std::move(dist));
  return result;
}

RankingResult evaluate(const Tensor& dist, std::span<const ItemMeta> query_meta,
                       std::span<const ItemMeta> gallery_meta, int64_t max_rank) {
  if (dist.shape().rank() != 2)
    throw std::invalid_argument("evaluate: distance matrix must be rank 2");
  const int64_t q = dist.shape().extent(0), g = dist.shape().extent(1);
  if (q != static_cast<int64_t>(query_meta.size()) ||
      g != static_cast<int64_t>(gallery_meta.size()))
    throw std::invalid_argument("evaluate: metadata sizes do not match the matrix");
  if (max_rank < 1) throw std::invalid_argument("evaluate: max_rank must be positive");

  RankingResult result;
  result.dist = dist;
  result.per_query_ap.assign(static_cast<size_t>(q), -1.0);
  std::vector<int64_t> cmc_hits(static_cast<size_t>(max_rank), 0);
  int64_t scored = 0;
  double ap_sum = 0.0;

  std::vector<int64_t> order;
  for (int64_t i = 0; i < q; ++i) {
    order.clear();
    for (int64_t j = 0; j < g; ++j) {
      const bool same_id = gallery_meta[static_cast<size_t>(j)].identity ==
                           query_meta[static_cast<size_t>(i)].identity;
      const bool same_cam = gallery_meta[static_cast<size_t>(j)].camera ==
                            query_meta[static_cast<size_t>(i)].camera;
      if (!(same_id && same_cam)) order.push_back(j);
    }
    // Ascending distance; stable sort keeps ties in gallery-index order.
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
      return dist[i * g + a] < dist[i * g + b];
    });

    int64_t seen_pos = 0, first_hit = -1;
    double ap = 0.0;
    for (size_t k = 0; k < order.size(); ++k) {
      if (gallery_meta[static_cast<size_t>(order[k])].identity ==
          query_meta[static_cast<size_t>(i)].identity) {
        ++seen_pos;
        if (first_hit < 0) first_hit = static_cast<int64_t>(k);
        ap += static_cast<double>(seen_pos) / static_cast<double>(k + 1);
      }
    }
    if (seen_pos == 0) {
      ++result.skipped_queries;
      continue;
    }
    ++scored;
    ap /= static_cast<double>(seen_pos);
    result.per_query_ap[static_cast<size_t>(i)] = ap;
    ap_sum += ap;
    for (int64_t k = first_hit; k < max_rank; ++k) ++cmc_hits[static_cast<size_t>(k)];
  }

  result.cmc.assign(static_cast<size_t>(max_rank), 0.0);
  if (scored > 0) {
    for (int64_t k = 0; k < max_rank; ++k)
      result.cmc[static_cast<size_t>(k)] =
          static_cast<double>(cmc_hits[static_cast<size_t>(k)]) / static_cast<double>(scored);
    result.map = ap_sum / static_cast<double>(scored);
  }
  return result;
}

ActivationMaps activation_map(const Tensor& feature) {
  if (feature.shape().rank() != 4)
    throw std::invalid_argument("activation_map: feature must be (N,C,H,W)");
  const int64_t n = feature.shape().extent(0), c = feature.shape().extent(1);
  const int64_t h = feature.shape().extent(2), w = feature.shape().extent(3);

  ActivationMaps result;
  std::vector<double> maps(static_cast<size_t>(n * h * w), 0.0);
  for (int64_t s = 0; s < n; ++s) {
    double sq = 0.0;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double a = 0.0;
        for (int64_t ch = 0; ch < c; ++ch) a += std::abs(feature[((s * c + ch) * h + y) * w + x]);
        maps[static_cast<size_t>((s * h + y) * w + x)] = a;
        sq += a * a;
      }
    const double norm = std::sqrt(sq);
    if (norm == 0.0) {
      ++result.zero_count;  // plane stays identically zero
      continue;
    }
    for (int64_t p = 0; p < h * w; ++p) maps[static_cast<size_t>(s * h * w + p)] /= norm;
  }
  result.maps = Tensor::from(Shape({n, h, w}), std::move(maps));
  return result;
}

void export_map(const Tensor& map_hw, const std::string& out_path) {
  if (map_hw.shape().rank() != 2)
    throw std::invalid_argument("export_map: map must be rank 2");
  write_pgm(out_path, map_hw);
}

}  // namespace msgr
