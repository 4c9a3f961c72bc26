// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include "msgr/objective.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "msgr/rng.hpp"

namespace msgr {

NodeId cross_entropy(Tape& t, NodeId logits, std::span<const int32_t> labels) {
  const Shape s = t.value(logits).shape();
  if (s.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be (B, C)");
  const int64_t b = s.extent(0);
  const int64_t c = s.extent(1);
  if (static_cast<int64_t>(labels.size()) != b)
    throw std::invalid_argument("cross_entropy: need one label per row");

  // log-sum-exp with the row max pulled out; the max participates in the
  // graph but its one-hot contributions cancel exactly in the gradient.
  const NodeId m = t.row_max(logits);
  const NodeId shifted = t.sub(logits, t.row_broadcast(m, c));
  const NodeId lse = t.add(m, t.log(t.row_sum(t.exp(shifted))));
  const NodeId picked = t.select_labels(logits, std::vector<int32_t>(labels.begin(), labels.end()));
  return t.scale(t.sum_all(t.sub(lse, picked)), 1.0 / static_cast<double>(b));
}

std::vector<std::vector<int64_t>> pk_sampler(const std::vector<std::vector<int64_t>>& groups,
                                             const PkBatchSpec& spec, uint64_t seed,
                                             int64_t epoch) {
  if (spec.p < 2 || spec.k < 1)
    throw std::invalid_argument("pk_sampler: need P >= 2 and K >= 1");
  const int64_t ids = static_cast<int64_t>(groups.size());
  if (ids < spec.p)
    throw std::invalid_argument("pk_sampler: " + std::to_string(ids) +
                                " identities cannot fill P=" + std::to_string(spec.p));
  for (int64_t i = 0; i < ids; ++i)
    if (groups[static_cast<size_t>(i)].empty())
      throw std::invalid_argument("pk_sampler: identity " + std::to_string(i) + " has no images");

  Rng rng = Rng::stream(seed, {0x706b /* "pk" */, static_cast<uint64_t>(epoch)});

  // K picks from one identity, without replacement unless it runs short.
  auto draw_images = [&rng, &spec](const std::vector<int64_t>& pool, std::vector<int64_t>& out) {
    if (static_cast<int>(pool.size()) >= spec.k) {
      std::vector<int64_t> copy = pool;
      rng.shuffle(copy);
      out.insert(out.end(), copy.begin(), copy.begin() + spec.k);
    } else {
      for (int i = 0; i < spec.k; ++i)
        out.push_back(pool[static_cast<size_t>(
            rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1))]);
    }
  };

  std::vector<int64_t> anchor_order(static_cast<size_t>(ids));
  for (int64_t i = 0; i < ids; ++i) anchor_order[static_cast<size_t>(i)] = i;
  rng.shuffle(anchor_order);

  std::vector<std::vector<int64_t>> batches;
  batches.reserve(static_cast<size_t>(ids));
  std::vector<int64_t> others(static_cast<size_t>(ids) - 1);
  for (const int64_t anchor : anchor_order) {
    std::vector<int64_t> batch;
    batch.reserve(static_cast<size_t>(spec.p) * static_cast<size_t>(spec.k));
    draw_images(groups[static_cast<size_t>(anchor)], batch);

    others.clear();
    for (int64_t i = 0; i < ids; ++i)
      if (i != anchor) others.push_back(i);
    rng.shuffle(others);
    for (int i = 0; i + 1 < spec.p; ++i)
      draw_images(groups[static_cast<size_t>(others[static_cast<size_t>(i)])], batch);
    batches.push_back(std::move(batch));
  }
  return batches;
}

NodeId batch_hard_triplet(Tape& t, NodeId embeddings, std::span<const int32_t> labels,
                          double margin) {
  const Shape s = t.value(embeddings).shape();
  if (s.rank() != 2) throw std::invalid_argument("batch_hard_triplet: embeddings must be (B, D)");
  const int64_t b = s.extent(0);
  if (static_cast<int64_t>(labels.size()) != b)
    throw std::invalid_argument("batch_hard_triplet: need one label per row");

  // Same-label mask (diagonal off) and its complement, as fixed tensors.
  std::vector<double> pos(static_cast<size_t>(b * b), 0.0), same(static_cast<size_t>(b * b), 0.0);
  for (int64_t i = 0; i < b; ++i) {
    bool has_pos = false, has_neg = false;
    for (int64_t j = 0; j < b; ++j) {
      const bool eq = labels[static_cast<size_t>(i)] == labels[static_cast<size_t>(j)];
      if (eq) same[static_cast<size_t>(i * b + j)] = 1.0;
      if (eq && i != j) {
        pos[static_cast<size_t>(i * b + j)] = 1.0;
        has_pos = true;
      }
      if (!eq) has_neg = true;
    }
    if (!has_pos || !has_neg)
      throw std::invalid_argument("batch_hard_triplet: anchor " + std::to_string(i) +
                                  " lacks a positive or a negative");
  }
  const Shape bb({b, b});
  const NodeId pos_mask = t.constant(Tensor::from(bb, std::move(pos)));
  const NodeId same_big = t.constant(map_scale(Tensor::from(bb, std::move(same)), 1e6));

  // Pairwise Euclidean distances via the Gram matrix, with a 1e-12 floor
  // keeping the square root differentiable at coincident embeddings.
  const NodeId gram = t.matmul(embeddings, t.transpose(embeddings));
  const NodeId sq = t.row_sum(t.mul(embeddings, embeddings));
  const NodeId sq_rows = t.row_broadcast(sq, b);
  const NodeId d2 = t.sub(t.add(sq_rows, t.transpose(sq_rows)), t.scale(gram, 2.0));
  const NodeId dist = t.pow_scalar(t.add(d2, t.constant(Tensor::scalar(1e-12))), 0.5);

  // Hardest positive: plain masked max (distances are nonnegative).
  // Hardest negative: min as a negated max, with same-label entries pushed
  // out of reach by the 1e6 offset.
  const NodeId hardest_pos = t.row_max(t.mul(dist, pos_mask));
  const NodeId hardest_neg = t.scale(t.row_max(t.scale(t.add(dist, same_big), -1.0)), -1.0);
  const NodeId viol =
      t.relu(t.add(t.sub(hardest_pos, hardest_neg), t.constant(Tensor::scalar(margin))));
  return t.scale(t.sum_all(viol), 1.0 / static_cast<double>(b));
}

}  // namespace msgr
