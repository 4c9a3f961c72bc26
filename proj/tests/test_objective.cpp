// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "doctest.h"
#include "msgr/objective.hpp"
#include "msgr/rng.hpp"

using namespace msgr;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> data(static_cast<size_t>(shape.numel()));
  for (double& v : data) v = rng.uniform(lo, hi);
  return Tensor::from(shape, std::move(data));
}

// Identity owning each dataset index, for checking sampler output.
std::map<int64_t, int64_t> owner_map(const std::vector<std::vector<int64_t>>& groups) {
  std::map<int64_t, int64_t> owner;
  for (size_t id = 0; id < groups.size(); ++id)
    for (const int64_t idx : groups[id]) owner[idx] = static_cast<int64_t>(id);
  return owner;
}

}  // namespace

TEST_SUITE("objective") {

TEST_CASE("uniform logits cost exactly the log class count") {
  Tape t;
  const NodeId logits = t.leaf(Tensor::full(Shape({3, 5}), 0.7), true);
  const std::vector<int32_t> labels{0, 2, 4};
  const double loss = t.value(cross_entropy(t, logits, labels)).scalar_value();
  CHECK(loss == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("a wide margin drives the loss to zero") {
  std::vector<double> d(2 * 3, 0.0);
  d[0 * 3 + 1] = 100.0;  // row 0, label 1
  d[1 * 3 + 2] = 100.0;  // row 1, label 2
  Tape t;
  const NodeId logits = t.leaf(Tensor::from(Shape({2, 3}), std::move(d)), true);
  const std::vector<int32_t> labels{1, 2};
  CHECK(t.value(cross_entropy(t, logits, labels)).scalar_value() < 1e-10);
}

TEST_CASE("two-class loss matches the logistic closed form") {
  Tape t;
  const NodeId logits = t.leaf(Tensor::from(Shape({1, 2}), {0.3, -1.2}), true);
  const std::vector<int32_t> labels{0};
  const double loss = t.value(cross_entropy(t, logits, labels)).scalar_value();
  CHECK(loss == doctest::Approx(std::log1p(std::exp(-1.2 - 0.3))).epsilon(1e-12));
}

TEST_CASE("cross entropy gradient is softmax minus one-hot over batch") {
  Rng rng(201);
  const Tensor lv = random_tensor(Shape({4, 6}), rng, -2.0, 2.0);
  const std::vector<int32_t> labels{5, 0, 3, 3};

  Tape t;
  const NodeId logits = t.leaf(lv, true);
  const NodeId loss = cross_entropy(t, logits, labels);
  const std::vector<NodeId> wrt{logits};
  const Tensor g = t.backward_tensors(loss, wrt)[0];

  for (int64_t i = 0; i < 4; ++i) {
    double denom = 0.0;
    for (int64_t j = 0; j < 6; ++j) denom += std::exp(lv[i * 6 + j]);
    for (int64_t j = 0; j < 6; ++j) {
      const double softmax = std::exp(lv[i * 6 + j]) / denom;
      const double expected = (softmax - (labels[static_cast<size_t>(i)] == j ? 1.0 : 0.0)) / 4.0;
      CHECK(g[i * 6 + j] == doctest::Approx(expected).epsilon(1e-10));
    }
  }
}

TEST_CASE("cross entropy survives a finite-difference sweep") {
  Rng rng(203);
  const Tensor lv = random_tensor(Shape({3, 4}), rng, -1.5, 1.5);
  const std::vector<int32_t> labels{2, 0, 1};
  const GradCheckReport r = grad_check(
      [&labels](Tape& t, NodeId x) { return cross_entropy(t, x, labels); }, lv, 1e-7);
  CHECK(r.pass);
  CHECK(r.nonsmooth_excluded == 0);
}

TEST_CASE("cross entropy rejects malformed input") {
  Tape t;
  const NodeId logits = t.leaf(Tensor::full(Shape({2, 3}), 0.0), true);
  const std::vector<int32_t> bad_label{0, 3};
  CHECK_THROWS_AS(cross_entropy(t, logits, bad_label), std::invalid_argument);
  const std::vector<int32_t> short_labels{0};
  CHECK_THROWS_AS(cross_entropy(t, logits, short_labels), std::invalid_argument);
  const NodeId cube = t.leaf(Tensor::full(Shape({2, 3, 1, 1}), 0.0), true);
  const std::vector<int32_t> labels{0, 1};
  CHECK_THROWS_AS(cross_entropy(t, cube, labels), std::invalid_argument);
}

TEST_CASE("every identity anchors one well-formed PK batch") {
  // Eight identities with assorted image counts, indices globally unique.
  std::vector<std::vector<int64_t>> groups;
  int64_t next = 100;
  for (int64_t count : {4, 2, 7, 3, 2, 5, 2, 6}) {
    std::vector<int64_t> g;
    for (int64_t i = 0; i < count; ++i) g.push_back(next++);
    groups.push_back(std::move(g));
  }
  const auto owner = owner_map(groups);

  const PkBatchSpec spec{4, 2};
  const auto batches = pk_sampler(groups, spec, 9001, 3);
  REQUIRE(batches.size() == 8);

  std::vector<int> anchored(8, 0);
  for (const auto& batch : batches) {
    REQUIRE(batch.size() == 8);  // P*K
    // Label multiset: exactly P distinct identities, K entries each.
    std::map<int64_t, int> counts;
    for (const int64_t idx : batch) counts[owner.at(idx)]++;
    CHECK(counts.size() == 4);
    for (const auto& [id, c] : counts) {
      (void)id;
      CHECK(c == 2);
    }
    // Within an identity's slot the K images are distinct when it has
    // enough; images come grouped K-consecutive with the anchor first.
    anchored[static_cast<size_t>(owner.at(batch[0]))]++;
    for (size_t off = 0; off < batch.size(); off += 2)
      CHECK(owner.at(batch[off]) == owner.at(batch[off + 1]));
  }
  for (int64_t id = 0; id < 8; ++id) CHECK(anchored[static_cast<size_t>(id)] == 1);
}

TEST_CASE("sampler output is a pure function of seed and epoch") {
  std::vector<std::vector<int64_t>> groups;
  for (int64_t id = 0; id < 6; ++id) groups.push_back({id * 10, id * 10 + 1, id * 10 + 2});
  const PkBatchSpec spec{3, 2};

  const auto a = pk_sampler(groups, spec, 42, 5);
  const auto b = pk_sampler(groups, spec, 42, 5);
  CHECK(a == b);
  CHECK(pk_sampler(groups, spec, 42, 6) != a);
  CHECK(pk_sampler(groups, spec, 43, 5) != a);
}

TEST_CASE("an identity short on images samples with replacement") {
  std::vector<std::vector<int64_t>> groups{{7}, {10, 11}, {20, 21}, {30, 31, 32}};
  const auto batches = pk_sampler(groups, PkBatchSpec{2, 2}, 1, 0);
  const auto owner = owner_map(groups);
  bool saw_duplicate = false;
  for (const auto& batch : batches)
    for (size_t off = 0; off < batch.size(); off += 2)
      if (owner.at(batch[off]) == 0) {
        CHECK(batch[off] == 7);
        CHECK(batch[off + 1] == 7);
        saw_duplicate = true;
      }
  CHECK(saw_duplicate);  // identity 0 anchors once, so its pair must appear
}

TEST_CASE("sampler rejects impossible specs") {
  std::vector<std::vector<int64_t>> groups{{0}, {1}, {2}};
  CHECK_THROWS_AS(pk_sampler(groups, PkBatchSpec{4, 1}, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(pk_sampler(groups, PkBatchSpec{1, 1}, 0, 0), std::invalid_argument);
  std::vector<std::vector<int64_t>> with_empty{{0}, {}};
  CHECK_THROWS_AS(pk_sampler(with_empty, PkBatchSpec{2, 1}, 0, 0), std::invalid_argument);
}

TEST_CASE("identical embeddings make every triplet cost the margin") {
  Tape t;
  const NodeId e = t.leaf(Tensor::full(Shape({4, 3}), 0.25), true);
  const std::vector<int32_t> labels{0, 0, 1, 1};
  const double loss = t.value(batch_hard_triplet(t, e, labels, 0.3)).scalar_value();
  CHECK(loss == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("well-separated clusters incur no triplet cost") {
  // Two tight clusters 10 apart with intra-cluster spread ~0.01.
  std::vector<double> d{0.0, 0.0, 0.01, 0.0, 10.0, 0.0, 10.0, 0.01};
  Tape t;
  const NodeId e = t.leaf(Tensor::from(Shape({4, 2}), std::move(d)), true);
  const std::vector<int32_t> labels{0, 0, 1, 1};
  CHECK(t.value(batch_hard_triplet(t, e, labels, 0.3)).scalar_value() == 0.0);
}

TEST_CASE("triplet gradients check out away from ties") {
  Rng rng(207);
  const Tensor ev = random_tensor(Shape({6, 4}), rng, -1.0, 1.0);
  const std::vector<int32_t> labels{0, 0, 1, 1, 2, 2};
  const GradCheckReport r = grad_check(
      [&labels](Tape& t, NodeId x) { return batch_hard_triplet(t, x, labels, 0.3); }, ev, 1e-5);
  CHECK(r.pass);
  CHECK_FALSE(r.nonfinite);
}

TEST_CASE("triplet rejects anchors without counterparts") {
  Tape t;
  const NodeId e = t.leaf(Tensor::full(Shape({3, 2}), 0.1), true);
  const std::vector<int32_t> no_pos{0, 1, 2};
  CHECK_THROWS_AS(batch_hard_triplet(t, e, no_pos, 0.3), std::invalid_argument);
  const std::vector<int32_t> no_neg{1, 1, 1};
  CHECK_THROWS_AS(batch_hard_triplet(t, e, no_neg, 0.3), std::invalid_argument);
}

}  // TEST_SUITE
