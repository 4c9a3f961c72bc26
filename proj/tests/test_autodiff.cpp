// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include "doctest.h"
#include "msgr/autodiff.hpp"
#include "msgr/rng.hpp"
#include "msgr/tensor.hpp"

using namespace msgr;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> data(static_cast<size_t>(shape.numel()));
  for (double& v : data) v = rng.uniform(lo, hi);
  return Tensor::from(shape, std::move(data));
}

// A smooth composite touching conv, matmul, broadcasts and reductions, used
// by several finite-difference checks below.
NodeId mixed_graph(Tape& t, NodeId x) {
  const int64_t n = t.value(x).shape().extent(0);
  Rng wrng(4242);
  const NodeId w = t.constant(random_tensor(Shape({3, t.value(x).shape().extent(1), 3, 3}), wrng));
  const NodeId c = t.conv2d(x, w, 1, 1);
  const NodeId act = t.mul(c, c);  // smooth stand-in for a nonlinearity
  const NodeId pooled = t.scale(t.spatial_sum(act), 0.25);
  const NodeId m = t.constant(random_tensor(Shape({3, 2}), wrng));
  const NodeId fc = t.matmul(pooled, m);
  const NodeId shifted = t.add(fc, t.batch_broadcast(t.constant(Tensor::from(Shape({2}), {0.1, -0.2})), n));
  return t.sum_all(t.mul(shifted, shifted));
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("recording computes eagerly and appends one node per op") {
  Tape t;
  const NodeId a = t.leaf(Tensor::scalar(1.0));
  const NodeId b = t.leaf(Tensor::scalar(2.0));
  const int64_t before = t.size();
  const NodeId s = t.add(a, b);
  CHECK(t.size() == before + 1);
  CHECK(t.value(s).scalar_value() == 3.0);
}

TEST_CASE("nodes from another tape are rejected") {
  Tape t1, t2;
  const NodeId a = t1.leaf(Tensor::scalar(1.0));
  const NodeId b = t2.leaf(Tensor::scalar(2.0));
  CHECK_THROWS_AS(t1.add(a, b), std::invalid_argument);
  const NodeId wrt[] = {b};
  CHECK_THROWS_AS(t1.backward_tensors(a, wrt), std::invalid_argument);
}

TEST_CASE("backward requires a scalar root") {
  Tape t;
  const NodeId x = t.leaf(Tensor::from(Shape({2}), {1, 2}), true);
  const NodeId wrt[] = {x};
  CHECK_THROWS_AS(t.backward_tensors(x, wrt), std::invalid_argument);
}

TEST_CASE("gradient of sum of squares") {
  Tape t;
  const NodeId x = t.leaf(Tensor::from(Shape({3}), {1, 2, 3}), true);
  const NodeId root = t.sum_all(t.mul(x, x));
  const NodeId wrt[] = {x};
  const Tensor g = t.backward_tensors(root, wrt)[0];
  CHECK(g.same_bits(Tensor::from(Shape({3}), {2, 4, 6})));
}

TEST_CASE("double backward: gradient-norm-squared of sum of squares is 8x") {
  Tape t;
  const NodeId x = t.leaf(Tensor::from(Shape({3}), {1, 2, 3}), true);
  const NodeId loss = t.sum_all(t.mul(x, x));
  const NodeId wrt[] = {x};
  const NodeId gx = t.backward_nodes(loss, wrt)[0];
  CHECK(t.value(gx).same_bits(Tensor::from(Shape({3}), {2, 4, 6})));
  const NodeId norm_sq = t.sum_all(t.mul(gx, gx));
  CHECK(t.value(norm_sq).scalar_value() == doctest::Approx(4.0 + 16.0 + 36.0));
  const Tensor g2 = t.backward_tensors(norm_sq, wrt)[0];
  CHECK(g2.same_bits(Tensor::from(Shape({3}), {8, 16, 24})));
}

TEST_CASE("gradient of a node not influencing the root is exactly zero") {
  Tape t;
  const NodeId x = t.leaf(Tensor::from(Shape({2}), {1, 2}), true);
  const NodeId y = t.leaf(Tensor::from(Shape({2}), {3, 4}), true);
  const NodeId root = t.sum_all(t.mul(x, x));
  const NodeId wrt[] = {x, y};
  const auto grads = t.backward_tensors(root, wrt);
  CHECK(grads[1].same_bits(Tensor::zeros(Shape({2}))));
}

TEST_CASE("repeated backward on one tape is bit-identical") {
  Rng rng(7);
  Tape t;
  const NodeId x = t.leaf(random_tensor(Shape({2, 3, 4, 4}), rng), true);
  const NodeId root = mixed_graph(t, x);
  const NodeId wrt[] = {x};
  const Tensor g1 = t.backward_tensors(root, wrt)[0];
  const Tensor g2 = t.backward_tensors(root, wrt)[0];
  CHECK(g1.same_bits(g2));
}

TEST_CASE("linearity of the gradient operator") {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x0 = random_tensor(Shape({2, 3}), rng);
    const double a = rng.uniform(-2.0, 2.0), b = rng.uniform(-2.0, 2.0);

    auto f = [](Tape& t, NodeId x) { return t.sum_all(t.mul(x, x)); };
    auto g = [](Tape& t, NodeId x) { return t.sum_all(t.exp(t.scale(x, 0.5))); };

    Tape tf;
    const NodeId xf = tf.leaf(x0, true);
    const NodeId wf[] = {xf};
    const Tensor gf = tf.backward_tensors(f(tf, xf), wf)[0];

    Tape tg;
    const NodeId xg = tg.leaf(x0, true);
    const NodeId wg[] = {xg};
    const Tensor gg = tg.backward_tensors(g(tg, xg), wg)[0];

    Tape tc;
    const NodeId xc = tc.leaf(x0, true);
    const NodeId combo = tc.add(tc.scale(f(tc, xc), a), tc.scale(g(tc, xc), b));
    const NodeId wc[] = {xc};
    const Tensor gc = tc.backward_tensors(combo, wc)[0];

    for (int64_t i = 0; i < x0.numel(); ++i)
      CHECK(gc[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-12));
  }
}

TEST_CASE("finite differences confirm gradients of a mixed graph") {
  Rng rng(17);
  const Tensor x = random_tensor(Shape({2, 3, 4, 4}), rng);
  const auto report = grad_check(mixed_graph, x, 1e-6);
  CAPTURE(report.max_rel_error);
  CHECK(report.pass);
  CHECK(report.nonsmooth_excluded == 0);
  CHECK(report.checked == x.numel());
}

TEST_CASE("finite differences confirm every elementwise and reduction rule") {
  Rng rng(19);
  using Builder = NodeId (*)(Tape&, NodeId);
  const std::pair<const char*, Builder> cases[] = {
      {"exp", [](Tape& t, NodeId x) { return t.sum_all(t.exp(x)); }},
      {"log", [](Tape& t, NodeId x) {
         return t.sum_all(t.log(t.add(t.mul(x, x), t.constant(Tensor::scalar(1.0)))));
       }},
      {"pow", [](Tape& t, NodeId x) {
         return t.sum_all(t.pow_scalar(t.add(t.mul(x, x), t.constant(Tensor::scalar(0.5))), 1.5));
       }},
      {"sub_mul", [](Tape& t, NodeId x) {
         const NodeId y = t.constant(Tensor::scalar(0.7));
         return t.sum_all(t.mul(t.sub(x, y), t.sub(x, y)));
       }},
      {"transpose_matmul", [](Tape& t, NodeId x) {
         Rng r(5);
         const NodeId m = t.constant(random_tensor(Shape({3, 3}), r));
         return t.sum_all(t.mul(t.matmul(t.transpose(x), m), t.matmul(t.transpose(x), m)));
       }},
      {"rows", [](Tape& t, NodeId x) {
         const NodeId r = t.row_sum(t.mul(x, x));
         return t.sum_all(t.mul(t.row_broadcast(r, 2), t.row_broadcast(r, 2)));
       }},
      {"batch", [](Tape& t, NodeId x) {
         const NodeId c = t.batch_sum(t.mul(x, x));
         return t.sum_all(t.mul(t.batch_broadcast(c, 3), t.batch_broadcast(c, 3)));
       }},
      {"select", [](Tape& t, NodeId x) {
         const std::vector<int32_t> labels = {1, 0, 2};
         return t.sum_all(t.mul(t.select_labels(x, labels), t.select_labels(x, labels)));
       }},
      {"scatter", [](Tape& t, NodeId x) {
         const std::vector<int32_t> labels = {1, 0, 2};
         const NodeId rows = t.row_sum(t.mul(x, x));
         return t.sum_all(t.exp(t.scatter_labels(rows, labels, 4)));
       }},
      {"concat_slice_pad", [](Tape& t, NodeId x) {
         const NodeId sq = t.mul(x, x);
         const NodeId parts[] = {x, sq};
         const NodeId cat = t.concat_dim1(parts);
         const NodeId sl = t.slice_dim1(cat, 2, 3);
         return t.sum_all(t.mul(t.pad_dim1(sl, 1, 2), t.pad_dim1(sl, 1, 2)));
       }},
  };
  for (const auto& [name, builder] : cases) {
    const Tensor x = random_tensor(Shape({3, 3}), rng, 0.2, 1.0);
    const auto report = grad_check(builder, x, 1e-6);
    CAPTURE(name);
    CAPTURE(report.max_rel_error);
    CHECK(report.pass);
  }
}

TEST_CASE("finite differences confirm spatial ops") {
  Rng rng(29);
  using Builder = NodeId (*)(Tape&, NodeId);
  const std::pair<const char*, Builder> cases[] = {
      {"conv_stride2_pad1", [](Tape& t, NodeId x) {
         Rng r(31);
         const NodeId w = t.constant(random_tensor(Shape({2, 3, 3, 3}), r));
         const NodeId y = t.conv2d(x, w, 2, 1);
         return t.sum_all(t.mul(y, y));
       }},
      {"upsample", [](Tape& t, NodeId x) {
         const NodeId y = t.upsample2x(x);
         return t.sum_all(t.mul(y, y));
       }},
      {"block_sum", [](Tape& t, NodeId x) {
         const NodeId y = t.block_sum_2x2(x);
         return t.sum_all(t.mul(y, y));
       }},
      {"spatial_pair", [](Tape& t, NodeId x) {
         const NodeId s = t.spatial_sum(t.mul(x, x));
         return t.sum_all(t.mul(t.spatial_broadcast(s, 2, 2), t.spatial_broadcast(s, 2, 2)));
       }},
  };
  for (const auto& [name, builder] : cases) {
    const Tensor x = random_tensor(Shape({2, 3, 4, 4}), rng);
    const auto report = grad_check(builder, x, 1e-6);
    CAPTURE(name);
    CAPTURE(report.max_rel_error);
    CHECK(report.pass);
  }
}

TEST_CASE("conv weight gradients pass finite differences") {
  // Same conv graph, differentiated with respect to the kernel instead.
  Rng rng(37);
  const Tensor x_fixed = random_tensor(Shape({2, 3, 5, 5}), rng);
  auto by_weight = [&x_fixed](Tape& t, NodeId w) {
    const NodeId x = t.constant(x_fixed);
    const NodeId y = t.conv2d(x, w, 1, 1);
    return t.sum_all(t.mul(y, y));
  };
  const Tensor w0 = random_tensor(Shape({2, 3, 3, 3}), rng);
  const auto report = grad_check(by_weight, w0, 1e-6);
  CAPTURE(report.max_rel_error);
  CHECK(report.pass);
}

TEST_CASE("second-order gradients pass finite differences") {
  // Outer function: x -> || d/dx sum(conv(x,w)^2) ||_2^2, checked against
  // finite differences of the recorded double-backward graph.
  Rng rng(43);
  auto outer = [](Tape& t, NodeId x) {
    Rng r(47);
    const NodeId w = t.constant(random_tensor(Shape({2, 2, 3, 3}), r));
    const NodeId y = t.conv2d(x, w, 1, 1);
    const NodeId loss = t.sum_all(t.mul(y, y));
    const NodeId wrt[] = {x};
    const NodeId gx = t.backward_nodes(loss, wrt)[0];
    return t.sum_all(t.mul(gx, gx));
  };
  const Tensor x = random_tensor(Shape({1, 2, 4, 4}), rng);
  const auto report = grad_check(outer, x, 1e-6);
  CAPTURE(report.max_rel_error);
  CHECK(report.pass);
}

TEST_CASE("relu and abs kinks are excluded, not failed") {
  auto f = [](Tape& t, NodeId x) { return t.sum_all(t.abs(x)); };
  const Tensor x = Tensor::from(Shape({3}), {0.5, 0.0, -0.5});
  const auto report = grad_check(f, x, 1e-6);
  CHECK(report.pass);
  CHECK(report.nonsmooth_excluded == 1);
  CHECK(report.checked == 2);

  auto r = [](Tape& t, NodeId x) { return t.sum_all(t.relu(x)); };
  const auto relu_report = grad_check(r, x, 1e-6);
  CHECK(relu_report.pass);
  CHECK(relu_report.nonsmooth_excluded == 1);
}

TEST_CASE("max and row_max route gradient to the first maximal entry") {
  Tape t;
  const NodeId x = t.leaf(Tensor::from(Shape({1, 3}), {2, 2, 1}), true);
  const NodeId root = t.sum_all(t.row_max(x));
  const NodeId wrt[] = {x};
  const Tensor g = t.backward_tensors(root, wrt)[0];
  CHECK(g.same_bits(Tensor::from(Shape({1, 3}), {1, 0, 0})));

  Tape t2;
  const NodeId a = t2.leaf(Tensor::from(Shape({2}), {1, 5}), true);
  const NodeId b = t2.leaf(Tensor::from(Shape({2}), {1, 3}), true);
  const NodeId m = t2.emax(a, b);
  const NodeId wrt2[] = {a, b};
  const auto grads = t2.backward_tensors(t2.sum_all(m), wrt2);
  CHECK(grads[0].same_bits(Tensor::from(Shape({2}), {1, 1})));  // tie at index 0 goes left
  CHECK(grads[1].same_bits(Tensor::zeros(Shape({2}))));
}

TEST_CASE("scalar broadcast operands reduce their gradient") {
  Tape t;
  const NodeId x = t.leaf(Tensor::from(Shape({2, 2}), {1, 2, 3, 4}), true);
  const NodeId s = t.leaf(Tensor::scalar(2.0), true);
  const NodeId root = t.sum_all(t.mul(x, s));
  const NodeId wrt[] = {x, s};
  const auto grads = t.backward_tensors(root, wrt);
  CHECK(grads[0].same_bits(Tensor::full(Shape({2, 2}), 2.0)));
  CHECK(grads[1].scalar_value() == doctest::Approx(10.0));
}

TEST_CASE("parameter binding is idempotent per tape") {
  Parameter p{"w", Tensor::from(Shape({2}), {1, 2}), Tensor()};
  Tape t;
  const NodeId a = t.param(p);
  const NodeId b = t.param(p);
  CHECK(a.index == b.index);
  CHECK(t.bound_params().size() == 1);
}

TEST_CASE("grad_check reports non-finite evaluations instead of throwing") {
  auto f = [](Tape& t, NodeId x) { return t.sum_all(t.log(x)); };
  const Tensor x = Tensor::from(Shape({2}), {1.0, 0.0});  // log(0) -> -inf
  const auto report = grad_check(f, x, 1e-6);
  CHECK(report.nonfinite);
  CHECK_FALSE(report.pass);
}

}  // TEST_SUITE("autodiff")
