// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "msgr/layers.hpp"
#include "msgr/rng.hpp"

using namespace msgr;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> data(static_cast<size_t>(shape.numel()));
  for (double& v : data) v = rng.uniform(lo, hi);
  return Tensor::from(shape, std::move(data));
}

Parameter* find_param(std::vector<Parameter*>& params, const std::string& suffix) {
  for (Parameter* p : params)
    if (p->name.size() >= suffix.size() &&
        p->name.compare(p->name.size() - suffix.size(), suffix.size(), suffix) == 0)
      return p;
  return nullptr;
}

// Central finite differences on a parameter vs the reverse-mode gradient of
// the same scalar; `loss` must rebuild a fresh tape per call and `grads`
// must return the reverse-mode gradient for the parameter's current value.
double param_fd_error(Parameter& p, const std::function<double()>& loss,
                      const std::function<Tensor()>& grads, double step = 1e-5) {
  const Tensor analytic = grads();
  const Tensor saved = p.value;
  std::vector<double> base(saved.data(), saved.data() + saved.numel());
  double worst = 0.0;
  for (int64_t i = 0; i < saved.numel(); ++i) {
    std::vector<double> probe = base;
    probe[static_cast<size_t>(i)] = base[static_cast<size_t>(i)] + step;
    p.value = Tensor::from(saved.shape(), probe);
    const double fp = loss();
    probe[static_cast<size_t>(i)] = base[static_cast<size_t>(i)] - step;
    p.value = Tensor::from(saved.shape(), probe);
    const double fm = loss();
    const double central = (fp - fm) / (2.0 * step);
    const double denom = std::max({1.0, std::abs(central), std::abs(analytic[i])});
    worst = std::max(worst, std::abs(central - analytic[i]) / denom);
  }
  p.value = saved;
  return worst;
}

}  // namespace

TEST_SUITE("layers") {

TEST_CASE("conv layer with permutation weights shuffles channels") {
  Rng rng(3);
  ConvLayer conv("c", 2, 2, 1, 1, 0, false, rng);
  std::vector<Parameter*> params;
  conv.collect(params);
  // Kernel (2,2,1,1) swapping the two channels.
  params[0]->value = Tensor::from(Shape({2, 2, 1, 1}), {0, 1, 1, 0});

  Tape t;
  const NodeId x = t.leaf(Tensor::from(Shape({1, 2, 1, 2}), {1, 2, 3, 4}));
  const Tensor y = t.value(conv.forward(t, x));
  CHECK(y.same_bits(Tensor::from(Shape({1, 2, 1, 2}), {3, 4, 1, 2})));
}

TEST_CASE("conv layer with zero weights and bias yields zeros") {
  Rng rng(5);
  ConvLayer conv("c", 3, 4, 3, 1, 1, true, rng);
  std::vector<Parameter*> params;
  conv.collect(params);
  for (Parameter* p : params) p->value = Tensor::zeros(p->value.shape());

  Tape t;
  const NodeId x = t.leaf(random_tensor(Shape({2, 3, 4, 4}), rng));
  CHECK(t.value(conv.forward(t, x)).same_bits(Tensor::zeros(Shape({2, 4, 4, 4}))));
}

TEST_CASE("conv layer gradients pass finite differences") {
  Rng rng(7);
  ConvLayer conv("c", 3, 4, 3, 1, 1, true, rng);
  auto f = [&conv](Tape& t, NodeId x) {
    const NodeId y = conv.forward(t, x);
    return t.sum_all(t.mul(y, y));
  };
  const auto report = grad_check(f, random_tensor(Shape({2, 3, 4, 4}), rng), 1e-6);
  CAPTURE(report.max_rel_error);
  CHECK(report.pass);
}

TEST_CASE("batchnorm train mode normalizes to mean 0 variance 1 per channel") {
  Rng rng(11);
  BatchNormLayer bn("bn", 3);
  Tape t;
  const NodeId x = t.leaf(random_tensor(Shape({4, 3, 5, 5}), rng, -2.0, 5.0));
  // gamma=1, beta=0 at construction, so the output is the normalized input.
  const Tensor y = t.value(bn.forward(t, x, Mode::Train));

  const int64_t n = 4, c = 3, hw = 25;
  for (int64_t ch = 0; ch < c; ++ch) {
    double mean = 0.0, var = 0.0;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t s = 0; s < hw; ++s) mean += y[(i * c + ch) * hw + s];
    mean /= static_cast<double>(n * hw);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t s = 0; s < hw; ++s) {
        const double d = y[(i * c + ch) * hw + s] - mean;
        var += d * d;
      }
    var /= static_cast<double>(n * hw);
    CHECK(std::abs(mean) < 1e-10);
    // Batch variance eps shifts the result by var/(var+eps); allow that much.
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("batchnorm on an already normalized input is near identity") {
  // Two values at +-1 per channel: batch mean 0, batch variance 1 exactly.
  BatchNormLayer bn("bn", 1);
  Tape t;
  const NodeId x = t.leaf(Tensor::from(Shape({2, 1}), {1, -1}));
  const Tensor y = t.value(bn.forward(t, x, Mode::Train));
  CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(y[1] == doctest::Approx(-1.0).epsilon(1e-4));
}

TEST_CASE("batchnorm eval mode applies the running-stat affine map") {
  BatchNormLayer bn("bn", 2);
  // Fresh layer: running mean 0, running var 1 -> y = x/sqrt(1+eps).
  Tape t;
  const NodeId x = t.leaf(Tensor::full(Shape({3, 2}), 4.0));
  const Tensor y = t.value(bn.forward(t, x, Mode::Eval));
  const double want = 4.0 / std::sqrt(1.0 + 1e-5);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(want));
}

TEST_CASE("batchnorm flags near-zero batch variance") {
  BatchNormLayer bn("bn", 1);
  Tape t;
  const NodeId x = t.leaf(Tensor::full(Shape({4, 1}), 2.0));
  const Tensor y = t.value(bn.forward(t, x, Mode::Train));
  CHECK(bn.low_variance_events() == 1);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::isfinite(y[i]));
}

TEST_CASE("batchnorm train/eval gap shrinks as running stats converge") {
  Rng rng(13);
  BatchNormLayer bn("bn", 2);
  const Tensor probe = random_tensor(Shape({8, 2}), rng, 2.0, 4.0);

  auto eval_out = [&]() {
    Tape t;
    return t.value(bn.forward(t, t.leaf(probe), Mode::Eval));
  };
  auto train_out = [&]() {
    Tape t;
    Tensor mean_saved = bn.running_mean();  // train forward updates stats
    Tensor y = t.value(bn.forward(t, t.leaf(probe), Mode::Train));
    return y;
  };
  const Tensor reference = train_out();

  std::vector<double> gap;
  for (int step = 0; step < 100; ++step) {
    Tape t;
    bn.forward(t, t.leaf(random_tensor(Shape({8, 2}), rng, 2.0, 4.0)), Mode::Train);
    gap.push_back(lp_norm(sub(eval_out(), reference), NormOrder::Two));
  }
  double early = 0.0, late = 0.0;
  for (int i = 0; i < 10; ++i) early += gap[static_cast<size_t>(i)];
  for (int i = 90; i < 100; ++i) late += gap[static_cast<size_t>(i)];
  CHECK(late < 0.5 * early);
}

TEST_CASE("batchnorm gradients (input and affine parameters) pass finite differences") {
  Rng rng(17);
  BatchNormLayer bn("bn", 3);
  std::vector<Parameter*> params;
  bn.collect(params);
  // Nontrivial gamma/beta so their gradients are not at a symmetric point.
  params[0]->value = Tensor::from(Shape({3}), {1.5, 0.5, -1.0});
  params[1]->value = Tensor::from(Shape({3}), {0.2, -0.3, 0.7});

  auto f = [&bn](Tape& t, NodeId x) {
    const NodeId y = bn.forward(t, x, Mode::Train);
    return t.sum_all(t.mul(y, y));
  };
  const Tensor x0 = random_tensor(Shape({3, 3, 2, 2}), rng);
  const auto report = grad_check(f, x0, 1e-5);
  CAPTURE(report.max_rel_error);
  CHECK(report.pass);

  auto loss = [&]() {
    Tape t;
    const NodeId y = bn.forward(t, t.leaf(x0), Mode::Train);
    return t.value(t.sum_all(t.mul(y, y))).scalar_value();
  };
  for (Parameter* p : params) {
    auto grads = [&]() {
      Tape t;
      const NodeId y = bn.forward(t, t.leaf(x0), Mode::Train);
      const NodeId root = t.sum_all(t.mul(y, y));
      const NodeId wrt[] = {t.param(*p)};
      return t.backward_tensors(root, wrt)[0];
    };
    const double err = param_fd_error(*p, loss, grads);
    CAPTURE(p->name);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("bottleneck block output shape and stride behaviour") {
  Rng rng(19);
  BottleneckBlock same("b", 8, 8, 1, rng);
  BottleneckBlock down("d", 8, 16, 2, rng);
  Tape t;
  const NodeId x = t.leaf(random_tensor(Shape({2, 8, 6, 4}), rng));
  CHECK(t.value(same.forward(t, x, Mode::Train)).shape() == Shape({2, 8, 6, 4}));
  CHECK(t.value(down.forward(t, x, Mode::Train)).shape() == Shape({2, 16, 3, 2}));
}

TEST_CASE("bottleneck with a silenced main path reduces to relu") {
  Rng rng(23);
  BottleneckBlock block("b", 8, 8, 1, rng);
  std::vector<Parameter*> params;
  block.collect(params);
  Parameter* expand = find_param(params, ".expand.kernel");
  REQUIRE(expand != nullptr);
  expand->value = Tensor::zeros(expand->value.shape());

  // Eval mode: fresh running stats keep bn3(0) = 0, the skip is identity.
  Tape t;
  const Tensor x0 = random_tensor(Shape({1, 8, 3, 3}), rng);
  const NodeId y = block.forward(t, t.leaf(x0), Mode::Eval);
  CHECK(t.value(y).same_bits(map_relu(x0)));
}

TEST_CASE("bottleneck gradients pass finite differences") {
  Rng rng(29);
  BottleneckBlock block("b", 4, 8, 2, rng);
  auto f = [&block](Tape& t, NodeId x) {
    const NodeId y = block.forward(t, x, Mode::Train);
    return t.sum_all(t.mul(y, y));
  };
  const auto report = grad_check(f, random_tensor(Shape({2, 4, 4, 4}), rng), 1e-5);
  CAPTURE(report.max_rel_error);
  CAPTURE(report.nonsmooth_excluded);
  CHECK(report.pass);
}

TEST_CASE("linear layer and its parameter gradients") {
  Rng rng(31);
  LinearLayer fc("fc", 3, 2, true, rng);
  std::vector<Parameter*> params;
  fc.collect(params);
  CHECK(find_param(params, ".bias")->value.same_bits(Tensor::zeros(Shape({2}))));

  const Tensor x0 = random_tensor(Shape({4, 3}), rng);
  auto f = [&fc](Tape& t, NodeId x) {
    const NodeId y = fc.forward(t, x);
    return t.sum_all(t.mul(y, y));
  };
  CHECK(grad_check(f, x0, 1e-6).pass);

  auto loss = [&]() {
    Tape t;
    const NodeId y = fc.forward(t, t.leaf(x0));
    return t.value(t.sum_all(t.mul(y, y))).scalar_value();
  };
  for (Parameter* p : params) {
    auto grads = [&]() {
      Tape t;
      const NodeId y = fc.forward(t, t.leaf(x0));
      const NodeId wrt[] = {t.param(*p)};
      return t.backward_tensors(t.sum_all(t.mul(y, y)), wrt)[0];
    };
    CHECK(param_fd_error(*p, loss, grads) < 1e-6);
  }
}

TEST_CASE("embedding head produces nonnegative vectors of the configured width") {
  Rng rng(37);
  EmbeddingHead head("h", 12, 5, rng);
  Tape t;
  const NodeId x = t.leaf(random_tensor(Shape({6, 12}), rng));
  const Tensor e = t.value(head.forward(t, x, Mode::Train));
  CHECK(e.shape() == Shape({6, 5}));
  for (int64_t i = 0; i < e.numel(); ++i) CHECK(e[i] >= 0.0);
}

TEST_CASE("embedding head gradients pass finite differences") {
  Rng rng(41);
  EmbeddingHead head("h", 6, 4, rng);
  auto f = [&head](Tape& t, NodeId x) {
    const NodeId y = head.forward(t, x, Mode::Train);
    return t.sum_all(t.mul(y, y));
  };
  const auto report = grad_check(f, random_tensor(Shape({5, 6}), rng), 1e-6);
  CAPTURE(report.max_rel_error);
  CHECK(report.pass);
}

}  // TEST_SUITE("layers")
