// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "msgr/model.hpp"
#include "msgr/regularizer.hpp"
#include "msgr/rng.hpp"

using namespace msgr;

namespace {

constexpr NormOrder kOrders[] = {NormOrder::One, NormOrder::Two, NormOrder::Inf};

Tensor random_grad(int64_t n, Rng& rng, double zero_fraction = 0.0) {
  std::vector<double> data(static_cast<size_t>(n));
  for (double& v : data)
    v = rng.uniform() < zero_fraction ? 0.0 : rng.uniform(-3.0, 3.0);
  return Tensor::from(Shape({n}), std::move(data));
}

double rel_gap(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

}  // namespace

TEST_SUITE("regularizer") {

TEST_CASE("dual exponents pair up by Hoelder") {
  CHECK(dual_exponent(NormOrder::Two) == NormOrder::Two);
  CHECK(dual_exponent(NormOrder::One) == NormOrder::Inf);
  CHECK(dual_exponent(NormOrder::Inf) == NormOrder::One);
}

TEST_CASE("closed-form perturbations on worked examples") {
  const Tensor g1 = Tensor::from(Shape({2}), {3, 4});
  const Perturbation p2 = worst_case_perturbation(g1, NormOrder::Two, 0.1);
  CHECK(p2.epsilon[0] == doctest::Approx(0.06).epsilon(1e-12));
  CHECK(p2.epsilon[1] == doctest::Approx(0.08).epsilon(1e-12));
  CHECK(p2.attained == doctest::Approx(0.5).epsilon(1e-12));
  CHECK_FALSE(p2.degenerate);

  const Tensor g2 = Tensor::from(Shape({2}), {3, -4});
  const Perturbation pinf = worst_case_perturbation(g2, NormOrder::Inf, 0.1);
  CHECK(pinf.epsilon[0] == doctest::Approx(0.1));
  CHECK(pinf.epsilon[1] == doctest::Approx(-0.1));
  CHECK(pinf.attained == doctest::Approx(0.7));  // 0.1 * ||g||_1

  const Perturbation pone = worst_case_perturbation(g2, NormOrder::One, 0.1);
  CHECK(pone.epsilon[0] == 0.0);
  CHECK(pone.epsilon[1] == doctest::Approx(-0.1));
  CHECK(pone.attained == doctest::Approx(0.4));  // 0.1 * ||g||_inf
}

TEST_CASE("attained value equals sigma times the dual norm") {
  Rng rng(101);
  for (const NormOrder p : kOrders) {
    for (int trial = 0; trial < 200; ++trial) {
      const int64_t n = 1 + static_cast<int64_t>(rng.uniform_int(0, 63));
      const Tensor g = random_grad(n, rng, trial % 3 == 0 ? 0.3 : 0.0);
      const double sigma = rng.uniform(1e-4, 2.0);
      const Perturbation r = worst_case_perturbation(g, p, sigma);
      if (r.degenerate) continue;
      const double expected = sigma * lp_norm(g, dual_exponent(p));
      CHECK(rel_gap(r.attained, expected) < 1e-10);
      // The optimum sits on the constraint boundary.
      CHECK(std::abs(lp_norm(r.epsilon, p) - sigma) <= 1e-9 * sigma);
    }
  }
}

TEST_CASE("perturbation direction ignores positive gradient scaling") {
  Rng rng(103);
  for (const NormOrder p : kOrders) {
    for (int trial = 0; trial < 40; ++trial) {
      const Tensor g = random_grad(8, rng);
      const double c = rng.uniform(0.1, 25.0);
      const Perturbation a = worst_case_perturbation(g, p, 0.5);
      const Perturbation b = worst_case_perturbation(map_scale(g, c), p, 0.5);
      for (int64_t i = 0; i < 8; ++i)
        CHECK(std::abs(a.epsilon[i] - b.epsilon[i]) < 1e-12);
    }
  }
}

TEST_CASE("first flat index wins an argmax tie in the single-coordinate limit") {
  const Tensor g = Tensor::from(Shape({4}), {-2.0, 2.0, -2.0, 1.0});
  const Perturbation r = worst_case_perturbation(g, NormOrder::One, 0.3);
  CHECK(r.epsilon[0] == -0.3);
  CHECK(r.epsilon[1] == 0.0);
  CHECK(r.epsilon[2] == 0.0);
  CHECK(r.epsilon[3] == 0.0);
}

TEST_CASE("zero gradient degenerates to a flagged zero perturbation") {
  const Tensor g = Tensor::zeros(Shape({5}));
  const Perturbation r = worst_case_perturbation(g, NormOrder::Two, 0.1);
  CHECK(r.degenerate);
  CHECK(r.attained == 0.0);
  for (int64_t i = 0; i < 5; ++i) CHECK(r.epsilon[i] == 0.0);

  Rng rng(7);
  const OracleResult o = perturbation_oracle(g, NormOrder::Two, 0.1, 10000, rng);
  CHECK(o.attained == 0.0);
}

TEST_CASE("closed form dominates the search oracle and stays within reach") {
  Rng rng(105);
  for (const NormOrder p : kOrders) {
    for (int trial = 0; trial < 30; ++trial) {
      const int64_t n = 2 + static_cast<int64_t>(rng.uniform_int(0, 14));
      const Tensor g = random_grad(n, rng);
      const double sigma = rng.uniform(0.01, 1.0);
      const Perturbation closed = worst_case_perturbation(g, p, sigma);
      const OracleResult oracle = perturbation_oracle(g, p, sigma, 10000, rng);
      CAPTURE(norm_order_str(p));
      CAPTURE(n);
      CAPTURE(sigma);
      CHECK(closed.attained >= oracle.attained);
      CHECK(oracle.attained >= (1.0 - 1e-3) * closed.attained);
      CHECK(lp_norm(oracle.epsilon, p) <= sigma * (1.0 + 1e-12));
    }
  }
}

TEST_CASE("oracle recovers the sign vector under the max-norm budget") {
  Rng rng(107);
  const Tensor g = Tensor::from(Shape({6}), {0.3, -1.2, 2.0, -0.1, 0.7, -2.5});
  const OracleResult o = perturbation_oracle(g, NormOrder::Inf, 0.05, 10000, rng);
  for (int64_t i = 0; i < 6; ++i)
    CHECK(o.epsilon[i] == doctest::Approx(0.05 * (g[i] > 0 ? 1.0 : -1.0)));
}

TEST_CASE("oracle enforces its preconditions") {
  Rng rng(1);
  const Tensor g = random_grad(4, rng);
  CHECK_THROWS_AS(perturbation_oracle(g, NormOrder::Two, 0.1, 999, rng), std::invalid_argument);
  CHECK_THROWS_AS(perturbation_oracle(random_grad(65, rng), NormOrder::Two, 0.1, 10000, rng),
                  std::invalid_argument);
}

TEST_CASE("penalty on a quadratic matches the analytic dual norm") {
  // loss = sum(x^2) at x = [1,2]; grad = [2,4]; penalty = 0.01 * ||grad||_2.
  Tape t;
  const NodeId x = t.leaf(Tensor::from(Shape({1, 2}), {1, 2}), true);
  const NodeId loss = t.sum_all(t.mul(x, x));
  RegularizerConfig cfg;
  cfg.sigma = 0.01;
  const std::vector<NodeId> targets{x};
  const NodeId pen = penalty(t, loss, targets, cfg);
  CHECK(t.value(pen).scalar_value() == doctest::Approx(0.01 * std::sqrt(20.0)).epsilon(1e-9));
}

TEST_CASE("penalty node supports every dual norm") {
  Rng rng(109);
  const Tensor xv = random_grad(6, rng);
  for (const NormOrder p : kOrders) {
    Tape t;
    const NodeId x = t.leaf(xv, true);
    const NodeId loss = t.sum_all(t.mul(x, x));
    RegularizerConfig cfg;
    cfg.p = p;
    cfg.sigma = 0.5;
    const std::vector<NodeId> targets{x};
    const double pen = t.value(penalty(t, loss, targets, cfg)).scalar_value();
    const double expected = 0.5 * lp_norm(map_scale(xv, 2.0), dual_exponent(p));
    CHECK(rel_gap(pen, expected) < 1e-6);  // the 1e-12 floor shifts the 2-norm slightly
  }
}

TEST_CASE("zero-strength penalty leaves the training gradient bit-exact") {
  const Tensor xv = Tensor::from(Shape({1, 3}), {0.4, -1.1, 2.2});

  auto grad_of = [&](bool with_penalty) {
    Tape t;
    const NodeId x = t.leaf(xv, true);
    const NodeId base = t.sum_all(t.mul(x, x));
    NodeId total = base;
    if (with_penalty) {
      RegularizerConfig cfg;
      cfg.sigma = 0.0;
      const std::vector<NodeId> targets{x};
      const NodeId pen = penalty(t, base, targets, cfg);
      CHECK(t.value(pen).scalar_value() == 0.0);
      total = t.add(base, pen);
    }
    const std::vector<NodeId> wrt{x};
    return t.backward_tensors(total, wrt)[0];
  };

  CHECK(grad_of(true).same_bits(grad_of(false)));
}

TEST_CASE("penalty bottoms out at the smoothing floor when gradients vanish") {
  Tape t;
  const NodeId x = t.leaf(Tensor::from(Shape({1, 4}), {1, 2, 3, 4}), true);
  // Loss ignores x entirely, so the target gradient is exactly zero.
  const NodeId loss = t.sum_all(t.mul(t.constant(Tensor::scalar(2.0)), t.constant(Tensor::scalar(3.0))));
  RegularizerConfig cfg;
  cfg.sigma = 0.01;
  const std::vector<NodeId> targets{x};
  const double pen = t.value(penalty(t, loss, targets, cfg)).scalar_value();
  CHECK(pen == doctest::Approx(0.01 * 1e-6).epsilon(1e-9));

  // A live gradient clears the floor by orders of magnitude.
  Tape t2;
  const NodeId x2 = t2.leaf(Tensor::from(Shape({1, 4}), {1, 2, 3, 4}), true);
  const NodeId loss2 = t2.sum_all(t2.mul(x2, x2));
  const std::vector<NodeId> targets2{x2};
  const double pen2 = t2.value(penalty(t2, loss2, targets2, cfg)).scalar_value();
  CHECK(pen2 > pen * 1e4);
}

TEST_CASE("penalty gradients through the recorded backward match finite differences") {
  // Toy conv pipeline: x -> conv(w) -> square -> sum; penalty = sigma * ||grad_x loss||_2.
  Rng rng(111);
  std::vector<double> xd(2 * 5 * 5), wd(3 * 2 * 3 * 3);
  for (double& v : xd) v = rng.uniform(-1.0, 1.0);
  for (double& v : wd) v = rng.uniform(-0.5, 0.5);
  const Tensor xv = Tensor::from(Shape({1, 2, 5, 5}), xd);
  Parameter w{"w", Tensor::from(Shape({3, 2, 3, 3}), wd), Tensor()};

  RegularizerConfig cfg;
  cfg.sigma = 0.05;

  auto pen_value = [&](Tape& t) {
    const NodeId x = t.leaf(xv, true);
    const NodeId y = t.conv2d(x, t.param(w), 1, 1);
    const NodeId base = t.sum_all(t.mul(y, y));
    const std::vector<NodeId> targets{x};
    return penalty(t, base, targets, cfg);
  };

  Tape t;
  const NodeId pen = pen_value(t);
  const std::vector<NodeId> wrt{t.param(w)};
  const Tensor analytic = t.backward_tensors(pen, wrt)[0];

  const Tensor saved = w.value;
  double worst = 0.0;
  const double step = 1e-5;
  for (int64_t i = 0; i < saved.numel(); i += 7) {  // sampled sweep
    std::vector<double> probe(saved.data(), saved.data() + saved.numel());
    probe[static_cast<size_t>(i)] += step;
    w.value = Tensor::from(saved.shape(), probe);
    Tape tp;
    const double fp = tp.value(pen_value(tp)).scalar_value();
    probe[static_cast<size_t>(i)] -= 2 * step;
    w.value = Tensor::from(saved.shape(), probe);
    Tape tm;
    const double fm = tm.value(pen_value(tm)).scalar_value();
    const double central = (fp - fm) / (2 * step);
    worst = std::max(worst, rel_gap(central, analytic[i]));
  }
  w.value = saved;
  CHECK(worst < 1e-4);
}

TEST_CASE("config validation flags every problem") {
  RegularizerConfig cfg;
  cfg.sigma = -1.0;
  cfg.targets = {"input", "c9", "input"};
  try {
    cfg.validate();
    FAIL("expected invalid_argument");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("sigma") != std::string::npos);
    CHECK(msg.find("c9") != std::string::npos);
    CHECK(msg.find("duplicate") != std::string::npos);
  }

  RegularizerConfig off;
  off.mode = RegularizerMode::Off;
  off.targets.clear();
  CHECK_NOTHROW(off.validate());

  CHECK(parse_norm_order("inf") == NormOrder::Inf);
  CHECK_THROWS_AS(parse_norm_order("3"), std::invalid_argument);
  CHECK(parse_regularizer_mode("adversarial-step") == RegularizerMode::AdversarialStep);
  CHECK(regularizer_mode_str(RegularizerMode::Penalty) == "penalty");
  CHECK_THROWS_AS(parse_regularizer_mode("on"), std::invalid_argument);
}

TEST_CASE("chain rule check is exact on a linear two-stage pipeline") {
  const Tensor A = Tensor::from(Shape({3, 4}), {1, 2, -1, 0, 0.5, -2, 3, 1, 2, 0, 1, -1});
  const Tensor c = Tensor::from(Shape({2, 3}), {1, -1, 2, 0.5, 1, -0.25});

  std::vector<Stage> stages;
  stages.push_back({"affine", [&](Tape& t, std::span<const NodeId> in) {
                      return std::vector<NodeId>{t.matmul(in[0], t.transpose(t.constant(A)))};
                    }});
  stages.push_back({"contract", [&](Tape& t, std::span<const NodeId> in) {
                      return std::vector<NodeId>{t.sum_all(t.mul(in[0], t.constant(c)))};
                    }});

  Rng rng(113);
  std::vector<double> xd(8);
  for (double& v : xd) v = rng.uniform(-2.0, 2.0);
  const ChainCheckReport report =
      chain_rule_consistency(stages, Tensor::from(Shape({2, 4}), std::move(xd)));
  REQUIRE(report.stage_errors.size() == 2);
  CHECK(report.stage_names[0] == "affine");
  CHECK(report.max_rel_error < 1e-14);
}

TEST_CASE("chain rule check passes through a pyramid model cut at stage boundaries") {
  MsflConfig cfg;
  cfg.input_h = 32;
  cfg.input_w = 32;
  cfg.widths = {4, 4, 4, 4};
  cfg.lateral_width = 4;
  cfg.embedding_dim = 4;
  cfg.num_classes = 2;
  Rng rng(120);
  MsflModel model(cfg, rng);

  // The boundary carries C2..C5 for the pyramid. The backbone chains those
  // maps internally, so each is materialized as an identity node — the
  // boundary variable must have no consumer other than the next stage.
  std::vector<Stage> stages;
  stages.push_back({"stem+backbone", [&](Tape& t, std::span<const NodeId> in) {
                      auto c = model.backbone_forward(t, in[0], Mode::Eval);
                      std::vector<NodeId> out;
                      for (const NodeId id : c) out.push_back(t.scale(id, 1.0));
                      return out;
                    }});
  stages.push_back({"pyramid+head", [&](Tape& t, std::span<const NodeId> in) {
                      const std::array<NodeId, 4> c{in[0], in[1], in[2], in[3]};
                      const auto p = model.csip_forward(t, c);
                      const auto f = model.msff_forward(t, p, Mode::Eval);
                      const std::vector<NodeId> maps{f[0], f[1], f[2], p[3]};
                      auto [embedding, logits] = model.fuse_and_embed(t, maps, Mode::Eval);
                      (void)embedding;
                      return std::vector<NodeId>{t.sum_all(t.mul(logits, logits))};
                    }});

  Rng data(116);
  std::vector<double> img(static_cast<size_t>(2 * 3 * 32 * 32));
  for (double& v : img) v = data.uniform(-1.0, 1.0);
  const Tensor input = Tensor::from(Shape({2, 3, 32, 32}), std::move(img));

  // Guard against a vacuous comparison: a 4-wide model can die entirely
  // (all-zero logits), in which case every gradient is zero and the check
  // proves nothing.
  {
    Tape t;
    const NodeId x = t.leaf(input, true);
    const std::vector<NodeId> boundary = stages[0].apply(t, std::vector<NodeId>{x});
    const NodeId root = stages[1].apply(t, boundary)[0];
    const Tensor g = t.backward_tensors(root, std::vector<NodeId>{x})[0];
    REQUIRE(lp_norm(g, NormOrder::Two) > 1e-8);
  }

  const ChainCheckReport report = chain_rule_consistency(stages, input);
  REQUIRE(report.stage_errors.size() == 2);
  CHECK(report.max_rel_error < 1e-8);
}

TEST_CASE("adversarial step climbs a convex loss and respects the budget") {
  const Tensor anchor = Tensor::from(Shape({1, 4}), {0.5, -0.25, 1.0, 2.0});
  auto loss_fn = [&](Tape& t, NodeId x) {
    const NodeId d = t.sub(x, t.constant(anchor));
    return t.sum_all(t.mul(d, d));
  };
  const Tensor x0 = Tensor::from(Shape({1, 4}), {1.0, 0.5, -1.0, 0.0});

  RegularizerConfig cfg;
  cfg.sigma = 0.05;
  for (const NormOrder p : kOrders) {
    cfg.p = p;
    const AdversarialStepResult r = adversarial_step_alternative(loss_fn, x0, cfg);
    CHECK_FALSE(r.degenerate);
    CHECK(r.adversarial_loss >= r.clean_loss);  // exact for a convex quadratic
    CHECK(std::abs(lp_norm(sub(r.perturbed_input, x0), p) - cfg.sigma) <= 1e-9 * cfg.sigma);
  }

  cfg.sigma = 0.0;
  cfg.p = NormOrder::Two;
  const AdversarialStepResult off = adversarial_step_alternative(loss_fn, x0, cfg);
  CHECK(off.degenerate);
  CHECK(off.adversarial_loss == off.clean_loss);
  CHECK(off.perturbed_input.same_bits(x0));
}

}  // TEST_SUITE
