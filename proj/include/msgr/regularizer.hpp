// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "msgr/autodiff.hpp"
#include "msgr/rng.hpp"
#include "msgr/tensor.hpp"

namespace msgr {

enum class RegularizerMode { Penalty, AdversarialStep, Off };

std::string regularizer_mode_str(RegularizerMode m);
RegularizerMode parse_regularizer_mode(const std::string& s);
NormOrder parse_norm_order(const std::string& s);  // "1" | "2" | "inf"

// Worst-case-perturbation regularizer settings. `targets` names the
// quantities whose loss gradient is penalized: "input" and/or stage outputs
// "c2".."c5". sigma = 0 is the degenerate no-op strength (equivalent to
// mode Off); the trainer exploits that equivalence.
struct RegularizerConfig {
  NormOrder p = NormOrder::Two;
  double sigma = 1e-2;
  std::vector<std::string> targets{"input", "c2", "c3"};
  RegularizerMode mode = RegularizerMode::Penalty;

  void validate() const;  // throws std::invalid_argument listing all problems
};

// 1 <-> inf, 2 <-> 2.
NormOrder dual_exponent(NormOrder p);

// argmax over ||e||_p <= sigma of g.e, solved in closed form.
struct Perturbation {
  Tensor epsilon;   // shape of g; ||epsilon||_p = sigma unless degenerate
  double attained;  // g.epsilon = sigma * ||g||_{p*}
  bool degenerate;  // g was exactly zero; epsilon = 0 and the maximizer is non-unique
};

Perturbation worst_case_perturbation(const Tensor& grad, NormOrder p, double sigma);

// Independent check on the closed form: projected random search over the
// p-ball followed by coordinate ascent. Every candidate is feasible, so the
// best value found is a lower bound on the true maximum.
struct OracleResult {
  Tensor epsilon;
  double attained;
};

OracleResult perturbation_oracle(const Tensor& grad, NormOrder p, double sigma,
                                 int64_t samples, Rng& rng);

// sigma * sum_t ||grad_t loss||_{p*} as a differentiable node. The gradients
// are computed with their derivative graph recorded, so the result supports
// another backward pass. For p* = 2 the norm carries a 1e-12 additive floor
// inside the square root, keeping the node differentiable when a target's
// gradient vanishes; the penalty therefore bottoms out at sigma * 1e-6 per
// target rather than exactly zero.
NodeId penalty(Tape& t, NodeId loss, std::span<const NodeId> targets,
               const RegularizerConfig& config);

// One pipeline stage for the chain-rule consistency check. `apply` builds
// the stage on the given tape from the previous stage's outputs; the final
// stage must produce a single scalar node.
//
// Boundaries must be genuine cut sets: each returned node may feed only the
// next stage. If a stage reuses one of its own outputs internally (a
// backbone chaining c2 -> c3), wrap the outputs in identity nodes so the
// boundary variable is distinct from the internal one — otherwise the
// full-graph gradient at the boundary also carries the internal flow and
// the per-boundary comparison measures two different objects.
struct Stage {
  std::string name;
  std::function<std::vector<NodeId>(Tape&, std::span<const NodeId>)> apply;
};

// Compares the end-to-end input gradient against the composition of
// per-stage vector-Jacobian products, each evaluated on its own tape from
// leaf copies of the stage inputs. stage_errors[k] is the mismatch at the
// input boundary of stage k after composing the VJPs of stages K-1..k;
// entry 0 is therefore the full input-gradient comparison.
struct ChainCheckReport {
  std::vector<std::string> stage_names;
  std::vector<double> stage_errors;
  double max_rel_error = 0.0;
};

ChainCheckReport chain_rule_consistency(std::span<const Stage> stages, const Tensor& input);

// Adversarial-step alternative to the direct penalty: perturbs the input by
// the closed-form epsilon of the input gradient and reruns the loss.
// `loss_fn` must build the full forward producing a scalar from an input
// leaf.
struct AdversarialStepResult {
  Tensor perturbed_input;
  double clean_loss = 0.0;
  double adversarial_loss = 0.0;
  double perturbation_norm = 0.0;  // ||x_adv - x||_p
  bool degenerate = false;         // zero input gradient (or sigma = 0)
};

AdversarialStepResult adversarial_step_alternative(
    const std::function<NodeId(Tape&, NodeId)>& loss_fn, const Tensor& input,
    const RegularizerConfig& config);

}  // namespace msgr
