// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "msgr/tensor.hpp"

namespace msgr {

// Operation kinds recorded on the tape. The set is closed under
// differentiation: every vjp rule below is expressible with these same ops,
// which is what makes a recorded backward pass differentiable again.
enum class Op : uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Max,
  Scale,
  PowScalar,
  Abs,
  Relu,
  Exp,
  Log,
  MatMul,
  Transpose,
  Conv2d,
  Conv2dDx,
  Conv2dDw,
  Upsample2x,
  BlockSum2x2,
  SpatialSum,
  SpatialBroadcast,
  BatchSum,
  BatchBroadcast,
  RowSum,
  RowBroadcast,
  RowMax,
  SumAll,
  BroadcastAll,
  ReduceMaxAll,
  SelectLabels,
  ScatterLabels,
  ConcatDim1,
  SliceDim1,
  PadDim1,
};

struct NodeId {
  uint64_t tape = 0;
  int32_t index = -1;
  bool valid() const { return index >= 0; }
};

// Named trainable tensor. The tape reads `value` at bind time; the training
// loop writes `grad` after backward and updates `value` out of band.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool pass = false;
  int64_t checked = 0;             // coordinates compared against central differences
  int64_t nonsmooth_excluded = 0;  // coordinates skipped at kinks
  bool nonfinite = false;          // any evaluation produced NaN/Inf
};

// Append-only record of an eager forward computation. Nodes are
// topologically ordered by construction; backward never mutates recorded
// values. A tape is single-owner: build and differentiate it on one thread.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  uint64_t id() const { return id_; }
  int64_t size() const { return static_cast<int64_t>(nodes_.size()); }
  // By value: recording ops can reallocate node storage, so references into
  // the tape must not outlive the next op. Tensor copies share their data.
  Tensor value(NodeId n) const;

  NodeId leaf(Tensor value, bool requires_grad = false);
  NodeId constant(Tensor value) { return leaf(std::move(value), false); }
  // Idempotent per tape: binding the same Parameter twice returns one node.
  NodeId param(Parameter& p);
  std::span<const std::pair<Parameter*, int32_t>> bound_params() const { return params_; }

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId emax(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId pow_scalar(NodeId a, double exponent);
  NodeId abs(NodeId a);
  NodeId relu(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  NodeId conv2d(NodeId x, NodeId w, int stride, int pad);
  NodeId conv2d_dx(NodeId g, NodeId w, int stride, int pad, int64_t in_h, int64_t in_w);
  NodeId conv2d_dw(NodeId x, NodeId g, int stride, int pad, int64_t kh, int64_t kw);
  NodeId upsample2x(NodeId a);
  NodeId block_sum_2x2(NodeId a);
  NodeId spatial_sum(NodeId a);
  NodeId spatial_broadcast(NodeId a, int64_t h, int64_t w);
  NodeId batch_sum(NodeId a);
  NodeId batch_broadcast(NodeId a, int64_t n);
  NodeId row_sum(NodeId a);
  NodeId row_broadcast(NodeId a, int64_t c);
  NodeId row_max(NodeId a);
  NodeId sum_all(NodeId a);
  NodeId broadcast_all(NodeId a, const Shape& shape);
  NodeId reduce_max_all(NodeId a);
  NodeId select_labels(NodeId a, std::vector<int32_t> labels);
  NodeId scatter_labels(NodeId a, std::vector<int32_t> labels, int64_t classes);
  NodeId concat_dim1(std::span<const NodeId> parts);
  NodeId slice_dim1(NodeId a, int64_t offset, int64_t count);
  NodeId pad_dim1(NodeId a, int64_t before, int64_t after);

  // Reverse-mode gradients of a scalar root for each wrt node, in order.
  // A wrt node the root does not depend on gets an all-zeros gradient.
  //
  // backward_nodes records every arithmetic step of the backward pass on
  // this same tape, so any scalar built from the returned nodes can be
  // differentiated again. backward_tensors skips recording and returns
  // plain values (the cheap final pass into parameter gradients).
  std::vector<NodeId> backward_nodes(NodeId root, std::span<const NodeId> wrt);
  std::vector<Tensor> backward_tensors(NodeId root, std::span<const NodeId> wrt);

 private:
  struct OpAttrs {
    OpAttrs() = default;
    double scalar = 0.0;
    int i0 = 0, i1 = 0;
    int64_t e0 = 0, e1 = 0;
    Shape shape;
    std::shared_ptr<const std::vector<int32_t>> labels;
  };

  struct Node {
    Op op = Op::Leaf;
    bool requires_grad = false;
    Tensor value;
    std::vector<int32_t> parents;
    OpAttrs attrs;
  };

  int32_t check(NodeId n, const char* context) const;
  NodeId push(Op op, Tensor value, std::vector<int32_t> parents);
  NodeId push(Op op, Tensor value, std::vector<int32_t> parents, OpAttrs attrs);

  template <typename Builder>
  std::vector<typename Builder::G> backward_impl(NodeId root, std::span<const NodeId> wrt,
                                                 Builder& builder);

  class RecordBuilder;
  class ValueBuilder;

  uint64_t id_;
  std::vector<Node> nodes_;
  std::vector<std::pair<Parameter*, int32_t>> params_;
  std::unordered_map<const Parameter*, int32_t> param_index_;
};

// Compares the reverse-mode gradient of `fn` (a Tensor -> scalar graph
// builder) against central finite differences at `x`. Coordinates where the
// one-sided differences disagree (a kink of relu/abs/max) are excluded
// rather than failed; the subgradient convention there is not the
// finite-difference limit.
GradCheckReport grad_check(const std::function<NodeId(Tape&, NodeId)>& fn, const Tensor& x,
                           double tolerance, double fd_step = 1e-5,
                           double kink_threshold = 1e-3);

}  // namespace msgr
