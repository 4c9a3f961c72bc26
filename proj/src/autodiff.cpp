// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include "msgr/autodiff.hpp"

#include <atomic>
#include <cmath>
#include <optional>
#include <stdexcept>

namespace msgr {

namespace {

std::atomic<uint64_t> g_tape_counter{1};

[[noreturn]] void fail(const std::string& what) { throw std::invalid_argument(what); }

// Scalar operand on the right of an elementwise op broadcasts; its gradient
// is the full reduction of the elementwise contribution.
bool scalar_broadcast(const Tensor& a, const Tensor& b) {
  return b.numel() == 1 && b.shape() != a.shape();
}

Tensor relu_mask(const Tensor& a) {
  std::vector<double> m(static_cast<size_t>(a.numel()));
  for (int64_t i = 0; i < a.numel(); ++i) m[static_cast<size_t>(i)] = a[i] > 0.0 ? 1.0 : 0.0;
  return Tensor::from(a.shape(), std::move(m));
}

// Sign with sign(0) = 0, the chosen subgradient of |x| at the kink.
Tensor sign_mask(const Tensor& a) {
  std::vector<double> m(static_cast<size_t>(a.numel()));
  for (int64_t i = 0; i < a.numel(); ++i)
    m[static_cast<size_t>(i)] = a[i] > 0.0 ? 1.0 : (a[i] < 0.0 ? -1.0 : 0.0);
  return Tensor::from(a.shape(), std::move(m));
}

// Ties route the gradient to the first argument.
Tensor max_left_mask(const Tensor& a, const Tensor& b) {
  const bool sb = scalar_broadcast(a, b);
  std::vector<double> m(static_cast<size_t>(a.numel()));
  for (int64_t i = 0; i < a.numel(); ++i)
    m[static_cast<size_t>(i)] = a[i] >= (sb ? b[0] : b[i]) ? 1.0 : 0.0;
  return Tensor::from(a.shape(), std::move(m));
}

Tensor one_minus(const Tensor& m) {
  std::vector<double> r(static_cast<size_t>(m.numel()));
  for (int64_t i = 0; i < m.numel(); ++i) r[static_cast<size_t>(i)] = 1.0 - m[i];
  return Tensor::from(m.shape(), std::move(r));
}

// One-hot of the first per-row maximum, shape (N,C).
Tensor row_argmax_mask(const Tensor& a) {
  const int64_t n = a.shape().extent(0), c = a.shape().extent(1);
  std::vector<double> m(static_cast<size_t>(n * c), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    int64_t best = 0;
    for (int64_t j = 1; j < c; ++j)
      if (a[i * c + j] > a[i * c + best]) best = j;
    m[static_cast<size_t>(i * c + best)] = 1.0;
  }
  return Tensor::from(a.shape(), std::move(m));
}

// One-hot of the first flat maximum, in the input's shape.
Tensor argmax_mask(const Tensor& a) {
  int64_t best = 0;
  for (int64_t i = 1; i < a.numel(); ++i)
    if (a[i] > a[best]) best = i;
  std::vector<double> m(static_cast<size_t>(a.numel()), 0.0);
  m[static_cast<size_t>(best)] = 1.0;
  return Tensor::from(a.shape(), std::move(m));
}

}  // namespace

Tape::Tape() : id_(g_tape_counter.fetch_add(1)) {}

int32_t Tape::check(NodeId n, const char* context) const {
  if (n.tape != id_)
    fail(std::string(context) + ": node belongs to a different tape");
  if (n.index < 0 || n.index >= static_cast<int32_t>(nodes_.size()))
    fail(std::string(context) + ": node index out of range");
  return n.index;
}

Tensor Tape::value(NodeId n) const { return nodes_[check(n, "value")].value; }

NodeId Tape::push(Op op, Tensor value, std::vector<int32_t> parents) {
  return push(op, std::move(value), std::move(parents), OpAttrs());
}

NodeId Tape::push(Op op, Tensor value, std::vector<int32_t> parents, OpAttrs attrs) {
  Node node;
  node.op = op;
  node.value = std::move(value);
  node.parents = std::move(parents);
  node.attrs = std::move(attrs);
  nodes_.push_back(std::move(node));
  return {id_, static_cast<int32_t>(nodes_.size() - 1)};
}

NodeId Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.defined()) fail("leaf: undefined tensor");
  ensure_finite(value, "leaf");
  NodeId n = push(Op::Leaf, std::move(value), {});
  nodes_.back().requires_grad = requires_grad;
  return n;
}

NodeId Tape::param(Parameter& p) {
  auto it = param_index_.find(&p);
  if (it != param_index_.end()) return {id_, it->second};
  NodeId n = leaf(p.value, true);
  param_index_.emplace(&p, n.index);
  params_.emplace_back(&p, n.index);
  return n;
}

NodeId Tape::add(NodeId a, NodeId b) {
  const int32_t ia = check(a, "add"), ib = check(b, "add");
  return push(Op::Add, msgr::add(nodes_[ia].value, nodes_[ib].value), {ia, ib});
}

NodeId Tape::sub(NodeId a, NodeId b) {
  const int32_t ia = check(a, "sub"), ib = check(b, "sub");
  return push(Op::Sub, msgr::sub(nodes_[ia].value, nodes_[ib].value), {ia, ib});
}

NodeId Tape::mul(NodeId a, NodeId b) {
  const int32_t ia = check(a, "mul"), ib = check(b, "mul");
  return push(Op::Mul, msgr::mul(nodes_[ia].value, nodes_[ib].value), {ia, ib});
}

NodeId Tape::emax(NodeId a, NodeId b) {
  const int32_t ia = check(a, "emax"), ib = check(b, "emax");
  return push(Op::Max, msgr::emax(nodes_[ia].value, nodes_[ib].value), {ia, ib});
}

NodeId Tape::scale(NodeId a, double factor) {
  const int32_t ia = check(a, "scale");
  OpAttrs attrs;
  attrs.scalar = factor;
  return push(Op::Scale, map_scale(nodes_[ia].value, factor), {ia}, std::move(attrs));
}

NodeId Tape::pow_scalar(NodeId a, double exponent) {
  const int32_t ia = check(a, "pow_scalar");
  OpAttrs attrs;
  attrs.scalar = exponent;
  return push(Op::PowScalar, map_pow(nodes_[ia].value, exponent), {ia}, std::move(attrs));
}

NodeId Tape::abs(NodeId a) {
  const int32_t ia = check(a, "abs");
  return push(Op::Abs, map_abs(nodes_[ia].value), {ia});
}

NodeId Tape::relu(NodeId a) {
  const int32_t ia = check(a, "relu");
  return push(Op::Relu, map_relu(nodes_[ia].value), {ia});
}

NodeId Tape::exp(NodeId a) {
  const int32_t ia = check(a, "exp");
  return push(Op::Exp, map_exp(nodes_[ia].value), {ia});
}

NodeId Tape::log(NodeId a) {
  const int32_t ia = check(a, "log");
  return push(Op::Log, map_log(nodes_[ia].value), {ia});
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  const int32_t ia = check(a, "matmul"), ib = check(b, "matmul");
  return push(Op::MatMul, msgr::matmul(nodes_[ia].value, nodes_[ib].value), {ia, ib});
}

NodeId Tape::transpose(NodeId a) {
  const int32_t ia = check(a, "transpose");
  return push(Op::Transpose, transpose2d(nodes_[ia].value), {ia});
}

NodeId Tape::conv2d(NodeId x, NodeId w, int stride, int pad) {
  const int32_t ix = check(x, "conv2d"), iw = check(w, "conv2d");
  OpAttrs attrs;
  attrs.i0 = stride;
  attrs.i1 = pad;
  return push(Op::Conv2d, msgr::conv2d(nodes_[ix].value, nodes_[iw].value, stride, pad),
              {ix, iw}, std::move(attrs));
}

NodeId Tape::conv2d_dx(NodeId g, NodeId w, int stride, int pad, int64_t in_h, int64_t in_w) {
  const int32_t ig = check(g, "conv2d_dx"), iw = check(w, "conv2d_dx");
  OpAttrs attrs;
  attrs.i0 = stride;
  attrs.i1 = pad;
  attrs.e0 = in_h;
  attrs.e1 = in_w;
  return push(Op::Conv2dDx,
              conv2d_input_grad(nodes_[ig].value, nodes_[iw].value, stride, pad, in_h, in_w),
              {ig, iw}, std::move(attrs));
}

NodeId Tape::conv2d_dw(NodeId x, NodeId g, int stride, int pad, int64_t kh, int64_t kw) {
  const int32_t ix = check(x, "conv2d_dw"), ig = check(g, "conv2d_dw");
  OpAttrs attrs;
  attrs.i0 = stride;
  attrs.i1 = pad;
  attrs.e0 = kh;
  attrs.e1 = kw;
  return push(Op::Conv2dDw,
              conv2d_weight_grad(nodes_[ix].value, nodes_[ig].value, stride, pad, kh, kw),
              {ix, ig}, std::move(attrs));
}

NodeId Tape::upsample2x(NodeId a) {
  const int32_t ia = check(a, "upsample2x");
  return push(Op::Upsample2x, nearest_upsample2x(nodes_[ia].value), {ia});
}

NodeId Tape::block_sum_2x2(NodeId a) {
  const int32_t ia = check(a, "block_sum_2x2");
  return push(Op::BlockSum2x2, msgr::block_sum_2x2(nodes_[ia].value), {ia});
}

NodeId Tape::spatial_sum(NodeId a) {
  const int32_t ia = check(a, "spatial_sum");
  return push(Op::SpatialSum, msgr::spatial_sum(nodes_[ia].value), {ia});
}

NodeId Tape::spatial_broadcast(NodeId a, int64_t h, int64_t w) {
  const int32_t ia = check(a, "spatial_broadcast");
  OpAttrs attrs;
  attrs.e0 = h;
  attrs.e1 = w;
  return push(Op::SpatialBroadcast, msgr::spatial_broadcast(nodes_[ia].value, h, w), {ia},
              std::move(attrs));
}

NodeId Tape::batch_sum(NodeId a) {
  const int32_t ia = check(a, "batch_sum");
  return push(Op::BatchSum, msgr::batch_sum(nodes_[ia].value), {ia});
}

NodeId Tape::batch_broadcast(NodeId a, int64_t n) {
  const int32_t ia = check(a, "batch_broadcast");
  OpAttrs attrs;
  attrs.e0 = n;
  return push(Op::BatchBroadcast, msgr::batch_broadcast(nodes_[ia].value, n), {ia},
              std::move(attrs));
}

NodeId Tape::row_sum(NodeId a) {
  const int32_t ia = check(a, "row_sum");
  return push(Op::RowSum, msgr::row_sum(nodes_[ia].value), {ia});
}

NodeId Tape::row_broadcast(NodeId a, int64_t c) {
  const int32_t ia = check(a, "row_broadcast");
  OpAttrs attrs;
  attrs.e0 = c;
  return push(Op::RowBroadcast, msgr::row_broadcast(nodes_[ia].value, c), {ia},
              std::move(attrs));
}

NodeId Tape::row_max(NodeId a) {
  const int32_t ia = check(a, "row_max");
  return push(Op::RowMax, msgr::row_max(nodes_[ia].value), {ia});
}

NodeId Tape::sum_all(NodeId a) {
  const int32_t ia = check(a, "sum_all");
  return push(Op::SumAll, msgr::sum_all(nodes_[ia].value), {ia});
}

NodeId Tape::broadcast_all(NodeId a, const Shape& shape) {
  const int32_t ia = check(a, "broadcast_all");
  OpAttrs attrs;
  attrs.shape = shape;
  return push(Op::BroadcastAll, msgr::broadcast_all(nodes_[ia].value, shape), {ia},
              std::move(attrs));
}

NodeId Tape::reduce_max_all(NodeId a) {
  const int32_t ia = check(a, "reduce_max_all");
  return push(Op::ReduceMaxAll, msgr::reduce_max_all(nodes_[ia].value), {ia});
}

NodeId Tape::select_labels(NodeId a, std::vector<int32_t> labels) {
  const int32_t ia = check(a, "select_labels");
  OpAttrs attrs;
  attrs.labels = std::make_shared<const std::vector<int32_t>>(std::move(labels));
  Tensor v = msgr::select_labels(nodes_[ia].value, *attrs.labels);
  return push(Op::SelectLabels, std::move(v), {ia}, std::move(attrs));
}

NodeId Tape::scatter_labels(NodeId a, std::vector<int32_t> labels, int64_t classes) {
  const int32_t ia = check(a, "scatter_labels");
  OpAttrs attrs;
  attrs.labels = std::make_shared<const std::vector<int32_t>>(std::move(labels));
  attrs.e0 = classes;
  Tensor v = msgr::scatter_labels(nodes_[ia].value, *attrs.labels, classes);
  return push(Op::ScatterLabels, std::move(v), {ia}, std::move(attrs));
}

NodeId Tape::concat_dim1(std::span<const NodeId> parts) {
  if (parts.empty()) fail("concat_dim1: need at least one input");
  std::vector<int32_t> parents;
  std::vector<Tensor> values;
  parents.reserve(parts.size());
  values.reserve(parts.size());
  for (NodeId p : parts) {
    parents.push_back(check(p, "concat_dim1"));
    values.push_back(nodes_[parents.back()].value);
  }
  return push(Op::ConcatDim1, msgr::concat_dim1(values), std::move(parents));
}

NodeId Tape::slice_dim1(NodeId a, int64_t offset, int64_t count) {
  const int32_t ia = check(a, "slice_dim1");
  OpAttrs attrs;
  attrs.e0 = offset;
  attrs.e1 = count;
  return push(Op::SliceDim1, msgr::slice_dim1(nodes_[ia].value, offset, count), {ia},
              std::move(attrs));
}

NodeId Tape::pad_dim1(NodeId a, int64_t before, int64_t after) {
  const int32_t ia = check(a, "pad_dim1");
  OpAttrs attrs;
  attrs.e0 = before;
  attrs.e1 = after;
  return push(Op::PadDim1, msgr::pad_dim1(nodes_[ia].value, before, after), {ia},
              std::move(attrs));
}

// Gradient arithmetic in the two backward modes. RecordBuilder emits tape
// nodes (the gradient stays differentiable); ValueBuilder computes plain
// tensors. Both expose the same surface so one vjp rule set serves both.
class Tape::RecordBuilder {
 public:
  using G = NodeId;
  explicit RecordBuilder(Tape& tape) : t_(tape) {}

  G lift(int32_t node_index) { return {t_.id_, node_index}; }
  G constant(Tensor v) { return t_.constant(std::move(v)); }
  Tensor value(G g) { return t_.value(g); }

  G add(G a, G b) { return t_.add(a, b); }
  G mul(G a, G b) { return t_.mul(a, b); }
  G scale(G a, double f) { return t_.scale(a, f); }
  G pow_scalar(G a, double e) { return t_.pow_scalar(a, e); }
  G matmul(G a, G b) { return t_.matmul(a, b); }
  G transpose(G a) { return t_.transpose(a); }
  G conv2d(G x, G w, int s, int p) { return t_.conv2d(x, w, s, p); }
  G conv2d_dx(G g, G w, int s, int p, int64_t h, int64_t wd) {
    return t_.conv2d_dx(g, w, s, p, h, wd);
  }
  G conv2d_dw(G x, G g, int s, int p, int64_t kh, int64_t kw) {
    return t_.conv2d_dw(x, g, s, p, kh, kw);
  }
  G upsample2x(G a) { return t_.upsample2x(a); }
  G block_sum_2x2(G a) { return t_.block_sum_2x2(a); }
  G spatial_sum(G a) { return t_.spatial_sum(a); }
  G spatial_broadcast(G a, int64_t h, int64_t w) { return t_.spatial_broadcast(a, h, w); }
  G batch_sum(G a) { return t_.batch_sum(a); }
  G batch_broadcast(G a, int64_t n) { return t_.batch_broadcast(a, n); }
  G row_sum(G a) { return t_.row_sum(a); }
  G row_broadcast(G a, int64_t c) { return t_.row_broadcast(a, c); }
  G sum_all(G a) { return t_.sum_all(a); }
  G broadcast_all(G a, const Shape& s) { return t_.broadcast_all(a, s); }
  G select_labels(G a, const std::vector<int32_t>& l) { return t_.select_labels(a, l); }
  G scatter_labels(G a, const std::vector<int32_t>& l, int64_t c) {
    return t_.scatter_labels(a, l, c);
  }
  G slice_dim1(G a, int64_t o, int64_t c) { return t_.slice_dim1(a, o, c); }
  G pad_dim1(G a, int64_t b, int64_t af) { return t_.pad_dim1(a, b, af); }
  G zeros(const Shape& s) { return t_.constant(Tensor::zeros(s)); }

 private:
  Tape& t_;
};

class Tape::ValueBuilder {
 public:
  using G = Tensor;
  explicit ValueBuilder(Tape& tape) : t_(tape) {}

  G lift(int32_t node_index) { return t_.nodes_[node_index].value; }
  G constant(Tensor v) { return v; }
  Tensor value(G g) { return g; }

  G add(G a, G b) { return msgr::add(a, b); }
  G mul(G a, G b) { return msgr::mul(a, b); }
  G scale(G a, double f) { return map_scale(a, f); }
  G pow_scalar(G a, double e) { return map_pow(a, e); }
  G matmul(G a, G b) { return msgr::matmul(a, b); }
  G transpose(G a) { return transpose2d(a); }
  G conv2d(G x, G w, int s, int p) { return msgr::conv2d(x, w, s, p); }
  G conv2d_dx(G g, G w, int s, int p, int64_t h, int64_t wd) {
    return conv2d_input_grad(g, w, s, p, h, wd);
  }
  G conv2d_dw(G x, G g, int s, int p, int64_t kh, int64_t kw) {
    return conv2d_weight_grad(x, g, s, p, kh, kw);
  }
  G upsample2x(G a) { return nearest_upsample2x(a); }
  G block_sum_2x2(G a) { return msgr::block_sum_2x2(a); }
  G spatial_sum(G a) { return msgr::spatial_sum(a); }
  G spatial_broadcast(G a, int64_t h, int64_t w) { return msgr::spatial_broadcast(a, h, w); }
  G batch_sum(G a) { return msgr::batch_sum(a); }
  G batch_broadcast(G a, int64_t n) { return msgr::batch_broadcast(a, n); }
  G row_sum(G a) { return msgr::row_sum(a); }
  G row_broadcast(G a, int64_t c) { return msgr::row_broadcast(a, c); }
  G sum_all(G a) { return msgr::sum_all(a); }
  G broadcast_all(G a, const Shape& s) { return msgr::broadcast_all(a, s); }
  G select_labels(G a, const std::vector<int32_t>& l) { return msgr::select_labels(a, l); }
  G scatter_labels(G a, const std::vector<int32_t>& l, int64_t c) {
    return msgr::scatter_labels(a, l, c);
  }
  G slice_dim1(G a, int64_t o, int64_t c) { return msgr::slice_dim1(a, o, c); }
  G pad_dim1(G a, int64_t b, int64_t af) { return msgr::pad_dim1(a, b, af); }
  G zeros(const Shape& s) { return Tensor::zeros(s); }

 private:
  Tape& t_;
};

template <typename Builder>
std::vector<typename Builder::G> Tape::backward_impl(NodeId root, std::span<const NodeId> wrt,
                                                     Builder& builder) {
  using G = typename Builder::G;
  const int32_t ir = check(root, "backward");
  if (nodes_[ir].value.numel() != 1) fail("backward: root must be scalar-shaped");

  std::vector<bool> is_wrt(static_cast<size_t>(ir) + 1, false);
  for (NodeId n : wrt) {
    const int32_t i = check(n, "backward wrt");
    if (i <= ir) is_wrt[static_cast<size_t>(i)] = true;
  }

  // depends[i]: some wrt node is an ancestor of i. Gradients only need to
  // flow along nodes that are both reachable from the root and depend on a
  // wrt node.
  std::vector<bool> depends(static_cast<size_t>(ir) + 1, false);
  for (int32_t i = 0; i <= ir; ++i) {
    if (is_wrt[static_cast<size_t>(i)]) {
      depends[static_cast<size_t>(i)] = true;
      continue;
    }
    for (int32_t p : nodes_[static_cast<size_t>(i)].parents)
      if (depends[static_cast<size_t>(p)]) {
        depends[static_cast<size_t>(i)] = true;
        break;
      }
  }

  std::vector<bool> live(static_cast<size_t>(ir) + 1, false);
  live[static_cast<size_t>(ir)] = depends[static_cast<size_t>(ir)];
  std::vector<std::optional<G>> grads(static_cast<size_t>(ir) + 1);
  if (live[static_cast<size_t>(ir)])
    grads[static_cast<size_t>(ir)] = builder.constant(Tensor::scalar(1.0));

  auto accumulate = [&](int32_t parent, G contribution) {
    auto& slot = grads[static_cast<size_t>(parent)];
    slot = slot.has_value() ? builder.add(*slot, contribution) : contribution;
    live[static_cast<size_t>(parent)] = true;
  };

  for (int32_t i = ir; i >= 0; --i) {
    if (!live[static_cast<size_t>(i)] || !grads[static_cast<size_t>(i)].has_value()) continue;
    // Copy: builder calls may reallocate nodes_, invalidating references.
    const Node n = nodes_[static_cast<size_t>(i)];
    const G g = *grads[static_cast<size_t>(i)];
    auto wants = [&](int arg) { return depends[static_cast<size_t>(n.parents[arg])]; };

    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Add: {
        const Tensor av = nodes_[n.parents[0]].value;
        const Tensor bv = nodes_[n.parents[1]].value;
        if (wants(0)) accumulate(n.parents[0], g);
        if (wants(1))
          accumulate(n.parents[1], scalar_broadcast(av, bv) ? builder.sum_all(g) : g);
        break;
      }
      case Op::Sub: {
        const Tensor av = nodes_[n.parents[0]].value;
        const Tensor bv = nodes_[n.parents[1]].value;
        if (wants(0)) accumulate(n.parents[0], g);
        if (wants(1)) {
          G gb = scalar_broadcast(av, bv) ? builder.sum_all(g) : g;
          accumulate(n.parents[1], builder.scale(gb, -1.0));
        }
        break;
      }
      case Op::Mul: {
        const Tensor av = nodes_[n.parents[0]].value;
        const Tensor bv = nodes_[n.parents[1]].value;
        if (wants(0)) accumulate(n.parents[0], builder.mul(g, builder.lift(n.parents[1])));
        if (wants(1)) {
          G prod = builder.mul(g, builder.lift(n.parents[0]));
          accumulate(n.parents[1], scalar_broadcast(av, bv) ? builder.sum_all(prod) : prod);
        }
        break;
      }
      case Op::Max: {
        const Tensor av = nodes_[n.parents[0]].value;
        const Tensor bv = nodes_[n.parents[1]].value;
        const Tensor left = max_left_mask(av, bv);
        if (wants(0)) accumulate(n.parents[0], builder.mul(g, builder.constant(left)));
        if (wants(1)) {
          G masked = builder.mul(g, builder.constant(one_minus(left)));
          accumulate(n.parents[1], scalar_broadcast(av, bv) ? builder.sum_all(masked) : masked);
        }
        break;
      }
      case Op::Scale:
        if (wants(0)) accumulate(n.parents[0], builder.scale(g, n.attrs.scalar));
        break;
      case Op::PowScalar: {
        if (!wants(0)) break;
        const double e = n.attrs.scalar;
        G d = builder.scale(
            builder.mul(g, builder.pow_scalar(builder.lift(n.parents[0]), e - 1.0)), e);
        accumulate(n.parents[0], d);
        break;
      }
      case Op::Abs:
        if (wants(0))
          accumulate(n.parents[0],
                     builder.mul(g, builder.constant(sign_mask(nodes_[n.parents[0]].value))));
        break;
      case Op::Relu:
        if (wants(0))
          accumulate(n.parents[0],
                     builder.mul(g, builder.constant(relu_mask(nodes_[n.parents[0]].value))));
        break;
      case Op::Exp:
        // d exp(a) = exp(a): reuse this very node's output.
        if (wants(0)) accumulate(n.parents[0], builder.mul(g, builder.lift(i)));
        break;
      case Op::Log:
        if (wants(0))
          accumulate(n.parents[0],
                     builder.mul(g, builder.pow_scalar(builder.lift(n.parents[0]), -1.0)));
        break;
      case Op::MatMul:
        if (wants(0))
          accumulate(n.parents[0],
                     builder.matmul(g, builder.transpose(builder.lift(n.parents[1]))));
        if (wants(1))
          accumulate(n.parents[1],
                     builder.matmul(builder.transpose(builder.lift(n.parents[0])), g));
        break;
      case Op::Transpose:
        if (wants(0)) accumulate(n.parents[0], builder.transpose(g));
        break;
      case Op::Conv2d: {
        const Tensor x = nodes_[n.parents[0]].value;
        const Tensor w = nodes_[n.parents[1]].value;
        if (wants(0))
          accumulate(n.parents[0],
                     builder.conv2d_dx(g, builder.lift(n.parents[1]), n.attrs.i0, n.attrs.i1,
                                       x.shape().extent(2), x.shape().extent(3)));
        if (wants(1))
          accumulate(n.parents[1],
                     builder.conv2d_dw(builder.lift(n.parents[0]), g, n.attrs.i0, n.attrs.i1,
                                       w.shape().extent(2), w.shape().extent(3)));
        break;
      }
      case Op::Conv2dDx: {
        // Node value = conv2d_dx(G.,W); bilinear, so each partial is another
        // member of the conv triple.
        const Tensor w = nodes_[n.parents[1]].value;
        if (wants(0))
          accumulate(n.parents[0],
                     builder.conv2d(g, builder.lift(n.parents[1]), n.attrs.i0, n.attrs.i1));
        if (wants(1))
          accumulate(n.parents[1],
                     builder.conv2d_dw(g, builder.lift(n.parents[0]), n.attrs.i0, n.attrs.i1,
                                       w.shape().extent(2), w.shape().extent(3)));
        break;
      }
      case Op::Conv2dDw: {
        const Tensor x = nodes_[n.parents[0]].value;
        if (wants(0))
          accumulate(n.parents[0],
                     builder.conv2d_dx(builder.lift(n.parents[1]), g, n.attrs.i0, n.attrs.i1,
                                       x.shape().extent(2), x.shape().extent(3)));
        if (wants(1))
          accumulate(n.parents[1],
                     builder.conv2d(builder.lift(n.parents[0]), g, n.attrs.i0, n.attrs.i1));
        break;
      }
      case Op::Upsample2x:
        if (wants(0)) accumulate(n.parents[0], builder.block_sum_2x2(g));
        break;
      case Op::BlockSum2x2:
        if (wants(0)) accumulate(n.parents[0], builder.upsample2x(g));
        break;
      case Op::SpatialSum: {
        const Tensor x = nodes_[n.parents[0]].value;
        if (wants(0))
          accumulate(n.parents[0], builder.spatial_broadcast(g, x.shape().extent(2),
                                                             x.shape().extent(3)));
        break;
      }
      case Op::SpatialBroadcast:
        if (wants(0)) accumulate(n.parents[0], builder.spatial_sum(g));
        break;
      case Op::BatchSum: {
        const Tensor x = nodes_[n.parents[0]].value;
        if (wants(0)) accumulate(n.parents[0], builder.batch_broadcast(g, x.shape().extent(0)));
        break;
      }
      case Op::BatchBroadcast:
        if (wants(0)) accumulate(n.parents[0], builder.batch_sum(g));
        break;
      case Op::RowSum: {
        const Tensor x = nodes_[n.parents[0]].value;
        if (wants(0)) accumulate(n.parents[0], builder.row_broadcast(g, x.shape().extent(1)));
        break;
      }
      case Op::RowBroadcast:
        if (wants(0)) accumulate(n.parents[0], builder.row_sum(g));
        break;
      case Op::RowMax: {
        const Tensor x = nodes_[n.parents[0]].value;
        if (wants(0)) {
          G spread = builder.row_broadcast(g, x.shape().extent(1));
          accumulate(n.parents[0], builder.mul(spread, builder.constant(row_argmax_mask(x))));
        }
        break;
      }
      case Op::SumAll: {
        const Tensor x = nodes_[n.parents[0]].value;
        if (wants(0)) accumulate(n.parents[0], builder.broadcast_all(g, x.shape()));
        break;
      }
      case Op::BroadcastAll:
        if (wants(0)) accumulate(n.parents[0], builder.sum_all(g));
        break;
      case Op::ReduceMaxAll: {
        const Tensor x = nodes_[n.parents[0]].value;
        if (wants(0)) {
          G spread = builder.broadcast_all(g, x.shape());
          accumulate(n.parents[0], builder.mul(spread, builder.constant(argmax_mask(x))));
        }
        break;
      }
      case Op::SelectLabels: {
        const Tensor x = nodes_[n.parents[0]].value;
        if (wants(0))
          accumulate(n.parents[0],
                     builder.scatter_labels(g, *n.attrs.labels, x.shape().extent(1)));
        break;
      }
      case Op::ScatterLabels:
        if (wants(0)) accumulate(n.parents[0], builder.select_labels(g, *n.attrs.labels));
        break;
      case Op::ConcatDim1: {
        int64_t offset = 0;
        for (size_t arg = 0; arg < n.parents.size(); ++arg) {
          const int64_t c = nodes_[n.parents[arg]].value.shape().extent(1);
          if (depends[static_cast<size_t>(n.parents[arg])])
            accumulate(n.parents[arg], builder.slice_dim1(g, offset, c));
          offset += c;
        }
        break;
      }
      case Op::SliceDim1: {
        const Tensor x = nodes_[n.parents[0]].value;
        if (wants(0)) {
          const int64_t total = x.shape().extent(1);
          accumulate(n.parents[0],
                     builder.pad_dim1(g, n.attrs.e0, total - n.attrs.e0 - n.attrs.e1));
        }
        break;
      }
      case Op::PadDim1: {
        const Tensor x = nodes_[n.parents[0]].value;
        if (wants(0))
          accumulate(n.parents[0], builder.slice_dim1(g, n.attrs.e0, x.shape().extent(1)));
        break;
      }
    }
  }

  std::vector<G> out;
  out.reserve(wrt.size());
  for (NodeId n : wrt) {
    const int32_t i = n.index;
    if (i <= ir && grads[static_cast<size_t>(i)].has_value()) {
      out.push_back(*grads[static_cast<size_t>(i)]);
    } else {
      out.push_back(builder.zeros(nodes_[static_cast<size_t>(i)].value.shape()));
    }
  }
  return out;
}

std::vector<NodeId> Tape::backward_nodes(NodeId root, std::span<const NodeId> wrt) {
  RecordBuilder builder(*this);
  return backward_impl(root, wrt, builder);
}

std::vector<Tensor> Tape::backward_tensors(NodeId root, std::span<const NodeId> wrt) {
  ValueBuilder builder(*this);
  return backward_impl(root, wrt, builder);
}

GradCheckReport grad_check(const std::function<NodeId(Tape&, NodeId)>& fn, const Tensor& x,
                           double tolerance, double fd_step, double kink_threshold) {
  GradCheckReport report;

  Tensor grad;
  try {
    Tape tape;
    const NodeId in = tape.leaf(x, true);
    const NodeId root = fn(tape, in);
    if (tape.value(root).numel() != 1)
      throw std::invalid_argument("grad_check: function must produce a scalar");
    const NodeId wrt[] = {in};
    grad = tape.backward_tensors(root, wrt)[0];
  } catch (const std::runtime_error&) {
    report.nonfinite = true;
    return report;
  }

  auto eval = [&fn](const Tensor& point) {
    Tape tape;
    const NodeId in = tape.leaf(point, false);
    return tape.value(fn(tape, in)).scalar_value();
  };

  std::vector<double> base(x.data(), x.data() + x.numel());
  double worst = 0.0;
  try {
    const double f0 = eval(x);
    for (int64_t i = 0; i < x.numel(); ++i) {
      std::vector<double> probe = base;
      probe[static_cast<size_t>(i)] = base[static_cast<size_t>(i)] + fd_step;
      const double fp = eval(Tensor::from(x.shape(), probe));
      probe[static_cast<size_t>(i)] = base[static_cast<size_t>(i)] - fd_step;
      const double fm = eval(Tensor::from(x.shape(), probe));

      const double fwd = (fp - f0) / fd_step;
      const double bwd = (f0 - fm) / fd_step;
      if (std::abs(fwd - bwd) >
          kink_threshold * std::max({1.0, std::abs(fwd), std::abs(bwd)})) {
        ++report.nonsmooth_excluded;
        continue;
      }
      const double central = (fp - fm) / (2.0 * fd_step);
      const double denom = std::max({1.0, std::abs(central), std::abs(grad[i])});
      worst = std::max(worst, std::abs(central - grad[i]) / denom);
      ++report.checked;
    }
  } catch (const std::runtime_error&) {
    report.nonfinite = true;
    return report;
  }

  report.max_rel_error = worst;
  report.pass = !report.nonfinite && worst <= tolerance;
  return report;
}

}  // namespace msgr
