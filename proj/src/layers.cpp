// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include "msgr/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace msgr {

namespace {

Tensor uniform_init(const Shape& shape, double bound, Rng& rng) {
  std::vector<double> data(static_cast<size_t>(shape.numel()));
  for (double& v : data) v = rng.uniform(-bound, bound);
  return Tensor::from(shape, std::move(data));
}

}  // namespace

ConvLayer::ConvLayer(std::string name, int64_t cin, int64_t cout, int k, int stride, int pad,
                     bool with_bias, Rng& rng)
    : with_bias_(with_bias), stride_(stride), pad_(pad) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
  kernel_ = {name + ".kernel", uniform_init(Shape({cout, cin, k, k}), bound, rng), Tensor()};
  if (with_bias_)
    bias_ = {name + ".bias", uniform_init(Shape({cout}), bound, rng), Tensor()};
}

NodeId ConvLayer::forward(Tape& t, NodeId x) {
  NodeId y = t.conv2d(x, t.param(kernel_), stride_, pad_);
  if (with_bias_) {
    const Shape s = t.value(y).shape();
    const NodeId b2 = t.batch_broadcast(t.param(bias_), s.extent(0));
    y = t.add(y, t.spatial_broadcast(b2, s.extent(2), s.extent(3)));
  }
  return y;
}

void ConvLayer::collect(std::vector<Parameter*>& params) {
  params.push_back(&kernel_);
  if (with_bias_) params.push_back(&bias_);
}

BatchNormLayer::BatchNormLayer(std::string name, int64_t channels, double eps, double momentum)
    : name_(std::move(name)), eps_(eps), momentum_(momentum) {
  gamma_ = {name_ + ".gamma", Tensor::full(Shape({channels}), 1.0), Tensor()};
  beta_ = {name_ + ".beta", Tensor::zeros(Shape({channels})), Tensor()};
  running_mean_ = Tensor::zeros(Shape({channels}));
  running_var_ = Tensor::full(Shape({channels}), 1.0);
}

NodeId BatchNormLayer::forward(Tape& t, NodeId x, Mode mode) {
  const Shape s = t.value(x).shape();
  if (s.rank() != 2 && s.rank() != 4)
    throw std::invalid_argument("batchnorm: input must be rank 2 or 4");
  const int64_t c = s.extent(1);
  if (c != gamma_.value.shape().extent(0))
    throw std::invalid_argument("batchnorm: channel extent does not match layer width");
  const bool spatial = s.rank() == 4;
  const int64_t n = s.extent(0);
  const int64_t cnt = spatial ? n * s.extent(2) * s.extent(3) : n;

  // Lift a per-channel vector to the input's shape.
  auto expand = [&](NodeId v) {
    NodeId b = t.batch_broadcast(v, n);
    return spatial ? t.spatial_broadcast(b, s.extent(2), s.extent(3)) : b;
  };
  auto channel_mean = [&](NodeId v) {
    return t.scale(t.batch_sum(spatial ? t.spatial_sum(v) : v), 1.0 / static_cast<double>(cnt));
  };

  NodeId mean, var;
  if (mode == Mode::Train) {
    mean = channel_mean(x);
    const NodeId centered = t.sub(x, expand(mean));
    var = channel_mean(t.mul(centered, centered));

    const Tensor mean_v = t.value(mean);
    const Tensor var_v = t.value(var);
    for (int64_t i = 0; i < c; ++i)
      if (var_v[i] < 1e-12) {
        ++low_variance_events_;
        break;
      }
    // Running stats live off the tape; the unbiased correction applies only
    // to the stored variance, matching the usual train/eval convention.
    const double unbias = cnt > 1 ? static_cast<double>(cnt) / static_cast<double>(cnt - 1) : 1.0;
    running_mean_ = add(map_scale(running_mean_, 1.0 - momentum_), map_scale(mean_v, momentum_));
    running_var_ =
        add(map_scale(running_var_, 1.0 - momentum_), map_scale(var_v, momentum_ * unbias));
  } else {
    mean = t.constant(running_mean_);
    var = t.constant(running_var_);
  }

  const NodeId rstd = t.pow_scalar(t.add(var, t.constant(Tensor::scalar(eps_))), -0.5);
  const NodeId normalized = t.mul(t.sub(x, expand(mean)), expand(rstd));
  return t.add(t.mul(normalized, expand(t.param(gamma_))), expand(t.param(beta_)));
}

void BatchNormLayer::collect(std::vector<Parameter*>& params) {
  params.push_back(&gamma_);
  params.push_back(&beta_);
}

void BatchNormLayer::collect_state(std::vector<StateRef>& state) {
  state.push_back({name_ + ".running_mean", &running_mean_});
  state.push_back({name_ + ".running_var", &running_var_});
}

BottleneckBlock::BottleneckBlock(std::string name, int64_t cin, int64_t cout, int stride,
                                 Rng& rng)
    : reduce_(name + ".reduce", cin, cout / 4, 1, 1, 0, false, rng),
      mid_(name + ".mid", cout / 4, cout / 4, 3, stride, 1, false, rng),
      expand_(name + ".expand", cout / 4, cout, 1, 1, 0, false, rng),
      bn1_(name + ".bn1", cout / 4),
      bn2_(name + ".bn2", cout / 4),
      bn3_(name + ".bn3", cout),
      projected_(stride != 1 || cin != cout) {
  if (cout % 4 != 0)
    throw std::invalid_argument("bottleneck: output channels must be divisible by 4");
  if (projected_) {
    proj_conv_.emplace_back(name + ".proj", cin, cout, 1, stride, 0, false, rng);
    proj_bn_.emplace_back(name + ".proj_bn", cout);
  }
}

NodeId BottleneckBlock::forward(Tape& t, NodeId x, Mode mode) {
  NodeId h = t.relu(bn1_.forward(t, reduce_.forward(t, x), mode));
  h = t.relu(bn2_.forward(t, mid_.forward(t, h), mode));
  h = bn3_.forward(t, expand_.forward(t, h), mode);
  NodeId skip = projected_ ? proj_bn_[0].forward(t, proj_conv_[0].forward(t, x), mode) : x;
  return t.relu(t.add(h, skip));
}

void BottleneckBlock::collect(std::vector<Parameter*>& params) {
  reduce_.collect(params);
  mid_.collect(params);
  expand_.collect(params);
  bn1_.collect(params);
  bn2_.collect(params);
  bn3_.collect(params);
  if (projected_) {
    proj_conv_[0].collect(params);
    proj_bn_[0].collect(params);
  }
}

void BottleneckBlock::collect_state(std::vector<StateRef>& state) {
  bn1_.collect_state(state);
  bn2_.collect_state(state);
  bn3_.collect_state(state);
  if (projected_) proj_bn_[0].collect_state(state);
}

LinearLayer::LinearLayer(std::string name, int64_t in, int64_t out, bool zero_bias, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight_ = {name + ".weight", uniform_init(Shape({out, in}), bound, rng), Tensor()};
  bias_ = {name + ".bias",
           zero_bias ? Tensor::zeros(Shape({out})) : uniform_init(Shape({out}), bound, rng),
           Tensor()};
}

NodeId LinearLayer::forward(Tape& t, NodeId x) {
  const NodeId y = t.matmul(x, t.transpose(t.param(weight_)));
  return t.add(y, t.batch_broadcast(t.param(bias_), t.value(x).shape().extent(0)));
}

void LinearLayer::collect(std::vector<Parameter*>& params) {
  params.push_back(&weight_);
  params.push_back(&bias_);
}

EmbeddingHead::EmbeddingHead(std::string name, int64_t in, int64_t dim, Rng& rng)
    : bn_(name + ".bn", in), fc_(name + ".fc", in, dim, false, rng), dim_(dim) {}

NodeId EmbeddingHead::forward(Tape& t, NodeId x, Mode mode) {
  return t.relu(fc_.forward(t, bn_.forward(t, x, mode)));
}

void EmbeddingHead::collect(std::vector<Parameter*>& params) {
  bn_.collect(params);
  fc_.collect(params);
}

void EmbeddingHead::collect_state(std::vector<StateRef>& state) { bn_.collect_state(state); }

}  // namespace msgr
