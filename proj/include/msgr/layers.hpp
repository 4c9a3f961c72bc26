// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msgr/autodiff.hpp"
#include "msgr/rng.hpp"
#include "msgr/tensor.hpp"

namespace msgr {

enum class Mode { Train, Eval };

// Non-trainable per-layer state (batchnorm running statistics) that still
// belongs in checkpoints.
struct StateRef {
  std::string name;
  Tensor* tensor;
};

class ConvLayer {
 public:
  // Weights drawn from U(-1/sqrt(fan_in), +1/sqrt(fan_in)), fan_in = cin*kh*kw.
  ConvLayer(std::string name, int64_t cin, int64_t cout, int k, int stride, int pad,
            bool with_bias, Rng& rng);

  NodeId forward(Tape& t, NodeId x);
  void collect(std::vector<Parameter*>& params);

  int64_t out_channels() const { return kernel_.value.shape().extent(0); }

 private:
  Parameter kernel_;
  Parameter bias_;
  bool with_bias_;
  int stride_, pad_;
};

class BatchNormLayer {
 public:
  // gamma = 1, beta = 0, running mean 0, running variance 1.
  BatchNormLayer(std::string name, int64_t channels, double eps = 1e-5,
                 double momentum = 0.1);

  // Rank 4 normalizes per channel over (N,H,W); rank 2 per feature over N.
  // Train mode uses batch statistics (gradients flow through them) and
  // updates running statistics out of band; eval mode uses running stats.
  NodeId forward(Tape& t, NodeId x, Mode mode);
  void collect(std::vector<Parameter*>& params);
  void collect_state(std::vector<StateRef>& state);

  const Tensor& running_mean() const { return running_mean_; }
  const Tensor& running_var() const { return running_var_; }
  // Count of train-mode calls that saw a channel with batch variance below
  // 1e-12 (epsilon still guards the division; this is a diagnostic).
  int64_t low_variance_events() const { return low_variance_events_; }

 private:
  Parameter gamma_;
  Parameter beta_;
  std::string name_;
  Tensor running_mean_;
  Tensor running_var_;
  double eps_;
  double momentum_;
  int64_t low_variance_events_ = 0;
};

// 1x1 reduce (out/4) -> 3x3 (stride here) -> 1x1 expand, batchnorm after
// each conv, ReLU between; projection conv+bn on the skip when the stride
// or channel count changes. Output = ReLU(main + skip).
class BottleneckBlock {
 public:
  BottleneckBlock(std::string name, int64_t cin, int64_t cout, int stride, Rng& rng);

  NodeId forward(Tape& t, NodeId x, Mode mode);
  void collect(std::vector<Parameter*>& params);
  void collect_state(std::vector<StateRef>& state);

 private:
  ConvLayer reduce_, mid_, expand_;
  BatchNormLayer bn1_, bn2_, bn3_;
  bool projected_;
  // Constructed only when projected_; vectors dodge the no-default-ctor issue.
  std::vector<ConvLayer> proj_conv_;
  std::vector<BatchNormLayer> proj_bn_;
};

class LinearLayer {
 public:
  LinearLayer(std::string name, int64_t in, int64_t out, bool zero_bias, Rng& rng);

  NodeId forward(Tape& t, NodeId x);
  void collect(std::vector<Parameter*>& params);

 private:
  Parameter weight_;
  Parameter bias_;
};

// BatchNorm -> Linear -> ReLU on pooled feature vectors.
class EmbeddingHead {
 public:
  EmbeddingHead(std::string name, int64_t in, int64_t dim, Rng& rng);

  NodeId forward(Tape& t, NodeId x, Mode mode);
  void collect(std::vector<Parameter*>& params);
  void collect_state(std::vector<StateRef>& state);

  int64_t dim() const { return dim_; }

 private:
  BatchNormLayer bn_;
  LinearLayer fc_;
  int64_t dim_;
};

}  // namespace msgr
