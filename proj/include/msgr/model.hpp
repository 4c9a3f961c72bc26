// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "msgr/layers.hpp"

namespace msgr {

// Network topology. Defaults are the desk-scale configuration; the
// full-scale counterpart (input 256x128, widths {256,512,1024,2048},
// lateral 512, embedding 512, blocks {3,4,6,3}) is expressible through the
// same fields.
struct MsflConfig {
  int64_t input_h = 64;
  int64_t input_w = 32;
  std::array<int64_t, 4> widths{16, 32, 64, 128};
  std::array<int, 4> blocks{1, 1, 1, 1};
  int64_t lateral_width = 32;
  int64_t embedding_dim = 64;
  int64_t num_classes = 8;
  bool csip = true;     // top-down pathway + laterals
  bool msff = true;     // bottleneck refinement stacks (requires csip)
  bool lateral = true;  // lateral connections at stages 2..4 (csip only)
  bool last_stride1 = false;  // stage-5 stride 1 (plain backbone comparisons only)

  void validate() const;  // throws std::invalid_argument with the full list of problems
};

// Stage-indexed handles from one forward pass. Index 0..3 maps to stages
// 2..5 for c/p; f covers stages 2..4 (stage 5 bypasses refinement).
struct PyramidFeatures {
  std::array<NodeId, 4> c{};
  std::array<NodeId, 4> p{};
  std::array<NodeId, 3> f{};
  bool has_p = false;
  bool has_f = false;
};

struct ForwardResult {
  NodeId input;
  NodeId embedding;
  NodeId logits;
  PyramidFeatures features;
};

// Backbone + top-down pyramid + refinement + fused embedding head. With
// csip and msff both off the forward pass reduces to backbone, pooled C5
// and the head, with no leftover machinery on the tape.
class MsflModel {
 public:
  MsflModel(const MsflConfig& config, Rng& rng);

  ForwardResult forward(Tape& t, const Tensor& images, Mode mode);

  // Composition pieces, exposed so tests and the consistency checks can cut
  // the pipeline at stage boundaries.
  std::array<NodeId, 4> backbone_forward(Tape& t, NodeId x, Mode mode);
  std::array<NodeId, 4> csip_forward(Tape& t, const std::array<NodeId, 4>& c);
  std::array<NodeId, 3> msff_forward(Tape& t, const std::array<NodeId, 4>& p, Mode mode);
  // Pools each input map, concatenates, and runs the head + classifier.
  std::pair<NodeId, NodeId> fuse_and_embed(Tape& t, std::span<const NodeId> maps, Mode mode);

  std::vector<Parameter*> parameters();
  std::vector<StateRef> state();
  const MsflConfig& config() const { return config_; }
  std::array<int, 3> msff_depths() const;
  int64_t parameter_count();

 private:
  MsflConfig config_;
  std::vector<ConvLayer> stem_conv_;
  std::vector<BatchNormLayer> stem_bn_;
  std::array<std::vector<BottleneckBlock>, 4> stages_;
  std::vector<ConvLayer> lateral_convs_;  // stages 2..5 when csip
  std::vector<ConvLayer> smooth_convs_;   // 3x3 after merge, stages 2..5
  std::array<std::vector<BottleneckBlock>, 3> refine_;
  std::vector<EmbeddingHead> head_;
  std::vector<LinearLayer> classifier_;
};

}  // namespace msgr
