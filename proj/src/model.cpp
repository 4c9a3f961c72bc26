// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include "msgr/model.hpp"

#include <sstream>
#include <stdexcept>

namespace msgr {

void MsflConfig::validate() const {
  std::ostringstream problems;
  auto complain = [&problems](const std::string& p) { problems << "  - " << p << "\n"; };

  if (input_h < 32 || input_w < 32 || input_h % 32 != 0 || input_w % 32 != 0)
    complain("input resolution must be a positive multiple of 32 in both axes");
  for (int i = 0; i < 4; ++i) {
    if (widths[static_cast<size_t>(i)] < 4 || widths[static_cast<size_t>(i)] % 4 != 0)
      complain("stage width " + std::to_string(i + 2) + " must be a positive multiple of 4");
    if (blocks[static_cast<size_t>(i)] < 1)
      complain("stage " + std::to_string(i + 2) + " needs at least one block");
  }
  if (lateral_width < 4 || lateral_width % 4 != 0)
    complain("lateral width must be a positive multiple of 4");
  if (embedding_dim < 1) complain("embedding dimension must be >= 1");
  if (num_classes < 1) complain("number of classes must be >= 1");
  if (msff && !csip) complain("msff requires csip (it refines the top-down maps)");
  if (last_stride1 && csip)
    complain("last_stride1 breaks the pyramid's 2x extent ladder; disable csip");

  const std::string all = problems.str();
  if (!all.empty()) throw std::invalid_argument("invalid model config:\n" + all);
}

MsflModel::MsflModel(const MsflConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  stem_conv_.emplace_back("stem.conv", 3, config_.widths[0], 3, 2, 1, false, rng);
  stem_bn_.emplace_back("stem.bn", config_.widths[0]);

  int64_t cin = config_.widths[0];
  for (int s = 0; s < 4; ++s) {
    const int64_t cout = config_.widths[static_cast<size_t>(s)];
    for (int b = 0; b < config_.blocks[static_cast<size_t>(s)]; ++b) {
      // First block of each stage halves the extents, giving strides
      // {4,8,16,32} after the stride-2 stem.
      int stride = b == 0 ? 2 : 1;
      if (s == 3 && b == 0 && config_.last_stride1) stride = 1;
      std::string name = "stage" + std::to_string(s + 2) + ".block" + std::to_string(b);
      stages_[static_cast<size_t>(s)].emplace_back(name, cin, cout, stride, rng);
      cin = cout;
    }
  }

  if (config_.csip) {
    for (int s = 0; s < 4; ++s) {
      const std::string k = std::to_string(s + 2);
      lateral_convs_.emplace_back("lateral" + k, config_.widths[static_cast<size_t>(s)],
                                  config_.lateral_width, 1, 1, 0, true, rng);
      smooth_convs_.emplace_back("smooth" + k, config_.lateral_width, config_.lateral_width, 3,
                                 1, 1, true, rng);
    }
    if (config_.msff) {
      const auto depths = msff_depths();
      for (int s = 0; s < 3; ++s)
        for (int b = 0; b < depths[static_cast<size_t>(s)]; ++b)
          refine_[static_cast<size_t>(s)].emplace_back(
              "refine" + std::to_string(s + 2) + ".block" + std::to_string(b),
              config_.lateral_width, config_.lateral_width, 1, rng);
    }
  }

  const int64_t fused = config_.csip ? 4 * config_.lateral_width : config_.widths[3];
  head_.emplace_back("head", fused, config_.embedding_dim, rng);
  classifier_.emplace_back("classifier", config_.embedding_dim, config_.num_classes, true, rng);
}

std::array<int, 3> MsflModel::msff_depths() const { return {3, 2, 1}; }

std::array<NodeId, 4> MsflModel::backbone_forward(Tape& t, NodeId x, Mode mode) {
  const Shape s = t.value(x).shape();
  if (s.rank() != 4 || s.extent(1) != 3 || s.extent(2) != config_.input_h ||
      s.extent(3) != config_.input_w)
    throw std::invalid_argument("backbone: image batch must be (N,3," +
                                std::to_string(config_.input_h) + "," +
                                std::to_string(config_.input_w) + "), got " + s.str());
  // The stem is computed but not part of the pyramid.
  NodeId h = t.relu(stem_bn_[0].forward(t, stem_conv_[0].forward(t, x), mode));
  std::array<NodeId, 4> c{};
  for (size_t s4 = 0; s4 < 4; ++s4) {
    for (auto& block : stages_[s4]) h = block.forward(t, h, mode);
    c[s4] = h;
  }
  return c;
}

std::array<NodeId, 4> MsflModel::csip_forward(Tape& t, const std::array<NodeId, 4>& c) {
  if (!config_.csip) throw std::invalid_argument("csip_forward: csip disabled in config");
  std::array<NodeId, 4> p{};
  p[3] = smooth_convs_[3].forward(t, lateral_convs_[3].forward(t, c[3]));
  for (int s = 2; s >= 0; --s) {
    const NodeId top = t.upsample2x(p[static_cast<size_t>(s) + 1]);
    // Lateral-off ablation: stages 2..4 receive only the top-down signal.
    const NodeId merged =
        config_.lateral
            ? t.add(lateral_convs_[static_cast<size_t>(s)].forward(t, c[static_cast<size_t>(s)]),
                    top)
            : top;
    p[static_cast<size_t>(s)] = smooth_convs_[static_cast<size_t>(s)].forward(t, merged);
  }
  return p;
}

std::array<NodeId, 3> MsflModel::msff_forward(Tape& t, const std::array<NodeId, 4>& p,
                                              Mode mode) {
  if (!config_.msff) throw std::invalid_argument("msff_forward: msff disabled in config");
  std::array<NodeId, 3> f{};
  for (size_t s = 0; s < 3; ++s) {
    NodeId h = p[s];
    for (auto& block : refine_[s]) h = block.forward(t, h, mode);
    f[s] = h;
  }
  return f;
}

std::pair<NodeId, NodeId> MsflModel::fuse_and_embed(Tape& t, std::span<const NodeId> maps,
                                                    Mode mode) {
  std::vector<NodeId> pooled;
  pooled.reserve(maps.size());
  for (NodeId m : maps) {
    const Shape s = t.value(m).shape();
    const double inv = 1.0 / static_cast<double>(s.extent(2) * s.extent(3));
    pooled.push_back(t.scale(t.spatial_sum(m), inv));
  }
  const NodeId fused = pooled.size() == 1 ? pooled[0] : t.concat_dim1(pooled);
  const NodeId embedding = head_[0].forward(t, fused, mode);
  const NodeId logits = classifier_[0].forward(t, embedding);
  return {embedding, logits};
}

ForwardResult MsflModel::forward(Tape& t, const Tensor& images, Mode mode) {
  ForwardResult r;
  r.input = t.leaf(images, true);
  r.features.c = backbone_forward(t, r.input, mode);
  std::vector<NodeId> maps;
  if (config_.csip) {
    r.features.p = csip_forward(t, r.features.c);
    r.features.has_p = true;
    if (config_.msff) {
      r.features.f = msff_forward(t, r.features.p, mode);
      r.features.has_f = true;
      maps = {r.features.f[0], r.features.f[1], r.features.f[2], r.features.p[3]};
    } else {
      maps = {r.features.p[0], r.features.p[1], r.features.p[2], r.features.p[3]};
    }
  } else {
    maps = {r.features.c[3]};
  }
  auto [embedding, logits] = fuse_and_embed(t, maps, mode);
  r.embedding = embedding;
  r.logits = logits;
  return r;
}

std::vector<Parameter*> MsflModel::parameters() {
  std::vector<Parameter*> out;
  stem_conv_[0].collect(out);
  stem_bn_[0].collect(out);
  for (auto& stage : stages_)
    for (auto& block : stage) block.collect(out);
  for (auto& conv : lateral_convs_) conv.collect(out);
  for (auto& conv : smooth_convs_) conv.collect(out);
  for (auto& stack : refine_)
    for (auto& block : stack) block.collect(out);
  head_[0].collect(out);
  classifier_[0].collect(out);
  return out;
}

std::vector<StateRef> MsflModel::state() {
  std::vector<StateRef> out;
  stem_bn_[0].collect_state(out);
  for (auto& stage : stages_)
    for (auto& block : stage) block.collect_state(out);
  for (auto& stack : refine_)
    for (auto& block : stack) block.collect_state(out);
  head_[0].collect_state(out);
  return out;
}

int64_t MsflModel::parameter_count() {
  int64_t n = 0;
  for (Parameter* p : parameters()) n += p->value.numel();
  return n;
}

}  // namespace msgr
