// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "msgr/layers.hpp"
#include "msgr/rng.hpp"
#include "msgr/tensor.hpp"

namespace msgr {

// Native resolution of rendered figures; preprocessing rescales from here.
inline constexpr int64_t kRenderH = 80;
inline constexpr int64_t kRenderW = 40;

// A synthetic person: identity is carried by the color/pattern/accessory
// codes, so telling two identities apart can require anything from the
// dominant torso color down to a small bag patch.
struct SyntheticIdentitySpec {
  int64_t id = 0;
  std::array<double, 3> base_color{0.5, 0.5, 0.5};  // each in [0,1]
  int torso_pattern = 0;  // 0 plain, 1 hoops, 2 side panel
  int leg_pattern = 0;    // 0 plain, 1 center stripe, 2 shorts
  int accessory = 0;      // 0 none, 1 shoulder bag
  double aspect = 0.9;    // body width factor in [0.75, 1.0]
};

// One capture: camera color gains and the misalignment/occlusion/noise
// nuisances. Jitter bounds keep at least half the figure in frame.
struct RenderParams {
  int64_t camera = 0;
  double scale = 1.0;  // [0.9, 1.1]
  double dx = 0.0;     // horizontal shift, fraction of width, |dx| <= 0.08
  double dy = 0.0;     // vertical shift, fraction of height, |dy| <= 0.08
  bool occlude = false;
  double occ_x = 0.0, occ_y = 0.0, occ_w = 0.0, occ_h = 0.0;  // fractions, area <= 25%
  std::array<double, 3> camera_gain{1.0, 1.0, 1.0};
  double noise = 0.02;
  uint64_t noise_seed = 0;
};

// Draws `count` identity specs whose code tuples are pairwise distinct.
std::vector<SyntheticIdentitySpec> sample_identities(int64_t count, Rng& rng);

// Deterministic layered renderer, (3, kRenderH, kRenderW) in [0,1].
Tensor render_person(const SyntheticIdentitySpec& spec, const RenderParams& params);

struct ManifestRecord {
  std::string path;  // relative to the dataset directory
  int64_t identity = 0;
  int64_t camera = 0;
  std::string split;  // train | query | gallery
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  int64_t cameras = 0;
  uint64_t seed = 0;
};

struct DataGenConfig {
  int64_t num_ids = 8;
  int64_t images_per_id = 6;
  int64_t cameras = 2;
  uint64_t seed = 7;
};

// Renders the dataset under out_dir: exact tensors plus 8-bit pixmap copies
// in img/, a manifest.csv, and a meta file. Identities split 50/50 into
// train and query+gallery; per test identity one image per camera becomes a
// query as long as a cross-camera gallery image remains. Byte-identical for
// equal configs.
DatasetManifest generate(const DataGenConfig& config, const std::string& out_dir);

// Reads back manifest.csv from a dataset directory.
DatasetManifest load_manifest(const std::string& dir);

Tensor resize_bilinear(const Tensor& image, int64_t out_h, int64_t out_w);

// Train mode: resize to 9/8 of the target, random-crop to target, flip with
// probability one half, then channel normalization. Eval mode: resize to
// target and normalize; the rng is untouched. Targets must be multiples of
// 8; inputs at least 8x8.
Tensor preprocess(const Tensor& image, Mode mode, int64_t target_h, int64_t target_w, Rng& rng);

}  // namespace msgr
