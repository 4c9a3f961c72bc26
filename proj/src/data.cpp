// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include "msgr/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "msgr/tensor_io.hpp"

namespace msgr {

namespace {

constexpr std::array<double, 3> kMean{0.485, 0.456, 0.406};
constexpr std::array<double, 3> kStd{0.229, 0.224, 0.225};

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

struct Canvas {
  std::vector<double> pix;  // (3, H, W)
  double& at(int64_t c, int64_t y, int64_t x) {
    return pix[static_cast<size_t>((c * kRenderH + y) * kRenderW + x)];
  }
  void fill_rect(double x0, double y0, double x1, double y1, const std::array<double, 3>& color) {
    const int64_t ys = std::max<int64_t>(0, static_cast<int64_t>(std::floor(y0)));
    const int64_t ye = std::min<int64_t>(kRenderH, static_cast<int64_t>(std::ceil(y1)));
    const int64_t xs = std::max<int64_t>(0, static_cast<int64_t>(std::floor(x0)));
    const int64_t xe = std::min<int64_t>(kRenderW, static_cast<int64_t>(std::ceil(x1)));
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = ys; y < ye; ++y)
        for (int64_t x = xs; x < xe; ++x) at(c, y, x) = color[static_cast<size_t>(c)];
  }
  void fill_ellipse(double cx, double cy, double rx, double ry,
                    const std::array<double, 3>& color) {
    for (int64_t y = 0; y < kRenderH; ++y)
      for (int64_t x = 0; x < kRenderW; ++x) {
        const double u = (static_cast<double>(x) - cx) / rx;
        const double v = (static_cast<double>(y) - cy) / ry;
        if (u * u + v * v <= 1.0)
          for (int64_t c = 0; c < 3; ++c) at(c, y, x) = color[static_cast<size_t>(c)];
      }
  }
};

std::array<double, 3> dim(const std::array<double, 3>& c, double f) {
  return {c[0] * f, c[1] * f, c[2] * f};
}

// Code tuple used for the pairwise-distinct guarantee: quantized color plus
// the discrete codes.
std::array<int, 6> identity_code(const SyntheticIdentitySpec& s) {
  return {static_cast<int>(s.base_color[0] * 12), static_cast<int>(s.base_color[1] * 12),
          static_cast<int>(s.base_color[2] * 12), s.torso_pattern, s.leg_pattern, s.accessory};
}

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

std::string image_name(int64_t index, const char* ext) {
  std::ostringstream os;
  os << "img/";
  os.width(6);
  os.fill('0');
  os << index << ext;
  return os.str();
}

}  // namespace

std::vector<SyntheticIdentitySpec> sample_identities(int64_t count, Rng& rng) {
  std::vector<SyntheticIdentitySpec> specs;
  std::set<std::array<int, 6>> seen;
  while (static_cast<int64_t>(specs.size()) < count) {
    SyntheticIdentitySpec s;
    s.id = static_cast<int64_t>(specs.size());
    for (double& c : s.base_color) c = rng.uniform(0.1, 0.95);
    s.torso_pattern = static_cast<int>(rng.uniform_int(0, 2));
    s.leg_pattern = static_cast<int>(rng.uniform_int(0, 2));
    s.accessory = static_cast<int>(rng.uniform_int(0, 1));
    s.aspect = rng.uniform(0.75, 1.0);
    if (seen.insert(identity_code(s)).second) specs.push_back(s);
  }
  return specs;
}

Tensor render_person(const SyntheticIdentitySpec& spec, const RenderParams& params) {
  Canvas canvas;
  canvas.pix.assign(static_cast<size_t>(3 * kRenderH * kRenderW), 0.0);

  // Background: camera-neutral gray with a soft vertical ramp.
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < kRenderH; ++y)
      for (int64_t x = 0; x < kRenderW; ++x)
        canvas.at(c, y, x) = 0.40 + 0.12 * static_cast<double>(y) / kRenderH;

  const double H = static_cast<double>(kRenderH);
  const double W = static_cast<double>(kRenderW);
  const double cx = W * (0.5 + params.dx);
  const double top = H * (0.06 + params.dy);
  const double hb = H * 0.88 * params.scale;  // body height in pixels
  const double half = 0.18 * hb * spec.aspect * (W / H);

  const std::array<double, 3> skin{0.82, 0.66, 0.52};
  const std::array<double, 3> torso = spec.base_color;
  const std::array<double, 3> legs{spec.base_color[1] * 0.8, spec.base_color[2] * 0.8,
                                   spec.base_color[0] * 0.8};
  const std::array<double, 3> shoes = dim({spec.base_color[2], spec.base_color[0],
                                           spec.base_color[1]},
                                          0.45);
  const std::array<double, 3> accent{clamp01(1.0 - spec.base_color[0]),
                                     clamp01(1.0 - spec.base_color[1]),
                                     clamp01(1.0 - spec.base_color[2])};

  // Head.
  canvas.fill_ellipse(cx, top + 0.085 * hb, 0.20 * half + 2.0, 0.085 * hb, skin);
  // Torso with its pattern.
  const double ty0 = top + 0.17 * hb, ty1 = top + 0.52 * hb;
  canvas.fill_rect(cx - half, ty0, cx + half, ty1, torso);
  if (spec.torso_pattern == 1) {
    const double band = (ty1 - ty0) / 5.0;
    for (int b = 1; b < 5; b += 2)
      canvas.fill_rect(cx - half, ty0 + b * band, cx + half, ty0 + (b + 1) * band,
                       dim(torso, 0.55));
  } else if (spec.torso_pattern == 2) {
    canvas.fill_rect(cx, ty0, cx + half, ty1, dim(torso, 0.7));
  }
  // Legs with their pattern; shorts expose skin below the knee.
  const double ly0 = ty1, ly1 = top + 0.92 * hb;
  const double lw = 0.42 * half;
  for (const double side : {-1.0, 1.0}) {
    const double lx = cx + side * 0.5 * half;
    canvas.fill_rect(lx - lw, ly0, lx + lw, ly1, legs);
    if (spec.leg_pattern == 1)
      canvas.fill_rect(lx - 0.3 * lw, ly0, lx + 0.3 * lw, ly1, dim(legs, 1.6));
    if (spec.leg_pattern == 2)
      canvas.fill_rect(lx - lw, ly0 + 0.45 * (ly1 - ly0), lx + lw, ly1, skin);
  }
  // Shoes.
  for (const double side : {-1.0, 1.0}) {
    const double lx = cx + side * 0.5 * half;
    canvas.fill_rect(lx - lw, ly1, lx + lw, top + 0.98 * hb, shoes);
  }
  // Accessory: a small high-contrast bag on the wearer's left.
  if (spec.accessory == 1)
    canvas.fill_rect(cx - 1.65 * half, top + 0.30 * hb, cx - 1.05 * half, top + 0.44 * hb,
                     accent);
  // Occlusion cuts whatever it covers.
  if (params.occlude)
    canvas.fill_rect(params.occ_x * W, params.occ_y * H, (params.occ_x + params.occ_w) * W,
                     (params.occ_y + params.occ_h) * H, {0.33, 0.33, 0.33});

  // Camera color gains, sensor noise, clamp.
  Rng noise(params.noise_seed);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < kRenderH; ++y)
      for (int64_t x = 0; x < kRenderW; ++x) {
        double v = canvas.at(c, y, x) * params.camera_gain[static_cast<size_t>(c)];
        v += noise.uniform(-params.noise, params.noise);
        canvas.at(c, y, x) = clamp01(v);
      }
  return Tensor::from(Shape({3, kRenderH, kRenderW}), std::move(canvas.pix));
}

DatasetManifest generate(const DataGenConfig& config, const std::string& out_dir) {
  require(config.num_ids >= 4, "generate: need at least 4 identities");
  require(config.cameras >= 2, "generate: need at least 2 cameras");
  require(config.images_per_id >= 2, "generate: need at least 2 images per identity");

  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "img", ec);
  if (ec) throw std::runtime_error("generate: cannot create " + out_dir + ": " + ec.message());

  Rng id_rng = Rng::stream(config.seed, {0x1d5});
  const auto specs = sample_identities(config.num_ids, id_rng);

  std::vector<std::array<double, 3>> gains;
  for (int64_t c = 0; c < config.cameras; ++c) {
    Rng g = Rng::stream(config.seed, {0xca3, static_cast<uint64_t>(c)});
    gains.push_back({g.uniform(0.88, 1.12), g.uniform(0.88, 1.12), g.uniform(0.88, 1.12)});
  }

  // Even identity split: shuffled order, first half trains.
  std::vector<int64_t> order(static_cast<size_t>(config.num_ids));
  for (int64_t i = 0; i < config.num_ids; ++i) order[static_cast<size_t>(i)] = i;
  Rng split_rng = Rng::stream(config.seed, {0x59717});
  split_rng.shuffle(order);
  std::vector<bool> is_train(static_cast<size_t>(config.num_ids), false);
  for (int64_t i = 0; i < config.num_ids / 2; ++i) is_train[static_cast<size_t>(order[static_cast<size_t>(i)])] = true;

  DatasetManifest manifest;
  manifest.cameras = config.cameras;
  manifest.seed = config.seed;

  for (int64_t i = 0; i < config.num_ids; ++i) {
    // Per-identity bookkeeping for the query/gallery assignment.
    std::vector<size_t> record_at;
    for (int64_t j = 0; j < config.images_per_id; ++j) {
      const int64_t g = i * config.images_per_id + j;
      Rng img_rng = Rng::stream(config.seed, {0x113, static_cast<uint64_t>(g)});
      RenderParams params;
      params.camera = j % config.cameras;
      params.scale = img_rng.uniform(0.9, 1.1);
      params.dx = img_rng.uniform(-0.08, 0.08);
      params.dy = img_rng.uniform(-0.08, 0.08);
      params.occlude = img_rng.uniform() < 0.25;
      if (params.occlude) {
        params.occ_w = img_rng.uniform(0.2, 0.5);
        params.occ_h = img_rng.uniform(0.2, 0.5);
        params.occ_x = img_rng.uniform(0.0, 1.0 - params.occ_w);
        params.occ_y = img_rng.uniform(0.0, 1.0 - params.occ_h);
      }
      params.camera_gain = gains[static_cast<size_t>(params.camera)];
      params.noise_seed = img_rng.next_u64();

      const Tensor img = render_person(specs[static_cast<size_t>(i)], params);
      const std::string bin = image_name(g, ".bin");
      save_tensor((fs::path(out_dir) / bin).string(), img);
      write_ppm((fs::path(out_dir) / image_name(g, ".ppm")).string(), img);

      record_at.push_back(manifest.records.size());
      manifest.records.push_back({bin, i, params.camera, is_train[static_cast<size_t>(i)]
                                                             ? std::string("train")
                                                             : std::string("gallery")});
    }

    if (!is_train[static_cast<size_t>(i)]) {
      // One query per camera, demoted from the back while any query would
      // lack a cross-camera gallery mate.
      Rng q_rng = Rng::stream(config.seed, {0x9e7, static_cast<uint64_t>(i)});
      std::map<int64_t, std::vector<size_t>> by_cam;
      for (const size_t r : record_at) by_cam[manifest.records[r].camera].push_back(r);
      std::vector<size_t> queries;
      for (auto& [cam, rs] : by_cam) {
        (void)cam;
        queries.push_back(rs[static_cast<size_t>(
            q_rng.uniform_int(0, static_cast<int64_t>(rs.size()) - 1))]);
      }
      for (const size_t q : queries) manifest.records[q].split = "query";
      auto cross_camera_ok = [&](size_t q) {
        for (const size_t r : record_at)
          if (manifest.records[r].split == "gallery" &&
              manifest.records[r].camera != manifest.records[q].camera)
            return true;
        return false;
      };
      while (!queries.empty() && !cross_camera_ok(queries.front())) {
        manifest.records[queries.back()].split = "gallery";
        queries.pop_back();
      }
      for (const size_t q : queries)
        if (!cross_camera_ok(q)) manifest.records[q].split = "gallery";
    }
  }

  std::ofstream mf(fs::path(out_dir) / "manifest.csv");
  if (!mf) throw std::runtime_error("generate: cannot write manifest in " + out_dir);
  mf << "path,identity,camera,split\n";
  for (const ManifestRecord& r : manifest.records)
    mf << r.path << "," << r.identity << "," << r.camera << "," << r.split << "\n";
  mf.close();

  std::ofstream meta(fs::path(out_dir) / "meta");
  meta << "generator msgr-synth 1\n";
  meta << "seed " << config.seed << "\n";
  meta << "num_ids " << config.num_ids << "\n";
  meta << "images_per_id " << config.images_per_id << "\n";
  meta << "cameras " << config.cameras << "\n";
  return manifest;
}

DatasetManifest load_manifest(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.csv");
  if (!in) throw std::runtime_error("load_manifest: cannot open manifest.csv in " + dir);
  std::string line;
  if (!std::getline(in, line) || line != "path,identity,camera,split")
    throw std::runtime_error("load_manifest: bad header in " + dir);

  DatasetManifest m;
  int64_t max_cam = -1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    ManifestRecord r;
    std::string identity, camera;
    if (!std::getline(row, r.path, ',') || !std::getline(row, identity, ',') ||
        !std::getline(row, camera, ',') || !std::getline(row, r.split))
      throw std::runtime_error("load_manifest: malformed row: " + line);
    r.identity = std::stoll(identity);
    r.camera = std::stoll(camera);
    if (r.split != "train" && r.split != "query" && r.split != "gallery")
      throw std::runtime_error("load_manifest: unknown split: " + r.split);
    max_cam = std::max(max_cam, r.camera);
    m.records.push_back(std::move(r));
  }
  m.cameras = max_cam + 1;
  return m;
}

Tensor resize_bilinear(const Tensor& image, int64_t out_h, int64_t out_w) {
  const Shape& s = image.shape();
  require(s.rank() == 3, "resize_bilinear: image must be (C,H,W)");
  require(out_h >= 1 && out_w >= 1, "resize_bilinear: bad output extents");
  const int64_t ch = s.extent(0), in_h = s.extent(1), in_w = s.extent(2);

  std::vector<double> out(static_cast<size_t>(ch * out_h * out_w));
  const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
  auto src = [&](int64_t c, int64_t y, int64_t x) {
    return image[(c * in_h + y) * in_w + x];
  };
  for (int64_t c = 0; c < ch; ++c)
    for (int64_t y = 0; y < out_h; ++y) {
      double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
      fy = std::min(std::max(fy, 0.0), static_cast<double>(in_h - 1));
      const int64_t y0 = static_cast<int64_t>(fy);
      const int64_t y1 = std::min(y0 + 1, in_h - 1);
      const double wy = fy - static_cast<double>(y0);
      for (int64_t x = 0; x < out_w; ++x) {
        double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
        fx = std::min(std::max(fx, 0.0), static_cast<double>(in_w - 1));
        const int64_t x0 = static_cast<int64_t>(fx);
        const int64_t x1 = std::min(x0 + 1, in_w - 1);
        const double wx = fx - static_cast<double>(x0);
        // Lerp form: exact for constant neighborhoods.
        const double top = src(c, y0, x0) + wx * (src(c, y0, x1) - src(c, y0, x0));
        const double bot = src(c, y1, x0) + wx * (src(c, y1, x1) - src(c, y1, x0));
        out[static_cast<size_t>((c * out_h + y) * out_w + x)] = top + wy * (bot - top);
      }
    }
  Tensor result = Tensor::from(Shape({ch, out_h, out_w}), std::move(out));
  ensure_finite(result, "resize_bilinear");
  return result;
}

Tensor preprocess(const Tensor& image, Mode mode, int64_t target_h, int64_t target_w, Rng& rng) {
  const Shape& s = image.shape();
  require(s.rank() == 3 && s.extent(0) == 3, "preprocess: image must be (3,H,W)");
  require(s.extent(1) >= 8 && s.extent(2) >= 8, "preprocess: image smaller than 8x8");
  require(target_h >= 8 && target_w >= 8 && target_h % 8 == 0 && target_w % 8 == 0,
          "preprocess: targets must be multiples of 8 and at least 8");

  Tensor work;
  bool flip = false;
  int64_t oy = 0, ox = 0;
  if (mode == Mode::Train) {
    const int64_t rh = target_h * 9 / 8, rw = target_w * 9 / 8;
    work = resize_bilinear(image, rh, rw);
    oy = rng.uniform_int(0, rh - target_h);
    ox = rng.uniform_int(0, rw - target_w);
    flip = rng.bernoulli(0.5);
  } else {
    work = resize_bilinear(image, target_h, target_w);
  }

  const int64_t wh = work.shape().extent(1), ww = work.shape().extent(2);
  std::vector<double> out(static_cast<size_t>(3 * target_h * target_w));
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < target_h; ++y)
      for (int64_t x = 0; x < target_w; ++x) {
        const int64_t sx = flip ? ox + (target_w - 1 - x) : ox + x;
        const double v = work[(c * wh + (oy + y)) * ww + sx];
        out[static_cast<size_t>((c * target_h + y) * target_w + x)] =
            (v - kMean[static_cast<size_t>(c)]) / kStd[static_cast<size_t>(c)];
      }
  Tensor result = Tensor::from(Shape({3, target_h, target_w}), std::move(out));
  ensure_finite(result, "preprocess");
  return result;
}

}  // namespace msgr
