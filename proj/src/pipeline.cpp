// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include "msgr/pipeline.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <map>
#include <stdexcept>

#include "msgr/rng.hpp"
#include "msgr/tensor_io.hpp"

namespace fs = std::filesystem;

namespace msgr {

void restore_model_tensors(MsflModel& model, const Checkpoint& ckpt) {
  std::map<std::string, const Tensor*> saved;
  for (const auto& [name, tensor] : ckpt.params) saved[name] = &tensor;
  for (Parameter* p : model.parameters()) {
    const auto it = saved.find(p->name);
    if (it == saved.end() || !(it->second->shape() == p->value.shape()))
      throw std::runtime_error("checkpoint incompatible with model at " + p->name);
    p->value = *it->second;
  }
  std::map<std::string, const Tensor*> saved_state;
  for (const auto& [name, tensor] : ckpt.state) saved_state[name] = &tensor;
  for (const StateRef& s : model.state()) {
    const auto it = saved_state.find(s.name);
    if (it == saved_state.end() || !(it->second->shape() == s.tensor->shape()))
      throw std::runtime_error("checkpoint incompatible with model at " + s.name);
    *s.tensor = *it->second;
  }
}

LoadedCheckpoint load_trained_model(const std::string& checkpoint_path) {
  LoadedCheckpoint loaded;
  loaded.checkpoint = load_checkpoint(checkpoint_path);
  try {
    loaded.config = ExperimentConfig::parse_text(loaded.checkpoint.config_text);
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error("checkpoint " + checkpoint_path +
                             " does not embed a parsable configuration: " + e.what());
  }
  // The initializer draws are overwritten immediately; any seed works.
  Rng rng(loaded.checkpoint.seed);
  loaded.model = std::make_unique<MsflModel>(loaded.config.model, rng);
  restore_model_tensors(*loaded.model, loaded.checkpoint);
  return loaded;
}

SplitEmbeddings embed_split(MsflModel& model, const DatasetManifest& manifest,
                            const std::string& data_dir, const std::string& split,
                            int64_t batch_size) {
  if (batch_size < 1) throw std::invalid_argument("embed_split: batch_size must be positive");
  SplitEmbeddings out;
  for (const ManifestRecord& rec : manifest.records) {
    if (rec.split != split) continue;
    out.meta.push_back({rec.identity, rec.camera});
    out.paths.push_back(rec.path);
  }
  if (out.paths.empty())
    throw std::invalid_argument("embed_split: no records in split '" + split + "'");

  const int64_t n = static_cast<int64_t>(out.paths.size());
  const int64_t h = model.config().input_h;
  const int64_t w = model.config().input_w;
  const int64_t dim = model.config().embedding_dim;
  std::vector<double> emb(static_cast<size_t>(n * dim));
  Rng unused(0);  // eval-mode preprocessing never touches it

  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t count = std::min(batch_size, n - start);
    std::vector<double> batch(static_cast<size_t>(count * 3 * h * w));
    for (int64_t i = 0; i < count; ++i) {
      const fs::path path = fs::path(data_dir) / out.paths[static_cast<size_t>(start + i)];
      const Tensor image = load_tensor(path.string());
      const Tensor ready = preprocess(image, Mode::Eval, h, w, unused);
      std::memcpy(batch.data() + i * 3 * h * w, ready.data(),
                  static_cast<size_t>(3 * h * w) * sizeof(double));
    }
    Tape t;
    const ForwardResult fwd =
        model.forward(t, Tensor::from(Shape({count, 3, h, w}), std::move(batch)), Mode::Eval);
    const Tensor rows = t.value(fwd.embedding);
    std::memcpy(emb.data() + start * dim, rows.data(),
                static_cast<size_t>(count * dim) * sizeof(double));
  }
  out.embeddings = Tensor::from(Shape({n, dim}), std::move(emb));
  return out;
}

double DatasetMetrics::rank_at(int64_t k) const {
  if (ranking.cmc.empty()) return 0.0;
  const size_t idx =
      static_cast<size_t>(std::clamp<int64_t>(k, 1, static_cast<int64_t>(ranking.cmc.size())) - 1);
  return ranking.cmc[idx];
}

DatasetMetrics rank_dataset(MsflModel& model, const std::string& data_dir, int64_t max_rank) {
  const DatasetManifest manifest = load_manifest(data_dir);
  const SplitEmbeddings query = embed_split(model, manifest, data_dir, "query");
  const SplitEmbeddings gallery = embed_split(model, manifest, data_dir, "gallery");

  const DistanceMatrix dist = distance_matrix(query.embeddings, gallery.embeddings);
  DatasetMetrics metrics;
  metrics.num_query = static_cast<int64_t>(query.meta.size());
  metrics.num_gallery = static_cast<int64_t>(gallery.meta.size());
  metrics.zero_norm_embeddings = dist.zero_norm;
  metrics.ranking =
      evaluate(dist.dist, query.meta, gallery.meta, std::min(max_rank, metrics.num_gallery));
  return metrics;
}

}  // namespace msgr
