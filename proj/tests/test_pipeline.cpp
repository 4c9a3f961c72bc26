// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include "msgr/pipeline.hpp"

#include <filesystem>
#include <string>

#include "doctest.h"
#include "msgr/rng.hpp"

using namespace msgr;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("pipeline");

namespace {

struct Workbench {
  std::string data_dir;
  std::string run_dir;
  std::string checkpoint;
};

// One trained tiny run, shared across cases (training twice would only
// slow the suite; every case below is read-only on the artifacts).
const Workbench& workbench() {
  static const Workbench bench = [] {
    Workbench b;
    const fs::path root = fs::temp_directory_path() / "msgr_test_pipeline";
    fs::remove_all(root);
    fs::create_directories(root);
    b.data_dir = (root / "data").string();
    b.run_dir = (root / "run").string();
    fs::create_directories(b.run_dir);

    DataGenConfig data;
    data.num_ids = 8;
    data.images_per_id = 4;
    data.cameras = 2;
    data.seed = 7;
    generate(data, b.data_dir);

    ExperimentConfig cfg;
    cfg.model.input_h = 32;
    cfg.model.input_w = 32;
    cfg.model.widths = {4, 4, 4, 4};
    cfg.model.lateral_width = 4;
    cfg.model.embedding_dim = 4;
    cfg.model.num_classes = 4;  // half the identities train
    cfg.reg.mode = RegularizerMode::Off;
    cfg.batch.p = 2;
    cfg.batch.k = 2;
    cfg.schedule.base_lr = 1e-3;
    cfg.schedule.decay_epochs = {};
    cfg.schedule.total_epochs = 2;
    cfg.data_path = b.data_dir;
    cfg.out_dir = b.run_dir;

    TrainOptions options;
    options.model = cfg.model;
    options.reg = cfg.reg;
    options.batch = cfg.batch;
    options.schedule = cfg.schedule;
    options.data_dir = b.data_dir;
    options.out_dir = b.run_dir;
    options.config_text = cfg.render();
    options.seed = 11;
    const TrainResult result = train(options);
    b.checkpoint = result.last_checkpoint;
    return b;
  }();
  return bench;
}

}  // namespace

TEST_CASE("a reloaded checkpoint reproduces the trained model") {
  const Workbench& b = workbench();
  REQUIRE(fs::exists(b.checkpoint));
  const LoadedCheckpoint loaded = load_trained_model(b.checkpoint);
  CHECK(loaded.config.model.embedding_dim == 4);
  CHECK(loaded.checkpoint.seed == 11);
  CHECK(loaded.checkpoint.epoch == 2);
  // The embedded echo round-trips.
  CHECK(loaded.config.render() == loaded.checkpoint.config_text);
}

TEST_CASE("ranking a dataset is deterministic across model reloads") {
  const Workbench& b = workbench();
  LoadedCheckpoint first = load_trained_model(b.checkpoint);
  LoadedCheckpoint second = load_trained_model(b.checkpoint);
  const DatasetMetrics m1 = rank_dataset(*first.model, b.data_dir);
  const DatasetMetrics m2 = rank_dataset(*second.model, b.data_dir);
  REQUIRE(m1.ranking.cmc.size() == m2.ranking.cmc.size());
  CHECK(m1.ranking.map == m2.ranking.map);
  for (size_t i = 0; i < m1.ranking.cmc.size(); ++i) CHECK(m1.ranking.cmc[i] == m2.ranking.cmc[i]);
  CHECK(m1.num_query > 0);
  CHECK(m1.num_gallery > 0);
  CHECK(m1.rank_at(1) >= 0.0);
  CHECK(m1.rank_at(1) <= 1.0);
  // Clamped lookups never read past the computed depth.
  CHECK(m1.rank_at(10000) == m1.ranking.cmc.back());
}

TEST_CASE("embedding batching is a memory knob, not a result knob") {
  const Workbench& b = workbench();
  LoadedCheckpoint loaded = load_trained_model(b.checkpoint);
  const DatasetManifest manifest = load_manifest(b.data_dir);
  const SplitEmbeddings one = embed_split(*loaded.model, manifest, b.data_dir, "query", 1);
  const SplitEmbeddings big = embed_split(*loaded.model, manifest, b.data_dir, "query", 64);
  REQUIRE(one.embeddings.numel() == big.embeddings.numel());
  CHECK(one.embeddings.same_bits(big.embeddings));
}

TEST_CASE("an unknown split and a mismatched model are rejected") {
  const Workbench& b = workbench();
  LoadedCheckpoint loaded = load_trained_model(b.checkpoint);
  const DatasetManifest manifest = load_manifest(b.data_dir);
  CHECK_THROWS_WITH_AS(embed_split(*loaded.model, manifest, b.data_dir, "probe"),
                       doctest::Contains("no records in split"), std::invalid_argument);

  MsflConfig other = loaded.config.model;
  other.embedding_dim = 8;  // head shapes now disagree with the checkpoint
  Rng rng(1);
  MsflModel wrong(other, rng);
  CHECK_THROWS_WITH_AS(restore_model_tensors(wrong, loaded.checkpoint),
                       doctest::Contains("incompatible"), std::runtime_error);
}

TEST_SUITE_END();
