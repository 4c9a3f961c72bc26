// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Exit codes: 0 success, 1 invalid arguments or
// configuration, 2 runtime failure, 3 a verification sweep found a violation.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "msgr/checks.hpp"
#include "msgr/config.hpp"
#include "msgr/data.hpp"
#include "msgr/eval.hpp"
#include "msgr/pipeline.hpp"
#include "msgr/report.hpp"
#include "msgr/tensor_io.hpp"
#include "msgr/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

using namespace msgr;

// A verification command found a real violation; maps to exit code 3.
struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string hex32(uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08x", v);
  return buf;
}

uint32_t config_fingerprint(const ExperimentConfig& cfg) {
  const std::string text = cfg.render();
  return crc32(text.data(), text.size());
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

// ---------------------------------------------------------------------------
// generate-data

struct GenOptions {
  int64_t ids = 8;
  int64_t per_id = 6;
  int64_t cameras = 2;
  uint64_t seed = 7;
  std::string out;
  bool force = false;
};

int run_generate(const GenOptions& opt) {
  if (fs::exists(opt.out) && !fs::is_empty(opt.out) && !opt.force)
    throw std::invalid_argument("output directory " + opt.out +
                                " exists and is not empty (use --force to write anyway)");
  DataGenConfig config;
  config.num_ids = opt.ids;
  config.images_per_id = opt.per_id;
  config.cameras = opt.cameras;
  config.seed = opt.seed;
  const DatasetManifest manifest = generate(config, opt.out);

  std::map<std::string, int64_t> split_counts;
  std::set<int64_t> train_ids, test_ids;
  for (const ManifestRecord& r : manifest.records) {
    ++split_counts[r.split];
    (r.split == "train" ? train_ids : test_ids).insert(r.identity);
  }
  std::printf("dataset written to %s\n", opt.out.c_str());
  std::printf("  identities %lld (train %zu / test %zu), cameras %lld, seed %llu\n",
              static_cast<long long>(opt.ids), train_ids.size(), test_ids.size(),
              static_cast<long long>(manifest.cameras),
              static_cast<unsigned long long>(manifest.seed));
  std::printf("  records: train %lld, query %lld, gallery %lld\n",
              static_cast<long long>(split_counts["train"]),
              static_cast<long long>(split_counts["query"]),
              static_cast<long long>(split_counts["gallery"]));
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainCliOptions {
  std::string config_path;
  std::vector<std::string> sets;
  std::string resume;
};

// Rebuilds the loss/accuracy charts from the run's line-delimited log. On a
// resumed run the log may carry an epoch twice; the later entry wins.
void write_training_charts(const std::string& log_path, const std::string& out_dir) {
  std::ifstream in(log_path);
  if (!in) return;
  std::map<int64_t, double> loss, accuracy, penalty_mean;
  std::map<int64_t, std::pair<double, int64_t>> penalty_acc;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json row;
    try {
      row = json::parse(line);
    } catch (const json::exception&) {
      continue;  // torn trailing line from an aborted run
    }
    if (!row.contains("epoch")) continue;
    const int64_t epoch = row["epoch"].get<int64_t>();
    if (row.contains("train_accuracy")) {
      accuracy[epoch] = row["train_accuracy"].get<double>();
      loss[epoch] = row["mean_base_loss"].get<double>();
    } else if (row.contains("penalty")) {
      auto& [sum, count] = penalty_acc[epoch];
      sum += row["penalty"].get<double>();
      ++count;
    }
  }
  for (const auto& [epoch, acc] : penalty_acc)
    penalty_mean[epoch] = acc.first / static_cast<double>(acc.second);

  auto to_series = [](const std::string& label, const std::map<int64_t, double>& m) {
    Series s;
    s.label = label;
    for (const auto& [epoch, v] : m) {
      s.x.push_back(static_cast<double>(epoch + 1));
      s.y.push_back(v);
    }
    return s;
  };
  std::vector<Series> loss_series{to_series("mean base loss", loss)};
  bool any_penalty = false;
  for (const auto& [epoch, v] : penalty_mean) any_penalty = any_penalty || v != 0.0;
  if (any_penalty) loss_series.push_back(to_series("mean penalty", penalty_mean));
  write_svg_line_chart((fs::path(out_dir) / "train_loss.svg").string(), "training loss", "epoch",
                       "loss", loss_series);
  const std::vector<Series> acc_series{to_series("train accuracy", accuracy)};
  write_svg_line_chart((fs::path(out_dir) / "train_accuracy.svg").string(), "training accuracy",
                       "epoch", "accuracy", acc_series);
}

int run_train(const TrainCliOptions& opt) {
  ExperimentConfig cfg = ExperimentConfig::parse_file(opt.config_path);
  cfg.apply_overrides(opt.sets);
  cfg.validate();

  fs::create_directories(cfg.out_dir);
  const std::string resolved = cfg.render();
  write_text_file((fs::path(cfg.out_dir) / "config.txt").string(), resolved);
  std::printf("resolved configuration (echoed to %s/config.txt):\n%s\n", cfg.out_dir.c_str(),
              resolved.c_str());

  TrainOptions options;
  options.model = cfg.model;
  options.reg = cfg.reg;
  options.batch = cfg.batch;
  options.triplet_enabled = cfg.triplet_enabled;
  options.triplet_margin = cfg.triplet_margin;
  options.schedule = cfg.scaled_schedule();
  options.data_dir = cfg.data_path;
  options.out_dir = cfg.out_dir;
  options.config_text = resolved;
  options.seed = cfg.seed;
  options.checkpoint_every = cfg.checkpoint_every;
  options.dump_eps = cfg.dump_eps;
  options.resume = opt.resume;

  const TrainResult result = train(options);
  write_training_charts(result.log_path, cfg.out_dir);

  std::printf("trained %lld epoch(s): train accuracy %.4f, mean base loss %.6f\n",
              static_cast<long long>(result.epochs_run), result.final_train_accuracy,
              result.final_base_loss);
  std::printf("last checkpoint: %s\n", result.last_checkpoint.c_str());
  std::printf("log: %s\n", result.log_path.c_str());
  std::printf("charts: %s/train_loss.svg %s/train_accuracy.svg\n", cfg.out_dir.c_str(),
              cfg.out_dir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string checkpoint;
  std::string data;  // empty = the path embedded in the checkpoint's config
  std::string out;
  std::vector<std::string> viz;
  int64_t max_rank = 20;
};

void write_activation_maps(MsflModel& model, const MsflConfig& config,
                           const std::string& image_path, const std::string& out_dir) {
  const Tensor image = load_tensor(image_path);
  Rng unused(0);
  const Tensor ready = preprocess(image, Mode::Eval, config.input_h, config.input_w, unused);
  std::vector<double> buf(ready.span().begin(), ready.span().end());
  const Tensor batch =
      Tensor::from(Shape({1, 3, config.input_h, config.input_w}), std::move(buf));

  Tape t;
  const ForwardResult fwd = model.forward(t, batch, Mode::Eval);
  std::vector<std::pair<std::string, NodeId>> stages{{"c2", fwd.features.c[0]},
                                                     {"c5", fwd.features.c[3]}};
  if (fwd.features.has_p) {
    stages.emplace_back("p2", fwd.features.p[0]);
    stages.emplace_back("p5", fwd.features.p[3]);
  }
  if (fwd.features.has_f) stages.emplace_back("f2", fwd.features.f[0]);

  const std::string stem = fs::path(image_path).stem().string();
  for (const auto& [name, node] : stages) {
    const ActivationMaps maps = activation_map(t.value(node));
    const Shape& s = maps.maps.shape();
    const std::vector<double> plane(maps.maps.span().begin(), maps.maps.span().end());
    const Tensor hw = Tensor::from(Shape({s.extent(1), s.extent(2)}), plane);
    const std::string path = (fs::path(out_dir) / (stem + "_" + name + ".pgm")).string();
    export_map(hw, path);
    std::printf("  wrote %s\n", path.c_str());
  }
  if (!fwd.features.has_p) std::printf("  (pyramid maps unavailable: top-down pathway is off)\n");
  if (!fwd.features.has_f) std::printf("  (refined maps unavailable: refinement is off)\n");
}

int run_eval(const EvalOptions& opt) {
  LoadedCheckpoint loaded = load_trained_model(opt.checkpoint);
  const std::string data_dir = opt.data.empty() ? loaded.config.data_path : opt.data;

  fs::create_directories(opt.out);
  const DatasetMetrics metrics = rank_dataset(*loaded.model, data_dir, opt.max_rank);

  std::vector<std::vector<std::string>> rows{
      {"metric", "value"},
      {"rank1", fmt17(metrics.rank_at(1))},
      {"rank5", fmt17(metrics.rank_at(5))},
      {"rank10", fmt17(metrics.rank_at(10))},
      {"mAP", fmt17(metrics.ranking.map)},
      {"queries", std::to_string(metrics.num_query)},
      {"gallery", std::to_string(metrics.num_gallery)},
      {"skipped_queries", std::to_string(metrics.ranking.skipped_queries)},
      {"zero_norm_embeddings", std::to_string(metrics.zero_norm_embeddings)},
  };
  write_csv((fs::path(opt.out) / "metrics.csv").string(), rows);

  json summary;
  summary["rank1"] = metrics.rank_at(1);
  summary["rank5"] = metrics.rank_at(5);
  summary["rank10"] = metrics.rank_at(10);
  summary["mAP"] = metrics.ranking.map;
  summary["num_query"] = metrics.num_query;
  summary["num_gallery"] = metrics.num_gallery;
  summary["skipped_queries"] = metrics.ranking.skipped_queries;
  summary["zero_norm_embeddings"] = metrics.zero_norm_embeddings;
  summary["checkpoint_epoch"] = loaded.checkpoint.epoch;
  write_text_file((fs::path(opt.out) / "summary.json").string(), summary.dump(2) + "\n");

  std::vector<std::vector<std::string>> cmc_rows{{"rank", "cmc"}};
  Series cmc_series;
  cmc_series.label = "CMC";
  for (size_t k = 0; k < metrics.ranking.cmc.size(); ++k) {
    cmc_rows.push_back({std::to_string(k + 1), fmt17(metrics.ranking.cmc[k])});
    cmc_series.x.push_back(static_cast<double>(k + 1));
    cmc_series.y.push_back(metrics.ranking.cmc[k]);
  }
  write_csv((fs::path(opt.out) / "cmc.csv").string(), cmc_rows);
  const std::vector<Series> chart{cmc_series};
  write_svg_line_chart((fs::path(opt.out) / "cmc.svg").string(), "cumulative match curve", "rank",
                       "match rate", chart);

  std::printf("evaluated %s on %s\n", opt.checkpoint.c_str(), data_dir.c_str());
  std::printf("  rank1 %.4f  rank5 %.4f  rank10 %.4f  mAP %.4f\n", metrics.rank_at(1),
              metrics.rank_at(5), metrics.rank_at(10), metrics.ranking.map);
  std::printf("  queries %lld, gallery %lld, skipped %lld, zero-norm embeddings %lld\n",
              static_cast<long long>(metrics.num_query),
              static_cast<long long>(metrics.num_gallery),
              static_cast<long long>(metrics.ranking.skipped_queries),
              static_cast<long long>(metrics.zero_norm_embeddings));
  std::printf("  wrote %s/{metrics.csv,summary.json,cmc.csv,cmc.svg}\n", opt.out.c_str());

  if (!opt.viz.empty()) std::printf("activation maps:\n");
  for (const std::string& image : opt.viz)
    write_activation_maps(*loaded.model, loaded.config.model, image, opt.out);
  return 0;
}

// ---------------------------------------------------------------------------
// grad-check

struct GradCheckOptions {
  std::string scope = "all";
  uint64_t seed = 17;
  int64_t stride = 17;
};

int run_grad_check(const GradCheckOptions& opt) {
  int failures = 0;
  int checks = 0;
  auto verdict = [&](bool ok) {
    ++checks;
    if (!ok) ++failures;
    return ok ? "PASS" : "FAIL";
  };

  if (opt.scope == "layers" || opt.scope == "all") {
    std::printf("layer gradient checks (seed %llu):\n",
                static_cast<unsigned long long>(opt.seed));
    for (const NamedGradCheck& c : layer_gradient_checks(opt.seed)) {
      const bool ok = c.report.pass && !c.report.nonfinite && c.report.checked > 0;
      std::printf("  %-22s max_rel %9.3e  tol %7.1e  coords %4lld  %s\n", c.name.c_str(),
                  c.report.max_rel_error, c.tolerance, static_cast<long long>(c.report.checked),
                  verdict(ok));
    }
  }
  if (opt.scope == "msgr" || opt.scope == "all") {
    std::printf("penalty gradient checks:\n");
    const double quad = quadratic_double_backward_max_abs_err(129);
    std::printf("  %-22s max_abs %9.3e  tol %7.1e  %s\n", "quadratic_exact", quad, 0.0,
                verdict(quad == 0.0));
    const PenaltyFdReport fd = penalty_parameter_fd(opt.seed, opt.stride);
    std::printf("  %-22s max_rel %9.3e  tol %7.1e  coords %4lld  %s  (%.1fs)\n",
                "penalty_parameter_fd", fd.max_rel_error, 1e-4,
                static_cast<long long>(fd.coords_checked), verdict(fd.max_rel_error <= 1e-4),
                fd.seconds);
  }
  if (opt.scope == "chain" || opt.scope == "all") {
    std::printf("stagewise composition check:\n");
    const ChainCheckRun run = msfl_chain_check(opt.seed);
    for (size_t i = 0; i < run.report.stage_names.size(); ++i)
      std::printf("  boundary into %-12s rel err %9.3e\n", run.report.stage_names[i].c_str(),
                  run.report.stage_errors[i]);
    std::printf("  input gradient norm %.3e (salt %llu)\n", run.input_grad_norm,
                static_cast<unsigned long long>(run.salt_used));
    std::printf("  %-22s max_rel %9.3e  tol %7.1e  %s\n", "composed_vs_direct",
                run.report.max_rel_error, 1e-8,
                verdict(run.report.max_rel_error <= 1e-8 && run.input_grad_norm > 1e-12));
  }

  if (failures > 0)
    throw CheckFailure("grad-check: " + std::to_string(failures) + " of " +
                       std::to_string(checks) + " checks failed");
  std::printf("grad-check: all %d checks passed\n", checks);
  return 0;
}

// ---------------------------------------------------------------------------
// oracle-check

struct OracleCheckOptions {
  int64_t trials = 1000;
  int64_t max_dim = 64;
  int64_t samples = 10000;
  uint64_t seed = 3;
};

int run_oracle_check(const OracleCheckOptions& opt) {
  const OracleSweepReport report = oracle_sweep(opt.trials, opt.max_dim, opt.samples, opt.seed);
  std::printf("%-5s %7s %9s %10s %13s %13s %13s\n", "p", "trials", "dominated", "degenerate",
              "tightness", "oracle-ratio", "budget-excess");
  int64_t dominated = 0, total = 0;
  bool ratio_ok = true, budget_ok = true;
  for (const OracleSweepRow& row : report.rows) {
    std::printf("%-5s %7lld %9lld %10lld %13.3e %13.6f %13.3e\n", row.p.c_str(),
                static_cast<long long>(row.trials), static_cast<long long>(row.dominated),
                static_cast<long long>(row.degenerate), row.max_tightness_err,
                row.min_oracle_ratio, row.max_budget_excess);
    dominated += row.dominated;
    total += row.trials;
    ratio_ok = ratio_ok && row.min_oracle_ratio >= 1.0 - 1e-3;
    budget_ok = budget_ok && row.max_budget_excess <= 1e-9;
  }
  std::printf("elapsed %.1fs\n", report.seconds);

  std::vector<std::string> problems;
  if (!report.all_dominated())
    problems.push_back("the search oracle beat the closed form in " +
                       std::to_string(total - dominated) + " trial(s)");
  if (report.worst_tightness() > 1e-10)
    problems.push_back("closed-form value off its predicted norm by " +
                       fmt17(report.worst_tightness()));
  if (!ratio_ok) problems.push_back("search oracle quality degraded (ratio < 0.999)");
  if (!budget_ok) problems.push_back("a perturbation left the norm ball");
  if (!problems.empty()) {
    std::string msg = "oracle-check failed:";
    for (const std::string& p : problems) msg += "\n  - " + p;
    throw CheckFailure(msg);
  }
  std::printf("oracle-check: closed form dominated the search oracle in %lld/%lld trials\n",
              static_cast<long long>(dominated), static_cast<long long>(total));
  return 0;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateOptions {
  std::string grid;
  std::string out;
  int64_t parallel = 1;
  std::string row;  // worker mode: run exactly this row
};

struct GridRow {
  std::string name;
  std::vector<std::string> overrides;
};

struct Grid {
  std::string base_path;  // resolved against the grid file's directory
  std::vector<GridRow> rows;
};

// Line-oriented grid: one `base: <config path>` plus one `row: <name> [key=value]...`
// per experiment. `#` starts a comment line.
Grid parse_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open grid file " + path);
  Grid grid;
  std::vector<std::string> problems;
  std::set<std::string> seen;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t begin = line.find_first_not_of(" \t\r");
    if (begin == std::string::npos || line[begin] == '#') continue;
    const std::string at = "line " + std::to_string(lineno) + ": ";
    std::istringstream tokens(line);
    std::string head;
    tokens >> head;
    if (head == "base:") {
      std::string rest;
      std::getline(tokens, rest);
      const size_t from = rest.find_first_not_of(" \t");
      const size_t to = rest.find_last_not_of(" \t\r");
      if (from == std::string::npos) {
        problems.push_back(at + "base: requires a config path");
        continue;
      }
      if (!grid.base_path.empty()) {
        problems.push_back(at + "duplicate base:");
        continue;
      }
      grid.base_path = rest.substr(from, to - from + 1);
    } else if (head == "row:") {
      GridRow row;
      if (!(tokens >> row.name)) {
        problems.push_back(at + "row: requires a name");
        continue;
      }
      const bool safe = !row.name.empty() &&
                        row.name.find_first_not_of("abcdefghijklmnopqrstuvwxyz"
                                                   "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
                                                   "0123456789._-") == std::string::npos;
      if (!safe) {
        problems.push_back(at + "row name '" + row.name +
                           "' must use only [A-Za-z0-9._-] (it becomes a directory)");
        continue;
      }
      if (!seen.insert(row.name).second) {
        problems.push_back(at + "duplicate row name '" + row.name + "'");
        continue;
      }
      std::string token;
      while (tokens >> token) {
        if (token.find('=') == std::string::npos) {
          problems.push_back(at + "expected key=value, got '" + token + "'");
          break;
        }
        row.overrides.push_back(token);
      }
      grid.rows.push_back(std::move(row));
    } else {
      problems.push_back(at + "expected 'base:' or 'row:', got '" + head + "'");
    }
  }
  if (grid.base_path.empty()) problems.push_back("missing base: line");
  if (grid.rows.empty()) problems.push_back("no row: lines");
  if (!problems.empty()) {
    std::string msg = "grid file " + path + " is invalid:";
    for (const std::string& p : problems) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
  }
  const fs::path base(grid.base_path);
  if (base.is_relative()) grid.base_path = (fs::path(path).parent_path() / base).string();
  return grid;
}

struct RowPlan {
  std::string name;
  ExperimentConfig config;  // resolved, out_dir pointing at the row directory
  std::string fingerprint;
  std::string out_dir;
  std::string marker;  // row.json completion marker
};

struct RowMetrics {
  double rank1 = 0.0;
  double rank5 = 0.0;
  double map = 0.0;
};

std::vector<RowPlan> plan_rows(const Grid& grid, const std::string& out_dir) {
  std::vector<RowPlan> plans;
  std::vector<std::string> problems;
  for (const GridRow& row : grid.rows) {
    RowPlan plan;
    plan.name = row.name;
    plan.out_dir = (fs::path(out_dir) / row.name).string();
    plan.marker = (fs::path(plan.out_dir) / "row.json").string();
    try {
      plan.config = ExperimentConfig::parse_file(grid.base_path);
      plan.config.apply_overrides(row.overrides);
      plan.config.out_dir = plan.out_dir;
      plan.config.validate();
    } catch (const std::invalid_argument& e) {
      problems.push_back("row " + row.name + ": " + e.what());
      continue;
    }
    plan.fingerprint = hex32(config_fingerprint(plan.config));
    plans.push_back(std::move(plan));
  }
  if (!problems.empty()) {
    std::string msg = "ablation grid produced invalid configurations:";
    for (const std::string& p : problems) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
  }
  return plans;
}

// A row is complete when its marker parses and matches the planned config.
bool row_completed(const RowPlan& plan) {
  std::ifstream in(plan.marker);
  if (!in) return false;
  try {
    const json marker = json::parse(in);
    return marker.value("fingerprint", "") == plan.fingerprint && marker.contains("rank1") &&
           marker.contains("rank5") && marker.contains("mAP");
  } catch (const json::exception&) {
    return false;  // torn marker from an interrupted run: redo the row
  }
}

RowMetrics read_row_marker(const RowPlan& plan) {
  std::ifstream in(plan.marker);
  if (!in) throw std::runtime_error("ablate: missing completion marker " + plan.marker);
  const json marker = json::parse(in);
  return {marker["rank1"].get<double>(), marker["rank5"].get<double>(),
          marker["mAP"].get<double>()};
}

void run_row(const RowPlan& plan) {
  fs::create_directories(plan.out_dir);
  const std::string resolved = plan.config.render();
  write_text_file((fs::path(plan.out_dir) / "config.txt").string(), resolved);

  TrainOptions options;
  options.model = plan.config.model;
  options.reg = plan.config.reg;
  options.batch = plan.config.batch;
  options.triplet_enabled = plan.config.triplet_enabled;
  options.triplet_margin = plan.config.triplet_margin;
  options.schedule = plan.config.scaled_schedule();
  options.data_dir = plan.config.data_path;
  options.out_dir = plan.out_dir;
  options.config_text = resolved;
  options.seed = plan.config.seed;
  options.checkpoint_every = plan.config.checkpoint_every;
  options.dump_eps = plan.config.dump_eps;
  const TrainResult result = train(options);

  LoadedCheckpoint loaded = load_trained_model(result.last_checkpoint);
  const DatasetMetrics metrics = rank_dataset(*loaded.model, plan.config.data_path);

  json marker;
  marker["row"] = plan.name;
  marker["fingerprint"] = plan.fingerprint;
  marker["rank1"] = metrics.rank_at(1);
  marker["rank5"] = metrics.rank_at(5);
  marker["mAP"] = metrics.ranking.map;
  write_text_file(plan.marker, marker.dump(2) + "\n");
  std::printf("row %s: rank1=%.4f rank5=%.4f mAP=%.4f\n", plan.name.c_str(), metrics.rank_at(1),
              metrics.rank_at(5), metrics.ranking.map);
}

void run_rows_parallel(const std::vector<const RowPlan*>& pending, const AblateOptions& opt,
                       const std::string& self_exe) {
  std::map<pid_t, const RowPlan*> running;
  std::vector<std::string> failures;
  size_t next = 0;
  while (next < pending.size() || !running.empty()) {
    while (running.size() < static_cast<size_t>(opt.parallel) && next < pending.size()) {
      const RowPlan* plan = pending[next++];
      std::fflush(stdout);
      const pid_t pid = fork();
      if (pid < 0) throw std::runtime_error("ablate: fork failed");
      if (pid == 0) {
        // Worker: re-enter this binary for exactly one row, own output dir.
        std::vector<std::string> args{self_exe, "ablate",      "--grid", opt.grid,
                                      "--out",  opt.out,       "--row",  plan->name};
        std::vector<char*> argv;
        argv.reserve(args.size() + 1);
        for (std::string& a : args) argv.push_back(a.data());
        argv.push_back(nullptr);
        execv(self_exe.c_str(), argv.data());
        _exit(127);
      }
      running.emplace(pid, plan);
      std::printf("start %s (pid %d)\n", plan->name.c_str(), static_cast<int>(pid));
    }
    int status = 0;
    const pid_t done = waitpid(-1, &status, 0);
    if (done < 0) throw std::runtime_error("ablate: waitpid failed");
    const auto it = running.find(done);
    if (it == running.end()) continue;
    const std::string name = it->second->name;
    running.erase(it);
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : 128;
    if (code != 0) failures.push_back(name + " (exit " + std::to_string(code) + ")");
  }
  if (!failures.empty()) {
    std::string msg = "ablate: " + std::to_string(failures.size()) + " row(s) failed:";
    for (const std::string& f : failures) msg += "\n  - " + f;
    throw std::runtime_error(msg);
  }
}

int run_ablate(const AblateOptions& opt) {
  const Grid grid = parse_grid(opt.grid);
  const std::vector<RowPlan> plans = plan_rows(grid, opt.out);

  if (!opt.row.empty()) {
    // Worker mode: one row, spawned by the parent below.
    for (const RowPlan& plan : plans)
      if (plan.name == opt.row) {
        if (row_completed(plan)) {
          std::printf("skip %s (completed)\n", plan.name.c_str());
          return 0;
        }
        run_row(plan);
        return 0;
      }
    throw std::invalid_argument("ablate: no row named '" + opt.row + "' in " + opt.grid);
  }

  fs::create_directories(opt.out);
  std::vector<const RowPlan*> pending;
  for (const RowPlan& plan : plans) {
    if (row_completed(plan)) {
      std::printf("skip %s (completed)\n", plan.name.c_str());
    } else {
      pending.push_back(&plan);
    }
  }

  if (opt.parallel > 1 && pending.size() > 1) {
    run_rows_parallel(pending, opt, fs::read_symlink("/proc/self/exe").string());
  } else {
    for (const RowPlan* plan : pending) run_row(*plan);
  }

  // Summary across all rows, completed now or in an earlier invocation.
  std::vector<std::vector<std::string>> rows{{"row", "fingerprint", "csip", "msff", "lateral",
                                              "mode", "p", "sigma", "rank1", "rank5", "mAP"}};
  Series rank1_series{"rank1", {}, {}}, map_series{"mAP", {}, {}};
  for (size_t i = 0; i < plans.size(); ++i) {
    const RowPlan& plan = plans[i];
    const RowMetrics m = read_row_marker(plan);
    const MsflConfig& mc = plan.config.model;
    const RegularizerConfig& rc = plan.config.reg;
    rows.push_back({plan.name, plan.fingerprint, mc.csip ? "on" : "off", mc.msff ? "on" : "off",
                    mc.lateral ? "on" : "off", regularizer_mode_str(rc.mode),
                    norm_order_str(rc.p), fmt17(rc.sigma), fmt17(m.rank1), fmt17(m.rank5),
                    fmt17(m.map)});
    rank1_series.x.push_back(static_cast<double>(i));
    rank1_series.y.push_back(m.rank1);
    map_series.x.push_back(static_cast<double>(i));
    map_series.y.push_back(m.map);
    std::printf("%-24s rank1=%.4f rank5=%.4f mAP=%.4f\n", plan.name.c_str(), m.rank1, m.rank5,
                m.map);
  }
  write_csv((fs::path(opt.out) / "ablation.csv").string(), rows);
  const std::vector<Series> chart{rank1_series, map_series};
  write_svg_line_chart((fs::path(opt.out) / "ablation.svg").string(), "ablation metrics",
                       "row index", "metric", chart);
  std::printf("wrote %s/ablation.csv and %s/ablation.svg\n", opt.out.c_str(), opt.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-scale feature learning with a worst-case gradient-norm regularizer"};
  app.require_subcommand(1);
  std::function<int()> action;

  GenOptions gen;
  CLI::App* gen_cmd = app.add_subcommand("generate-data", "render a synthetic retrieval dataset");
  gen_cmd->add_option("--ids", gen.ids, "number of identities (half train, half test)")
      ->capture_default_str();
  gen_cmd->add_option("--per-id", gen.per_id, "images per identity")->capture_default_str();
  gen_cmd->add_option("--cameras", gen.cameras, "camera count")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "generator seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_flag("--force", gen.force, "write into an existing non-empty directory");
  gen_cmd->callback([&] { action = [&] { return run_generate(gen); }; });

  TrainCliOptions tr;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model from a configuration file");
  train_cmd->add_option("-c,--config", tr.config_path, "configuration file")->required();
  train_cmd->add_option("--set", tr.sets, "override, key=value (repeatable)");
  train_cmd->add_option("--resume", tr.resume, "checkpoint to continue from");
  train_cmd->callback([&] { action = [&] { return run_train(tr); }; });

  EvalOptions ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "rank a dataset with a trained checkpoint");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--data", ev.data, "dataset directory (default: the trained one)");
  eval_cmd->add_option("--out", ev.out, "output directory")->required();
  eval_cmd->add_option("--viz", ev.viz, "image tensor to render activation maps for (repeatable)");
  eval_cmd->add_option("--max-rank", ev.max_rank, "deepest CMC rank")->capture_default_str();
  eval_cmd->callback([&] { action = [&] { return run_eval(ev); }; });

  GradCheckOptions gc;
  CLI::App* gc_cmd = app.add_subcommand("grad-check", "finite-difference and composition checks");
  gc_cmd->add_option("--scope", gc.scope, "layers | msgr | chain | all")
      ->check(CLI::IsMember({"layers", "msgr", "chain", "all"}))
      ->capture_default_str();
  gc_cmd->add_option("--seed", gc.seed, "check seed")->capture_default_str();
  gc_cmd->add_option("--stride", gc.stride, "parameter-coordinate stride for the penalty check")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  gc_cmd->callback([&] { action = [&] { return run_grad_check(gc); }; });

  OracleCheckOptions oc;
  CLI::App* oc_cmd =
      app.add_subcommand("oracle-check", "closed-form perturbation vs search oracle");
  oc_cmd->add_option("--trials", oc.trials, "trials per norm order")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  oc_cmd->add_option("--max-dim", oc.max_dim, "largest gradient dimension")
      ->check(CLI::Range(int64_t{1}, int64_t{64}))
      ->capture_default_str();
  oc_cmd->add_option("--samples", oc.samples, "search samples per trial")->capture_default_str();
  oc_cmd->add_option("--seed", oc.seed, "sweep seed")->capture_default_str();
  oc_cmd->callback([&] { action = [&] { return run_oracle_check(oc); }; });

  AblateOptions ab;
  CLI::App* ab_cmd = app.add_subcommand("ablate", "train and rank every row of a grid file");
  ab_cmd->add_option("--grid", ab.grid, "grid file: 'base: <config>' then 'row: <name> k=v...'")
      ->required();
  ab_cmd->add_option("--out", ab.out, "output directory (one subdirectory per row)")->required();
  ab_cmd->add_option("--parallel", ab.parallel, "worker processes")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  ab_cmd->add_option("--row", ab.row, "run a single row (used by the parallel driver)")
      ->group("");  // hidden
  ab_cmd->callback([&] { action = [&] { return run_ablate(ab); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    return action();
  } catch (const CheckFailure& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 3;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
