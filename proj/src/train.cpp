// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include "msgr/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "msgr/data.hpp"
#include "msgr/pipeline.hpp"
#include "msgr/tensor_io.hpp"

namespace msgr {

namespace fs = std::filesystem;

namespace {

bool all_finite(const Tensor& t) {
  for (int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t[i])) return false;
  return true;
}

// Fixed formatting keeps log files byte-identical across runs.
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void put_u32(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_u64(std::ostream& os, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

uint32_t get_u32(std::istream& is) {
  char b[4];
  is.read(b, 4);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

uint64_t get_u64(std::istream& is) {
  char b[8];
  is.read(b, 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const uint32_t n = get_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

void put_section(std::ostream& os, const std::vector<std::pair<std::string, Tensor>>& items) {
  put_u32(os, static_cast<uint32_t>(items.size()));
  for (const auto& [name, tensor] : items) {
    put_string(os, name);
    write_tensor(os, tensor);
  }
}

std::vector<std::pair<std::string, Tensor>> get_section(std::istream& is) {
  const uint32_t n = get_u32(is);
  std::vector<std::pair<std::string, Tensor>> items;
  items.reserve(n);
  for (uint32_t i = 0; i < n; ++i) {
    std::string name = get_string(is);
    items.emplace_back(std::move(name), read_tensor(is));
  }
  return items;
}

constexpr char kCkptMagic[8] = {'M', 'S', 'G', 'R', 'C', 'K', 'P', 'T'};

}  // namespace

void Schedule::validate() const {
  std::string problems;
  auto flag = [&](const std::string& p) { problems += problems.empty() ? p : "; " + p; };
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) flag("base_lr must be positive and finite");
  if (!(decay_factor > 0.0) || decay_factor > 1.0) flag("decay_factor must be in (0,1]");
  if (total_epochs < 1) flag("total_epochs must be at least 1");
  for (size_t i = 0; i + 1 < decay_epochs.size(); ++i)
    if (decay_epochs[i] >= decay_epochs[i + 1]) {
      flag("decay_epochs must be strictly increasing");
      break;
    }
  for (const int64_t e : decay_epochs)
    if (e < 1 || e >= total_epochs) {
      flag("decay epochs must lie in [1, total_epochs)");
      break;
    }
  if (!problems.empty()) throw std::invalid_argument("schedule: " + problems);
}

Schedule scaled(const Schedule& canonical, double scale) {
  canonical.validate();
  if (!(scale > 0.0) || !std::isfinite(scale))
    throw std::invalid_argument("schedule: scale must be positive and finite");
  Schedule s = canonical;
  s.total_epochs = static_cast<int64_t>(std::floor(static_cast<double>(canonical.total_epochs) * scale));
  s.decay_epochs.clear();
  for (const int64_t e : canonical.decay_epochs)
    s.decay_epochs.push_back(
        std::max<int64_t>(1, static_cast<int64_t>(std::floor(static_cast<double>(e) * scale))));
  s.validate();
  return s;
}

double lr_at(const Schedule& schedule, int64_t epoch) {
  if (epoch < 0 || epoch >= schedule.total_epochs)
    throw std::out_of_range("lr_at: epoch outside [0, total_epochs)");
  double lr = schedule.base_lr;
  for (const int64_t e : schedule.decay_epochs)
    if (epoch >= e) lr *= schedule.decay_factor;
  return lr;
}

Adam::Adam(std::vector<Parameter*> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Parameter* p : params_) {
    m_.push_back(Tensor::zeros(p->value.shape()));
    v_.push_back(Tensor::zeros(p->value.shape()));
  }
}

void Adam::step(double lr, std::span<const Tensor> grads) {
  if (grads.size() != params_.size())
    throw std::invalid_argument("adam: gradient count does not match parameters");
  for (size_t i = 0; i < params_.size(); ++i) {
    if (!(grads[i].shape() == params_[i]->value.shape()))
      throw std::invalid_argument("adam: gradient shape mismatch for " + params_[i]->name);
    if (!all_finite(grads[i]))
      throw std::runtime_error("adam: non-finite gradient for " + params_[i]->name +
                               "; step aborted");
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (size_t i = 0; i < params_.size(); ++i) {
    const Tensor& g = grads[i];
    const Tensor& m = m_[i];
    const Tensor& v = v_[i];
    const Tensor& p = params_[i]->value;
    const int64_t n = g.numel();
    std::vector<double> nm(static_cast<size_t>(n)), nv(static_cast<size_t>(n)),
        np(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) {
      const size_t k = static_cast<size_t>(j);
      nm[k] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      nv[k] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      np[k] = p[j] - lr * (nm[k] / bc1) / (std::sqrt(nv[k] / bc2) + config_.epsilon);
    }
    m_[i] = Tensor::from(g.shape(), std::move(nm));
    v_[i] = Tensor::from(g.shape(), std::move(nv));
    params_[i]->value = Tensor::from(g.shape(), std::move(np));
  }
}

void Adam::restore(int64_t step, std::vector<Tensor> m, std::vector<Tensor> v) {
  if (step < 0 || m.size() != params_.size() || v.size() != params_.size())
    throw std::invalid_argument("adam: restore state does not match parameters");
  for (size_t i = 0; i < params_.size(); ++i)
    if (!(m[i].shape() == params_[i]->value.shape()) ||
        !(v[i].shape() == params_[i]->value.shape()))
      throw std::invalid_argument("adam: restored moment shape mismatch for " + params_[i]->name);
  step_ = step;
  m_ = std::move(m);
  v_ = std::move(v);
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ostringstream payload(std::ios::binary);
  payload.write(kCkptMagic, 8);
  put_u32(payload, ckpt.version);
  put_u64(payload, ckpt.seed);
  put_u64(payload, static_cast<uint64_t>(ckpt.epoch));
  put_u64(payload, static_cast<uint64_t>(ckpt.adam_step));
  put_string(payload, ckpt.config_text);
  put_section(payload, ckpt.params);
  put_section(payload, ckpt.state);
  put_section(payload, ckpt.adam_m);
  put_section(payload, ckpt.adam_v);

  const std::string bytes = payload.str();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  put_u32(os, crc32(bytes.data(), bytes.size()));
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12) throw std::runtime_error("load_checkpoint: file too short");

  const std::string payload = bytes.substr(0, bytes.size() - 4);
  std::istringstream tail(bytes.substr(bytes.size() - 4));
  const uint32_t stored = get_u32(tail);
  if (crc32(payload.data(), payload.size()) != stored)
    throw std::runtime_error("load_checkpoint: checksum mismatch in " + path);

  std::istringstream in(payload, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  if (!std::equal(magic, magic + 8, kCkptMagic))
    throw std::runtime_error("load_checkpoint: bad magic in " + path);

  Checkpoint ckpt;
  ckpt.version = get_u32(in);
  if (ckpt.version != 1)
    throw std::runtime_error("load_checkpoint: unsupported version " +
                             std::to_string(ckpt.version));
  ckpt.seed = get_u64(in);
  ckpt.epoch = static_cast<int64_t>(get_u64(in));
  ckpt.adam_step = static_cast<int64_t>(get_u64(in));
  ckpt.config_text = get_string(in);
  ckpt.params = get_section(in);
  ckpt.state = get_section(in);
  ckpt.adam_m = get_section(in);
  ckpt.adam_v = get_section(in);
  if (!in) throw std::runtime_error("load_checkpoint: truncated payload in " + path);
  return ckpt;
}

namespace {

// One loaded training image with its class index.
struct TrainItem {
  Tensor image;
  int32_t label = 0;
};

Tensor stack_batch(const std::vector<TrainItem>& items, std::span<const int64_t> indices,
                   const MsflConfig& cfg, Mode mode, Rng& rng) {
  const int64_t n = static_cast<int64_t>(indices.size());
  const int64_t plane = 3 * cfg.input_h * cfg.input_w;
  std::vector<double> data(static_cast<size_t>(n * plane));
  for (int64_t i = 0; i < n; ++i) {
    const Tensor pre = preprocess(items[static_cast<size_t>(indices[static_cast<size_t>(i)])].image,
                                  mode, cfg.input_h, cfg.input_w, rng);
    std::copy(pre.data(), pre.data() + plane, data.begin() + i * plane);
  }
  return Tensor::from(Shape({n, 3, cfg.input_h, cfg.input_w}), std::move(data));
}

std::string grad_norms_json(const std::vector<std::string>& names,
                            const std::vector<double>& norms) {
  std::string out = "{";
  for (size_t i = 0; i < names.size(); ++i) {
    if (i) out += ",";
    out += "\"" + names[i] + "\":" + fmt(norms[i]);
  }
  return out + "}";
}

// Visualization hook: the raw input perturbation plus a graymap of the first
// sample's absolute channel sum.
void dump_perturbation(const Tensor& eps, const std::string& out_dir, int64_t epoch) {
  const fs::path dir = fs::path(out_dir) / "eps";
  fs::create_directories(dir);
  char stem[32];
  std::snprintf(stem, sizeof(stem), "epoch%04lld", static_cast<long long>(epoch));
  save_tensor((dir / (std::string(stem) + ".bin")).string(), eps);

  const Shape& s = eps.shape();  // (N, C, H, W)
  const int64_t c = s.extent(1), h = s.extent(2), w = s.extent(3);
  std::vector<double> plane(static_cast<size_t>(h * w), 0.0);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t p = 0; p < h * w; ++p)
      plane[static_cast<size_t>(p)] += std::abs(eps[(ch * h * w) + p]);
  write_pgm((dir / (std::string(stem) + ".pgm")).string(),
            Tensor::from(Shape({h, w}), std::move(plane)));
}

}  // namespace

TrainResult train(const TrainOptions& options) {
  options.model.validate();
  options.reg.validate();
  options.schedule.validate();
  fs::create_directories(options.out_dir);

  // Load the training split and map identities to class indices in sorted
  // identity order.
  const DatasetManifest manifest = load_manifest(options.data_dir);
  std::vector<TrainItem> items;
  std::map<int64_t, std::vector<int64_t>> by_identity;
  for (const ManifestRecord& r : manifest.records) {
    if (r.split != "train") continue;
    by_identity[r.identity].push_back(static_cast<int64_t>(items.size()));
    items.push_back({load_tensor((fs::path(options.data_dir) / r.path).string()), 0});
  }
  if (items.empty()) throw std::runtime_error("train: dataset has no training split");
  if (static_cast<int64_t>(by_identity.size()) != options.model.num_classes)
    throw std::invalid_argument(
        "train: model.num_classes = " + std::to_string(options.model.num_classes) +
        " but the training split has " + std::to_string(by_identity.size()) + " identities");
  std::vector<std::vector<int64_t>> groups;
  for (const auto& [identity, indices] : by_identity) {
    (void)identity;
    for (const int64_t idx : indices)
      items[static_cast<size_t>(idx)].label = static_cast<int32_t>(groups.size());
    groups.push_back(indices);
  }

  Rng init_rng = Rng::stream(options.seed, {0x1217});
  MsflModel model(options.model, init_rng);
  Adam adam(model.parameters());
  int64_t start_epoch = 0;

  if (!options.resume.empty()) {
    const Checkpoint ckpt = load_checkpoint(options.resume);
    if (ckpt.seed != options.seed)
      throw std::runtime_error("train: checkpoint seed differs from the configured seed");
    restore_model_tensors(model, ckpt);
    std::map<std::string, const Tensor*> saved_m, saved_v;
    for (const auto& [name, tensor] : ckpt.adam_m) saved_m[name] = &tensor;
    for (const auto& [name, tensor] : ckpt.adam_v) saved_v[name] = &tensor;
    std::vector<Tensor> m, v;
    for (const Parameter* p : adam.params()) {
      const auto im = saved_m.find(p->name);
      const auto iv = saved_v.find(p->name);
      if (im == saved_m.end() || iv == saved_v.end())
        throw std::runtime_error("train: checkpoint lacks optimizer state for " + p->name);
      m.push_back(*im->second);
      v.push_back(*iv->second);
    }
    adam.restore(ckpt.adam_step, std::move(m), std::move(v));
    start_epoch = ckpt.epoch;
  }

  const std::string log_path = (fs::path(options.out_dir) / "train_log.jsonl").string();
  std::ofstream log(log_path, options.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("train: cannot open " + log_path);

  auto write_diagnostic = [&](int64_t epoch, int64_t batch, double base, double pen, double lr,
                              const std::vector<std::string>& names,
                              const std::vector<double>& norms) {
    const std::string path = (fs::path(options.out_dir) / "diagnostic.json").string();
    std::ofstream d(path);
    d << "{\"epoch\":" << epoch << ",\"batch\":" << batch << ",\"base_loss\":" << fmt(base)
      << ",\"penalty\":" << fmt(pen) << ",\"lr\":" << fmt(lr)
      << ",\"grad_norms\":" << grad_norms_json(names, norms) << "}\n";
    return path;
  };

  TrainResult result;
  result.log_path = log_path;
  double last_epoch_mean_base = 0.0;

  for (int64_t epoch = start_epoch; epoch < options.schedule.total_epochs; ++epoch) {
    const double lr = lr_at(options.schedule, epoch);
    const auto batches = pk_sampler(groups, options.batch, options.seed, epoch);
    Rng pre_rng = Rng::stream(options.seed, {0x707265, static_cast<uint64_t>(epoch)});
    double base_sum = 0.0;

    for (size_t b = 0; b < batches.size(); ++b) {
      const std::vector<int64_t>& batch = batches[b];
      Tensor x = stack_batch(items, batch, options.model, Mode::Train, pre_rng);
      std::vector<int32_t> labels;
      for (const int64_t idx : batch) labels.push_back(items[static_cast<size_t>(idx)].label);

      double base_val = 0.0;
      double pen_val = 0.0;
      std::vector<std::string> norm_names;
      std::vector<double> norms;
      try {
        // The adversarial-step route perturbs the batch before the training
        // forward; the probe pass runs in eval mode so running statistics see
        // each batch exactly once.
        double probe_loss = 0.0;
        Tensor input_grad;
        bool have_probe = false;
        if (options.reg.mode == RegularizerMode::AdversarialStep && options.reg.sigma > 0.0) {
          Tape probe;
          const ForwardResult pf = model.forward(probe, x, Mode::Eval);
          NodeId pbase = cross_entropy(probe, pf.logits, labels);
          if (options.triplet_enabled)
            pbase = probe.add(pbase,
                              batch_hard_triplet(probe, pf.embedding, labels, options.triplet_margin));
          probe_loss = probe.value(pbase)[0];
          const std::vector<NodeId> wrt{pf.input};
          input_grad = probe.backward_tensors(pbase, wrt)[0];
          const Perturbation pert =
              worst_case_perturbation(input_grad, options.reg.p, options.reg.sigma);
          x = add(x, pert.epsilon);
          have_probe = true;
        }

        Tape t;
        const ForwardResult fwd = model.forward(t, x, Mode::Train);
        NodeId base = cross_entropy(t, fwd.logits, labels);
        if (options.triplet_enabled)
          base = t.add(base, batch_hard_triplet(t, fwd.embedding, labels, options.triplet_margin));
        base_val = t.value(base)[0];

        auto target_node = [&](const std::string& name) {
          if (name == "input") return fwd.input;
          return fwd.features.c[static_cast<size_t>(name[1] - '2')];
        };

        NodeId total = base;
        if (options.reg.mode == RegularizerMode::Penalty) {
          std::vector<NodeId> target_nodes;
          for (const std::string& name : options.reg.targets) target_nodes.push_back(target_node(name));
          const NodeId pen = penalty(t, base, target_nodes, options.reg);
          total = t.add(base, pen);
          pen_val = t.value(pen)[0];
          norm_names = options.reg.targets;
          const std::vector<Tensor> gs = t.backward_tensors(base, target_nodes);
          for (const Tensor& g : gs) norms.push_back(lp_norm(g, dual_exponent(options.reg.p)));
          if (options.dump_eps && b == 0 && options.reg.sigma > 0.0) {
            for (size_t i = 0; i < options.reg.targets.size(); ++i) {
              if (options.reg.targets[i] != "input") continue;
              dump_perturbation(worst_case_perturbation(gs[i], options.reg.p, options.reg.sigma)
                                    .epsilon,
                                options.out_dir, epoch);
            }
          }
        } else if (have_probe) {
          pen_val = base_val - probe_loss;  // loss uplift caused by the perturbation
          norm_names = {"input"};
          norms.push_back(lp_norm(input_grad, dual_exponent(options.reg.p)));
          if (options.dump_eps && b == 0)
            dump_perturbation(
                worst_case_perturbation(input_grad, options.reg.p, options.reg.sigma).epsilon,
                options.out_dir, epoch);
        }

        if (!std::isfinite(base_val) || !std::isfinite(t.value(total)[0]))
          throw std::runtime_error("train: non-finite loss");

        std::vector<NodeId> param_nodes;
        for (Parameter* p : model.parameters()) param_nodes.push_back(t.param(*p));
        const std::vector<Tensor> grads = t.backward_tensors(total, param_nodes);
        adam.step(lr, grads);
      } catch (const std::runtime_error& e) {
        // Numerical failures (the kernels reject non-finite results) leave a
        // diagnostic with everything known about the offending batch.
        const std::string path = write_diagnostic(epoch, static_cast<int64_t>(b), base_val,
                                                  pen_val, lr, norm_names, norms);
        throw std::runtime_error(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                 " batch " + std::to_string(b) + "; diagnostics written to " +
                                 path);
      }

      base_sum += base_val;
      log << "{\"epoch\":" << epoch << ",\"batch\":" << b << ",\"base_loss\":" << fmt(base_val)
          << ",\"penalty\":" << fmt(pen_val) << ",\"lr\":" << fmt(lr) << ",\"grad_norms\":"
          << grad_norms_json(norm_names, norms) << "}\n";
    }

    // Eval-mode pass over the full training split for the epoch summary.
    Rng unused(0);
    const Tensor all = [&] {
      std::vector<int64_t> everyone(items.size());
      for (size_t i = 0; i < items.size(); ++i) everyone[i] = static_cast<int64_t>(i);
      return stack_batch(items, everyone, options.model, Mode::Eval, unused);
    }();
    Tape et;
    const ForwardResult efwd = model.forward(et, all, Mode::Eval);
    const Tensor logits = et.value(efwd.logits);
    int64_t correct = 0;
    const int64_t classes = options.model.num_classes;
    for (size_t i = 0; i < items.size(); ++i) {
      int64_t best = 0;
      for (int64_t c = 1; c < classes; ++c)
        if (logits[static_cast<int64_t>(i) * classes + c] >
            logits[static_cast<int64_t>(i) * classes + best])
          best = c;
      if (best == items[i].label) ++correct;
    }
    const double accuracy = static_cast<double>(correct) / static_cast<double>(items.size());
    last_epoch_mean_base = base_sum / static_cast<double>(batches.size());
    log << "{\"epoch\":" << epoch << ",\"train_accuracy\":" << fmt(accuracy)
        << ",\"mean_base_loss\":" << fmt(last_epoch_mean_base) << "}\n";
    result.final_train_accuracy = accuracy;

    const bool last = epoch + 1 == options.schedule.total_epochs;
    if ((epoch + 1) % options.checkpoint_every == 0 || last) {
      Checkpoint ckpt;
      ckpt.config_text = options.config_text;
      ckpt.seed = options.seed;
      ckpt.epoch = epoch + 1;
      ckpt.adam_step = adam.steps();
      for (Parameter* p : model.parameters()) ckpt.params.emplace_back(p->name, p->value);
      for (const StateRef& s : model.state()) ckpt.state.emplace_back(s.name, *s.tensor);
      const auto& params = adam.params();
      for (size_t i = 0; i < params.size(); ++i) {
        ckpt.adam_m.emplace_back(params[i]->name, adam.first_moments()[i]);
        ckpt.adam_v.emplace_back(params[i]->name, adam.second_moments()[i]);
      }
      char name[40];
      std::snprintf(name, sizeof(name), "ckpt_epoch%04lld.bin",
                    static_cast<long long>(epoch + 1));
      result.last_checkpoint = (fs::path(options.out_dir) / name).string();
      save_checkpoint(ckpt, result.last_checkpoint);
    }
  }

  result.epochs_run = options.schedule.total_epochs - start_epoch;
  result.final_base_loss = last_epoch_mean_base;
  return result;
}

}  // namespace msgr
