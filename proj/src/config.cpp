// Copyright (c) 2026 The msgr authors
// SPDX-License-Identifier: Apache-2.0

#include "msgr/config.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace msgr {
namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::string cur;
  std::stringstream ss(s);
  while (std::getline(ss, cur, ',')) out.push_back(trim(cur));
  return out;
}

std::string join_list(std::span<const std::string> items) {
  std::string out;
  for (size_t i = 0; i < items.size(); ++i) {
    if (i) out += ",";
    out += items[i];
  }
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Collects every complaint; the final exception lists them all.
struct Problems {
  std::vector<std::string> items;
  void add(const std::string& key, const std::string& what) { items.push_back(key + ": " + what); }
  void raise_if_any(const char* context) const {
    if (items.empty()) return;
    std::string msg = std::string(context) + ":";
    for (const std::string& p : items) msg += "\n  - " + p;
    throw std::invalid_argument(msg);
  }
};

bool parse_i64(const std::string& s, int64_t& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  errno = 0;
  char* end = nullptr;
  const long long v = std::strtoll(t.c_str(), &end, 10);
  if (errno != 0 || end != t.c_str() + t.size()) return false;
  out = v;
  return true;
}

bool parse_f64(const std::string& s, double& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (errno != 0 || end != t.c_str() + t.size()) return false;
  out = v;
  return true;
}

bool parse_bool(const std::string& s, bool& out) {
  const std::string t = trim(s);
  if (t == "on" || t == "true" || t == "1") {
    out = true;
    return true;
  }
  if (t == "off" || t == "false" || t == "0") {
    out = false;
    return true;
  }
  return false;
}

// One schema entry: how to read the key into the config and how to print it.
struct Field {
  const char* key;
  std::function<bool(ExperimentConfig&, const std::string&)> set;  // false = bad value
  const char* expected;                                            // for error messages
  std::function<std::string(const ExperimentConfig&)> get;
};

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;

    // Accessors are generic lambdas so one accessor serves both the setter
    // (mutable config) and the getter (const config).
    auto add_i64 = [&f](const char* key, auto ref) {
      f.push_back({key,
                   [ref](ExperimentConfig& c, const std::string& v) {
                     int64_t x;
                     if (!parse_i64(v, x)) return false;
                     ref(c) = x;
                     return true;
                   },
                   "an integer",
                   [ref](const ExperimentConfig& c) { return std::to_string(ref(c)); }});
    };
    auto add_f64 = [&f](const char* key, auto ref) {
      f.push_back({key,
                   [ref](ExperimentConfig& c, const std::string& v) {
                     double x;
                     if (!parse_f64(v, x)) return false;
                     ref(c) = x;
                     return true;
                   },
                   "a number",
                   [ref](const ExperimentConfig& c) { return fmt_double(ref(c)); }});
    };
    auto add_bool = [&f](const char* key, auto ref) {
      f.push_back({key,
                   [ref](ExperimentConfig& c, const std::string& v) {
                     bool x;
                     if (!parse_bool(v, x)) return false;
                     ref(c) = x;
                     return true;
                   },
                   "on or off",
                   [ref](const ExperimentConfig& c) { return ref(c) ? "on" : "off"; }});
    };
    auto add_str = [&f](const char* key, auto ref) {
      f.push_back({key,
                   [ref](ExperimentConfig& c, const std::string& v) {
                     ref(c) = trim(v);
                     return true;
                   },
                   "a string",
                   [ref](const ExperimentConfig& c) { return std::string(ref(c)); }});
    };

    add_i64("model.input_h", [](auto& c) -> auto& { return c.model.input_h; });
    add_i64("model.input_w", [](auto& c) -> auto& { return c.model.input_w; });
    f.push_back({"model.widths",
                 [](ExperimentConfig& c, const std::string& v) {
                   const std::vector<std::string> parts = split_list(v);
                   if (parts.size() != 4) return false;
                   std::array<int64_t, 4> w{};
                   for (size_t i = 0; i < 4; ++i)
                     if (!parse_i64(parts[i], w[i])) return false;
                   c.model.widths = w;
                   return true;
                 },
                 "four comma-separated integers",
                 [](const ExperimentConfig& c) {
                   std::string out;
                   for (size_t i = 0; i < 4; ++i)
                     out += (i ? "," : "") + std::to_string(c.model.widths[i]);
                   return out;
                 }});
    f.push_back({"model.blocks",
                 [](ExperimentConfig& c, const std::string& v) {
                   const std::vector<std::string> parts = split_list(v);
                   if (parts.size() != 4) return false;
                   std::array<int, 4> b{};
                   for (size_t i = 0; i < 4; ++i) {
                     int64_t x;
                     if (!parse_i64(parts[i], x)) return false;
                     b[i] = static_cast<int>(x);
                   }
                   c.model.blocks = b;
                   return true;
                 },
                 "four comma-separated integers",
                 [](const ExperimentConfig& c) {
                   std::string out;
                   for (size_t i = 0; i < 4; ++i)
                     out += (i ? "," : "") + std::to_string(c.model.blocks[i]);
                   return out;
                 }});
    add_i64("model.lateral_width",
            [](auto& c) -> auto& { return c.model.lateral_width; });
    add_i64("model.embedding_dim",
            [](auto& c) -> auto& { return c.model.embedding_dim; });
    add_i64("model.num_classes",
            [](auto& c) -> auto& { return c.model.num_classes; });
    add_bool("model.csip", [](auto& c) -> auto& { return c.model.csip; });
    add_bool("model.msff", [](auto& c) -> auto& { return c.model.msff; });
    add_bool("model.lateral", [](auto& c) -> auto& { return c.model.lateral; });
    add_bool("model.last_stride1",
             [](auto& c) -> auto& { return c.model.last_stride1; });

    f.push_back({"msgr.mode",
                 [](ExperimentConfig& c, const std::string& v) {
                   try {
                     c.reg.mode = parse_regularizer_mode(trim(v));
                   } catch (const std::invalid_argument&) {
                     return false;
                   }
                   return true;
                 },
                 "penalty, adversarial-step or off",
                 [](const ExperimentConfig& c) { return regularizer_mode_str(c.reg.mode); }});
    f.push_back({"msgr.p",
                 [](ExperimentConfig& c, const std::string& v) {
                   try {
                     c.reg.p = parse_norm_order(trim(v));
                   } catch (const std::invalid_argument&) {
                     return false;
                   }
                   return true;
                 },
                 "1, 2 or inf",
                 [](const ExperimentConfig& c) { return norm_order_str(c.reg.p); }});
    add_f64("msgr.sigma", [](auto& c) -> auto& { return c.reg.sigma; });
    f.push_back({"msgr.targets",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.reg.targets = split_list(v);
                   return true;
                 },
                 "a comma-separated list",
                 [](const ExperimentConfig& c) { return join_list(c.reg.targets); }});
    add_bool("msgr.dump_eps", [](auto& c) -> auto& { return c.dump_eps; });

    f.push_back({"batch.p",
                 [](ExperimentConfig& c, const std::string& v) {
                   int64_t x;
                   if (!parse_i64(v, x)) return false;
                   c.batch.p = static_cast<int>(x);
                   return true;
                 },
                 "an integer",
                 [](const ExperimentConfig& c) { return std::to_string(c.batch.p); }});
    f.push_back({"batch.k",
                 [](ExperimentConfig& c, const std::string& v) {
                   int64_t x;
                   if (!parse_i64(v, x)) return false;
                   c.batch.k = static_cast<int>(x);
                   return true;
                 },
                 "an integer",
                 [](const ExperimentConfig& c) { return std::to_string(c.batch.k); }});

    add_bool("loss.triplet.enabled",
             [](auto& c) -> auto& { return c.triplet_enabled; });
    add_f64("loss.triplet.margin",
            [](auto& c) -> auto& { return c.triplet_margin; });

    add_f64("schedule.base_lr", [](auto& c) -> auto& { return c.schedule.base_lr; });
    add_f64("schedule.decay",
            [](auto& c) -> auto& { return c.schedule.decay_factor; });
    f.push_back({"schedule.decay_epochs",
                 [](ExperimentConfig& c, const std::string& v) {
                   const std::vector<std::string> parts = split_list(v);
                   std::vector<int64_t> epochs;
                   for (const std::string& p : parts) {
                     int64_t x;
                     if (!parse_i64(p, x)) return false;
                     epochs.push_back(x);
                   }
                   c.schedule.decay_epochs = std::move(epochs);
                   return true;
                 },
                 "comma-separated integers (possibly empty)",
                 [](const ExperimentConfig& c) {
                   std::string out;
                   for (size_t i = 0; i < c.schedule.decay_epochs.size(); ++i)
                     out += (i ? "," : "") + std::to_string(c.schedule.decay_epochs[i]);
                   return out;
                 }});
    add_i64("schedule.epochs",
            [](auto& c) -> auto& { return c.schedule.total_epochs; });
    add_f64("schedule.scale", [](auto& c) -> auto& { return c.schedule_scale; });

    add_str("data.path", [](auto& c) -> auto& { return c.data_path; });
    add_str("out", [](auto& c) -> auto& { return c.out_dir; });
    f.push_back({"seed",
                 [](ExperimentConfig& c, const std::string& v) {
                   const std::string t = trim(v);
                   if (t.empty()) return false;
                   errno = 0;
                   char* end = nullptr;
                   const unsigned long long x = std::strtoull(t.c_str(), &end, 10);
                   if (errno != 0 || end != t.c_str() + t.size() || t[0] == '-') return false;
                   c.seed = x;
                   return true;
                 },
                 "a non-negative integer",
                 [](const ExperimentConfig& c) { return std::to_string(c.seed); }});
    add_i64("train.checkpoint_every",
            [](auto& c) -> auto& { return c.checkpoint_every; });
    return f;
  }();
  return fields;
}

const Field* find_field(const std::string& key) {
  for (const Field& f : schema())
    if (key == f.key) return &f;
  return nullptr;
}

// Shared by file parsing and --set overrides: apply key=value pairs with
// exhaustive error collection. `seen` tracks duplicates within one source.
void apply_pairs(ExperimentConfig& config,
                 const std::vector<std::pair<std::string, std::string>>& pairs,
                 bool reject_duplicates, Problems& problems) {
  std::map<std::string, int> seen;
  for (const auto& [key, value] : pairs) {
    const Field* field = find_field(key);
    if (field == nullptr) {
      problems.add(key, "unknown key");
      continue;
    }
    if (reject_duplicates && ++seen[key] > 1) {
      problems.add(key, "duplicate key");
      continue;
    }
    if (!field->set(config, value))
      problems.add(key, "expected " + std::string(field->expected) + ", got '" + trim(value) +
                            "'");
  }
}

}  // namespace

std::vector<std::string> config_schema_keys() {
  std::vector<std::string> keys;
  for (const Field& f : schema()) keys.emplace_back(f.key);
  return keys;
}

ExperimentConfig ExperimentConfig::parse_text(const std::string& text) {
  ExperimentConfig config;
  Problems problems;
  std::vector<std::pair<std::string, std::string>> pairs;

  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::string stripped = trim(line.substr(0, line.find('#')));
    if (stripped.empty()) continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      problems.add("line " + std::to_string(lineno), "expected 'key = value', got '" + stripped +
                                                         "'");
      continue;
    }
    pairs.emplace_back(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
  }

  apply_pairs(config, pairs, /*reject_duplicates=*/true, problems);
  problems.raise_if_any("invalid configuration");
  return config;
}

ExperimentConfig ExperimentConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str());
}

void ExperimentConfig::apply_overrides(std::span<const std::string> specs) {
  Problems problems;
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const std::string& spec : specs) {
    const size_t eq = spec.find('=');
    if (eq == std::string::npos) {
      problems.add(spec, "override must be key=value");
      continue;
    }
    pairs.emplace_back(trim(spec.substr(0, eq)), trim(spec.substr(eq + 1)));
  }
  // Overrides may legitimately repeat a key (the last one wins).
  apply_pairs(*this, pairs, /*reject_duplicates=*/false, problems);
  problems.raise_if_any("invalid overrides");
}

void ExperimentConfig::validate() const {
  Problems problems;
  auto absorb = [&problems](const char* where, const auto& component) {
    try {
      component.validate();
    } catch (const std::invalid_argument& e) {
      problems.add(where, e.what());
    }
  };
  absorb("model", model);
  absorb("msgr", reg);
  absorb("schedule", schedule);
  if (batch.p < 2) problems.add("batch.p", "needs at least two identities per batch");
  if (batch.k < 1) problems.add("batch.k", "needs at least one image per identity");
  if (triplet_enabled && batch.k < 2)
    problems.add("batch.k", "the ranking loss needs at least two images per identity");
  if (!std::isfinite(triplet_margin) || triplet_margin < 0.0)
    problems.add("loss.triplet.margin", "must be finite and >= 0");
  if (!std::isfinite(schedule_scale) || schedule_scale <= 0.0 || schedule_scale > 1.0)
    problems.add("schedule.scale", "must be in (0, 1]");
  if (checkpoint_every < 1) problems.add("train.checkpoint_every", "must be >= 1");
  if (data_path.empty()) problems.add("data.path", "required");
  if (out_dir.empty()) problems.add("out", "required");
  problems.raise_if_any("invalid configuration");
}

Schedule ExperimentConfig::scaled_schedule() const { return scaled(schedule, schedule_scale); }

std::string ExperimentConfig::render() const {
  std::string out = "# resolved experiment configuration\n";
  for (const Field& f : schema()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

}  // namespace msgr
