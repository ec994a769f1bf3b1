#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dllab/common.hpp"
#include "dllab/data.hpp"
#include "dllab/linearized.hpp"
#include "dllab/metric_series.hpp"
#include "dllab/metrics.hpp"
#include "dllab/network.hpp"
#include "dllab/stats.hpp"
#include "dllab/trainer.hpp"

namespace dllab {

inline constexpr const char* kLibraryVersion = "0.1.0";

// ---------------------------------------------------------------------------
// INI config files
// ---------------------------------------------------------------------------

struct IniEntry {
  std::string value;
  int line = 0;
  mutable bool used = false;
};

struct IniSection {
  std::map<std::string, IniEntry> entries;
  int line = 0;
};

struct IniFile {
  std::string origin;
  std::map<std::string, IniSection> sections;

  std::string where(int line) const { return origin + ":" + fmt_int(line); }
};

namespace detail {

inline std::string ini_trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

// Line-based `[section]` / `key = value` format. Lines whose first non-blank
// character is '#' or ';' are comments. Keys may not repeat within a section.
inline IniFile parse_ini_text(const std::string& text, const std::string& origin) {
  IniFile f;
  f.origin = origin;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = detail::ini_trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line[0] == '[') {
      if (line.back() != ']') {
        throw ConfigError(f.where(lineno) + ": malformed section header '" + line + "'");
      }
      section = detail::ini_trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(f.where(lineno) + ": empty section name");
      if (f.sections.find(section) == f.sections.end()) f.sections[section].line = lineno;
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(f.where(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    std::string key = detail::ini_trim(line.substr(0, eq));
    std::string value = detail::ini_trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(f.where(lineno) + ": empty key");
    if (section.empty()) {
      throw ConfigError(f.where(lineno) + ": key '" + key + "' appears before any [section]");
    }
    auto& sec = f.sections[section];
    auto it = sec.entries.find(key);
    if (it != sec.entries.end()) {
      throw ConfigError(f.where(lineno) + ": duplicate key '" + key + "' in [" + section +
                        "] (first set at line " + fmt_int(it->second.line) + ")");
    }
    sec.entries[key] = IniEntry{value, lineno, false};
  }
  return f;
}

inline IniFile parse_ini_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_ini_text(buf.str(), path.filename().string());
}

// Typed access to one section; every read marks the key as consumed so that
// leftovers can be rejected as unknown keys.
class IniReader {
 public:
  IniReader(const IniFile& file, std::string section)
      : file_(&file), section_(std::move(section)) {}

  bool has(const std::string& key) const {
    auto s = file_->sections.find(section_);
    return s != file_->sections.end() && s->second.entries.count(key) > 0;
  }

  std::string str(const std::string& key, const std::string& fallback) const {
    const IniEntry* e = entry(key);
    return e != nullptr ? e->value : fallback;
  }

  int64_t i64(const std::string& key, int64_t fallback) const {
    const IniEntry* e = entry(key);
    if (e == nullptr) return fallback;
    return parse_or_throw<int64_t>(key, *e, [](const std::string& v) {
      size_t pos = 0;
      int64_t out = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    });
  }

  uint64_t u64(const std::string& key, uint64_t fallback) const {
    const IniEntry* e = entry(key);
    if (e == nullptr) return fallback;
    return parse_or_throw<uint64_t>(key, *e, [](const std::string& v) {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
      size_t pos = 0;
      uint64_t out = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    });
  }

  double num(const std::string& key, double fallback) const {
    const IniEntry* e = entry(key);
    if (e == nullptr) return fallback;
    return parse_or_throw<double>(key, *e, [](const std::string& v) {
      size_t pos = 0;
      double out = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    });
  }

  bool flag(const std::string& key, bool fallback) const {
    const IniEntry* e = entry(key);
    if (e == nullptr) return fallback;
    const std::string& v = e->value;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(file_->where(e->line) + ": invalid boolean for '" + key + "': '" + v + "'");
  }

  Fraction frac(const std::string& key, Fraction fallback) const {
    const IniEntry* e = entry(key);
    if (e == nullptr) return fallback;
    return parse_or_throw<Fraction>(key, *e, [](const std::string& v) {
      try {
        return Fraction::parse(v);
      } catch (const ConfigError&) {
        throw std::invalid_argument(v);
      }
    });
  }

  std::vector<std::string> tokens(const std::string& key) const {
    const IniEntry* e = entry(key);
    if (e == nullptr) return {};
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(e->value);
    while (std::getline(in, cur, ',')) {
      cur = detail::ini_trim(cur);
      if (cur.empty()) {
        throw ConfigError(file_->where(e->line) + ": empty element in list '" + key + "'");
      }
      out.push_back(cur);
    }
    if (out.empty()) throw ConfigError(file_->where(e->line) + ": empty list for '" + key + "'");
    return out;
  }

  template <class T, class Parse>
  std::vector<T> list(const std::string& key, std::vector<T> fallback, Parse parse) const {
    if (!has(key)) return fallback;
    const IniEntry* e = entry(key);
    std::vector<T> out;
    for (const std::string& tok : tokens(key)) {
      try {
        out.push_back(parse(tok));
      } catch (const std::exception&) {
        throw ConfigError(file_->where(e->line) + ": invalid element '" + tok + "' in list '" +
                          key + "'");
      }
    }
    return out;
  }

  std::vector<double> num_list(const std::string& key, std::vector<double> fallback) const {
    return list<double>(key, std::move(fallback), [](const std::string& v) {
      size_t pos = 0;
      double out = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    });
  }

  std::vector<uint64_t> u64_list(const std::string& key, std::vector<uint64_t> fallback) const {
    return list<uint64_t>(key, std::move(fallback), [](const std::string& v) {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
      size_t pos = 0;
      uint64_t out = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    });
  }

  std::vector<int> int_list(const std::string& key, std::vector<int> fallback) const {
    return list<int>(key, std::move(fallback), [](const std::string& v) {
      size_t pos = 0;
      int out = std::stoi(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    });
  }

 private:
  const IniEntry* entry(const std::string& key) const {
    auto s = file_->sections.find(section_);
    if (s == file_->sections.end()) return nullptr;
    auto it = s->second.entries.find(key);
    if (it == s->second.entries.end()) return nullptr;
    it->second.used = true;
    return &it->second;
  }

  template <class T, class Parse>
  T parse_or_throw(const std::string& key, const IniEntry& e, Parse parse) const {
    try {
      return parse(e.value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError(file_->where(e.line) + ": invalid value for '" + key + "': '" + e.value +
                        "'");
    }
  }

  const IniFile* file_;
  std::string section_;
};

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::string name = "experiment";
  DataConfig data;
  TrainConfig train;
  std::vector<uint64_t> seeds{1};
  std::vector<double> spawn_epochs{0, 1, 2, 5, 10, 20};
  int children_per_spawn = 2;
  bool inherit_momentum = true;
  std::filesystem::path out = "out";

  bool metric_barrier = true;
  bool metric_kernel = true;
  bool metric_relu = true;
  bool metric_function = true;
  bool metric_weight = true;
  int64_t kernel_subsample = 100;
  int64_t mk_cap = 2048;
  Fraction dt{2, 5};
  Fraction heatmap_every{1, 1};
  int n_alpha = 25;
  int64_t grid_n = 21;
  double grid_lo = -0.5;
  double grid_hi = 1.5;

  LinearizedConfig lin;
  bool lin_baseline = true;
  double lin_lr_low = 1e-3;
  int64_t lin_baseline_max_epochs = 1000;
  std::vector<double> lin_base_epochs{0, 2, 5, 10, 20};

  ExperimentConfig() {
    train.net.hidden = {64, 64};
    train.opt.kind = OptKind::sgd;
    train.opt.momentum = 0.9;
    train.sched.kind = Schedule::Kind::constant;
    train.sched.base = 0.05;
    lin.batch_size = train.batch_size;
  }

  void validate() const {
    data.validate();
    train.validate(data.m_train);
    if (seeds.empty()) throw ConfigError("experiment needs at least one seed");
    if (children_per_spawn < 2) throw ConfigError("children_per_spawn must be >= 2");
    int64_t steps = train.steps_per_epoch(data.m_train);
    for (double ts : spawn_epochs) {
      if (ts < 0 || ts > static_cast<double>(train.epochs)) {
        throw ConfigError("spawn epoch " + fmt_double(ts) + " outside [0, " +
                          fmt_int(train.epochs) + "]");
      }
      double exact = ts * static_cast<double>(steps);
      if (std::abs(exact - std::round(exact)) > 1e-9) {
        throw ConfigError("spawn epoch " + fmt_double(ts) + " is not a whole optimizer step");
      }
    }
    if (kernel_subsample < 1) throw ConfigError("kernel_subsample must be >= 1");
    if (mk_cap < 1) throw ConfigError("mk_cap must be >= 1");
    if (dt.num <= 0 || dt.den <= 0) throw ConfigError("dt must be positive");
    if (heatmap_every.num <= 0 || heatmap_every.den <= 0) {
      throw ConfigError("heatmap_every must be positive");
    }
    if (n_alpha < 2) throw ConfigError("n_alpha must be >= 2");
    if (grid_n < 2) throw ConfigError("grid_n must be >= 2");
    if (!(grid_lo < grid_hi)) throw ConfigError("grid_lo must be below grid_hi");
    if (!(lin_lr_low > 0)) throw ConfigError("lr_low must be positive");
    if (lin_baseline_max_epochs < 1) throw ConfigError("baseline_max_epochs must be >= 1");
    for (double e : lin_base_epochs) {
      if (e < 0 || e > static_cast<double>(train.epochs)) {
        throw ConfigError("base epoch " + fmt_double(e) + " outside [0, " +
                          fmt_int(train.epochs) + "]");
      }
    }
    lin.validate(data.m_train);
  }
};

namespace detail {

inline void reject_unknown(const IniFile& f, const std::vector<std::string>& known_sections) {
  for (const auto& [name, sec] : f.sections) {
    if (std::find(known_sections.begin(), known_sections.end(), name) == known_sections.end()) {
      throw ConfigError(f.where(sec.line) + ": unknown section [" + name + "]");
    }
    for (const auto& [key, e] : sec.entries) {
      if (!e.used) {
        throw ConfigError(f.where(e.line) + ": unknown key '" + key + "' in [" + name + "]");
      }
    }
  }
}

}  // namespace detail

inline ExperimentConfig config_from_ini(const IniFile& f) {
  ExperimentConfig cfg;

  IniReader data(f, "data");
  cfg.data.source = data.str("source", cfg.data.source);
  cfg.data.seed = data.u64("seed", cfg.data.seed);
  cfg.data.m_train = data.i64("m_train", cfg.data.m_train);
  cfg.data.m_test = data.i64("m_test", cfg.data.m_test);
  cfg.data.num_classes = static_cast<int>(data.i64("num_classes", cfg.data.num_classes));
  cfg.data.input_dim = static_cast<int>(data.i64("input_dim", cfg.data.input_dim));
  cfg.data.separation = data.num("separation", cfg.data.separation);
  cfg.data.noise = data.num("noise", cfg.data.noise);
  cfg.data.train_path = data.str("train_path", cfg.data.train_path);
  cfg.data.test_path = data.str("test_path", cfg.data.test_path);
  if (cfg.data.source == "spirals") cfg.data.num_classes = 2;
  if (cfg.data.source != "file") cfg.data.input_dim = cfg.data.source == "spirals" ? 2 : cfg.data.input_dim;

  IniReader net(f, "net");
  cfg.train.net.kind = arch_from_name(net.str("arch", "mlp"));
  cfg.train.net.hidden = net.int_list("hidden", cfg.train.net.hidden);
  cfg.train.net.channels = net.int_list("channels", cfg.train.net.channels);
  cfg.train.net.bias = net.flag("bias", cfg.train.net.bias);
  cfg.train.net.in_channels = static_cast<int>(net.i64("in_channels", cfg.train.net.in_channels));
  cfg.train.net.in_h = static_cast<int>(net.i64("in_h", cfg.train.net.in_h));
  cfg.train.net.in_w = static_cast<int>(net.i64("in_w", cfg.train.net.in_w));
  cfg.train.net.input_dim = cfg.data.input_dim;
  cfg.train.net.num_classes = cfg.data.num_classes;

  IniReader opt(f, "optimizer");
  cfg.train.opt.kind = opt_from_name(opt.str("kind", opt_name(cfg.train.opt.kind)));
  cfg.train.opt.momentum = opt.num("momentum", cfg.train.opt.momentum);
  cfg.train.opt.weight_decay = opt.num("weight_decay", cfg.train.opt.weight_decay);
  cfg.train.opt.beta1 = opt.num("beta1", cfg.train.opt.beta1);
  cfg.train.opt.beta2 = opt.num("beta2", cfg.train.opt.beta2);
  cfg.train.opt.eps = opt.num("eps", cfg.train.opt.eps);

  IniReader sched(f, "schedule");
  std::string sk = sched.str("kind", "constant");
  if (sk == "constant") {
    cfg.train.sched.kind = Schedule::Kind::constant;
  } else if (sk == "step-decay") {
    cfg.train.sched.kind = Schedule::Kind::step_decay;
  } else {
    throw ConfigError("unknown schedule kind '" + sk + "'");
  }
  cfg.train.sched.base = sched.num("lr", cfg.train.sched.base);
  cfg.train.sched.factor = sched.num("factor", cfg.train.sched.factor);
  cfg.train.sched.boundaries = sched.num_list("boundaries", cfg.train.sched.boundaries);

  IniReader train(f, "train");
  cfg.train.loss = loss_from_name(train.str("loss", loss_name(cfg.train.loss)));
  cfg.train.epochs = train.i64("epochs", cfg.train.epochs);
  cfg.train.batch_size = train.i64("batch_size", cfg.train.batch_size);
  cfg.train.cadence = train.frac("cadence", cfg.train.cadence);
  cfg.train.precision_bits = static_cast<int>(train.i64("precision_bits", cfg.train.precision_bits));

  IniReader exp(f, "experiment");
  cfg.name = exp.str("name", cfg.name);
  cfg.seeds = exp.u64_list("seeds", cfg.seeds);
  if (exp.has("spawn_epochs") && exp.str("spawn_epochs", "") == "none") {
    cfg.spawn_epochs.clear();
  } else {
    cfg.spawn_epochs = exp.num_list("spawn_epochs", cfg.spawn_epochs);
  }
  cfg.children_per_spawn = static_cast<int>(exp.i64("children_per_spawn", cfg.children_per_spawn));
  cfg.inherit_momentum = exp.flag("inherit_momentum", cfg.inherit_momentum);
  cfg.out = exp.str("out", cfg.out.string());

  IniReader met(f, "metrics");
  cfg.metric_barrier = met.flag("barrier", cfg.metric_barrier);
  cfg.metric_kernel = met.flag("kernel_distance", cfg.metric_kernel);
  cfg.metric_relu = met.flag("relu_distance", cfg.metric_relu);
  cfg.metric_function = met.flag("function_distance", cfg.metric_function);
  cfg.metric_weight = met.flag("weight_distance", cfg.metric_weight);
  cfg.kernel_subsample = met.i64("kernel_subsample", cfg.kernel_subsample);
  cfg.mk_cap = met.i64("mk_cap", cfg.mk_cap);
  cfg.dt = met.frac("dt", cfg.dt);
  cfg.heatmap_every = met.frac("heatmap_every", cfg.heatmap_every);
  cfg.n_alpha = static_cast<int>(met.i64("n_alpha", cfg.n_alpha));
  cfg.grid_n = met.i64("grid_n", cfg.grid_n);
  cfg.grid_lo = met.num("grid_lo", cfg.grid_lo);
  cfg.grid_hi = met.num("grid_hi", cfg.grid_hi);

  IniReader lin(f, "linearized");
  cfg.lin.order = static_cast<int>(lin.i64("order", cfg.lin.order));
  cfg.lin.lr = lin.num("lr", cfg.lin.lr);
  cfg.lin.momentum = lin.num("momentum", cfg.lin.momentum);
  cfg.lin.epochs = lin.i64("epochs", cfg.lin.epochs);
  cfg.lin.batch_size = lin.i64("batch_size", cfg.train.batch_size);
  cfg.lin.cadence = lin.frac("cadence", cfg.lin.cadence);
  cfg.lin.cache_budget_mb = lin.i64("cache_budget_mb", cfg.lin.cache_budget_mb);
  cfg.lin_baseline = lin.flag("baseline", cfg.lin_baseline);
  cfg.lin_lr_low = lin.num("lr_low", cfg.lin_lr_low);
  cfg.lin_baseline_max_epochs = lin.i64("baseline_max_epochs", cfg.lin_baseline_max_epochs);
  cfg.lin_base_epochs = lin.num_list("base_epochs", cfg.lin_base_epochs);

  detail::reject_unknown(f, {"data", "net", "optimizer", "schedule", "train", "experiment",
                             "metrics", "linearized"});

  // default epoch lists are meant for the 40-epoch protocol; trim them to the
  // configured budget so short runs validate (explicit lists stay untouched)
  auto trim_to_budget = [&](std::vector<double>& v) {
    std::erase_if(v, [&](double e) { return e > static_cast<double>(cfg.train.epochs); });
  };
  if (!exp.has("spawn_epochs")) trim_to_budget(cfg.spawn_epochs);
  if (!lin.has("base_epochs")) trim_to_budget(cfg.lin_base_epochs);

  if (const char* env = std::getenv("DLLAB_OUT")) {
    if (*env != '\0') cfg.out = env;
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
  return config_from_ini(parse_ini_file(path));
}

inline nlohmann::ordered_json experiment_to_json(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  j["name"] = cfg.name;
  j["data"] = cfg.data;
  j["train"] = cfg.train;
  j["seeds"] = cfg.seeds;
  j["spawn_epochs"] = cfg.spawn_epochs;
  j["children_per_spawn"] = cfg.children_per_spawn;
  j["inherit_momentum"] = cfg.inherit_momentum;
  j["out"] = cfg.out.string();
  nlohmann::ordered_json m;
  m["barrier"] = cfg.metric_barrier;
  m["kernel_distance"] = cfg.metric_kernel;
  m["relu_distance"] = cfg.metric_relu;
  m["function_distance"] = cfg.metric_function;
  m["weight_distance"] = cfg.metric_weight;
  m["kernel_subsample"] = cfg.kernel_subsample;
  m["mk_cap"] = cfg.mk_cap;
  m["dt"] = cfg.dt.str();
  m["heatmap_every"] = cfg.heatmap_every.str();
  m["n_alpha"] = cfg.n_alpha;
  m["grid_n"] = cfg.grid_n;
  m["grid_lo"] = cfg.grid_lo;
  m["grid_hi"] = cfg.grid_hi;
  j["metrics"] = m;
  nlohmann::ordered_json l;
  l["order"] = cfg.lin.order;
  l["lr"] = cfg.lin.lr;
  l["momentum"] = cfg.lin.momentum;
  l["epochs"] = cfg.lin.epochs;
  l["batch_size"] = cfg.lin.batch_size;
  l["cadence"] = cfg.lin.cadence.str();
  l["cache_budget_mb"] = cfg.lin.cache_budget_mb;
  l["baseline"] = cfg.lin_baseline;
  l["lr_low"] = cfg.lin_lr_low;
  l["baseline_max_epochs"] = cfg.lin_baseline_max_epochs;
  l["base_epochs"] = cfg.lin_base_epochs;
  j["linearized"] = l;
  return j;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct Report {
  std::filesystem::path dir;
  nlohmann::ordered_json summary;
  std::vector<std::string> diverged;  // run ids that left the finite regime
  std::vector<std::string> gaps;      // per-cell metric failures

  // 0 when clean, 3 when the only failures are diverged runs.
  int suggested_exit() const { return diverged.empty() ? 0 : 3; }
};

namespace detail {

inline uint64_t hash_bytes(const std::string& bytes) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("short write to " + path.string());
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Class-balanced index subset, deterministic in the seed. Quotas are floor
// shares plus one for the first (m_sub mod K) classes; short classes donate
// their slack to a final round-robin fill.
inline std::vector<int64_t> stratified_subsample(const std::vector<int>& labels, int num_classes,
                                                 int64_t m_sub, uint64_t seed) {
  int64_t m = static_cast<int64_t>(labels.size());
  if (m_sub >= m) {
    std::vector<int64_t> all(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) all[static_cast<size_t>(i)] = i;
    return all;
  }
  std::vector<std::vector<int64_t>> per_class(static_cast<size_t>(num_classes));
  for (int64_t i = 0; i < m; ++i) {
    per_class.at(static_cast<size_t>(labels[static_cast<size_t>(i)])).push_back(i);
  }
  for (size_t k = 0; k < per_class.size(); ++k) {
    auto& rows = per_class[k];
    Rng rng(mix64(seed, 0x73747261, static_cast<uint64_t>(k)));
    for (size_t i = rows.size(); i > 1; --i) std::swap(rows[i - 1], rows[rng.below(static_cast<uint32_t>(i))]);
  }
  std::vector<int64_t> picked;
  std::vector<size_t> taken(per_class.size(), 0);
  for (size_t k = 0; k < per_class.size(); ++k) {
    int64_t quota = m_sub / num_classes + (static_cast<int64_t>(k) < m_sub % num_classes ? 1 : 0);
    taken[k] = std::min(per_class[k].size(), static_cast<size_t>(quota));
    picked.insert(picked.end(), per_class[k].begin(), per_class[k].begin() + static_cast<int64_t>(taken[k]));
  }
  size_t k = 0;
  while (static_cast<int64_t>(picked.size()) < m_sub) {
    if (taken[k] < per_class[k].size()) picked.push_back(per_class[k][taken[k]++]);
    k = (k + 1) % per_class.size();
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

inline ParamVector params_from_checkpoint(const NetworkSpec& spec, const Checkpoint& ck) {
  ParamVector w = ParamVector::zeros(spec.param_layout());
  if (static_cast<int64_t>(ck.weights.size()) != w.dim()) {
    throw Error("checkpoint size does not match network");
  }
  w.values = ck.weights;
  return w;
}

inline void merge_series(MetricSeries& into, const std::filesystem::path& run_dir) {
  MetricSeries s = MetricSeries::read_csv(RunPaths{run_dir}.metrics_csv());
  for (const MetricRecord& r : s.records()) into.append(r.run_id, r.metric, r.epoch, r.value);
}

}  // namespace detail

// Writes summary.json plus a manifest of config, versions, and content hashes
// of every emitted file. Timestamps never enter the manifest; the CLI stores
// wall-clock timing in a separate timings.json so reruns stay byte-identical.
inline void finalize_report(Report& rep, const ExperimentConfig& cfg, const std::string& kind) {
  rep.summary["gaps"] = rep.gaps;
  rep.summary["diverged"] = rep.diverged;
  detail::write_text_file(rep.dir / "summary.json", rep.summary.dump(2) + "\n");

  nlohmann::ordered_json manifest;
  manifest["name"] = cfg.name;
  manifest["kind"] = kind;
  manifest["library_version"] = kLibraryVersion;
  manifest["config"] = experiment_to_json(cfg);
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(rep.dir)) {
    if (!entry.is_regular_file()) continue;
    std::filesystem::path rel = std::filesystem::relative(entry.path(), rep.dir);
    if (rel == "manifest.json" || rel == "timings.json") continue;
    std::string s = rel.generic_string();
    bool hashed = rel.extension() == ".csv" || s == "summary.json";
    if (hashed) files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  nlohmann::ordered_json fh;
  for (const auto& rel : files) {
    fh[rel.generic_string()] =
        "fnv1a64:" + detail::hex64(detail::hash_bytes(detail::read_text_file(rep.dir / rel)));
  }
  manifest["files"] = fh;
  detail::write_text_file(rep.dir / "manifest.json", manifest.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Experiment pipelines
// ---------------------------------------------------------------------------

namespace detail {

struct SeedRuns {
  RunMeta parent;
  std::filesystem::path parent_dir;
  // children[i] pairs with spawn_epochs[i]; empty on parent divergence
  std::vector<std::vector<RunMeta>> children;
};

// Trains the parent for one seed and spawns the configured child groups.
// Divergence is recorded, not thrown.
inline SeedRuns run_protocol_for_seed(const ExperimentConfig& cfg, uint64_t seed,
                                      const std::filesystem::path& ckroot,
                                      const std::vector<double>& spawn_epochs, Report& rep) {
  SeedRuns out;
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  std::string pid = derive_run_id(cfg.name + "-parent", seed);
  out.parent = train_fresh(tc, cfg.data, ckroot, pid);
  out.parent_dir = ckroot / pid;
  if (out.parent.status == "diverged") {
    rep.diverged.push_back(pid);
    return out;
  }
  for (double ts : spawn_epochs) {
    SpawnOptions so;
    so.spawn_epoch = ts;
    so.num_children = cfg.children_per_spawn;
    so.inherit_momentum = cfg.inherit_momentum;
    std::vector<RunMeta> kids = spawn_children(out.parent_dir, so);
    for (const RunMeta& kid : kids) {
      if (kid.status == "diverged") rep.diverged.push_back(kid.run_id);
    }
    out.children.push_back(std::move(kids));
  }
  return out;
}

inline std::vector<double> heatmap_epochs(const ExperimentConfig& cfg) {
  std::vector<double> out;
  for (int64_t k = 0;; ++k) {
    double e = static_cast<double>(k * cfg.heatmap_every.num) /
               static_cast<double>(cfg.heatmap_every.den);
    if (e > static_cast<double>(cfg.train.epochs) + 1e-9) break;
    out.push_back(e);
  }
  return out;
}

inline std::string csv_cell(double v) { return std::isfinite(v) ? fmt_double(v) : "nan"; }

}  // namespace detail

// Panels: A learning curves for every run, B barrier vs spawn epoch,
// C/D ReLU and kernel distance over checkpoint pairs, E final child
// distances vs spawn epoch.
inline Report run_megaplot(const ExperimentConfig& cfg) {
  cfg.validate();
  Report rep;
  rep.dir = cfg.out / cfg.name;
  std::filesystem::remove_all(rep.dir);
  std::filesystem::create_directories(rep.dir / "panels");
  std::filesystem::path ckroot = rep.dir / "checkpoints";

  auto [train, test] = cfg.data.make();
  std::vector<int64_t> sub = detail::stratified_subsample(
      train.labels, train.num_classes, std::min(cfg.kernel_subsample, train.size()), cfg.data.seed);
  Tensor sub_xs = Tensor::zeros({static_cast<int64_t>(sub.size()), train.input_dim()});
  for (size_t i = 0; i < sub.size(); ++i) {
    std::copy(train.inputs.row(sub[i]), train.inputs.row(sub[i]) + train.input_dim(),
              sub_xs.row(static_cast<int64_t>(i)));
  }
  std::vector<double> hm_epochs = detail::heatmap_epochs(cfg);

  MetricSeries curves;
  std::ostringstream relu_csv, kernel_csv, barrier_csv, dist_csv;
  relu_csv << "seed,epoch_a,epoch_b,value\n";
  kernel_csv << "seed,epoch_a,epoch_b,value\n";
  barrier_csv << "seed,spawn_epoch,train_loss_barrier,train_error_barrier,test_error_barrier\n";
  dist_csv << "seed,spawn_epoch,function_distance,weight_distance,relu_distance,kernel_distance\n";

  nlohmann::ordered_json runs_json;
  std::map<double, std::vector<double>> barrier_by_spawn, fn_by_spawn;
  std::map<std::string, double> final_test_err;

  for (uint64_t seed : cfg.seeds) {
    detail::SeedRuns sr = detail::run_protocol_for_seed(cfg, seed, ckroot, cfg.spawn_epochs, rep);
    runs_json[sr.parent.run_id] = {{"role", "parent"}, {"seed", seed}, {"status", sr.parent.status}};
    detail::merge_series(curves, sr.parent_dir);
    if (sr.parent.status == "diverged") {
      rep.gaps.push_back("seed " + fmt_int(static_cast<int64_t>(seed)) +
                         ": parent diverged, panels skipped");
      continue;
    }

    {
      auto final_rows = MetricSeries::read_csv(RunPaths{sr.parent_dir}.metrics_csv());
      for (const auto& r : final_rows.records()) {
        if (r.metric == "test_error" && r.epoch == static_cast<double>(cfg.train.epochs)) {
          final_test_err[r.run_id] = r.value;
        }
      }
    }

    // panels C/D: one pattern and one gram per checkpoint, then all pairs
    std::vector<ActivationPattern> pats;
    std::vector<std::optional<Tensor>> grams;
    for (double e : hm_epochs) {
      Checkpoint ck = checkpoint_at_epoch(sr.parent_dir, e);
      ParamVector w = detail::params_from_checkpoint(cfg.train.net, ck);
      if (cfg.metric_relu) pats.push_back(activation_pattern(cfg.train.net, w, sub_xs));
      if (cfg.metric_kernel) {
        try {
          grams.emplace_back(ntk_gram(cfg.train.net, w, sub_xs, {}, cfg.mk_cap).values);
        } catch (const Error& err) {
          grams.emplace_back(std::nullopt);
          rep.gaps.push_back("kernel gram at epoch " + fmt_double(e) + " seed " +
                             fmt_int(static_cast<int64_t>(seed)) + ": " + err.what());
        }
      }
    }
    for (size_t i = 0; i < hm_epochs.size(); ++i) {
      for (size_t j = i; j < hm_epochs.size(); ++j) {
        std::string head = fmt_int(static_cast<int64_t>(seed)) + "," + fmt_double(hm_epochs[i]) +
                           "," + fmt_double(hm_epochs[j]) + ",";
        if (cfg.metric_relu) {
          double v = static_cast<double>(pattern_hamming(pats[i], pats[j])) /
                     static_cast<double>(pats[i].total_bits());
          relu_csv << head << fmt_double(v) << "\n";
        }
        if (cfg.metric_kernel) {
          if (grams[i].has_value() && grams[j].has_value()) {
            try {
              kernel_csv << head << fmt_double(kernel_distance_from_grams(*grams[i], *grams[j]))
                         << "\n";
            } catch (const Error& err) {
              kernel_csv << head << "nan\n";
              rep.gaps.push_back("kernel distance (" + fmt_double(hm_epochs[i]) + "," +
                                 fmt_double(hm_epochs[j]) + ") seed " +
                                 fmt_int(static_cast<int64_t>(seed)) + ": " + err.what());
            }
          } else {
            kernel_csv << head << "nan\n";
          }
        }
      }
    }

    // panels B/E over child pairs
    for (size_t si = 0; si < sr.children.size(); ++si) {
      double ts = cfg.spawn_epochs[si];
      const auto& kids = sr.children[si];
      for (const RunMeta& kid : kids) {
        runs_json[kid.run_id] = {{"role", "child"},
                                 {"seed", seed},
                                 {"spawn_epoch", ts},
                                 {"status", kid.status}};
        detail::merge_series(curves, ckroot / kid.run_id);
      }
      if (kids.size() < 2 || kids[0].status != "ok" || kids[1].status != "ok") {
        rep.gaps.push_back("spawn " + fmt_double(ts) + " seed " +
                           fmt_int(static_cast<int64_t>(seed)) + ": child pair incomplete");
        continue;
      }
      double t_end = static_cast<double>(cfg.train.epochs);
      ParamVector wa = detail::params_from_checkpoint(
          cfg.train.net, checkpoint_at_epoch(ckroot / kids[0].run_id, t_end));
      ParamVector wb = detail::params_from_checkpoint(
          cfg.train.net, checkpoint_at_epoch(ckroot / kids[1].run_id, t_end));
      std::string head = fmt_int(static_cast<int64_t>(seed)) + "," + fmt_double(ts) + ",";
      if (cfg.metric_barrier) {
        BarrierProfile bp =
            error_barrier(cfg.train.net, wa, wb, train, test, cfg.train.loss, cfg.n_alpha);
        barrier_csv << head << fmt_double(bp.barrier_train_loss) << ","
                    << fmt_double(bp.barrier_train_error) << ","
                    << fmt_double(bp.barrier_test_error) << "\n";
        barrier_by_spawn[ts].push_back(bp.barrier_test_error);
      }
      double fn = std::numeric_limits<double>::quiet_NaN();
      double ker = std::numeric_limits<double>::quiet_NaN();
      double rl = std::numeric_limits<double>::quiet_NaN();
      double wd = std::numeric_limits<double>::quiet_NaN();
      if (cfg.metric_function) {
        try {
          fn = function_distance(cfg.train.net, wa, wb, test);
          fn_by_spawn[ts].push_back(fn);
        } catch (const Error& err) {
          rep.gaps.push_back("function distance at spawn " + fmt_double(ts) + ": " + err.what());
        }
      }
      if (cfg.metric_weight) wd = weight_distance(wa, wb);
      if (cfg.metric_relu) rl = relu_distance(cfg.train.net, wa, wb, sub_xs);
      if (cfg.metric_kernel) {
        try {
          GramMatrix ga = ntk_gram(cfg.train.net, wa, sub_xs, {}, cfg.mk_cap);
          GramMatrix gb = ntk_gram(cfg.train.net, wb, sub_xs, {}, cfg.mk_cap);
          ker = kernel_distance_from_grams(ga.values, gb.values);
        } catch (const Error& err) {
          rep.gaps.push_back("kernel distance at spawn " + fmt_double(ts) + ": " + err.what());
        }
      }
      dist_csv << head << detail::csv_cell(fn) << "," << detail::csv_cell(wd) << ","
               << detail::csv_cell(rl) << "," << detail::csv_cell(ker) << "\n";
    }
  }

  curves.write_csv(rep.dir / "panels" / "learning_curves.csv");
  if (cfg.metric_relu) detail::write_text_file(rep.dir / "panels" / "relu_heatmap.csv", relu_csv.str());
  if (cfg.metric_kernel) {
    detail::write_text_file(rep.dir / "panels" / "kernel_heatmap.csv", kernel_csv.str());
  }
  if (!cfg.spawn_epochs.empty()) {
    if (cfg.metric_barrier) {
      detail::write_text_file(rep.dir / "panels" / "barrier_vs_spawn.csv", barrier_csv.str());
    }
    detail::write_text_file(rep.dir / "panels" / "child_distance_vs_spawn.csv", dist_csv.str());
  }

  rep.summary["runs"] = runs_json;
  rep.summary["final_test_error"] = final_test_err;
  nlohmann::ordered_json bmean, fmean;
  for (const auto& [ts, vals] : barrier_by_spawn) bmean[fmt_double(ts)] = mean(vals);
  for (const auto& [ts, vals] : fn_by_spawn) fmean[fmt_double(ts)] = mean(vals);
  rep.summary["mean_test_error_barrier_by_spawn"] = bmean;
  rep.summary["mean_function_distance_by_spawn"] = fmean;
  finalize_report(rep, cfg, "megaplot");
  return rep;
}

// Kernel velocity of the parent along training, next to the barrier-vs-spawn
// series, plus their Pearson correlation over the shared epochs.
inline Report run_barrier_velocity(const ExperimentConfig& cfg) {
  cfg.validate();
  int64_t num = cfg.dt.num * cfg.train.cadence.den;
  int64_t den = cfg.dt.den * cfg.train.cadence.num;
  if (num % den != 0) {
    throw ConfigError("dt " + cfg.dt.str() + " is not a multiple of the cadence " +
                      cfg.train.cadence.str() + "; velocities would fall between checkpoints");
  }
  int64_t dt_ticks = num / den;
  if (dt_ticks < 1) throw ConfigError("dt must cover at least one cadence tick");
  double dt_val = static_cast<double>(cfg.dt.num) / static_cast<double>(cfg.dt.den);

  Report rep;
  rep.dir = cfg.out / cfg.name;
  std::filesystem::remove_all(rep.dir);
  std::filesystem::create_directories(rep.dir / "panels");
  std::filesystem::path ckroot = rep.dir / "checkpoints";

  auto [train, test] = cfg.data.make();
  std::vector<int64_t> sub = detail::stratified_subsample(
      train.labels, train.num_classes, std::min(cfg.kernel_subsample, train.size()), cfg.data.seed);
  Tensor sub_xs = Tensor::zeros({static_cast<int64_t>(sub.size()), train.input_dim()});
  for (size_t i = 0; i < sub.size(); ++i) {
    std::copy(train.inputs.row(sub[i]), train.inputs.row(sub[i]) + train.input_dim(),
              sub_xs.row(static_cast<int64_t>(i)));
  }

  MetricSeries curves;
  std::ostringstream vel_csv, barrier_csv;
  vel_csv << "seed,epoch,kernel_velocity\n";
  barrier_csv << "seed,spawn_epoch,train_loss_barrier,train_error_barrier,test_error_barrier\n";
  nlohmann::ordered_json runs_json, corr_json;
  std::vector<double> corrs;
  std::map<double, std::vector<double>> barrier_by_spawn, velocity_at;

  int64_t n_ticks = cfg.train.epochs * cfg.train.cadence.den / cfg.train.cadence.num;

  for (uint64_t seed : cfg.seeds) {
    detail::SeedRuns sr = detail::run_protocol_for_seed(cfg, seed, ckroot, cfg.spawn_epochs, rep);
    runs_json[sr.parent.run_id] = {{"role", "parent"}, {"seed", seed}, {"status", sr.parent.status}};
    detail::merge_series(curves, sr.parent_dir);
    if (sr.parent.status == "diverged") {
      rep.gaps.push_back("seed " + fmt_int(static_cast<int64_t>(seed)) +
                         ": parent diverged, velocity skipped");
      continue;
    }

    std::vector<std::optional<Tensor>> grams;
    std::vector<double> tick_epochs;
    for (int64_t t = 0; t <= n_ticks; ++t) {
      double e = static_cast<double>(t * cfg.train.cadence.num) /
                 static_cast<double>(cfg.train.cadence.den);
      tick_epochs.push_back(e);
      Checkpoint ck = checkpoint_at_epoch(sr.parent_dir, e);
      ParamVector w = detail::params_from_checkpoint(cfg.train.net, ck);
      try {
        grams.emplace_back(ntk_gram(cfg.train.net, w, sub_xs, {}, cfg.mk_cap).values);
      } catch (const Error& err) {
        grams.emplace_back(std::nullopt);
        rep.gaps.push_back("kernel gram at epoch " + fmt_double(e) + " seed " +
                           fmt_int(static_cast<int64_t>(seed)) + ": " + err.what());
      }
    }
    std::map<double, double> vel_of;
    for (int64_t t = 0; t + dt_ticks <= n_ticks; ++t) {
      std::string head =
          fmt_int(static_cast<int64_t>(seed)) + "," + fmt_double(tick_epochs[t]) + ",";
      if (grams[t].has_value() && grams[t + dt_ticks].has_value()) {
        try {
          double v = kernel_distance_from_grams(*grams[t], *grams[t + dt_ticks]) / dt_val;
          vel_csv << head << fmt_double(v) << "\n";
          vel_of[tick_epochs[t]] = v;
          velocity_at[tick_epochs[t]].push_back(v);
        } catch (const Error& err) {
          vel_csv << head << "nan\n";
          rep.gaps.push_back("velocity at epoch " + fmt_double(tick_epochs[t]) + ": " + err.what());
        }
      } else {
        vel_csv << head << "nan\n";
      }
    }

    std::vector<double> bvals, vvals;
    for (size_t si = 0; si < sr.children.size(); ++si) {
      double ts = cfg.spawn_epochs[si];
      const auto& kids = sr.children[si];
      for (const RunMeta& kid : kids) {
        runs_json[kid.run_id] = {{"role", "child"},
                                 {"seed", seed},
                                 {"spawn_epoch", ts},
                                 {"status", kid.status}};
        detail::merge_series(curves, ckroot / kid.run_id);
      }
      if (kids.size() < 2 || kids[0].status != "ok" || kids[1].status != "ok") {
        rep.gaps.push_back("spawn " + fmt_double(ts) + " seed " +
                           fmt_int(static_cast<int64_t>(seed)) + ": child pair incomplete");
        continue;
      }
      double t_end = static_cast<double>(cfg.train.epochs);
      ParamVector wa = detail::params_from_checkpoint(
          cfg.train.net, checkpoint_at_epoch(ckroot / kids[0].run_id, t_end));
      ParamVector wb = detail::params_from_checkpoint(
          cfg.train.net, checkpoint_at_epoch(ckroot / kids[1].run_id, t_end));
      BarrierProfile bp =
          error_barrier(cfg.train.net, wa, wb, train, test, cfg.train.loss, cfg.n_alpha);
      barrier_csv << fmt_int(static_cast<int64_t>(seed)) << "," << fmt_double(ts) << ","
                  << fmt_double(bp.barrier_train_loss) << "," << fmt_double(bp.barrier_train_error)
                  << "," << fmt_double(bp.barrier_test_error) << "\n";
      barrier_by_spawn[ts].push_back(bp.barrier_test_error);
      auto it = vel_of.find(ts);
      if (it != vel_of.end()) {
        bvals.push_back(bp.barrier_test_error);
        vvals.push_back(it->second);
      }
    }
    if (bvals.size() >= 3) {
      try {
        double r = pearson(bvals, vvals);
        corr_json[fmt_int(static_cast<int64_t>(seed))] = r;
        corrs.push_back(r);
      } catch (const Error& err) {
        rep.gaps.push_back("correlation seed " + fmt_int(static_cast<int64_t>(seed)) + ": " +
                           err.what());
      }
    }
  }

  curves.write_csv(rep.dir / "panels" / "learning_curves.csv");
  detail::write_text_file(rep.dir / "panels" / "velocity.csv", vel_csv.str());
  if (!cfg.spawn_epochs.empty()) {
    detail::write_text_file(rep.dir / "panels" / "barrier_vs_spawn.csv", barrier_csv.str());
  }
  rep.summary["runs"] = runs_json;
  nlohmann::ordered_json bmean, vmean;
  for (const auto& [ts, vals] : barrier_by_spawn) bmean[fmt_double(ts)] = mean(vals);
  for (const auto& [e, vals] : velocity_at) vmean[fmt_double(e)] = mean(vals);
  rep.summary["mean_test_error_barrier_by_spawn"] = bmean;
  rep.summary["mean_velocity_by_epoch"] = vmean;
  rep.summary["barrier_velocity_pearson"] = corr_json;
  if (!corrs.empty()) rep.summary["mean_barrier_velocity_pearson"] = mean(corrs);
  finalize_report(rep, cfg, "barrier-velocity");
  return rep;
}

// ---------------------------------------------------------------------------
// Plane scans
// ---------------------------------------------------------------------------

struct PlaneRunArgs {
  // all empty: train a parent with the first seed and spawn a fresh pair
  std::string parent_id;
  std::string child_a_id;
  std::string child_b_id;
  std::filesystem::path runs_root;  // where <run_id>/run.json lives, for existing runs
  double spawn_epoch = -1;          // <0: take the children's recorded spawn epoch
  bool tangent = true;
};

// Scans the affine plane through (parent at the spawn point, child A final,
// child B final) over the test set, optionally with the order-1 expansion
// around the spawn point, and projects every stored checkpoint onto it.
inline Report run_plane(const ExperimentConfig& cfg, PlaneRunArgs args = {}) {
  cfg.validate();
  Report rep;
  bool self_contained = args.parent_id.empty();
  rep.dir = cfg.out / (self_contained ? cfg.name : cfg.name + "-plane");
  std::filesystem::remove_all(rep.dir);
  std::filesystem::create_directories(rep.dir / "panels");
  std::filesystem::path ckroot = rep.dir / "checkpoints";

  if (self_contained) {
    double ts = args.spawn_epoch >= 0
                    ? args.spawn_epoch
                    : (cfg.spawn_epochs.empty() ? 0.0 : cfg.spawn_epochs.front());
    detail::SeedRuns sr = detail::run_protocol_for_seed(cfg, cfg.seeds.front(), ckroot, {ts}, rep);
    if (sr.parent.status == "diverged") {
      rep.gaps.push_back("parent diverged; no plane to scan");
      finalize_report(rep, cfg, "plane");
      return rep;
    }
    args.parent_id = sr.parent.run_id;
    args.child_a_id = sr.children.at(0).at(0).run_id;
    args.child_b_id = sr.children.at(0).at(1).run_id;
    args.spawn_epoch = ts;
  } else {
    if (args.child_a_id.empty() || args.child_b_id.empty()) {
      throw ConfigError("plane needs both child run ids when a parent id is given");
    }
    if (args.runs_root.empty()) {
      throw ConfigError("plane needs the directory holding the named runs");
    }
    ckroot = args.runs_root;
  }

  std::filesystem::path pdir = ckroot / args.parent_id;
  std::filesystem::path adir = ckroot / args.child_a_id;
  std::filesystem::path bdir = ckroot / args.child_b_id;
  RunMeta pmeta = load_run_meta(RunPaths{pdir}.run_json());
  RunMeta ameta = load_run_meta(RunPaths{adir}.run_json());
  RunMeta bmeta = load_run_meta(RunPaths{bdir}.run_json());
  const NetworkSpec& net = pmeta.config.net;
  double ts = args.spawn_epoch;
  if (ts < 0) {
    if (!ameta.lineage.has_parent || !bmeta.lineage.has_parent) {
      throw ConfigError("plane children carry no spawn lineage; pass the spawn epoch explicitly");
    }
    if (ameta.lineage.spawn_epoch != bmeta.lineage.spawn_epoch) {
      throw ConfigError("plane children were spawned at different epochs");
    }
    ts = ameta.lineage.spawn_epoch;
  }
  bool broken = false;
  for (const RunMeta* m : {&pmeta, &ameta, &bmeta}) {
    if (m->status == "diverged") {
      rep.diverged.push_back(m->run_id);
      broken = true;
    }
  }
  if (broken) {
    rep.gaps.push_back("anchor run diverged; no plane to scan");
    finalize_report(rep, cfg, "plane");
    return rep;
  }

  auto [train, test] = pmeta.data.make();
  (void)train;
  double t_end = static_cast<double>(ameta.config.epochs);
  ParamVector wp = detail::params_from_checkpoint(net, checkpoint_at_epoch(pdir, ts));
  ParamVector wa = detail::params_from_checkpoint(net, checkpoint_at_epoch(adir, t_end));
  ParamVector wb = detail::params_from_checkpoint(net, checkpoint_at_epoch(bdir, t_end));

  PlaneScanOptions opt;
  opt.n = cfg.grid_n;
  opt.lo = cfg.grid_lo;
  opt.hi = cfg.grid_hi;
  if (args.tangent) opt.tangent_anchor = wp;
  PlaneScan scan = plane_scan(net, wp, wa, wb, test, pmeta.config.loss, opt);
  scan.write_csv(rep.dir / "panels" / "plane_scan.csv");

  // checkpoint projections of all three trajectories
  {
    std::ostringstream proj;
    proj << "run,epoch,u,v,residual\n";
    ParamVector d1 = wa, d2 = wb;
    for (int64_t i = 0; i < wp.dim(); ++i) {
      d1.values[static_cast<size_t>(i)] -= wp.values[static_cast<size_t>(i)];
      d2.values[static_cast<size_t>(i)] -= wp.values[static_cast<size_t>(i)];
    }
    for (const auto& [rid, dir] : std::vector<std::pair<std::string, std::filesystem::path>>{
             {args.parent_id, pdir}, {args.child_a_id, adir}, {args.child_b_id, bdir}}) {
      RunMeta meta = load_run_meta(RunPaths{dir}.run_json());
      int64_t steps = meta.config.steps_per_epoch(meta.data.m_train);
      for (const auto& [iter, path] : list_checkpoints(dir)) {
        Checkpoint ck = load_checkpoint(path);
        ParamVector w = detail::params_from_checkpoint(net, ck);
        PlanePoint p = project_onto_plane(wp.values, d1.values, d2.values, w.values);
        double epoch = static_cast<double>(iter) / static_cast<double>(steps);
        proj << rid << "," << fmt_double(epoch) << "," << fmt_double(p.u) << ","
             << fmt_double(p.v) << "," << fmt_double(p.residual) << "\n";
      }
    }
    detail::write_text_file(rep.dir / "panels" / "plane_projections.csv", proj.str());
  }

  // anchors: direct evaluation vs the errors the runs recorded
  auto stored_err = [&](const std::filesystem::path& dir, double epoch) {
    MetricSeries s = MetricSeries::read_csv(RunPaths{dir}.metrics_csv());
    for (const auto& r : s.records()) {
      if (r.metric == "test_error" && r.epoch == epoch) return r.value;
    }
    return std::numeric_limits<double>::quiet_NaN();
  };
  LossKind loss = pmeta.config.loss;
  nlohmann::ordered_json anchors;
  anchors["parent"] = {{"epoch", ts},
                       {"stored", stored_err(pdir, ts)},
                       {"evaluated", evaluate(net, wp, test.inputs, test.labels, loss).error}};
  anchors["child_a"] = {{"epoch", t_end},
                        {"stored", stored_err(adir, t_end)},
                        {"evaluated", evaluate(net, wa, test.inputs, test.labels, loss).error}};
  anchors["child_b"] = {{"epoch", t_end},
                        {"stored", stored_err(bdir, t_end)},
                        {"evaluated", evaluate(net, wb, test.inputs, test.labels, loss).error}};
  rep.summary["spawn_epoch"] = ts;
  rep.summary["anchors"] = anchors;
  try {
    rep.summary["inter_child_function_distance"] = function_distance(net, wa, wb, test);
  } catch (const Error& err) {
    rep.gaps.push_back(std::string("inter-child function distance: ") + err.what());
  }
  rep.summary["grid_n"] = cfg.grid_n;
  finalize_report(rep, cfg, "plane");
  return rep;
}

// ---------------------------------------------------------------------------
// Linearization sweep
// ---------------------------------------------------------------------------

// For every (seed, base epoch): train the order-n Taylor model around the
// parent checkpoint, optionally run the low-lr nonlinear baseline from the
// same point, and optionally measure the sibling barrier at that epoch.
inline Report run_linearization_sweep(const ExperimentConfig& cfg) {
  cfg.validate();
  Report rep;
  rep.dir = cfg.out / cfg.name;
  std::filesystem::remove_all(rep.dir);
  std::filesystem::create_directories(rep.dir / "panels");
  std::filesystem::path ckroot = rep.dir / "checkpoints";

  auto [train, test] = cfg.data.make();
  MetricSeries curves, lin_curves, lowlr_curves;
  std::ostringstream sweep_csv;
  sweep_csv << "seed,base_epoch,lin_test_err,lin_best_epoch,lowlr_test_err,lowlr_epochs,"
               "advantage,barrier_test_error\n";
  nlohmann::ordered_json runs_json;
  std::map<double, std::vector<double>> lin_by_base, adv_by_base, barrier_by_base;

  std::vector<double> spawn_list = cfg.metric_barrier ? cfg.lin_base_epochs : std::vector<double>{};
  for (uint64_t seed : cfg.seeds) {
    detail::SeedRuns sr = detail::run_protocol_for_seed(cfg, seed, ckroot, spawn_list, rep);
    runs_json[sr.parent.run_id] = {{"role", "parent"}, {"seed", seed}, {"status", sr.parent.status}};
    detail::merge_series(curves, sr.parent_dir);
    if (sr.parent.status == "diverged") {
      rep.gaps.push_back("seed " + fmt_int(static_cast<int64_t>(seed)) +
                         ": parent diverged, sweep skipped");
      continue;
    }
    for (size_t bi = 0; bi < cfg.lin_base_epochs.size(); ++bi) {
      double be = cfg.lin_base_epochs[bi];
      ParamVector base = detail::params_from_checkpoint(
          cfg.train.net, checkpoint_at_epoch(sr.parent_dir, be));
      std::string tag = "s" + fmt_int(static_cast<int64_t>(seed)) + "-e" + fmt_double(be);

      LinearizedConfig lc = cfg.lin;
      lc.seed = mix64(seed, epoch_bits(be), 0x6c696e);
      LinearizedResult lin = train_linearized(cfg.train.net, base, train, test, cfg.train.loss,
                                              lc, "lin-" + tag);
      for (const auto& r : lin.series.records()) {
        lin_curves.append(r.run_id, r.metric, r.epoch, r.value);
      }
      if (lin.status == "diverged") rep.diverged.push_back("lin-" + tag);

      double base_err = std::numeric_limits<double>::quiet_NaN();
      int64_t base_epochs = 0;
      if (cfg.lin_baseline) {
        BaselineResult bl = nonlinear_low_lr_baseline(
            cfg.train.net, base, train, test, cfg.train.loss, cfg.lin_lr_low,
            cfg.lin_baseline_max_epochs, cfg.lin.batch_size, cfg.lin.momentum,
            mix64(seed, epoch_bits(be), 0x6c6f77), "lowlr-" + tag);
        for (const auto& r : bl.series.records()) {
          lowlr_curves.append(r.run_id, r.metric, r.epoch, r.value);
        }
        if (bl.status == "diverged") {
          rep.diverged.push_back("lowlr-" + tag);
        } else {
          base_err = bl.final_test_error;
          base_epochs = bl.epochs_ran;
        }
      }

      double barrier = std::numeric_limits<double>::quiet_NaN();
      if (cfg.metric_barrier) {
        const auto& kids = sr.children[bi];
        if (kids.size() >= 2 && kids[0].status == "ok" && kids[1].status == "ok") {
          double t_end = static_cast<double>(cfg.train.epochs);
          ParamVector ka = detail::params_from_checkpoint(
              cfg.train.net, checkpoint_at_epoch(ckroot / kids[0].run_id, t_end));
          ParamVector kb = detail::params_from_checkpoint(
              cfg.train.net, checkpoint_at_epoch(ckroot / kids[1].run_id, t_end));
          barrier = error_barrier(cfg.train.net, ka, kb, train, test, cfg.train.loss, cfg.n_alpha)
                        .barrier_test_error;
          barrier_by_base[be].push_back(barrier);
          for (const RunMeta& kid : kids) {
            runs_json[kid.run_id] = {{"role", "child"},
                                     {"seed", seed},
                                     {"spawn_epoch", be},
                                     {"status", kid.status}};
            detail::merge_series(curves, ckroot / kid.run_id);
          }
        } else {
          rep.gaps.push_back("barrier at base " + fmt_double(be) + " seed " +
                             fmt_int(static_cast<int64_t>(seed)) + ": child pair incomplete");
        }
      }

      double adv = std::numeric_limits<double>::quiet_NaN();
      if (lin.status == "ok") {
        lin_by_base[be].push_back(lin.best_test_error);
        if (std::isfinite(base_err)) {
          adv = nonlinear_advantage(lin.best_test_error, base_err);
          adv_by_base[be].push_back(adv);
        }
      }
      sweep_csv << fmt_int(static_cast<int64_t>(seed)) << "," << fmt_double(be) << ","
                << (lin.status == "ok" ? fmt_double(lin.best_test_error) : "nan") << ","
                << (lin.status == "ok" ? fmt_double(lin.best_epoch) : "nan") << ","
                << detail::csv_cell(base_err) << "," << fmt_int(base_epochs) << ","
                << detail::csv_cell(adv) << "," << detail::csv_cell(barrier) << "\n";
    }
  }

  curves.write_csv(rep.dir / "panels" / "learning_curves.csv");
  lin_curves.write_csv(rep.dir / "panels" / "linearized_curves.csv");
  if (cfg.lin_baseline) lowlr_curves.write_csv(rep.dir / "panels" / "lowlr_curves.csv");
  detail::write_text_file(rep.dir / "panels" / "linearization_sweep.csv", sweep_csv.str());

  rep.summary["runs"] = runs_json;
  nlohmann::ordered_json lmean, amean, bmean;
  std::vector<double> bases, lin_means, adv_means, barrier_means;
  for (const auto& [be, vals] : lin_by_base) {
    lmean[fmt_double(be)] = mean(vals);
    bases.push_back(be);
    lin_means.push_back(mean(vals));
  }
  for (const auto& [be, vals] : adv_by_base) {
    amean[fmt_double(be)] = mean(vals);
    adv_means.push_back(mean(vals));
  }
  for (const auto& [be, vals] : barrier_by_base) {
    bmean[fmt_double(be)] = mean(vals);
    barrier_means.push_back(mean(vals));
  }
  rep.summary["mean_lin_test_err_by_base"] = lmean;
  rep.summary["mean_advantage_by_base"] = amean;
  rep.summary["mean_barrier_by_base"] = bmean;
  if (bases.size() >= 3) {
    try {
      rep.summary["lin_err_vs_base_spearman"] = spearman(bases, lin_means);
    } catch (const Error& err) {
      rep.gaps.push_back(std::string("spearman: ") + err.what());
    }
  }
  if (adv_means.size() == barrier_means.size() && adv_means.size() >= 3) {
    try {
      rep.summary["advantage_vs_barrier_pearson"] = pearson(adv_means, barrier_means);
    } catch (const Error& err) {
      rep.gaps.push_back(std::string("pearson: ") + err.what());
    }
  }
  finalize_report(rep, cfg, "lin-sweep");
  return rep;
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

// Moving average over a +-half_width epoch window within one (run, metric)
// series. Used only for display; raw CSVs are never rewritten.
inline std::vector<MetricRecord> smooth_series(std::vector<MetricRecord> rows,
                                               double half_width = 5.0) {
  std::sort(rows.begin(), rows.end(), [](const MetricRecord& a, const MetricRecord& b) {
    return a.epoch < b.epoch;
  });
  std::vector<MetricRecord> out = rows;
  for (size_t i = 0; i < rows.size(); ++i) {
    double lo = rows[i].epoch - half_width, hi = rows[i].epoch + half_width;
    double acc = 0;
    int64_t n = 0;
    for (const auto& r : rows) {
      if (r.epoch >= lo && r.epoch <= hi) {
        acc += r.value;
        ++n;
      }
    }
    out[i].value = acc / static_cast<double>(n);
  }
  return out;
}

// Text digest of a finished experiment directory.
inline std::string render_report(const std::filesystem::path& exp_dir, bool smooth = false) {
  std::ostringstream out;
  std::filesystem::path manifest_path = exp_dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) {
    throw ConfigError("no manifest.json under " + exp_dir.string());
  }
  nlohmann::ordered_json manifest;
  try {
    manifest = nlohmann::ordered_json::parse(detail::read_text_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad manifest.json: " + std::string(e.what()));
  }
  out << "experiment: " << manifest.value("name", "?") << " (" << manifest.value("kind", "?")
      << ", library " << manifest.value("library_version", "?") << ")\n";
  if (manifest.contains("files")) {
    out << "files:\n";
    for (const auto& [rel, hash] : manifest["files"].items()) {
      out << "  " << rel << "  " << hash.get<std::string>() << "\n";
    }
  }
  std::filesystem::path summary_path = exp_dir / "summary.json";
  if (std::filesystem::exists(summary_path)) {
    out << "summary:\n";
    nlohmann::ordered_json summary =
        nlohmann::ordered_json::parse(detail::read_text_file(summary_path));
    std::istringstream lines(summary.dump(2));
    std::string line;
    while (std::getline(lines, line)) out << "  " << line << "\n";
  }
  std::filesystem::path curves_path = exp_dir / "panels" / "learning_curves.csv";
  if (std::filesystem::exists(curves_path)) {
    MetricSeries s = MetricSeries::read_csv(curves_path);
    std::map<std::pair<std::string, std::string>, std::vector<MetricRecord>> groups;
    for (const auto& r : s.records()) groups[{r.run_id, r.metric}].push_back(r);
    out << (smooth ? "final values (moving average over +-5 epochs):\n" : "final values:\n");
    for (auto& [key, rows] : groups) {
      if (key.second != "test_error" && key.second != "train_loss") continue;
      std::vector<MetricRecord> use = smooth ? smooth_series(rows) : rows;
      std::sort(use.begin(), use.end(), [](const MetricRecord& a, const MetricRecord& b) {
        return a.epoch < b.epoch;
      });
      out << "  " << key.first << " " << key.second << " = " << fmt_double(use.back().value)
          << " @ epoch " << fmt_double(use.back().epoch) << "\n";
    }
  }
  return out.str();
}

}  // namespace dllab
