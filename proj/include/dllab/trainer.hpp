#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dllab/autodiff.hpp"
#include "dllab/checkpoint.hpp"
#include "dllab/common.hpp"
#include "dllab/data.hpp"
#include "dllab/metric_series.hpp"
#include "dllab/network.hpp"
#include "dllab/optimizer.hpp"
#include "dllab/rng.hpp"

namespace dllab {

using json = nlohmann::ordered_json;

// Stream tags keep the init draw, the batch shuffles, and child seeds on
// independent substreams of one user-facing seed.
inline constexpr uint64_t kInitStream = 0x696e6974;     // "init"
inline constexpr uint64_t kShuffleStream = 0x73687566;  // "shuf"

// ---------------------------------------------------------------------------
// Run identifiers
// ---------------------------------------------------------------------------

inline uint64_t hash_str(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string format_uuid(uint64_t a, uint64_t b) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%08x-%04x-%04x-%04x-%012llx",
                static_cast<unsigned>(a >> 32), static_cast<unsigned>((a >> 16) & 0xffff),
                static_cast<unsigned>(a & 0xffff), static_cast<unsigned>(b >> 48),
                static_cast<unsigned long long>(b & 0xffffffffffffULL));
  return std::string(buf);
}

inline std::string derive_run_id(const std::string& scope, uint64_t seed) {
  uint64_t h = hash_str(scope);
  return format_uuid(mix64(h, seed), mix64(seed, h));
}

inline uint64_t epoch_bits(double epoch) {
  uint64_t e = 0;
  std::memcpy(&e, &epoch, sizeof(e));
  return e;
}

inline uint64_t derive_child_seed(uint64_t parent_seed, uint32_t child_index, double spawn_epoch) {
  return mix64(parent_seed, epoch_bits(spawn_epoch), child_index + 1);
}

inline std::string derive_child_id(const std::string& parent_id, double spawn_epoch,
                                   uint32_t child_index, uint64_t child_seed) {
  uint64_t h = hash_str(parent_id);
  return format_uuid(mix64(h, epoch_bits(spawn_epoch), child_index), mix64(child_seed, h));
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  NetworkSpec net;
  OptimizerConfig opt;
  Schedule sched;
  LossKind loss = LossKind::cross_entropy;
  int64_t epochs = 40;
  int64_t batch_size = 60;
  Fraction cadence{1, 3};  // checkpoint/metric interval, in epochs
  uint64_t seed = 1;
  int precision_bits = 64;

  int64_t steps_per_epoch(int64_t m_train) const { return m_train / batch_size; }

  // Whole optimizer steps between metric/checkpoint emissions.
  int64_t tick_iters(int64_t m_train) const {
    int64_t steps = steps_per_epoch(m_train);
    if ((steps * cadence.num) % cadence.den != 0) {
      throw ConfigError("cadence " + cadence.str() + " does not land on whole optimizer steps (" +
                        fmt_int(steps) + " steps per epoch)");
    }
    int64_t t = steps * cadence.num / cadence.den;
    if (t < 1) throw ConfigError("cadence " + cadence.str() + " is shorter than one optimizer step");
    return t;
  }

  void validate(int64_t m_train) const {
    net.validate();
    opt.validate();
    sched.validate();
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (m_train % batch_size != 0) {
      throw ConfigError("batch_size " + fmt_int(batch_size) + " must divide m_train " +
                        fmt_int(m_train));
    }
    if (precision_bits != 64 && precision_bits != 32) {
      throw ConfigError("precision_bits must be 64 or 32");
    }
    if (cadence.num <= 0) throw ConfigError("cadence must be positive");
    (void)tick_iters(m_train);
  }
};

// ---------------------------------------------------------------------------
// JSON mappings for run metadata
// ---------------------------------------------------------------------------

inline void to_json(json& j, const NetworkSpec& s) {
  j = json{{"arch", arch_name(s.kind)},
           {"input_dim", s.input_dim},
           {"num_classes", s.num_classes},
           {"bias", s.bias}};
  if (s.kind == ArchKind::mlp) {
    j["hidden"] = s.hidden;
  } else {
    j["channels"] = s.channels;
    j["in_channels"] = s.in_channels;
    j["in_h"] = s.in_h;
    j["in_w"] = s.in_w;
  }
}

inline void from_json(const json& j, NetworkSpec& s) {
  s.kind = arch_from_name(j.at("arch").get<std::string>());
  s.input_dim = j.at("input_dim").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  s.bias = j.value("bias", true);
  if (s.kind == ArchKind::mlp) {
    s.hidden = j.value("hidden", std::vector<int>{});
  } else {
    s.channels = j.at("channels").get<std::vector<int>>();
    s.in_channels = j.at("in_channels").get<int>();
    s.in_h = j.at("in_h").get<int>();
    s.in_w = j.at("in_w").get<int>();
  }
}

inline void to_json(json& j, const OptimizerConfig& c) {
  j = json{{"kind", opt_name(c.kind)}, {"weight_decay", c.weight_decay}};
  if (c.kind == OptKind::sgd) {
    j["momentum"] = c.momentum;
  } else {
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["eps"] = c.eps;
  }
}

inline void from_json(const json& j, OptimizerConfig& c) {
  c.kind = opt_from_name(j.at("kind").get<std::string>());
  c.weight_decay = j.value("weight_decay", 0.0);
  c.momentum = j.value("momentum", 0.0);
  c.beta1 = j.value("beta1", 0.9);
  c.beta2 = j.value("beta2", 0.999);
  c.eps = j.value("eps", 1e-8);
}

inline void to_json(json& j, const Schedule& s) {
  if (s.kind == Schedule::Kind::constant) {
    j = json{{"kind", "constant"}, {"base", s.base}};
  } else {
    j = json{{"kind", "step-decay"}, {"base", s.base}, {"factor", s.factor},
             {"boundaries", s.boundaries}};
  }
}

inline void from_json(const json& j, Schedule& s) {
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "constant") {
    s.kind = Schedule::Kind::constant;
  } else if (kind == "step-decay") {
    s.kind = Schedule::Kind::step_decay;
  } else {
    throw ConfigError("unknown schedule kind '" + kind + "'");
  }
  s.base = j.at("base").get<double>();
  s.factor = j.value("factor", 0.1);
  s.boundaries = j.value("boundaries", std::vector<double>{});
}

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"net", c.net},
           {"optimizer", c.opt},
           {"schedule", c.sched},
           {"loss", loss_name(c.loss)},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"cadence", c.cadence.str()},
           {"seed", c.seed},
           {"precision_bits", c.precision_bits}};
}

inline void from_json(const json& j, TrainConfig& c) {
  c.net = j.at("net").get<NetworkSpec>();
  c.opt = j.at("optimizer").get<OptimizerConfig>();
  c.sched = j.at("schedule").get<Schedule>();
  c.loss = loss_from_name(j.at("loss").get<std::string>());
  c.epochs = j.at("epochs").get<int64_t>();
  c.batch_size = j.at("batch_size").get<int64_t>();
  c.cadence = Fraction::parse(j.at("cadence").get<std::string>());
  c.seed = j.at("seed").get<uint64_t>();
  c.precision_bits = j.value("precision_bits", 64);
}

inline void to_json(json& j, const DataConfig& d) {
  j = json{{"source", d.source}, {"seed", d.seed}, {"m_train", d.m_train}, {"m_test", d.m_test}};
  if (d.source == "spirals") {
    j["noise"] = d.noise;
  } else if (d.source == "blobs") {
    j["num_classes"] = d.num_classes;
    j["input_dim"] = d.input_dim;
    j["separation"] = d.separation;
  } else if (d.source == "file") {
    j["train_path"] = d.train_path;
    j["test_path"] = d.test_path;
  }
}

inline void from_json(const json& j, DataConfig& d) {
  d.source = j.at("source").get<std::string>();
  d.seed = j.value("seed", uint64_t{0});
  d.m_train = j.value("m_train", int64_t{0});
  d.m_test = j.value("m_test", int64_t{0});
  d.noise = j.value("noise", 0.1);
  d.num_classes = j.value("num_classes", 2);
  d.input_dim = j.value("input_dim", 2);
  d.separation = j.value("separation", 6.0);
  d.train_path = j.value("train_path", std::string{});
  d.test_path = j.value("test_path", std::string{});
}

inline void to_json(json& j, const Lineage& l) {
  if (!l.has_parent) {
    j = nullptr;
    return;
  }
  j = json{{"parent_id", l.parent_id},
           {"spawn_epoch", l.spawn_epoch},
           {"child_index", l.child_index}};
}

inline void from_json(const json& j, Lineage& l) {
  if (j.is_null()) {
    l = Lineage{};
    return;
  }
  l.has_parent = true;
  l.parent_id = j.at("parent_id").get<std::string>();
  l.spawn_epoch = j.at("spawn_epoch").get<double>();
  l.child_index = j.at("child_index").get<uint32_t>();
}

// ---------------------------------------------------------------------------
// Run directory layout and metadata
// ---------------------------------------------------------------------------

struct RunPaths {
  std::filesystem::path dir;

  std::filesystem::path run_json() const { return dir / "run.json"; }
  std::filesystem::path metrics_csv() const { return dir / "metrics.csv"; }
  std::filesystem::path ckpt_dir() const { return dir / "checkpoints"; }

  std::filesystem::path ckpt(int64_t iteration) const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "iter_%08lld.dlck", static_cast<long long>(iteration));
    return ckpt_dir() / buf;
  }
};

struct RunMeta {
  std::string run_id;
  TrainConfig config;
  DataConfig data;
  Lineage lineage;
  std::string status = "running";  // running | ok | diverged
  double stopped_epoch = 0;
};

inline void save_run_meta(const RunMeta& meta, const std::filesystem::path& path) {
  json j{{"run_id", meta.run_id},
         {"status", meta.status},
         {"stopped_epoch", meta.stopped_epoch},
         {"config", meta.config},
         {"data", meta.data},
         {"lineage", meta.lineage}};
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot write " + path.string());
  f << j.dump(2) << "\n";
  if (!f) throw Error("write failed: " + path.string());
}

inline RunMeta load_run_meta(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read " + path.string());
  json j;
  try {
    f >> j;
    RunMeta meta;
    meta.run_id = j.at("run_id").get<std::string>();
    meta.status = j.at("status").get<std::string>();
    meta.stopped_epoch = j.at("stopped_epoch").get<double>();
    meta.config = j.at("config").get<TrainConfig>();
    meta.data = j.at("data").get<DataConfig>();
    meta.lineage = j.at("lineage").get<Lineage>();
    return meta;
  } catch (const json::exception& e) {
    throw FormatError("bad run metadata in " + path.string() + ": " + e.what());
  }
}

inline std::vector<std::pair<int64_t, std::filesystem::path>> list_checkpoints(
    const std::filesystem::path& run_dir) {
  std::vector<std::pair<int64_t, std::filesystem::path>> out;
  auto dir = run_dir / "checkpoints";
  if (!std::filesystem::exists(dir)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    std::string name = entry.path().filename().string();
    if (name.size() < 11 || name.rfind("iter_", 0) != 0 ||
        name.substr(name.size() - 5) != ".dlck") {
      continue;
    }
    std::string digits = name.substr(5, name.size() - 10);
    int64_t it = 0;
    auto r = std::from_chars(digits.data(), digits.data() + digits.size(), it);
    if (r.ec != std::errc{} || r.ptr != digits.data() + digits.size()) continue;
    out.push_back({it, entry.path()});
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
RunMeta train_loop(RunMeta meta, const LabeledDataset& train, const LabeledDataset& test,
                   const RunPaths& paths, const Checkpoint* start, bool emit_start) {
  const TrainConfig& cfg = meta.config;
  const int64_t m = train.size();
  const int64_t dim_in = train.input_dim();
  const int64_t steps = cfg.steps_per_epoch(m);
  const int64_t tick = cfg.tick_iters(m);
  const int64_t total = cfg.epochs * steps;
  auto layout = cfg.net.param_layout();
  const int64_t d = layout->dim;

  ParamVectorT<S> w;
  OptimizerStateT<S> opt;
  uint64_t shuffle_seed = 0;
  int64_t iter = 0;

  if (start != nullptr) {
    if (static_cast<int64_t>(start->weights.size()) != d) {
      throw ConfigError("checkpoint parameter count does not match network");
    }
    w = ParamVectorT<S>::zeros(layout);
    for (int64_t i = 0; i < d; ++i) w.values[i] = static_cast<S>(start->weights[i]);
    opt.config = cfg.opt;
    opt.step = start->opt_step;
    opt.buf.resize(d, S(0));
    for (size_t i = 0; i < start->opt_buf.size(); ++i) opt.buf[i] = static_cast<S>(start->opt_buf[i]);
    if (cfg.opt.kind == OptKind::adam) {
      opt.m2.resize(d, S(0));
      for (size_t i = 0; i < start->opt_m2.size(); ++i) opt.m2[i] = static_cast<S>(start->opt_m2[i]);
    }
    shuffle_seed = start->shuffle_seed;
    iter = static_cast<int64_t>(start->iteration);
  } else {
    w = init_params(cfg.net, mix64(cfg.seed, kInitStream)).cast<S>();
    opt = OptimizerStateT<S>::fresh(cfg.opt, d);
    shuffle_seed = mix64(cfg.seed, kShuffleStream);
  }

  MetricSeries series;
  if (std::filesystem::exists(paths.metrics_csv())) {
    series = MetricSeries::read_csv(paths.metrics_csv());
    series.drop_after_epoch(static_cast<double>(iter * cfg.batch_size) / static_cast<double>(m));
  }

  auto epoch_of = [&](int64_t it) {
    return static_cast<double>(it * cfg.batch_size) / static_cast<double>(m);
  };

  auto emit = [&](int64_t it) {
    double ep = epoch_of(it);
    ParamVector wd = w.template cast<double>();
    EvalResult tr = evaluate(cfg.net, wd, train.inputs, train.labels, cfg.loss);
    EvalResult te = evaluate(cfg.net, wd, test.inputs, test.labels, cfg.loss);
    series.append(meta.run_id, "train_loss", ep, tr.loss);
    series.append(meta.run_id, "train_error", ep, tr.error);
    series.append(meta.run_id, "test_loss", ep, te.loss);
    series.append(meta.run_id, "test_error", ep, te.error);
    series.write_csv(paths.metrics_csv());

    Checkpoint ck;
    ck.run_id = meta.run_id;
    ck.epoch = ep;
    ck.iteration = static_cast<uint64_t>(it);
    ck.weights.resize(d);
    for (int64_t i = 0; i < d; ++i) ck.weights[i] = static_cast<double>(w.values[i]);
    ck.opt = cfg.opt;
    ck.opt_step = opt.step;
    ck.opt_buf.assign(opt.buf.begin(), opt.buf.end());
    ck.opt_m2.assign(opt.m2.begin(), opt.m2.end());
    ck.precision_bits = static_cast<uint32_t>(cfg.precision_bits);
    ck.shuffle_seed = shuffle_seed;
    ck.lineage = meta.lineage;
    save_checkpoint(ck, paths.ckpt(it));
  };

  // Metric evaluation can overflow even while the weights themselves are
  // finite, so the emits sit under the same divergence guard as the steps.
  bool diverged = false;
  if (emit_start) {
    try {
      emit(iter);
    } catch (const NonFiniteError&) {
      diverged = true;
      meta.status = "diverged";
      meta.stopped_epoch = epoch_of(iter);
    }
  }

  Batch batch;
  batch.xs = Tensor::zeros({cfg.batch_size, dim_in});
  batch.labels.resize(cfg.batch_size);

  while (iter < total && !diverged) {
    int64_t epoch_idx = iter / steps;
    std::vector<uint32_t> perm = Rng(mix64(shuffle_seed, static_cast<uint64_t>(epoch_idx)))
                                     .permutation(static_cast<uint32_t>(m));
    for (int64_t s = iter % steps; s < steps; ++s) {
      for (int64_t i = 0; i < cfg.batch_size; ++i) {
        int64_t src = perm[s * cfg.batch_size + i];
        const double* row = train.inputs.row(src);
        std::copy(row, row + dim_in, batch.xs.row(i));
        batch.labels[i] = train.labels[src];
      }
      double eta = cfg.sched.lr_at(epoch_of(iter));
      try {
        auto [loss, grad] = loss_and_grad(cfg.net, w, batch, cfg.loss);
        (void)loss;
        apply_update(w.values, opt, grad.values, eta);
        for (S x : w.values) {
          if (!std::isfinite(static_cast<double>(x))) {
            throw NonFiniteError("weights became non-finite");
          }
        }
        ++iter;
        if (iter % tick == 0 || iter % steps == 0) emit(iter);
      } catch (const NonFiniteError&) {
        diverged = true;
        meta.status = "diverged";
        meta.stopped_epoch = epoch_of(iter);
        break;
      }
    }
  }

  if (!diverged) {
    meta.status = "ok";
    meta.stopped_epoch = epoch_of(iter);
  }
  return meta;
}

}  // namespace detail

inline RunMeta run_training(const TrainConfig& cfg, const DataConfig& data_cfg,
                            const LabeledDataset& train, const LabeledDataset& test,
                            const std::filesystem::path& out_root, const std::string& run_id,
                            const Lineage& lineage = {}, const Checkpoint* start = nullptr,
                            bool emit_start = true) {
  cfg.validate(train.size());
  if (train.input_dim() != cfg.net.input_dim || train.num_classes != cfg.net.num_classes) {
    throw ConfigError("dataset shape does not match network");
  }
  RunPaths paths{out_root / run_id};
  std::filesystem::create_directories(paths.ckpt_dir());

  RunMeta meta;
  meta.run_id = run_id;
  meta.config = cfg;
  meta.data = data_cfg;
  meta.data.m_train = train.size();
  meta.data.m_test = test.size();
  meta.lineage = lineage;
  save_run_meta(meta, paths.run_json());

  if (cfg.precision_bits == 32) {
    meta = detail::train_loop<float>(meta, train, test, paths, start, emit_start);
  } else {
    meta = detail::train_loop<double>(meta, train, test, paths, start, emit_start);
  }
  save_run_meta(meta, paths.run_json());
  return meta;
}

inline RunMeta train_fresh(const TrainConfig& cfg, const DataConfig& data_cfg,
                           const std::filesystem::path& out_root, const std::string& run_id) {
  auto [train, test] = data_cfg.make();
  return run_training(cfg, data_cfg, train, test, out_root, run_id);
}

// Continues an interrupted run from its most recent checkpoint. Re-emitted
// artifacts are byte-identical to an uninterrupted run.
inline RunMeta resume_run(const std::filesystem::path& run_dir) {
  RunPaths paths{run_dir};
  RunMeta meta = load_run_meta(paths.run_json());
  auto cks = list_checkpoints(run_dir);
  if (cks.empty()) throw Error("no checkpoints to resume from in " + run_dir.string());
  Checkpoint last = load_checkpoint(cks.back().second);
  auto [train, test] = meta.data.make();
  meta.config.validate(train.size());

  meta.status = "running";
  save_run_meta(meta, paths.run_json());
  if (meta.config.precision_bits == 32) {
    meta = detail::train_loop<float>(meta, train, test, paths, &last, false);
  } else {
    meta = detail::train_loop<double>(meta, train, test, paths, &last, false);
  }
  save_run_meta(meta, paths.run_json());
  return meta;
}

inline Checkpoint checkpoint_at_epoch(const std::filesystem::path& run_dir, double epoch) {
  RunMeta meta = load_run_meta(RunPaths{run_dir}.run_json());
  int64_t steps = meta.config.steps_per_epoch(meta.data.m_train);
  double exact = epoch * static_cast<double>(steps);
  int64_t it = std::llround(exact);
  if (std::abs(exact - static_cast<double>(it)) > 1e-9) {
    throw ConfigError("epoch " + fmt_double(epoch) + " is not on the checkpoint grid of " +
                      run_dir.string());
  }
  auto path = RunPaths{run_dir}.ckpt(it);
  if (!std::filesystem::exists(path)) {
    throw Error("no checkpoint at epoch " + fmt_double(epoch) + " in " + run_dir.string());
  }
  return load_checkpoint(path);
}

// ---------------------------------------------------------------------------
// Child spawning
// ---------------------------------------------------------------------------

struct SpawnOptions {
  double spawn_epoch = 0;
  int num_children = 2;
  bool inherit_momentum = true;
  std::vector<uint64_t> seeds;  // explicit per-child seeds; derived when empty
};

// Forks children off a parent checkpoint. Each child copies the parent's
// weights (and, by default, optimizer state), switches to its own shuffle
// stream, and trains to the parent's epoch budget.
inline std::vector<RunMeta> spawn_children(const std::filesystem::path& parent_dir,
                                           const SpawnOptions& so,
                                           const std::filesystem::path& out_root_override = {}) {
  if (so.num_children < 1) throw ConfigError("num_children must be >= 1");
  RunMeta parent = load_run_meta(RunPaths{parent_dir}.run_json());
  Checkpoint base = checkpoint_at_epoch(parent_dir, so.spawn_epoch);
  auto [train, test] = parent.data.make();
  std::filesystem::path out_root =
      out_root_override.empty() ? parent_dir.parent_path() : out_root_override;

  std::vector<RunMeta> out;
  for (int c = 0; c < so.num_children; ++c) {
    uint64_t child_seed = c < static_cast<int>(so.seeds.size())
                              ? so.seeds[c]
                              : derive_child_seed(parent.config.seed, static_cast<uint32_t>(c),
                                                  so.spawn_epoch);
    std::string child_id = derive_child_id(parent.run_id, so.spawn_epoch,
                                           static_cast<uint32_t>(c), child_seed);
    TrainConfig child_cfg = parent.config;
    child_cfg.seed = child_seed;

    Lineage lin;
    lin.has_parent = true;
    lin.parent_id = parent.run_id;
    lin.spawn_epoch = so.spawn_epoch;
    lin.child_index = static_cast<uint32_t>(c);

    Checkpoint start = base;
    start.run_id = child_id;
    start.shuffle_seed = mix64(child_seed, kShuffleStream);
    start.lineage = lin;
    if (!so.inherit_momentum) {
      std::fill(start.opt_buf.begin(), start.opt_buf.end(), 0.0);
      std::fill(start.opt_m2.begin(), start.opt_m2.end(), 0.0);
      start.opt_step = 0;
    }
    out.push_back(
        run_training(child_cfg, parent.data, train, test, out_root, child_id, lin, &start));
  }
  return out;
}

}  // namespace dllab
