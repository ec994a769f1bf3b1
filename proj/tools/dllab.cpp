// Command-line front end: dataset utilities, single runs, spawning, metric
// queries between checkpoints, and the packaged experiment pipelines.
//
// Exit codes: 0 success, 2 bad configuration or arguments, 3 when the only
// failures were diverged runs, 1 for anything else.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dllab/experiment.hpp"

namespace fs = std::filesystem;
using namespace dllab;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string iso_utc(std::chrono::system_clock::time_point tp) {
  std::time_t t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

int run_pipeline(const std::string& config_path,
                 const std::function<Report(const ExperimentConfig&)>& fn) {
  ExperimentConfig cfg = parse_config(config_path);
  auto t0 = std::chrono::system_clock::now();
  Report rep = fn(cfg);
  auto t1 = std::chrono::system_clock::now();
  ordered_json timings;
  timings["started"] = iso_utc(t0);
  timings["finished"] = iso_utc(t1);
  timings["seconds"] = std::chrono::duration<double>(t1 - t0).count();
  detail::write_text_file(rep.dir / "timings.json", timings.dump(2) + "\n");
  std::cout << "report: " << rep.dir.string() << "\n";
  for (const auto& g : rep.gaps) std::cout << "gap: " << g << "\n";
  for (const auto& d : rep.diverged) std::cout << "diverged: " << d << "\n";
  return rep.suggested_exit();
}

ParamVector load_params_at(const fs::path& run_dir, double epoch, RunMeta* meta_out = nullptr) {
  RunMeta meta = load_run_meta(RunPaths{run_dir}.run_json());
  if (epoch < 0) epoch = static_cast<double>(meta.config.epochs);
  Checkpoint ck = checkpoint_at_epoch(run_dir, epoch);
  ParamVector w = ParamVector::zeros(meta.config.net.param_layout());
  if (w.values.size() != ck.weights.size()) throw Error("checkpoint does not match network");
  w.values = ck.weights;
  if (meta_out != nullptr) *meta_out = meta;
  return w;
}

Tensor subsample_inputs(const LabeledDataset& train, int64_t m_sub, uint64_t seed) {
  std::vector<int64_t> rows = detail::stratified_subsample(
      train.labels, train.num_classes, std::min(m_sub, train.size()), seed);
  Tensor xs = Tensor::zeros({static_cast<int64_t>(rows.size()), train.input_dim()});
  for (size_t i = 0; i < rows.size(); ++i) {
    std::copy(train.inputs.row(rows[i]), train.inputs.row(rows[i]) + train.input_dim(),
              xs.row(static_cast<int64_t>(i)));
  }
  return xs;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"training-dynamics laboratory"};
  app.require_subcommand(1);
  std::function<int()> action;

  // ---- data gen | inspect ----
  auto* data_cmd = app.add_subcommand("data", "dataset utilities");
  data_cmd->require_subcommand(1);
  {
    auto* gen = data_cmd->add_subcommand("gen", "generate a train/test pair of dataset files");
    auto cfg = std::make_shared<DataConfig>();
    auto out = std::make_shared<std::string>("data");
    gen->add_option("--source", cfg->source, "spirals | blobs")->default_val("spirals");
    gen->add_option("--seed", cfg->seed, "generator seed");
    gen->add_option("--m-train", cfg->m_train, "training examples");
    gen->add_option("--m-test", cfg->m_test, "test examples");
    gen->add_option("--classes", cfg->num_classes, "class count (blobs)");
    gen->add_option("--input-dim", cfg->input_dim, "input dimension (blobs)");
    gen->add_option("--separation", cfg->separation, "blob center radius");
    gen->add_option("--noise", cfg->noise, "spiral noise level");
    gen->add_option("--out", *out, "output directory")->required();
    gen->callback([cfg, out, &action] {
      action = [cfg, out] {
        cfg->validate();
        auto [train, test] = cfg->make();
        fs::create_directories(*out);
        save_dataset(train, fs::path(*out) / "train.dset");
        save_dataset(test, fs::path(*out) / "test.dset");
        std::cout << "wrote " << (fs::path(*out) / "train.dset").string() << " ("
                  << train.size() << " examples) and " << (fs::path(*out) / "test.dset").string()
                  << " (" << test.size() << " examples)\n";
        return 0;
      };
    });

    auto* inspect = data_cmd->add_subcommand("inspect", "describe dataset files");
    auto files = std::make_shared<std::vector<std::string>>();
    inspect->add_option("files", *files, "dataset files")->required();
    inspect->callback([files, &action] {
      action = [files] {
        for (const auto& f : *files) {
          LabeledDataset ds = load_dataset(f);
          std::vector<int64_t> hist(static_cast<size_t>(ds.num_classes), 0);
          for (int c : ds.labels) ++hist[static_cast<size_t>(c)];
          ordered_json j;
          j["file"] = f;
          j["examples"] = ds.size();
          j["input_dim"] = ds.input_dim();
          j["num_classes"] = ds.num_classes;
          j["class_counts"] = hist;
          std::cout << j.dump(2) << "\n";
        }
        return 0;
      };
    });
  }

  // ---- train ----
  {
    auto* train = app.add_subcommand("train", "train one network from an experiment config");
    auto config = std::make_shared<std::string>();
    auto seed = std::make_shared<int64_t>(-1);
    train->add_option("--config", *config, "experiment config (ini)")->required();
    train->add_option("--seed", *seed, "override the first configured seed");
    train->callback([config, seed, &action] {
      action = [config, seed] {
        ExperimentConfig cfg = parse_config(*config);
        TrainConfig tc = cfg.train;
        tc.seed = *seed >= 0 ? static_cast<uint64_t>(*seed) : cfg.seeds.front();
        std::string id = derive_run_id(cfg.name + "-parent", tc.seed);
        fs::path root = cfg.out / "runs";
        fs::remove_all(root / id);
        RunMeta meta = train_fresh(tc, cfg.data, root, id);
        std::cout << "run: " << (root / id).string() << "\nstatus: " << meta.status << "\n";
        MetricSeries s = MetricSeries::read_csv(RunPaths{root / id}.metrics_csv());
        for (const auto& r : s.records()) {
          if (r.metric == "test_error" && r.epoch == s.records().back().epoch) {
            std::cout << "test_error @ " << fmt_double(r.epoch) << ": " << fmt_double(r.value)
                      << "\n";
          }
        }
        return meta.status == "diverged" ? 3 : 0;
      };
    });
  }

  // ---- spawn ----
  {
    auto* spawn = app.add_subcommand("spawn", "fork children off a run's checkpoint");
    auto run = std::make_shared<std::string>();
    auto opts = std::make_shared<SpawnOptions>();
    auto fresh_momentum = std::make_shared<bool>(false);
    spawn->add_option("--run", *run, "parent run directory")->required();
    spawn->add_option("--epoch", opts->spawn_epoch, "spawn epoch")->required();
    spawn->add_option("--children", opts->num_children, "children to fork");
    spawn->add_option("--seeds", opts->seeds, "explicit child seeds");
    spawn->add_flag("--fresh-momentum", *fresh_momentum, "zero the optimizer state at the fork");
    spawn->callback([run, opts, fresh_momentum, &action] {
      action = [run, opts, fresh_momentum] {
        opts->inherit_momentum = !*fresh_momentum;
        std::vector<RunMeta> kids = spawn_children(*run, *opts);
        int rc = 0;
        for (const RunMeta& kid : kids) {
          std::cout << "child: " << kid.run_id << " status: " << kid.status << "\n";
          if (kid.status == "diverged") rc = 3;
        }
        return rc;
      };
    });
  }

  // ---- resume ----
  {
    auto* resume = app.add_subcommand("resume", "continue an interrupted run");
    auto run = std::make_shared<std::string>();
    resume->add_option("--run", *run, "run directory")->required();
    resume->callback([run, &action] {
      action = [run] {
        RunMeta meta = resume_run(*run);
        std::cout << "run: " << *run << "\nstatus: " << meta.status << "\n";
        return meta.status == "diverged" ? 3 : 0;
      };
    });
  }

  // ---- metric ----
  {
    auto* metric = app.add_subcommand("metric", "evaluate one metric on stored checkpoints");
    auto name = std::make_shared<std::string>();
    auto run_a = std::make_shared<std::string>();
    auto run_b = std::make_shared<std::string>();
    auto epoch_a = std::make_shared<double>(-1);
    auto epoch_b = std::make_shared<double>(-1);
    auto subsample = std::make_shared<int64_t>(100);
    auto eta = std::make_shared<double>(0.05);
    metric
        ->add_option("name", *name,
                     "kernel-distance | kernel-velocity | barrier | relu-distance | "
                     "function-distance | weight-distance | spectral-norm | centroid-overlap | "
                     "escape-threshold")
        ->required()
        ->check(CLI::IsMember({"kernel-distance", "kernel-velocity", "barrier", "relu-distance",
                               "function-distance", "weight-distance", "spectral-norm",
                               "centroid-overlap", "escape-threshold"}));
    metric->add_option("--run-a", *run_a, "first run directory")->required();
    metric->add_option("--epoch-a", *epoch_a, "checkpoint epoch (default: final)");
    metric->add_option("--run-b", *run_b, "second run directory (default: run-a)");
    metric->add_option("--epoch-b", *epoch_b, "checkpoint epoch (default: final)");
    metric->add_option("--subsample", *subsample, "kernel/ReLU input subsample size");
    metric->add_option("--eta", *eta, "step size for escape-threshold");
    metric->callback([name, run_a, run_b, epoch_a, epoch_b, subsample, eta, &action] {
      action = [name, run_a, run_b, epoch_a, epoch_b, subsample, eta] {
        RunMeta meta;
        ParamVector wa = load_params_at(*run_a, *epoch_a, &meta);
        const NetworkSpec& net = meta.config.net;
        auto [train, test] = meta.data.make();
        bool two = *name == "kernel-distance" || *name == "kernel-velocity" ||
                   *name == "barrier" || *name == "relu-distance" ||
                   *name == "function-distance" || *name == "weight-distance";
        ParamVector wb;
        if (two) {
          wb = load_params_at(run_b->empty() ? *run_a : *run_b, *epoch_b);
        }
        ordered_json j;
        j["metric"] = *name;
        if (*name == "kernel-distance" || *name == "kernel-velocity") {
          Tensor xs = subsample_inputs(train, *subsample, meta.data.seed);
          double s = kernel_distance(net, wa, wb, xs);
          if (*name == "kernel-velocity") {
            double ea = *epoch_a < 0 ? static_cast<double>(meta.config.epochs) : *epoch_a;
            double eb = *epoch_b < 0 ? static_cast<double>(meta.config.epochs) : *epoch_b;
            if (!(eb > ea)) throw ConfigError("kernel-velocity needs epoch-b > epoch-a");
            j["dt"] = eb - ea;
            j["value"] = s / (eb - ea);
          } else {
            j["value"] = s;
          }
        } else if (*name == "barrier") {
          BarrierProfile bp = error_barrier(net, wa, wb, train, test, meta.config.loss);
          j["train_loss_barrier"] = bp.barrier_train_loss;
          j["train_error_barrier"] = bp.barrier_train_error;
          j["test_error_barrier"] = bp.barrier_test_error;
          j["value"] = bp.barrier_test_error;
        } else if (*name == "relu-distance") {
          Tensor xs = subsample_inputs(train, *subsample, meta.data.seed);
          j["value"] = relu_distance(net, wa, wb, xs);
        } else if (*name == "function-distance") {
          j["value"] = function_distance(net, wa, wb, test);
        } else if (*name == "weight-distance") {
          j["value"] = weight_distance(wa, wb);
        } else if (*name == "spectral-norm") {
          Batch batch{train.inputs, train.labels, {}};
          SpectralResult sr = hessian_spectral_norm(net, wa, batch, meta.config.loss);
          j["value"] = sr.value;
          j["eigenvalue"] = sr.eigenvalue;
          j["iterations"] = sr.iterations;
          j["converged"] = sr.converged;
        } else if (*name == "centroid-overlap") {
          Batch batch{train.inputs, train.labels, {}};
          j["value"] = centroid_hessian_overlap(net, wa, batch, meta.config.loss);
        } else if (*name == "escape-threshold") {
          Batch batch{train.inputs, train.labels, {}};
          auto [lv, grad] = loss_and_grad(net, wa, batch, meta.config.loss);
          (void)lv;
          j["eta"] = *eta;
          j["value"] = escape_threshold(net, wa, batch, meta.config.loss, *eta, grad.values);
        }
        std::cout << j.dump(2) << "\n";
        return 0;
      };
    });
  }

  // ---- experiment pipelines ----
  for (const auto& [cmd, desc, fn] :
       std::vector<std::tuple<std::string, std::string, Report (*)(const ExperimentConfig&)>>{
           {"megaplot", "learning curves, barriers, and distance heatmaps",
            [](const ExperimentConfig& c) { return run_megaplot(c); }},
           {"barrier-velocity", "barrier vs spawn epoch next to parent kernel velocity",
            [](const ExperimentConfig& c) { return run_barrier_velocity(c); }},
           {"lin-sweep", "linearized training and low-lr baseline over base epochs",
            [](const ExperimentConfig& c) { return run_linearization_sweep(c); }}}) {
    auto* sc = app.add_subcommand(cmd, desc);
    auto config = std::make_shared<std::string>();
    sc->add_option("--config", *config, "experiment config (ini)")->required();
    auto fn_copy = fn;
    sc->callback([config, fn_copy, &action] {
      action = [config, fn_copy] { return run_pipeline(*config, fn_copy); };
    });
  }
  {
    auto* plane = app.add_subcommand("plane", "2D weight-plane scan through a spawn triple");
    auto config = std::make_shared<std::string>();
    auto args = std::make_shared<PlaneRunArgs>();
    auto runs_root = std::make_shared<std::string>();
    auto no_tangent = std::make_shared<bool>(false);
    plane->add_option("--config", *config, "experiment config (ini)")->required();
    plane->add_option("--parent", args->parent_id, "existing parent run id");
    plane->add_option("--child-a", args->child_a_id, "existing child run id");
    plane->add_option("--child-b", args->child_b_id, "existing child run id");
    plane->add_option("--runs-root", *runs_root, "directory holding the named runs");
    plane->add_option("--spawn-epoch", args->spawn_epoch, "plane anchor epoch on the parent");
    plane->add_flag("--no-tangent", *no_tangent, "skip the order-1 expansion grid");
    plane->callback([config, args, runs_root, no_tangent, &action] {
      action = [config, args, runs_root, no_tangent] {
        args->tangent = !*no_tangent;
        args->runs_root = *runs_root;
        return run_pipeline(*config,
                            [&](const ExperimentConfig& c) { return run_plane(c, *args); });
      };
    });
  }

  // ---- report ----
  {
    auto* report = app.add_subcommand("report", "print the digest of a finished experiment");
    auto dir = std::make_shared<std::string>();
    auto smooth = std::make_shared<bool>(false);
    report->add_option("dir", *dir, "experiment directory")->required();
    report->add_flag("--smooth", *smooth, "average curves over +-5 epochs for display");
    report->callback([dir, smooth, &action] {
      action = [dir, smooth] {
        std::cout << render_report(*dir, *smooth);
        return 0;
      };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    return action ? action() : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
