#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dllab/autodiff.hpp"
#include "dllab/common.hpp"
#include "dllab/data.hpp"
#include "dllab/metric_series.hpp"
#include "dllab/network.hpp"
#include "dllab/optimizer.hpp"
#include "dllab/rng.hpp"
#include "dllab/trainer.hpp"

namespace dllab {

// Taylor expansion of the network around a frozen base point. The
// displacement delta is the trainable state; order 1 is affine in delta.
struct TaylorModel {
  NetworkSpec spec;
  ParamVector base;
  int order = 1;  // 1 or 2
  ParamVector delta;

  static TaylorModel around(const NetworkSpec& spec, const ParamVector& base, int order) {
    if (order != 1 && order != 2) throw ConfigError("taylor order must be 1 or 2");
    TaylorModel tm;
    tm.spec = spec;
    tm.base = base;
    tm.order = order;
    tm.delta = ParamVector::zeros(base.layout);
    return tm;
  }
};

namespace detail {

// Propagates (value, d/ds, d2/ds2) of f(base + s*delta) at s = 0 through an
// MLP. Returns the first- and second-derivative channels; the value channel
// only steers the ReLU masks, so callers combine with an exact forward pass.
inline std::pair<Tensor, Tensor> mlp_jet_channels(const NetworkSpec& spec,
                                                  const ParamVector& base,
                                                  const ParamVector& delta, const Tensor& xs) {
  if (spec.kind != ArchKind::mlp) {
    throw ConfigError("order-2 evaluation is implemented for mlp architectures only");
  }
  auto lay = base.layout;
  Tensor a = xs;
  Tensor b = Tensor::zeros(xs.shape);
  Tensor c = Tensor::zeros(xs.shape);
  int64_t m = xs.dim(0);
  size_t layers = spec.hidden.size();
  for (size_t l = 0; l <= layers; ++l) {
    std::string stem = l < layers ? "fc" + std::to_string(l) : "head";
    const LayoutEntry& we = lay->find(stem + ".w");
    Tensor w = base.slice(we), dw = delta.slice(we);
    int64_t out_dim = we.shape[0];
    Tensor a2 = Tensor::zeros({m, out_dim});
    Tensor b2 = Tensor::zeros({m, out_dim});
    Tensor c2 = Tensor::zeros({m, out_dim});
    matmul_nt_acc(a2, a, w);
    matmul_nt_acc(b2, a, dw);
    matmul_nt_acc(b2, b, w);
    Tensor dw2 = dw;
    for (double& v : dw2.data) v *= 2.0;
    matmul_nt_acc(c2, b, dw2);
    matmul_nt_acc(c2, c, w);
    if (spec.bias) {
      const LayoutEntry& be = lay->find(stem + ".b");
      Tensor bw = base.slice(be), dbw = delta.slice(be);
      for (int64_t i = 0; i < m; ++i) {
        axpy(a2.row(i), 1.0, bw.data.data(), out_dim);
        axpy(b2.row(i), 1.0, dbw.data.data(), out_dim);
      }
    }
    if (l < layers) {
      for (int64_t i = 0; i < a2.numel(); ++i) {
        if (a2.data[static_cast<size_t>(i)] > 0) continue;
        a2.data[static_cast<size_t>(i)] = 0;
        b2.data[static_cast<size_t>(i)] = 0;
        c2.data[static_cast<size_t>(i)] = 0;
      }
    }
    a = std::move(a2);
    b = std::move(b2);
    c = std::move(c2);
  }
  return {std::move(b), std::move(c)};
}

}  // namespace detail

// Logits of the Taylor model on a batch of inputs.
inline Tensor taylor_logits(const TaylorModel& tm, const Tensor& xs) {
  Tensor out = forward_dataset(tm.spec, tm.base, xs);
  if (tm.order == 1) {
    Tensor jac = jacobian_stack(tm.spec, tm.base, xs);
    int64_t m = xs.dim(0), k = tm.spec.num_classes, d = tm.base.dim();
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t kk = 0; kk < k; ++kk) {
        out.at2(i, kk) += dot(jac.row(i * k + kk), tm.delta.values.data(), d);
      }
    }
    return out;
  }
  auto [b, c] = detail::mlp_jet_channels(tm.spec, tm.base, tm.delta, xs);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i] + 0.5 * c.data[i];
  return out;
}

// ---------------------------------------------------------------------------
// Linearized training
// ---------------------------------------------------------------------------

struct LinearizedConfig {
  int order = 1;
  double lr = 0.001;
  double momentum = 0.9;
  int64_t epochs = 200;
  int64_t batch_size = 60;
  Fraction cadence{1, 1};
  uint64_t seed = 1;
  int64_t cache_budget_mb = 256;  // per-example Jacobian cache limit

  int64_t steps_per_epoch(int64_t m_train) const { return m_train / batch_size; }

  int64_t tick_iters(int64_t m_train) const {
    int64_t steps = steps_per_epoch(m_train);
    if ((steps * cadence.num) % cadence.den != 0) {
      throw ConfigError("cadence " + cadence.str() + " does not land on whole optimizer steps");
    }
    int64_t t = steps * cadence.num / cadence.den;
    if (t < 1) throw ConfigError("cadence shorter than one optimizer step");
    return t;
  }

  void validate(int64_t m_train) const {
    if (order != 1 && order != 2) throw ConfigError("taylor order must be 1 or 2");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0,1)");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1 || m_train % batch_size != 0) {
      throw ConfigError("batch_size must divide m_train");
    }
    if (cache_budget_mb < 0) throw ConfigError("cache budget must be >= 0");
    (void)tick_iters(m_train);
  }
};

struct LinearizedResult {
  std::string run_id;
  std::string status = "ok";  // ok | diverged
  MetricSeries series;        // lin_train_err, lin_test_err per tick
  double best_test_error = 1.0;
  double best_epoch = 0;
  ParamVector delta;
  bool used_cache = false;
};

namespace detail {

inline double error_rate(const Tensor& logits, const std::vector<int>& labels) {
  std::vector<int> pred = predict_labels(logits);
  int64_t wrong = 0;
  for (size_t i = 0; i < labels.size(); ++i) wrong += pred[i] != labels[i];
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

// Order-1 logits for a row subset, via the cache when present. The uncached
// route recomputes the same Jacobian rows, so both produce identical bits.
inline Tensor order1_logits(const NetworkSpec& spec, const ParamVector& base,
                            const ParamVector& delta, const Tensor& xs, const Tensor& base_logits,
                            const Tensor* jac_cache, const std::vector<int64_t>& rows) {
  int64_t n = static_cast<int64_t>(rows.size());
  int64_t k = spec.num_classes, d = base.dim();
  Tensor out = Tensor::zeros({n, k});
  Tensor jac;
  if (jac_cache == nullptr) {
    Tensor sub = Tensor::zeros({n, xs.dim(1)});
    for (int64_t i = 0; i < n; ++i) {
      std::copy(xs.row(rows[static_cast<size_t>(i)]), xs.row(rows[static_cast<size_t>(i)]) + xs.dim(1),
                sub.row(i));
    }
    jac = jacobian_stack(spec, base, sub);
  }
  for (int64_t i = 0; i < n; ++i) {
    int64_t src = rows[static_cast<size_t>(i)];
    for (int64_t kk = 0; kk < k; ++kk) {
      const double* jrow =
          jac_cache != nullptr ? jac_cache->row(src * k + kk) : jac.row(i * k + kk);
      out.at2(i, kk) = base_logits.at2(src, kk) + dot(jrow, delta.values.data(), d);
    }
  }
  return out;
}

}  // namespace detail

// SGD with momentum on the displacement of a Taylor model. The shuffle stream
// derivation matches the full trainer, so a run with the same seed sees the
// same minibatches.
inline LinearizedResult train_linearized(const NetworkSpec& spec, const ParamVector& base,
                                         const LabeledDataset& train, const LabeledDataset& test,
                                         LossKind loss, const LinearizedConfig& cfg,
                                         const std::string& run_id) {
  int64_t m = train.size();
  cfg.validate(m);
  int64_t steps = cfg.steps_per_epoch(m);
  int64_t tick = cfg.tick_iters(m);
  int64_t total = cfg.epochs * steps;
  int64_t k = spec.num_classes, d = base.dim();

  LinearizedResult res;
  res.run_id = run_id;
  res.delta = ParamVector::zeros(base.layout);

  OptimizerConfig oc;
  oc.kind = OptKind::sgd;
  oc.momentum = cfg.momentum;
  OptimizerState opt = OptimizerState::fresh(oc, d);
  uint64_t shuffle_seed = mix64(cfg.seed, kShuffleStream);

  Tensor base_tr = forward_dataset(spec, base, train.inputs);
  Tensor base_te = forward_dataset(spec, base, test.inputs);

  Tensor jac_tr, jac_te;
  const Tensor* jac_tr_p = nullptr;
  const Tensor* jac_te_p = nullptr;
  if (cfg.order == 1) {
    int64_t need = (m + test.size()) * k * d * static_cast<int64_t>(sizeof(double));
    if (need <= cfg.cache_budget_mb * (int64_t{1} << 20)) {
      jac_tr = jacobian_stack(spec, base, train.inputs);
      jac_te = jacobian_stack(spec, base, test.inputs);
      jac_tr_p = &jac_tr;
      jac_te_p = &jac_te;
      res.used_cache = true;
    }
  }

  std::vector<int64_t> all_tr(static_cast<size_t>(m)), all_te(static_cast<size_t>(test.size()));
  for (int64_t i = 0; i < m; ++i) all_tr[static_cast<size_t>(i)] = i;
  for (int64_t i = 0; i < test.size(); ++i) all_te[static_cast<size_t>(i)] = i;

  TaylorModel tm = TaylorModel::around(spec, base, cfg.order);

  auto set_logits = [&](const LabeledDataset& ds, const Tensor& base_logits,
                        const Tensor* cache, const std::vector<int64_t>& rows) {
    if (cfg.order == 1) {
      return detail::order1_logits(spec, base, res.delta, ds.inputs, base_logits, cache, rows);
    }
    tm.delta = res.delta;
    return taylor_logits(tm, ds.inputs);
  };

  auto emit = [&](int64_t it) {
    double ep = static_cast<double>(it * cfg.batch_size) / static_cast<double>(m);
    Tensor ltr = set_logits(train, base_tr, jac_tr_p, all_tr);
    Tensor lte = set_logits(test, base_te, jac_te_p, all_te);
    res.series.append(run_id, "lin_train_err", ep, detail::error_rate(ltr, train.labels));
    res.series.append(run_id, "lin_test_err", ep, detail::error_rate(lte, test.labels));
  };

  emit(0);
  Batch batch;
  batch.xs = Tensor::zeros({cfg.batch_size, train.input_dim()});
  batch.labels.resize(static_cast<size_t>(cfg.batch_size));
  std::vector<int64_t> rows(static_cast<size_t>(cfg.batch_size));
  std::vector<double> grad(static_cast<size_t>(d));

  int64_t iter = 0;
  while (iter < total && res.status == "ok") {
    int64_t epoch_idx = iter / steps;
    std::vector<uint32_t> perm = Rng(mix64(shuffle_seed, static_cast<uint64_t>(epoch_idx)))
                                     .permutation(static_cast<uint32_t>(m));
    for (int64_t s = iter % steps; s < steps; ++s) {
      for (int64_t i = 0; i < cfg.batch_size; ++i) {
        int64_t src = perm[static_cast<size_t>(s * cfg.batch_size + i)];
        rows[static_cast<size_t>(i)] = src;
        std::copy(train.inputs.row(src), train.inputs.row(src) + train.input_dim(), batch.xs.row(i));
        batch.labels[static_cast<size_t>(i)] = train.labels[static_cast<size_t>(src)];
      }

      Tensor logits;
      Tensor jac0;  // rows of J at the base for this batch
      if (cfg.order == 1) {
        logits = detail::order1_logits(spec, base, res.delta, train.inputs, base_tr, jac_tr_p, rows);
      } else {
        tm.delta = res.delta;
        logits = taylor_logits(tm, batch.xs);
        jac0 = jacobian_stack(spec, base, batch.xs);
      }
      Tensor targets = loss == LossKind::mse ? batch.mse_targets(spec.num_classes) : Tensor{};
      LogitLoss ll = loss_on_logits(loss, logits, batch.labels, targets, /*want_grad=*/true);
      if (!std::isfinite(ll.value)) {
        res.status = "diverged";
        break;
      }

      std::fill(grad.begin(), grad.end(), 0.0);
      if (cfg.order == 1) {
        Tensor jb;
        if (jac_tr_p == nullptr) jb = jacobian_stack(spec, base, batch.xs);
        for (int64_t i = 0; i < cfg.batch_size; ++i) {
          for (int64_t kk = 0; kk < k; ++kk) {
            const double* jrow = jac_tr_p != nullptr
                                     ? jac_tr.row(rows[static_cast<size_t>(i)] * k + kk)
                                     : jb.row(i * k + kk);
            axpy(grad.data(), ll.dlogits.at2(i, kk), jrow, d);
          }
        }
      } else {
        // d f_hat / d delta = J row + H_k(x) delta, the latter by a central
        // difference of Jacobians along delta.
        double h = 1e-4 / (1.0 + norm2(res.delta.values));
        ParamVector wp = base, wm = base;
        for (int64_t j = 0; j < d; ++j) {
          wp.values[static_cast<size_t>(j)] += h * res.delta.values[static_cast<size_t>(j)];
          wm.values[static_cast<size_t>(j)] -= h * res.delta.values[static_cast<size_t>(j)];
        }
        Tensor jp = jacobian_stack(spec, wp, batch.xs);
        Tensor jm = jacobian_stack(spec, wm, batch.xs);
        double inv = 1.0 / (2.0 * h);
        std::vector<double> row(static_cast<size_t>(d));
        for (int64_t i = 0; i < cfg.batch_size; ++i) {
          for (int64_t kk = 0; kk < k; ++kk) {
            const double* j0 = jac0.row(i * k + kk);
            const double* p = jp.row(i * k + kk);
            const double* q = jm.row(i * k + kk);
            for (int64_t j = 0; j < d; ++j) {
              row[static_cast<size_t>(j)] = j0[j] + (p[j] - q[j]) * inv;
            }
            axpy(grad.data(), ll.dlogits.at2(i, kk), row.data(), d);
          }
        }
      }

      apply_update(res.delta.values, opt, grad, cfg.lr);
      bool finite = true;
      for (double x : res.delta.values) finite = finite && std::isfinite(x);
      if (!finite) {
        res.status = "diverged";
        break;
      }
      ++iter;
      if (iter % tick == 0 || iter % steps == 0) emit(iter);
    }
  }

  res.best_test_error = std::numeric_limits<double>::infinity();
  for (const auto& r : res.series.select("lin_test_err")) {
    if (r.value < res.best_test_error) {
      res.best_test_error = r.value;
      res.best_epoch = r.epoch;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Low learning-rate nonlinear baseline
// ---------------------------------------------------------------------------

struct BaselineResult {
  std::string status = "ok";  // ok | diverged
  double final_test_error = 1.0;
  int64_t epochs_ran = 0;
  MetricSeries series;  // lowlr_test_err per epoch
};

// Continues ordinary nonlinear training from the base point at a small
// learning rate until the train loss plateaus (relative improvement below
// 1e-4 across 10 epochs) or the epoch cap is hit.
inline BaselineResult nonlinear_low_lr_baseline(const NetworkSpec& spec, const ParamVector& base,
                                                const LabeledDataset& train,
                                                const LabeledDataset& test, LossKind loss,
                                                double lr_low, int64_t max_epochs = 1000,
                                                int64_t batch_size = 60, double momentum = 0.9,
                                                uint64_t seed = 1,
                                                const std::string& run_id = "lowlr") {
  int64_t m = train.size();
  if (!(lr_low > 0)) throw ConfigError("lr must be positive");
  if (batch_size < 1 || m % batch_size != 0) throw ConfigError("batch_size must divide m_train");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  int64_t steps = m / batch_size;

  BaselineResult res;
  ParamVector w = base;
  OptimizerConfig oc;
  oc.kind = OptKind::sgd;
  oc.momentum = momentum;
  OptimizerState opt = OptimizerState::fresh(oc, w.dim());
  uint64_t shuffle_seed = mix64(seed, kShuffleStream);

  Batch batch;
  batch.xs = Tensor::zeros({batch_size, train.input_dim()});
  batch.labels.resize(static_cast<size_t>(batch_size));
  std::vector<double> loss_history;

  for (int64_t epoch = 0; epoch < max_epochs; ++epoch) {
    std::vector<uint32_t> perm = Rng(mix64(shuffle_seed, static_cast<uint64_t>(epoch)))
                                     .permutation(static_cast<uint32_t>(m));
    try {
      for (int64_t s = 0; s < steps; ++s) {
        for (int64_t i = 0; i < batch_size; ++i) {
          int64_t src = perm[static_cast<size_t>(s * batch_size + i)];
          std::copy(train.inputs.row(src), train.inputs.row(src) + train.input_dim(),
                    batch.xs.row(i));
          batch.labels[static_cast<size_t>(i)] = train.labels[static_cast<size_t>(src)];
        }
        auto [lv, grad] = loss_and_grad(spec, w, batch, loss);
        (void)lv;
        apply_update(w.values, opt, grad.values, lr_low);
      }
    } catch (const NonFiniteError&) {
      res.status = "diverged";
      break;
    }
    bool finite = true;
    for (double x : w.values) finite = finite && std::isfinite(x);
    if (!finite) {
      res.status = "diverged";
      break;
    }
    EvalResult tr = evaluate(spec, w, train.inputs, train.labels, loss);
    EvalResult te = evaluate(spec, w, test.inputs, test.labels, loss);
    res.series.append(run_id, "lowlr_test_err", static_cast<double>(epoch + 1), te.error);
    res.final_test_error = te.error;
    res.epochs_ran = epoch + 1;
    loss_history.push_back(tr.loss);
    size_t e = loss_history.size();
    if (e > 10) {
      double before = loss_history[e - 11];
      double rel = (before - loss_history[e - 1]) / std::max(std::abs(before), 1e-12);
      if (rel < 1e-4) break;
    }
  }
  return res;
}

// Test-error gap of linearized training over the low-lr nonlinear baseline;
// positive means the nonlinear run did better.
inline double nonlinear_advantage(double linearized_test_error, double baseline_test_error) {
  return linearized_test_error - baseline_test_error;
}

}  // namespace dllab
