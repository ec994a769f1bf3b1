#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dllab/network.hpp"
#include "dllab/param_vector.hpp"
#include "dllab/tape.hpp"
#include "dllab/tensor.hpp"

namespace dllab {

enum class LossKind { mse, cross_entropy };

inline std::string loss_name(LossKind k) {
  return k == LossKind::mse ? "mse" : "cross-entropy";
}

inline LossKind loss_from_name(const std::string& s) {
  if (s == "mse") return LossKind::mse;
  if (s == "cross-entropy") return LossKind::cross_entropy;
  throw ConfigError("unknown loss '" + s + "'");
}

// A labeled minibatch. For cross-entropy only `labels` is used; for MSE the
// regression targets are either given explicitly or derived as one-hot rows.
struct Batch {
  Tensor xs;                // [m x input_dim]
  std::vector<int> labels;  // class indices, may be empty for pure-MSE tests
  Tensor targets;           // [m x K] MSE targets; empty means one-hot(labels)

  int64_t size() const { return xs.dim(0); }

  Tensor mse_targets(int num_classes) const {
    if (targets.numel() > 0) return targets;
    Tensor y = Tensor::zeros({xs.dim(0), num_classes});
    for (int64_t i = 0; i < xs.dim(0); ++i) {
      int c = labels.at(static_cast<size_t>(i));
      if (c < 0 || c >= num_classes) throw Error("label out of range");
      y.at2(i, c) = 1.0;
    }
    return y;
  }
};

// Loss value plus gradient with respect to the logits. This is the single
// source of truth for both the tape ops and the linearized trainer.
// MSE is the mean over examples AND logits of the squared residual (no 1/2);
// cross-entropy is softmax negative log likelihood averaged over the batch.
struct LogitLoss {
  double value = 0;
  Tensor dlogits;  // empty when not requested
};

inline LogitLoss loss_on_logits(LossKind kind, const Tensor& logits,
                                const std::vector<int>& labels, const Tensor& targets,
                                bool want_grad) {
  int64_t m = logits.dim(0), k = logits.dim(1);
  LogitLoss out;
  if (want_grad) out.dlogits = Tensor::zeros({m, k});
  if (kind == LossKind::mse) {
    if (targets.dim(0) != m || targets.dim(1) != k) throw Error("mse target shape mismatch");
    double scale = 1.0 / static_cast<double>(m * k);
    double acc = 0;
    for (int64_t i = 0; i < m * k; ++i) {
      double r = logits.data[static_cast<size_t>(i)] - targets.data[static_cast<size_t>(i)];
      acc += r * r;
      if (want_grad) out.dlogits.data[static_cast<size_t>(i)] = 2.0 * r * scale;
    }
    out.value = acc * scale;
  } else {
    if (static_cast<int64_t>(labels.size()) != m) throw Error("cross-entropy needs one label per row");
    double acc = 0;
    for (int64_t i = 0; i < m; ++i) {
      const double* row = logits.row(i);
      int y = labels[static_cast<size_t>(i)];
      if (y < 0 || y >= k) throw Error("label out of range");
      double mx = row[0];
      for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      double sum = 0;
      for (int64_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
      double lse = mx + std::log(sum);
      acc += lse - row[y];
      if (want_grad) {
        double* g = out.dlogits.row(i);
        for (int64_t j = 0; j < k; ++j) g[j] = std::exp(row[j] - lse) / static_cast<double>(m);
        g[y] -= 1.0 / static_cast<double>(m);
      }
    }
    out.value = acc / static_cast<double>(m);
  }
  return out;
}

namespace ops {

// Scalar loss node over a logits node. The logits gradient is recomputed in
// the closure from the saved targets, scaled by the incoming adjoint.
template <class S>
int scalar_loss(TapeT<S>& t, int logits, LossKind kind, std::vector<int> labels, Tensor targets) {
  Tensor lg;
  {
    const TensorT<S>& lv = t.value(logits);
    lg.shape = lv.shape;
    lg.data.assign(lv.data.begin(), lv.data.end());
  }
  LogitLoss ll = loss_on_logits(kind, lg, labels, targets, t.recording);
  TensorT<S> y = TensorT<S>::zeros({});
  y.data.assign(1, static_cast<S>(ll.value));
  y.shape = {};
  auto dl = std::make_shared<Tensor>(std::move(ll.dlogits));
  return t.push(std::move(y), [logits, dl](TapeT<S>& tp, int self) {
    S adj = tp.grad(self).data[0];
    TensorT<S>& dx = tp.grad(logits);
    for (int64_t i = 0; i < dx.numel(); ++i) {
      dx.data[static_cast<size_t>(i)] += adj * static_cast<S>(dl->data[static_cast<size_t>(i)]);
    }
  });
}

}  // namespace ops

// Forward graph of one network evaluation over a batch of inputs.
template <class S>
struct GraphT {
  TapeT<S> tape;
  std::vector<int> param_nodes;  // parallel to layout entries
  int input = -1;
  int logits = -1;
  std::vector<int> relu_nodes;   // post-nonlinearity activations, forward order
};

template <class S>
GraphT<S> build_graph(const NetworkSpec& spec, const ParamVectorT<S>& params,
                      TensorT<S> xs, bool record) {
  if (xs.rank() != 2 || xs.dim(1) != spec.input_dim) throw Error("input batch shape mismatch");
  if (!params.layout || !(*params.layout == *spec.param_layout())) {
    throw Error("parameter layout does not match network spec");
  }
  GraphT<S> g;
  g.tape.recording = record;
  for (const auto& e : params.layout->entries) {
    g.param_nodes.push_back(g.tape.push(params.slice(e)));
  }
  g.input = g.tape.push(std::move(xs));
  auto node_of = [&](const std::string& name) -> int {
    const auto& entries = params.layout->entries;
    for (size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].name == name) return g.param_nodes[i];
    }
    return -1;
  };
  int cur = g.input;
  if (spec.kind == ArchKind::mlp) {
    for (size_t l = 0; l < spec.hidden.size(); ++l) {
      std::string base = "fc" + std::to_string(l);
      cur = ops::linear(g.tape, cur, node_of(base + ".w"), spec.bias ? node_of(base + ".b") : -1);
      cur = ops::relu(g.tape, cur);
      g.relu_nodes.push_back(cur);
    }
    cur = ops::linear(g.tape, cur, node_of("head.w"), spec.bias ? node_of("head.b") : -1);
  } else {
    cur = ops::reshape(g.tape, cur,
                       {g.tape.value(cur).dim(0), spec.in_channels, spec.in_h, spec.in_w});
    for (int l = 0; l < 3; ++l) {
      std::string base = "conv" + std::to_string(l);
      cur = ops::conv3x3(g.tape, cur, node_of(base + ".w"), spec.bias ? node_of(base + ".b") : -1);
      cur = ops::relu(g.tape, cur);
      g.relu_nodes.push_back(cur);
      if (l < 2) cur = ops::maxpool2x2(g.tape, cur);
    }
    cur = ops::global_avg_pool(g.tape, cur);
    cur = ops::linear(g.tape, cur, node_of("head.w"), spec.bias ? node_of("head.b") : -1);
  }
  g.logits = cur;
  return g;
}

// Plain batched forward pass: [m x input_dim] -> [m x K] logits.
template <class S>
TensorT<S> forward(const NetworkSpec& spec, const ParamVectorT<S>& params, const TensorT<S>& xs) {
  require_finite(xs, "forward inputs");
  auto g = build_graph(spec, params, xs, /*record=*/false);
  TensorT<S> out = g.tape.value(g.logits);
  require_finite(out, "forward logits");
  return out;
}

// ReLU firing pattern of every hidden unit over the batch, taken from the
// same forward arithmetic as forward().
template <class S>
ActivationPattern activation_pattern(const NetworkSpec& spec, const ParamVectorT<S>& params,
                                     const TensorT<S>& xs) {
  require_finite(xs, "pattern inputs");
  auto g = build_graph(spec, params, xs, /*record=*/false);
  ActivationPattern pat;
  pat.m = xs.dim(0);
  pat.units_per_layer = spec.relu_unit_counts();
  for (size_t l = 0; l < g.relu_nodes.size(); ++l) {
    const TensorT<S>& act = g.tape.value(g.relu_nodes[l]);
    std::vector<uint8_t> bits(act.data.size());
    for (size_t i = 0; i < act.data.size(); ++i) bits[i] = act.data[i] > S(0) ? 1 : 0;
    pat.bits.push_back(std::move(bits));
  }
  return pat;
}

// Mean loss and its gradient in the flat parameter space. Weight decay is the
// optimizer's business and is not included here.
template <class S>
std::pair<double, ParamVectorT<S>> loss_and_grad(const NetworkSpec& spec,
                                                 const ParamVectorT<S>& params,
                                                 const Batch& batch, LossKind kind) {
  require_finite(batch.xs, "batch inputs");
  TensorT<S> xs;
  xs.shape = batch.xs.shape;
  xs.data.assign(batch.xs.data.begin(), batch.xs.data.end());
  auto g = build_graph(spec, params, std::move(xs), /*record=*/true);
  Tensor targets = kind == LossKind::mse ? batch.mse_targets(spec.num_classes) : Tensor{};
  int loss_node = ops::scalar_loss(g.tape, g.logits, kind, batch.labels, targets);
  double value = static_cast<double>(g.tape.value(loss_node).data[0]);
  if (!std::isfinite(value)) throw NonFiniteError("non-finite loss value");
  TensorT<S> seed = TensorT<S>::zeros({});
  seed.data.assign(1, S(1));
  g.tape.backward(loss_node, seed);
  ParamVectorT<S> grad = ParamVectorT<S>::zeros(params.layout);
  for (size_t i = 0; i < g.param_nodes.size(); ++i) {
    const auto& e = params.layout->entries[i];
    const TensorT<S>& gt = g.tape.grad(g.param_nodes[i]);
    std::copy(gt.data.begin(), gt.data.end(), grad.values.begin() + e.offset);
  }
  for (S v : grad.values) {
    if (!std::isfinite(static_cast<double>(v))) throw NonFiniteError("non-finite gradient");
  }
  return {value, std::move(grad)};
}

inline double loss_value(const NetworkSpec& spec, const ParamVector& params, const Batch& batch,
                         LossKind kind) {
  Tensor logits = forward(spec, params, batch.xs);
  Tensor targets = kind == LossKind::mse ? batch.mse_targets(spec.num_classes) : Tensor{};
  return loss_on_logits(kind, logits, batch.labels, targets, /*want_grad=*/false).value;
}

// K x d Jacobian of the logits for one example: one reverse sweep per logit
// over a single shared tape.
inline Tensor logit_jacobian(const NetworkSpec& spec, const ParamVector& params, const Tensor& x) {
  Tensor xs = x;
  if (xs.rank() == 1) xs.shape = {1, xs.dim(0)};
  if (xs.rank() != 2 || xs.dim(0) != 1) throw Error("logit_jacobian takes a single example");
  require_finite(xs, "jacobian input");
  auto g = build_graph(spec, params, xs, /*record=*/true);
  int64_t k = spec.num_classes, d = params.dim();
  Tensor jac = Tensor::zeros({k, d});
  for (int64_t kk = 0; kk < k; ++kk) {
    Tensor seed = Tensor::zeros({1, k});
    seed.at2(0, kk) = 1.0;
    g.tape.backward(g.logits, seed);
    double* row = jac.row(kk);
    for (size_t i = 0; i < g.param_nodes.size(); ++i) {
      const auto& e = params.layout->entries[i];
      const Tensor& gt = g.tape.grad(g.param_nodes[i]);
      std::copy(gt.data.begin(), gt.data.end(), row + e.offset);
    }
  }
  require_finite(jac, "logit jacobian");
  return jac;
}

// Stacked per-example Jacobian rows: [m*K x d], example-major then logit.
inline Tensor jacobian_stack(const NetworkSpec& spec, const ParamVector& params, const Tensor& xs) {
  int64_t m = xs.dim(0), k = spec.num_classes, d = params.dim();
  Tensor stack = Tensor::zeros({m * k, d});
  for (int64_t i = 0; i < m; ++i) {
    Tensor x;
    x.shape = {1, xs.dim(1)};
    x.data.assign(xs.row(i), xs.row(i) + xs.dim(1));
    Tensor jac = logit_jacobian(spec, params, x);
    std::copy(jac.data.begin(), jac.data.end(), stack.row(i * k));
  }
  return stack;
}

// Hessian-vector product by central differencing of the gradient:
// (grad(w + h v) - grad(w - h v)) / (2h) with h = 1e-4 / (1 + |v|).
inline ParamVector hvp(const NetworkSpec& spec, const ParamVector& params, const Batch& batch,
                       LossKind kind, const std::vector<double>& v) {
  if (static_cast<int64_t>(v.size()) != params.dim()) throw Error("hvp direction length mismatch");
  double h = 1e-4 / (1.0 + norm2(v));
  ParamVector wp = params, wm = params;
  for (size_t i = 0; i < v.size(); ++i) {
    wp.values[i] += h * v[i];
    wm.values[i] -= h * v[i];
  }
  ParamVector gp = loss_and_grad(spec, wp, batch, kind).second;
  ParamVector gm = loss_and_grad(spec, wm, batch, kind).second;
  ParamVector out = ParamVector::zeros(params.layout);
  double inv = 1.0 / (2.0 * h);
  for (size_t i = 0; i < out.values.size(); ++i) {
    out.values[i] = (gp.values[i] - gm.values[i]) * inv;
  }
  return out;
}

inline std::vector<int> predict_labels(const Tensor& logits) {
  std::vector<int> out(static_cast<size_t>(logits.dim(0)));
  for (int64_t i = 0; i < logits.dim(0); ++i) {
    const double* row = logits.row(i);
    int best = 0;
    for (int64_t j = 1; j < logits.dim(1); ++j) {
      if (row[j] > row[best]) best = static_cast<int>(j);  // ties keep lowest index
    }
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

// Full-set logits, computed in chunks to bound peak tape memory.
inline Tensor forward_dataset(const NetworkSpec& spec, const ParamVector& params,
                              const Tensor& xs) {
  int64_t m = xs.dim(0);
  Tensor out = Tensor::zeros({m, spec.num_classes});
  const int64_t chunk = 512;
  for (int64_t start = 0; start < m; start += chunk) {
    int64_t n = std::min(chunk, m - start);
    Tensor part = Tensor::zeros({n, xs.dim(1)});
    std::copy(xs.row(start), xs.row(start) + n * xs.dim(1), part.data.begin());
    Tensor logits = forward(spec, params, part);
    std::copy(logits.data.begin(), logits.data.end(), out.row(start));
  }
  return out;
}

struct EvalResult {
  double loss = 0;
  double error = 0;  // 0/1 error rate
};

// Full-set loss and 0/1 error, evaluated in chunks to bound peak memory.
inline EvalResult evaluate(const NetworkSpec& spec, const ParamVector& params, const Tensor& xs,
                           const std::vector<int>& labels, LossKind kind) {
  int64_t m = xs.dim(0);
  if (m == 0) throw Error("evaluate on empty set");
  const int64_t chunk = 512;
  double loss_acc = 0;
  int64_t wrong = 0;
  for (int64_t start = 0; start < m; start += chunk) {
    int64_t n = std::min(chunk, m - start);
    Batch b;
    b.xs.shape = {n, xs.dim(1)};
    b.xs.data.assign(xs.row(start), xs.row(start) + n * xs.dim(1));
    b.labels.assign(labels.begin() + start, labels.begin() + start + n);
    Tensor logits = forward(spec, params, b.xs);
    Tensor targets = kind == LossKind::mse ? b.mse_targets(spec.num_classes) : Tensor{};
    loss_acc += loss_on_logits(kind, logits, b.labels, targets, false).value * static_cast<double>(n);
    auto pred = predict_labels(logits);
    for (int64_t i = 0; i < n; ++i) wrong += pred[static_cast<size_t>(i)] != labels[static_cast<size_t>(start + i)];
  }
  return {loss_acc / static_cast<double>(m), static_cast<double>(wrong) / static_cast<double>(m)};
}

}  // namespace dllab
