#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dllab/autodiff.hpp"
#include "dllab/common.hpp"

namespace dllab {

enum class OptKind { sgd, adam };

inline std::string opt_name(OptKind k) { return k == OptKind::sgd ? "sgd" : "adam"; }

inline OptKind opt_from_name(const std::string& s) {
  if (s == "sgd") return OptKind::sgd;
  if (s == "adam") return OptKind::adam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

struct OptimizerConfig {
  OptKind kind = OptKind::sgd;
  double momentum = 0.0;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0,1)");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (kind == OptKind::adam) {
      if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("adam betas must be in [0,1)");
      if (eps <= 0) throw ConfigError("adam eps must be positive");
    }
  }
};

// Mutable optimizer memory: heavy-ball buffer for SGD, first/second moments
// plus step counter for Adam.
template <class S>
struct OptimizerStateT {
  OptimizerConfig config;
  uint64_t step = 0;
  std::vector<S> buf;  // momentum buffer (sgd) / first moment (adam)
  std::vector<S> m2;   // second moment (adam only)

  static OptimizerStateT fresh(const OptimizerConfig& cfg, int64_t dim) {
    cfg.validate();
    OptimizerStateT st;
    st.config = cfg;
    st.buf.assign(static_cast<size_t>(dim), S(0));
    if (cfg.kind == OptKind::adam) st.m2.assign(static_cast<size_t>(dim), S(0));
    return st;
  }
};

using OptimizerState = OptimizerStateT<double>;

// One parameter update in place, given the already-computed data-loss
// gradient. Weight decay enters as an additive lambda * w term here.
// SGD uses the heavy-ball form: buf <- mu * buf + g; w <- w - eta * buf.
template <class S>
void apply_update(std::vector<S>& w, OptimizerStateT<S>& st, const std::vector<S>& grad,
                  double eta) {
  if (w.size() != grad.size() || w.size() != st.buf.size()) {
    throw Error("optimizer dimension mismatch");
  }
  const auto& c = st.config;
  S e = static_cast<S>(eta);
  st.step += 1;
  if (c.kind == OptKind::sgd) {
    S mu = static_cast<S>(c.momentum), wd = static_cast<S>(c.weight_decay);
    for (size_t i = 0; i < w.size(); ++i) {
      S g = grad[i] + wd * w[i];
      st.buf[i] = mu * st.buf[i] + g;
      w[i] -= e * st.buf[i];
    }
  } else {
    S b1 = static_cast<S>(c.beta1), b2 = static_cast<S>(c.beta2),
      epsv = static_cast<S>(c.eps), wd = static_cast<S>(c.weight_decay);
    double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
    for (size_t i = 0; i < w.size(); ++i) {
      S g = grad[i] + wd * w[i];
      st.buf[i] = b1 * st.buf[i] + (S(1) - b1) * g;
      st.m2[i] = b2 * st.m2[i] + (S(1) - b2) * g * g;
      S mhat = st.buf[i] / static_cast<S>(bc1);
      S vhat = st.m2[i] / static_cast<S>(bc2);
      w[i] -= e * mhat / (std::sqrt(vhat) + epsv);
    }
  }
}

// Pure single step: returns updated (params, state) without mutating inputs.
template <class S>
std::pair<ParamVectorT<S>, OptimizerStateT<S>> sgd_step(const NetworkSpec& spec,
                                                        const ParamVectorT<S>& params,
                                                        const OptimizerStateT<S>& state,
                                                        const Batch& batch, LossKind loss,
                                                        double eta) {
  auto [value, grad] = loss_and_grad(spec, params, batch, loss);
  (void)value;
  ParamVectorT<S> w = params;
  OptimizerStateT<S> st = state;
  apply_update(w.values, st, grad.values, eta);
  return {std::move(w), std::move(st)};
}

// Learning-rate schedule over the epoch clock. A step-decay boundary counts
// as already decayed: eta(t) = base * factor^(#{boundaries <= t}).
struct Schedule {
  enum class Kind { constant, step_decay } kind = Kind::constant;
  double base = 0.1;
  double factor = 0.1;
  std::vector<double> boundaries;  // epochs, strictly increasing

  void validate() const {
    if (base <= 0) throw ConfigError("learning rate must be positive");
    if (kind == Kind::step_decay) {
      if (factor <= 0) throw ConfigError("decay factor must be positive");
      for (size_t i = 1; i < boundaries.size(); ++i) {
        if (boundaries[i] <= boundaries[i - 1]) throw ConfigError("decay epochs must increase");
      }
    }
  }

  double lr_at(double epoch) const {
    if (kind == Kind::constant) return base;
    double lr = base;
    for (double b : boundaries) {
      if (epoch >= b) lr *= factor;
    }
    return lr;
  }
};

}  // namespace dllab
