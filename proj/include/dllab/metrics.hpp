#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dllab/autodiff.hpp"
#include "dllab/binio.hpp"
#include "dllab/common.hpp"
#include "dllab/data.hpp"
#include "dllab/network.hpp"
#include "dllab/rng.hpp"
#include "dllab/tensor.hpp"

namespace dllab {

// ---------------------------------------------------------------------------
// Tangent-kernel grams and kernel distance
// ---------------------------------------------------------------------------

// Dense (m*K) x (m*K) gram of per-logit parameter gradients; block (i,j)
// holds J(x_i) J(x_j)^T.
struct GramMatrix {
  int64_t m_sub = 0;
  int num_classes = 0;
  Tensor values;
  std::vector<int64_t> indices;  // which dataset rows went in
};

inline GramMatrix ntk_gram(const NetworkSpec& spec, const ParamVector& params, const Tensor& xs,
                           std::vector<int64_t> indices = {}, int64_t mk_cap = 2048) {
  Tensor sub;
  if (indices.empty()) {
    sub = xs;
    indices.resize(xs.dim(0));
    for (int64_t i = 0; i < xs.dim(0); ++i) indices[i] = i;
  } else {
    sub = Tensor::zeros({static_cast<int64_t>(indices.size()), xs.dim(1)});
    for (size_t i = 0; i < indices.size(); ++i) {
      const double* src = xs.row(indices[i]);
      std::copy(src, src + xs.dim(1), sub.row(static_cast<int64_t>(i)));
    }
  }
  int64_t mk = sub.dim(0) * spec.num_classes;
  if (mk > mk_cap) {
    throw ConfigError("gram size " + fmt_int(mk) + " exceeds cap " + fmt_int(mk_cap) +
                      "; shrink the subsample");
  }
  Tensor jac = jacobian_stack(spec, params, sub);
  GramMatrix g;
  g.m_sub = sub.dim(0);
  g.num_classes = spec.num_classes;
  g.indices = std::move(indices);
  g.values = Tensor::zeros({mk, mk});
  matmul_nt_acc(g.values, jac, jac);
  return g;
}

// 1 - <Ga,Gb>_F / (|Ga|_F |Gb|_F), clamped to [0,1]. Scale-invariant, so a
// uniform rescaling of either network's Jacobian leaves it unchanged.
inline double kernel_distance_from_grams(const Tensor& ga, const Tensor& gb) {
  if (ga.shape != gb.shape) throw Error("gram shape mismatch");
  double cross = vec_dot(ga.data, gb.data);
  double na = std::sqrt(vec_dot(ga.data, ga.data));
  double nb = std::sqrt(vec_dot(gb.data, gb.data));
  if (na == 0 || nb == 0) throw Error("degenerate kernel gram (zero norm)");
  double s = 1.0 - cross / (na * nb);
  return std::clamp(s, 0.0, 1.0);
}

inline double kernel_distance(const NetworkSpec& spec, const ParamVector& a, const ParamVector& b,
                              const Tensor& xs, int64_t mk_cap = 2048) {
  GramMatrix ga = ntk_gram(spec, a, xs, {}, mk_cap);
  GramMatrix gb = ntk_gram(spec, b, xs, {}, mk_cap);
  return kernel_distance_from_grams(ga.values, gb.values);
}

// Kernel distance between two checkpoints dt apart, per unit time.
inline double kernel_velocity(const NetworkSpec& spec, const ParamVector& at_t,
                              const ParamVector& at_t_plus_dt, const Tensor& xs, double dt,
                              int64_t mk_cap = 2048) {
  if (!(dt > 0)) throw ConfigError("kernel velocity needs dt > 0");
  return kernel_distance(spec, at_t, at_t_plus_dt, xs, mk_cap) / dt;
}

// ---------------------------------------------------------------------------
// Error barrier along the straight interpolation path
// ---------------------------------------------------------------------------

// Curves over w(alpha) = alpha*a + (1-alpha)*b, with the barrier of each
// curve defined as max over the grid minus the endpoint mean. The grid always
// contains both endpoints, so barriers are >= 0.
struct BarrierProfile {
  std::vector<double> alphas;
  std::vector<double> train_loss;
  std::vector<double> train_error;
  std::vector<double> test_error;
  double barrier_train_loss = 0;
  double barrier_train_error = 0;
  double barrier_test_error = 0;
};

inline double barrier_of(const std::vector<double>& curve) {
  double hi = *std::max_element(curve.begin(), curve.end());
  return hi - 0.5 * (curve.front() + curve.back());
}

inline BarrierProfile error_barrier(const NetworkSpec& spec, const ParamVector& a,
                                    const ParamVector& b, const LabeledDataset& train,
                                    const LabeledDataset& test, LossKind kind, int n_alpha = 25) {
  if (n_alpha < 2) throw ConfigError("barrier grid needs at least the two endpoints");
  if (a.dim() != b.dim()) throw Error("barrier endpoints have different parameter counts");
  BarrierProfile prof;
  ParamVector w = a;
  for (int i = 0; i < n_alpha; ++i) {
    double alpha = static_cast<double>(i) / static_cast<double>(n_alpha - 1);
    for (int64_t j = 0; j < a.dim(); ++j) {
      w.values[j] = alpha * a.values[j] + (1.0 - alpha) * b.values[j];
    }
    EvalResult tr = evaluate(spec, w, train.inputs, train.labels, kind);
    EvalResult te = evaluate(spec, w, test.inputs, test.labels, kind);
    prof.alphas.push_back(alpha);
    prof.train_loss.push_back(tr.loss);
    prof.train_error.push_back(tr.error);
    prof.test_error.push_back(te.error);
  }
  prof.barrier_train_loss = barrier_of(prof.train_loss);
  prof.barrier_train_error = barrier_of(prof.train_error);
  prof.barrier_test_error = barrier_of(prof.test_error);
  return prof;
}

// ---------------------------------------------------------------------------
// Unit-activation and prediction distances
// ---------------------------------------------------------------------------

// Normalized Hamming distance between the two networks' ReLU on/off patterns
// over a shared input set.
inline double relu_distance(const NetworkSpec& spec, const ParamVector& a, const ParamVector& b,
                            const Tensor& xs) {
  ActivationPattern pa = activation_pattern(spec, a, xs);
  ActivationPattern pb = activation_pattern(spec, b, xs);
  int64_t total = pa.total_bits();
  if (total == 0) throw Error("architecture has no ReLU units");
  return static_cast<double>(pattern_hamming(pa, pb)) / static_cast<double>(total);
}

// Disagreement rate normalized so that independent predictors with matching
// error rates score about 1. Z is the expected disagreement of two
// independent classifiers with error rates p and p' over K classes.
inline double function_distance_from_predictions(const std::vector<int>& pred_a,
                                                 const std::vector<int>& pred_b,
                                                 const std::vector<int>& labels, int num_classes) {
  if (pred_a.size() != pred_b.size() || pred_a.size() != labels.size()) {
    throw Error("prediction/label length mismatch");
  }
  if (labels.empty()) throw Error("function distance over empty set");
  if (num_classes < 2) throw Error("function distance needs at least two classes");
  int64_t m = static_cast<int64_t>(labels.size());
  int64_t wrong_a = 0, wrong_b = 0, disagree = 0;
  for (int64_t i = 0; i < m; ++i) {
    if (pred_a[i] != labels[i]) ++wrong_a;
    if (pred_b[i] != labels[i]) ++wrong_b;
    if (pred_a[i] != pred_b[i]) ++disagree;
  }
  double p = static_cast<double>(wrong_a) / static_cast<double>(m);
  double q = static_cast<double>(wrong_b) / static_cast<double>(m);
  double k = static_cast<double>(num_classes);
  double z = p * (1 - q) + q * (1 - p) + p * q * (k - 2) / (k - 1);
  if (z == 0) {
    if (disagree == 0) return 0.0;
    throw Error("degenerate function-distance normalizer: both perfect yet disagreeing");
  }
  return (static_cast<double>(disagree) / static_cast<double>(m)) / z;
}

inline std::vector<int> predict_dataset(const NetworkSpec& spec, const ParamVector& params,
                                        const Tensor& xs) {
  int64_t m = xs.dim(0);
  std::vector<int> out;
  out.reserve(static_cast<size_t>(m));
  const int64_t chunk = 512;
  for (int64_t at = 0; at < m; at += chunk) {
    int64_t n = std::min(chunk, m - at);
    Tensor part = Tensor::zeros({n, xs.dim(1)});
    std::copy(xs.row(at), xs.row(at) + n * xs.dim(1), part.data.begin());
    std::vector<int> labels = predict_labels(forward(spec, params, part));
    out.insert(out.end(), labels.begin(), labels.end());
  }
  return out;
}

inline double function_distance(const NetworkSpec& spec, const ParamVector& a,
                                const ParamVector& b, const LabeledDataset& test) {
  return function_distance_from_predictions(predict_dataset(spec, a, test.inputs),
                                            predict_dataset(spec, b, test.inputs), test.labels,
                                            test.num_classes);
}

inline double weight_distance(const ParamVector& a, const ParamVector& b) {
  if (a.dim() != b.dim()) throw Error("weight distance over different parameter counts");
  double s = 0;
  for (int64_t i = 0; i < a.dim(); ++i) {
    double d = a.values[i] - b.values[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Logit-gradient centroids
// ---------------------------------------------------------------------------

// Row k is the mean over examples of the parameter gradient of logit k.
inline Tensor logit_gradient_centroids(const NetworkSpec& spec, const ParamVector& params,
                                       const Tensor& xs) {
  int64_t m = xs.dim(0), k = spec.num_classes, d = params.dim();
  if (m == 0) throw Error("centroids over empty set");
  Tensor mu = Tensor::zeros({k, d});
  for (int64_t i = 0; i < m; ++i) {
    Tensor x = Tensor::zeros({1, xs.dim(1)});
    std::copy(xs.row(i), xs.row(i) + xs.dim(1), x.data.begin());
    Tensor jac = logit_jacobian(spec, params, x);
    for (int64_t kk = 0; kk < k; ++kk) axpy(mu.row(kk), 1.0, jac.row(kk), d);
  }
  double inv = 1.0 / static_cast<double>(m);
  for (double& v : mu.data) v *= inv;
  return mu;
}

// Per-example, per-class norms of the deviation of each Jacobian row from its
// class centroid.
inline Tensor centroid_residual_norms(const NetworkSpec& spec, const ParamVector& params,
                                      const Tensor& xs) {
  Tensor mu = logit_gradient_centroids(spec, params, xs);
  int64_t m = xs.dim(0), k = spec.num_classes, d = params.dim();
  Tensor out = Tensor::zeros({m, k});
  for (int64_t i = 0; i < m; ++i) {
    Tensor x = Tensor::zeros({1, xs.dim(1)});
    std::copy(xs.row(i), xs.row(i) + xs.dim(1), x.data.begin());
    Tensor jac = logit_jacobian(spec, params, x);
    for (int64_t kk = 0; kk < k; ++kk) {
      double s = 0;
      const double* jr = jac.row(kk);
      const double* mr = mu.row(kk);
      for (int64_t j = 0; j < d; ++j) {
        double dv = jr[j] - mr[j];
        s += dv * dv;
      }
      out.at2(i, kk) = std::sqrt(s);
    }
  }
  return out;
}

// Mean over classes of the cosine between the two runs' class centroids.
inline double centroid_alignment(const NetworkSpec& spec, const ParamVector& a,
                                 const ParamVector& b, const Tensor& xs) {
  Tensor ma = logit_gradient_centroids(spec, a, xs);
  Tensor mb = logit_gradient_centroids(spec, b, xs);
  int64_t k = spec.num_classes, d = a.dim();
  double acc = 0;
  for (int64_t kk = 0; kk < k; ++kk) {
    double na = std::sqrt(dot(ma.row(kk), ma.row(kk), d));
    double nb = std::sqrt(dot(mb.row(kk), mb.row(kk), d));
    if (na == 0 || nb == 0) throw Error("zero-length logit gradient centroid");
    acc += dot(ma.row(kk), mb.row(kk), d) / (na * nb);
  }
  return acc / static_cast<double>(k);
}

// ---------------------------------------------------------------------------
// Hessian spectral norm via power iteration on Hessian-vector products
// ---------------------------------------------------------------------------

struct SpectralResult {
  double value = 0;       // |eigenvalue| (spectral norm when run undeflated)
  double eigenvalue = 0;  // signed Rayleigh quotient
  int iterations = 0;
  bool converged = false;
  std::vector<double> vector;  // unit eigenvector estimate
};

namespace detail {

inline void orthogonalize_against(std::vector<double>& v,
                                  const std::vector<std::vector<double>>& basis) {
  for (const auto& q : basis) {
    double c = vec_dot(v, q);
    for (size_t i = 0; i < v.size(); ++i) v[i] -= c * q[i];
  }
}

inline bool normalize(std::vector<double>& v) {
  double n = std::sqrt(vec_dot(v, v));
  if (n < 1e-300) return false;
  for (double& x : v) x /= n;
  return true;
}

inline SpectralResult power_iterate(const NetworkSpec& spec, const ParamVector& params,
                                    const Batch& batch, LossKind loss,
                                    const std::vector<std::pair<double, std::vector<double>>>& deflated,
                                    uint64_t seed, int max_iter, double tol) {
  int64_t d = params.dim();
  std::vector<std::vector<double>> basis;
  for (const auto& [lam, q] : deflated) basis.push_back(q);

  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(d));
  for (double& x : v) x = rng.normal();
  detail::orthogonalize_against(v, basis);
  if (!detail::normalize(v)) throw Error("degenerate start vector in power iteration");

  SpectralResult res;
  res.vector = v;
  double prev = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= max_iter; ++it) {
    std::vector<double> hv = hvp(spec, params, batch, loss, v).values;
    for (const auto& [lam, q] : deflated) {
      double c = lam * vec_dot(q, v);
      for (size_t i = 0; i < hv.size(); ++i) hv[i] -= c * q[i];
    }
    double lam = vec_dot(v, hv);
    res.iterations = it;
    res.eigenvalue = lam;
    res.value = std::abs(lam);
    detail::orthogonalize_against(hv, basis);
    if (!detail::normalize(hv)) {
      // Operator annihilates the iterate: remaining spectrum is zero.
      res.eigenvalue = 0;
      res.value = 0;
      res.converged = true;
      return res;
    }
    v = hv;
    res.vector = v;
    if (std::abs(lam - prev) < tol * std::max(std::abs(lam), 1e-12)) {
      res.converged = true;
      return res;
    }
    prev = lam;
  }
  return res;  // converged stays false; last estimate retained
}

}  // namespace detail

inline SpectralResult hessian_spectral_norm(const NetworkSpec& spec, const ParamVector& params,
                                            const Batch& batch, LossKind loss,
                                            uint64_t seed = 1234, int max_iter = 200,
                                            double tol = 1e-4) {
  return detail::power_iterate(spec, params, batch, loss, {}, seed, max_iter, tol);
}

// Top-k eigenpairs by magnitude, peeled off one at a time with deflation.
inline std::vector<SpectralResult> top_hessian_eigs(const NetworkSpec& spec,
                                                    const ParamVector& params, const Batch& batch,
                                                    LossKind loss, int k, uint64_t seed = 1234,
                                                    int max_iter = 200, double tol = 1e-4) {
  if (k < 1 || k > params.dim()) throw ConfigError("eigenpair count out of range");
  std::vector<SpectralResult> out;
  std::vector<std::pair<double, std::vector<double>>> deflated;
  for (int j = 0; j < k; ++j) {
    SpectralResult r =
        detail::power_iterate(spec, params, batch, loss, deflated, mix64(seed, j), max_iter, tol);
    deflated.push_back({r.eigenvalue, r.vector});
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Escape threshold
// ---------------------------------------------------------------------------

// Scaled one-step loss change of the local quadratic model for the update
// w -> w - eta*delta. Equal to 2*dL_quad/|grad|^2, so its sign says exactly
// whether the quadratic model descends.
inline double escape_threshold(const NetworkSpec& spec, const ParamVector& params,
                               const Batch& batch, LossKind loss, double eta,
                               const std::vector<double>& delta) {
  auto [value, grad] = loss_and_grad(spec, params, batch, loss);
  (void)value;
  double gnorm2 = vec_dot(grad.values, grad.values);
  if (gnorm2 == 0) throw Error("escape threshold undefined at zero gradient");
  std::vector<double> hd = hvp(spec, params, batch, loss, delta).values;
  double quad = vec_dot(delta, hd);
  double lin = vec_dot(delta, grad.values);
  return eta * (eta * quad - 2.0 * lin) / gnorm2;
}

// Closed-form descent threshold for plain gradient descent; positive means a
// step along the top-curvature direction still shrinks the loss.
inline double gd_escape_scalar(double eta, double lambda_max) { return 2.0 - eta * lambda_max; }

// ---------------------------------------------------------------------------
// Centroid span vs top curvature direction
// ---------------------------------------------------------------------------

// Fraction of the top Hessian eigenvector's squared norm captured by the
// orthogonal projection onto the span of the class centroids.
inline double centroid_hessian_overlap(const NetworkSpec& spec, const ParamVector& params,
                                       const Batch& batch, LossKind loss, uint64_t seed = 1234) {
  Tensor mu = logit_gradient_centroids(spec, params, batch.xs);
  int64_t k = spec.num_classes, d = params.dim();
  std::vector<std::vector<double>> q;
  for (int64_t kk = 0; kk < k; ++kk) {
    std::vector<double> v(mu.row(kk), mu.row(kk) + d);
    double before = std::sqrt(vec_dot(v, v));
    detail::orthogonalize_against(v, q);
    double after = std::sqrt(vec_dot(v, v));
    if (before == 0 || after < 1e-12 * before) continue;  // dependent direction
    for (double& x : v) x /= after;
    q.push_back(std::move(v));
  }
  if (q.empty()) throw Error("zero-length logit gradient centroid");
  SpectralResult top = hessian_spectral_norm(spec, params, batch, loss, seed);
  double acc = 0;
  for (const auto& basis_vec : q) {
    double c = vec_dot(basis_vec, top.vector);
    acc += c * c;
  }
  return std::clamp(acc, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// 2D weight-plane scans
// ---------------------------------------------------------------------------

struct PlanePoint {
  double u = 0;
  double v = 0;
  double residual = 0;  // out-of-plane distance left after least squares
};

// Least-squares coefficients of w against the affine frame
// origin + u*d1 + v*d2.
inline PlanePoint project_onto_plane(const std::vector<double>& origin,
                                     const std::vector<double>& d1, const std::vector<double>& d2,
                                     const std::vector<double>& w) {
  double a11 = vec_dot(d1, d1), a12 = vec_dot(d1, d2), a22 = vec_dot(d2, d2);
  std::vector<double> rhs(w.size());
  for (size_t i = 0; i < w.size(); ++i) rhs[i] = w[i] - origin[i];
  double b1 = vec_dot(d1, rhs), b2 = vec_dot(d2, rhs);
  double det = a11 * a22 - a12 * a12;
  if (det <= 1e-12 * a11 * a22 || a11 == 0 || a22 == 0) {
    throw Error("degenerate plane: anchor directions are collinear");
  }
  PlanePoint p;
  p.u = (a22 * b1 - a12 * b2) / det;
  p.v = (a11 * b2 - a12 * b1) / det;
  double r2 = 0;
  for (size_t i = 0; i < w.size(); ++i) {
    double e = rhs[i] - p.u * d1[i] - p.v * d2[i];
    r2 += e * e;
  }
  p.residual = std::sqrt(std::max(r2, 0.0));
  return p;
}

struct PlaneScanOptions {
  int n = 21;
  double lo = -0.5;
  double hi = 1.5;
  std::optional<ParamVector> tangent_anchor;                // order-1 expansion point
  std::vector<std::pair<double, ParamVector>> trajectory;   // (epoch, weights) to project
};

struct PlaneScan {
  std::vector<double> us, vs;
  Tensor test_error;    // n x n, indexed [u][v]
  Tensor fn_dist;       // function distance to the u=1,v=0 anchor's predictions
  Tensor taylor_error;  // 0/1 error of the order-1 model; empty without anchor
  std::vector<std::pair<double, PlanePoint>> projections;  // (epoch, coefficients)

  static constexpr const char* kHeader = "u,v,test_error,fn_dist,taylor_error";

  void write_csv(const std::filesystem::path& path) const {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot write " + path.string());
    f << kHeader << "\n";
    bool taylor = taylor_error.numel() > 0;
    for (size_t i = 0; i < us.size(); ++i) {
      for (size_t j = 0; j < vs.size(); ++j) {
        f << fmt_double(us[i]) << "," << fmt_double(vs[j]) << ","
          << fmt_double(test_error.at2(static_cast<int64_t>(i), static_cast<int64_t>(j))) << ","
          << fmt_double(fn_dist.at2(static_cast<int64_t>(i), static_cast<int64_t>(j))) << ","
          << (taylor ? fmt_double(taylor_error.at2(static_cast<int64_t>(i), static_cast<int64_t>(j)))
                     : std::string("nan"))
          << "\n";
      }
    }
    if (!f) throw Error("write failed: " + path.string());
  }

  void write_projections_csv(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot write " + path.string());
    f << "epoch,u,v,residual\n";
    for (const auto& [epoch, p] : projections) {
      f << fmt_double(epoch) << "," << fmt_double(p.u) << "," << fmt_double(p.v) << ","
        << fmt_double(p.residual) << "\n";
    }
  }
};

// Scans the affine plane through parent (0,0), child_a (1,0), child_b (0,1).
inline PlaneScan plane_scan(const NetworkSpec& spec, const ParamVector& parent,
                            const ParamVector& child_a, const ParamVector& child_b,
                            const LabeledDataset& eval_set, LossKind loss,
                            const PlaneScanOptions& opt = {}) {
  if (opt.n < 2) throw ConfigError("plane grid needs at least 2 points per axis");
  int64_t d = parent.dim();
  if (child_a.dim() != d || child_b.dim() != d) throw Error("plane anchors differ in size");
  std::vector<double> d1(static_cast<size_t>(d)), d2(static_cast<size_t>(d));
  for (int64_t i = 0; i < d; ++i) {
    d1[i] = child_a.values[i] - parent.values[i];
    d2[i] = child_b.values[i] - parent.values[i];
  }
  // Degeneracy check doubles as the projection solve for anchors.
  (void)project_onto_plane(parent.values, d1, d2, child_a.values);

  PlaneScan scan;
  for (int i = 0; i < opt.n; ++i) {
    double t = static_cast<double>(i) / static_cast<double>(opt.n - 1);
    scan.us.push_back(opt.lo + t * (opt.hi - opt.lo));
  }
  scan.vs = scan.us;
  int64_t n = opt.n;
  scan.test_error = Tensor::zeros({n, n});
  scan.fn_dist = Tensor::zeros({n, n});

  std::vector<int> ref_pred = predict_dataset(spec, child_a, eval_set.inputs);

  Tensor base_logits;
  Tensor jac;
  std::vector<double> anchor_w;
  bool taylor = opt.tangent_anchor.has_value();
  if (taylor) {
    scan.taylor_error = Tensor::zeros({n, n});
    const ParamVector& anchor = *opt.tangent_anchor;
    if (anchor.dim() != d) throw Error("tangent anchor differs in size");
    anchor_w = anchor.values;
    base_logits = forward(spec, anchor, eval_set.inputs);
    jac = jacobian_stack(spec, anchor, eval_set.inputs);
  }

  int64_t m = eval_set.size();
  int k = eval_set.num_classes;
  ParamVector w = parent;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double u = scan.us[static_cast<size_t>(i)], v = scan.vs[static_cast<size_t>(j)];
      for (int64_t p = 0; p < d; ++p) {
        w.values[p] = parent.values[p] + u * d1[p] + v * d2[p];
      }
      EvalResult er = evaluate(spec, w, eval_set.inputs, eval_set.labels, loss);
      scan.test_error.at2(i, j) = er.error;
      std::vector<int> pred = predict_dataset(spec, w, eval_set.inputs);
      scan.fn_dist.at2(i, j) =
          function_distance_from_predictions(pred, ref_pred, eval_set.labels, k);
      if (taylor) {
        Tensor lin = base_logits;
        std::vector<double> dw(static_cast<size_t>(d));
        for (int64_t p = 0; p < d; ++p) dw[p] = w.values[p] - anchor_w[p];
        for (int64_t ex = 0; ex < m; ++ex) {
          for (int kk = 0; kk < k; ++kk) {
            lin.at2(ex, kk) += dot(jac.row(ex * k + kk), dw.data(), d);
          }
        }
        std::vector<int> lin_pred = predict_labels(lin);
        int64_t wrong = 0;
        for (int64_t ex = 0; ex < m; ++ex) {
          if (lin_pred[static_cast<size_t>(ex)] != eval_set.labels[static_cast<size_t>(ex)]) {
            ++wrong;
          }
        }
        scan.taylor_error.at2(i, j) = static_cast<double>(wrong) / static_cast<double>(m);
      }
    }
  }

  for (const auto& [epoch, params] : opt.trajectory) {
    scan.projections.push_back({epoch, project_onto_plane(parent.values, d1, d2, params.values)});
  }
  return scan;
}

// ---------------------------------------------------------------------------
// Prediction export
// ---------------------------------------------------------------------------

inline constexpr char kPredictionsMagic[4] = {'D', 'L', 'P', 'R'};

inline Tensor softmax_rows(const Tensor& logits) {
  Tensor out = logits;
  for (int64_t i = 0; i < out.dim(0); ++i) {
    double* row = out.row(i);
    double hi = *std::max_element(row, row + out.dim(1));
    double z = 0;
    for (int64_t j = 0; j < out.dim(1); ++j) {
      row[j] = std::exp(row[j] - hi);
      z += row[j];
    }
    for (int64_t j = 0; j < out.dim(1); ++j) row[j] /= z;
  }
  return out;
}

// Writes one row of softmax probabilities per example.
inline void export_predictions(const NetworkSpec& spec, const ParamVector& params,
                               const Tensor& xs, const std::filesystem::path& path) {
  int64_t m = xs.dim(0);
  Tensor probs = Tensor::zeros({m, spec.num_classes});
  const int64_t chunk = 512;
  for (int64_t at = 0; at < m; at += chunk) {
    int64_t nrows = std::min(chunk, m - at);
    Tensor part = Tensor::zeros({nrows, xs.dim(1)});
    std::copy(xs.row(at), xs.row(at) + nrows * xs.dim(1), part.data.begin());
    Tensor p = softmax_rows(forward(spec, params, part));
    std::copy(p.data.begin(), p.data.end(), probs.row(at));
  }
  ByteWriter w;
  w.u64(static_cast<uint64_t>(m));
  w.u64(static_cast<uint64_t>(spec.num_classes));
  w.f64_array(probs.data.data(), probs.data.size());
  write_framed(path, kPredictionsMagic, w);
}

inline Tensor load_predictions(const std::filesystem::path& path) {
  std::vector<uint8_t> payload = read_framed(path, kPredictionsMagic);
  ByteReader r(payload.data(), payload.size(), path.string());
  int64_t m = static_cast<int64_t>(r.u64());
  int64_t k = static_cast<int64_t>(r.u64());
  Tensor out = Tensor::zeros({m, k});
  r.f64_array(out.data.data(), out.data.size());
  if (r.remaining() != 0) throw FormatError("trailing bytes in " + path.string());
  return out;
}

}  // namespace dllab
