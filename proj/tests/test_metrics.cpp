#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "dllab/data.hpp"
#include "dllab/metrics.hpp"
#include "oracles.hpp"

using namespace dllab;

namespace {

NetworkSpec tiny_mlp(int input_dim = 2, int num_classes = 2, std::vector<int> hidden = {5},
                     bool bias = true) {
  NetworkSpec spec;
  spec.kind = ArchKind::mlp;
  spec.input_dim = input_dim;
  spec.num_classes = num_classes;
  spec.hidden = std::move(hidden);
  spec.bias = bias;
  return spec;
}

Tensor random_inputs(int64_t m, int dim, uint64_t seed) {
  Rng rng(seed);
  Tensor xs = Tensor::zeros({m, dim});
  for (auto& v : xs.data) v = rng.normal();
  return xs;
}

LabeledDataset tiny_dataset(int64_t m, int num_classes, uint64_t seed) {
  LabeledDataset ds;
  ds.inputs = random_inputs(m, 2, seed);
  ds.num_classes = num_classes;
  Rng rng(mix64(seed, 1));
  for (int64_t i = 0; i < m; ++i) ds.labels.push_back(static_cast<int>(rng.below(num_classes)));
  return ds;
}

}  // namespace

TEST_CASE("ntk gram equals the stacked jacobian outer product") {
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    auto inst = oracles::random_instance(seed);
    GramMatrix g = ntk_gram(inst.spec, inst.params, inst.batch.xs);
    Tensor jac = jacobian_stack(inst.spec, inst.params, inst.batch.xs);
    int64_t mk = jac.dim(0);
    REQUIRE(g.values.shape == std::vector<int64_t>{mk, mk});
    double scale = 1.0;
    for (double v : g.values.data) scale = std::max(scale, std::abs(v));
    for (int64_t i = 0; i < mk; ++i) {
      for (int64_t j = 0; j < mk; ++j) {
        double want = dot(jac.row(i), jac.row(j), jac.dim(1));
        REQUIRE(std::abs(g.values.at2(i, j) - want) <= 1e-12 * scale);
      }
    }
    // Symmetry is exact; the spectrum must be non-negative up to round-off.
    double trace = 0;
    for (int64_t i = 0; i < mk; ++i) {
      trace += g.values.at2(i, i);
      for (int64_t j = 0; j < mk; ++j) REQUIRE(g.values.at2(i, j) == g.values.at2(j, i));
    }
    auto eigs = oracles::jacobi_eigenvalues(g.values);
    REQUIRE(eigs.front() > -1e-8 * trace / static_cast<double>(mk));
  }
}

TEST_CASE("ntk gram honors subsample indices and the size cap") {
  auto spec = tiny_mlp(2, 2, {4});
  ParamVector p = init_params(spec, 3);
  Tensor xs = random_inputs(10, 2, 4);
  GramMatrix sub = ntk_gram(spec, p, xs, {1, 4, 7});
  REQUIRE(sub.m_sub == 3);
  REQUIRE(sub.indices == std::vector<int64_t>{1, 4, 7});
  Tensor picked = Tensor::zeros({3, 2});
  int64_t row = 0;
  for (int64_t i : {1, 4, 7}) {
    std::copy(xs.row(i), xs.row(i) + 2, picked.row(row++));
  }
  GramMatrix direct = ntk_gram(spec, p, picked);
  REQUIRE(sub.values.data == direct.values.data);
  REQUIRE_THROWS_AS(ntk_gram(spec, p, xs, {}, 8), ConfigError);
}

TEST_CASE("kernel distance has a closed form on a two-point gram") {
  Tensor ga = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor gb = Tensor::from({2, 2}, {1, 1, 1, 1});
  double want = 1.0 - 1.0 / std::sqrt(2.0);
  REQUIRE(std::abs(kernel_distance_from_grams(ga, gb) - want) <= 1e-12);
  REQUIRE(kernel_distance_from_grams(ga, ga) <= 1e-12);
  Tensor zero = Tensor::zeros({2, 2});
  REQUIRE_THROWS_AS(kernel_distance_from_grams(ga, zero), Error);
  Tensor odd = Tensor::zeros({3, 3});
  REQUIRE_THROWS_AS(kernel_distance_from_grams(ga, odd), Error);
}

TEST_CASE("kernel distance is zero at equal weights and bounded in [0,1]") {
  auto spec = tiny_mlp(2, 2, {6});
  Tensor xs = random_inputs(6, 2, 9);
  ParamVector p = init_params(spec, 5);
  REQUIRE(kernel_distance(spec, p, p, xs) <= 1e-12);
  for (uint64_t s = 0; s < 5; ++s) {
    ParamVector q = init_params(spec, 100 + s);
    double dist = kernel_distance(spec, p, q, xs);
    REQUIRE(dist >= 0.0);
    REQUIRE(dist <= 1.0);
  }
}

TEST_CASE("uniform weight scaling leaves the kernel direction unchanged") {
  // Positive homogeneity: scaling every weight of a bias-free ReLU network
  // rescales the gram uniformly, which the cosine form ignores.
  auto spec = tiny_mlp(3, 2, {5, 4}, /*bias=*/false);
  ParamVector p = init_params(spec, 21);
  Tensor xs = random_inputs(5, 3, 22);
  ParamVector scaled = p;
  for (auto& v : scaled.values) v *= 2.0;
  REQUIRE(kernel_distance(spec, p, scaled, xs) <= 1e-10);

  auto lin = tiny_mlp(3, 2, {}, true);
  ParamVector lp = init_params(lin, 23);
  ParamVector lscaled = lp;
  for (auto& v : lscaled.values) v *= 3.0;
  REQUIRE(kernel_distance(lin, lp, lscaled, xs) <= 1e-10);
}

TEST_CASE("kernel velocity divides by the time gap and rejects bad gaps") {
  auto spec = tiny_mlp(2, 2, {4});
  ParamVector a = init_params(spec, 1);
  ParamVector b = init_params(spec, 2);
  Tensor xs = random_inputs(4, 2, 3);
  double dist = kernel_distance(spec, a, b, xs);
  REQUIRE(kernel_velocity(spec, a, b, xs, 0.4) == Catch::Approx(dist / 0.4));
  REQUIRE_THROWS_AS(kernel_velocity(spec, a, b, xs, 0.0), ConfigError);
  REQUIRE_THROWS_AS(kernel_velocity(spec, a, b, xs, -1.0), ConfigError);
}

TEST_CASE("a linear model's kernel never moves during training") {
  auto lin = tiny_mlp(2, 2, {}, true);
  ParamVector a = init_params(lin, 31);
  ParamVector b = init_params(lin, 32);
  Tensor xs = random_inputs(6, 2, 33);
  REQUIRE(kernel_distance(lin, a, b, xs) <= 1e-14);
  REQUIRE(kernel_velocity(lin, a, b, xs, 0.4) <= 1e-14);
}

TEST_CASE("identical barrier endpoints give exactly zero barrier") {
  auto spec = tiny_mlp();
  ParamVector p = init_params(spec, 8);
  LabeledDataset train = tiny_dataset(12, 2, 41);
  LabeledDataset test = tiny_dataset(8, 2, 42);
  BarrierProfile prof = error_barrier(spec, p, p, train, test, LossKind::cross_entropy);
  REQUIRE(prof.alphas.size() == 25);
  REQUIRE(prof.barrier_train_loss <= 1e-12);
  REQUIRE(prof.barrier_train_error <= 1e-12);
  REQUIRE(prof.barrier_test_error <= 1e-12);
}

TEST_CASE("barrier endpoints reproduce direct evaluation") {
  auto spec = tiny_mlp();
  ParamVector a = init_params(spec, 51);
  ParamVector b = init_params(spec, 52);
  LabeledDataset train = tiny_dataset(12, 2, 53);
  LabeledDataset test = tiny_dataset(8, 2, 54);
  BarrierProfile prof = error_barrier(spec, a, b, train, test, LossKind::cross_entropy, 11);
  REQUIRE(prof.alphas.front() == 0.0);
  REQUIRE(prof.alphas.back() == 1.0);
  // alpha = 1 is endpoint a, alpha = 0 is endpoint b.
  EvalResult ea = evaluate(spec, a, train.inputs, train.labels, LossKind::cross_entropy);
  EvalResult eb = evaluate(spec, b, train.inputs, train.labels, LossKind::cross_entropy);
  REQUIRE(std::abs(prof.train_loss.back() - ea.loss) <= 1e-12);
  REQUIRE(std::abs(prof.train_loss.front() - eb.loss) <= 1e-12);
  REQUIRE(prof.train_error.back() == ea.error);
  REQUIRE(prof.train_error.front() == eb.error);
  REQUIRE_THROWS_AS(error_barrier(spec, a, b, train, test, LossKind::cross_entropy, 1),
                    ConfigError);
}

TEST_CASE("a hand-built double well has unit loss barrier at the midpoint") {
  // 1 -> [2] -> 1 bias-free network on the single example (x=1, y=1) under
  // mean squared error. Both endpoints fit exactly; their average kills both
  // hidden units and predicts 0, so the midpoint loss is exactly 1.
  NetworkSpec spec = tiny_mlp(1, 1, {2}, /*bias=*/false);
  auto lay = spec.param_layout();
  ParamVector a = ParamVector::zeros(lay);
  ParamVector b = ParamVector::zeros(lay);
  a.store(lay->find("fc0.w"), Tensor::from({2, 1}, {1, -1}));
  a.store(lay->find("head.w"), Tensor::from({1, 2}, {1, 0}));
  b.store(lay->find("fc0.w"), Tensor::from({2, 1}, {-1, 1}));
  b.store(lay->find("head.w"), Tensor::from({1, 2}, {0, 1}));

  LabeledDataset one;
  one.inputs = Tensor::from({1, 1}, {1.0});
  one.labels = {0};
  one.num_classes = 1;

  BarrierProfile prof = error_barrier(spec, a, b, one, one, LossKind::mse, 25);
  REQUIRE(prof.train_loss.front() == 0.0);
  REQUIRE(prof.train_loss.back() == 0.0);
  REQUIRE(std::abs(prof.train_loss[12] - 1.0) <= 1e-12);  // alpha = 0.5
  REQUIRE(std::abs(prof.barrier_train_loss - 1.0) <= 1e-10);
}

TEST_CASE("relu distance counts flipped units and rejects linear models") {
  NetworkSpec spec = tiny_mlp(2, 2, {2}, /*bias=*/false);
  auto lay = spec.param_layout();
  ParamVector a = ParamVector::zeros(lay);
  ParamVector b = ParamVector::zeros(lay);
  a.store(lay->find("fc0.w"), Tensor::from({2, 2}, {1, 0, 0, 1}));
  b.store(lay->find("fc0.w"), Tensor::from({2, 2}, {-1, 0, 0, 1}));
  Tensor xs = Tensor::from({2, 2}, {1, 1, -1, 1});
  // unit 0 flips on both examples, unit 1 agrees: 2 of 4 bits differ.
  REQUIRE(relu_distance(spec, a, b, xs) == 0.5);
  REQUIRE(relu_distance(spec, a, a, xs) == 0.0);

  auto lin = tiny_mlp(2, 2, {});
  ParamVector lp = init_params(lin, 1);
  REQUIRE_THROWS_AS(relu_distance(lin, lp, lp, xs), Error);
}

TEST_CASE("function distance normalizer matches worked two-class and ten-class cases") {
  // Two classes, both 50% wrong, disagreeing on half the examples: Z = 1/2
  // and the raw disagreement is 1/2, so the distance is exactly 1.
  std::vector<int> labels4 = {0, 0, 0, 0};
  std::vector<int> a4 = {0, 0, 1, 1};
  std::vector<int> b4 = {0, 1, 1, 0};
  REQUIRE(std::abs(function_distance_from_predictions(a4, b4, labels4, 2) - 1.0) <= 1e-10);

  // Ten classes, 90 examples, both 10% wrong, 17 disagreements:
  // Z = 0.09 + 0.09 + 0.01 * 8/9 = 17/90 exactly.
  std::vector<int> labels(90, 0), pa(90, 0), pb(90, 0);
  for (int i = 0; i < 9; ++i) pa[i] = 1;   // a errs on 0..8
  for (int i = 8; i < 17; ++i) pb[i] = 2;  // b errs on 8..16
  REQUIRE(std::abs(function_distance_from_predictions(pa, pb, labels, 10) - 1.0) <= 1e-10);
}

TEST_CASE("function distance edge cases") {
  std::vector<int> labels = {0, 1, 0, 1};
  std::vector<int> perfect = labels;
  REQUIRE(function_distance_from_predictions(perfect, perfect, labels, 2) == 0.0);
  std::vector<int> off = {1, 1, 0, 1};
  REQUIRE_THROWS_WITH(function_distance_from_predictions(perfect, perfect, {0, 1, 0}, 2),
                      Catch::Matchers::ContainsSubstring("length mismatch"));
  REQUIRE_THROWS_AS(function_distance_from_predictions(perfect, perfect, labels, 1), Error);
  // identical imperfect predictions: zero disagreement over nonzero Z
  REQUIRE(function_distance_from_predictions(off, off, labels, 2) == 0.0);
  // one perfect, one 50% wrong: disagreement equals the error rate, Z = p
  std::vector<int> half = {1, 0, 0, 1};
  double v = function_distance_from_predictions(half, perfect, labels, 2);
  REQUIRE(v == Catch::Approx(1.0));
}

TEST_CASE("weight distance is the flat euclidean gap") {
  auto spec = tiny_mlp(2, 2, {3});
  ParamVector a = init_params(spec, 61);
  ParamVector b = init_params(spec, 62);
  double want = 0;
  for (int64_t i = 0; i < a.dim(); ++i) {
    double d = a.values[i] - b.values[i];
    want += d * d;
  }
  REQUIRE(weight_distance(a, b) == Catch::Approx(std::sqrt(want)).epsilon(1e-14));
  REQUIRE(weight_distance(a, a) == 0.0);
}

TEST_CASE("logit gradient centroids are per-class means of jacobian rows") {
  auto inst = oracles::random_instance(77);
  Tensor mu = logit_gradient_centroids(inst.spec, inst.params, inst.batch.xs);
  Tensor jac = jacobian_stack(inst.spec, inst.params, inst.batch.xs);
  int64_t m = inst.batch.xs.dim(0), k = inst.spec.num_classes, d = inst.params.dim();
  REQUIRE(mu.shape == std::vector<int64_t>{k, d});
  for (int64_t kk = 0; kk < k; ++kk) {
    for (int64_t j = 0; j < d; ++j) {
      double acc = 0;
      for (int64_t i = 0; i < m; ++i) acc += jac.at2(i * k + kk, j);
      REQUIRE(std::abs(mu.at2(kk, j) - acc / static_cast<double>(m)) <= 1e-12);
    }
  }
}

TEST_CASE("centroid residuals vanish when every example is the same point") {
  auto spec = tiny_mlp(2, 2, {4});
  ParamVector p = init_params(spec, 71);
  Tensor xs = Tensor::zeros({3, 2});
  for (int64_t i = 0; i < 3; ++i) {
    xs.at2(i, 0) = 0.7;
    xs.at2(i, 1) = -0.2;
  }
  Tensor res = centroid_residual_norms(spec, p, xs);
  for (double v : res.data) REQUIRE(v <= 1e-12);
  REQUIRE(centroid_alignment(spec, p, p, xs) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("power iteration recovers the dense spectral norm") {
  for (uint64_t seed = 80; seed < 90; ++seed) {
    auto inst = oracles::random_instance(seed);
    if (inst.params.dim() > 80) continue;
    SpectralResult top = hessian_spectral_norm(inst.spec, inst.params, inst.batch, inst.loss);
    Tensor dense = oracles::hvp_dense_hessian(inst.spec, inst.params, inst.batch, inst.loss);
    auto eigs = oracles::jacobi_eigenvalues(dense);
    double want = std::max(std::abs(eigs.front()), std::abs(eigs.back()));
    REQUIRE(top.iterations <= 200);
    if (want < 1e-9) continue;  // spectrum numerically zero, ratio meaningless
    REQUIRE(std::abs(top.value - want) / want < 1e-3);
  }
}

TEST_CASE("deflated eigenpairs match the dense spectrum in magnitude order") {
  auto spec = tiny_mlp(2, 2, {3});
  ParamVector p = init_params(spec, 91);
  Batch batch;
  batch.xs = random_inputs(6, 2, 92);
  batch.labels = {0, 1, 0, 1, 0, 1};
  auto tops = top_hessian_eigs(spec, p, batch, LossKind::cross_entropy, 2);
  REQUIRE(tops.size() == 2);
  Tensor dense = oracles::hvp_dense_hessian(spec, p, batch, LossKind::cross_entropy);
  auto eigs = oracles::jacobi_eigenvalues(dense);
  std::vector<double> mags;
  for (double e : eigs) mags.push_back(std::abs(e));
  std::sort(mags.rbegin(), mags.rend());
  REQUIRE(std::abs(std::abs(tops[0].eigenvalue) - mags[0]) / mags[0] < 1e-3);
  REQUIRE(std::abs(std::abs(tops[1].eigenvalue) - mags[1]) / std::max(mags[1], 1e-9) < 5e-3);
  REQUIRE(std::abs(tops[0].eigenvalue) >= std::abs(tops[1].eigenvalue) - 1e-9);
}

TEST_CASE("escape threshold is the scaled quadratic one-step loss change") {
  // Linear model under mse is exactly quadratic, so the prediction must match
  // the actual loss change to round-off for any step.
  NetworkSpec lin = tiny_mlp(5, 1, {}, /*bias=*/false);
  Rng rng(101);
  for (int rep = 0; rep < 5; ++rep) {
    ParamVector w = init_params(lin, 200 + rep);
    Batch batch;
    batch.xs = random_inputs(8, 5, 300 + rep);
    batch.labels.assign(8, 0);
    batch.targets = Tensor::zeros({8, 1});
    for (auto& v : batch.targets.data) v = rng.normal();

    std::vector<double> delta(static_cast<size_t>(w.dim()));
    for (auto& v : delta) v = rng.normal();
    double eta = 0.05 + 0.2 * rng.uniform();

    double t = escape_threshold(lin, w, batch, LossKind::mse, eta, delta);
    auto [l0, g] = loss_and_grad(lin, w, batch, LossKind::mse);
    ParamVector stepped = w;
    for (size_t i = 0; i < delta.size(); ++i) stepped.values[i] -= eta * delta[i];
    double l1 = oracles::oracle_loss(lin, stepped, batch, LossKind::mse);
    double gnorm2 = 0;
    for (double v : g.values) gnorm2 += v * v;
    REQUIRE(t == Catch::Approx(2.0 * (l1 - l0) / gnorm2).epsilon(1e-6).margin(1e-9));
  }
}

TEST_CASE("escape threshold sign predicts one-step descent on random quadratics") {
  NetworkSpec lin = tiny_mlp(5, 1, {}, false);
  Rng rng(111);
  int checked = 0;
  for (int rep = 0; rep < 12; ++rep) {
    ParamVector w = init_params(lin, 400 + rep);
    Batch batch;
    batch.xs = random_inputs(8, 5, 500 + rep);
    batch.labels.assign(8, 0);
    batch.targets = Tensor::zeros({8, 1});
    for (auto& v : batch.targets.data) v = rng.normal();
    std::vector<double> delta(static_cast<size_t>(w.dim()));
    for (auto& v : delta) v = rng.normal();
    double eta = 0.02 + 0.5 * rng.uniform();
    double t = escape_threshold(lin, w, batch, LossKind::mse, eta, delta);
    if (std::abs(t) < 1e-12) continue;
    ParamVector stepped = w;
    for (size_t i = 0; i < delta.size(); ++i) stepped.values[i] -= eta * delta[i];
    double change = oracles::oracle_loss(lin, stepped, batch, LossKind::mse) -
                    oracles::oracle_loss(lin, w, batch, LossKind::mse);
    REQUIRE((t > 0) == (change > 0));
    ++checked;
  }
  REQUIRE(checked >= 10);
}

TEST_CASE("scalar quadratics converge exactly below the classic threshold") {
  // Realize L(w) = lambda w^2 / 2 with a one-parameter linear net on the
  // single input x = sqrt(lambda/2) and target 0.
  for (double lambda : {0.5, 1.0, 4.0}) {
    NetworkSpec lin = tiny_mlp(1, 1, {}, false);
    Batch batch;
    batch.xs = Tensor::from({1, 1}, {std::sqrt(lambda / 2.0)});
    batch.labels = {0};
    batch.targets = Tensor::from({1, 1}, {0.0});

    for (double sign : {-1.0, 1.0}) {
      double eta = (2.0 + sign * 0.1) / lambda;
      ParamVector w = ParamVector::zeros(lin.param_layout());
      w.values[0] = 1.0;
      bool converged = true;
      for (int step = 0; step < 400; ++step) {
        auto [loss, grad] = loss_and_grad(lin, w, batch, LossKind::mse);
        (void)loss;
        w.values[0] -= eta * grad.values[0];
        if (std::abs(w.values[0]) > 1e6) {
          converged = false;
          break;
        }
      }
      if (sign < 0) {
        REQUIRE(converged);
        REQUIRE(std::abs(w.values[0]) < 1.0);
        REQUIRE(gd_escape_scalar(eta, lambda) > 0);
      } else {
        REQUIRE_FALSE(converged);
        REQUIRE(gd_escape_scalar(eta, lambda) < 0);
      }
    }
  }
}

TEST_CASE("escape threshold refuses a zero gradient") {
  NetworkSpec lin = tiny_mlp(1, 1, {}, false);
  ParamVector w = ParamVector::zeros(lin.param_layout());
  Batch batch;
  batch.xs = Tensor::from({1, 1}, {1.0});
  batch.labels = {0};
  batch.targets = Tensor::from({1, 1}, {0.0});
  REQUIRE_THROWS_AS(escape_threshold(lin, w, batch, LossKind::mse, 0.1, {1.0}), Error);
}

TEST_CASE("centroid span captures the top curvature direction for linear mse models") {
  // Inputs all along one ray: the Hessian top eigenvector lives in the
  // span of the class centroids, so the overlap is exactly 1.
  NetworkSpec lin = tiny_mlp(3, 2, {}, false);
  Batch batch;
  batch.xs = Tensor::zeros({6, 3});
  Rng rng(121);
  std::vector<double> ray = {0.6, -0.3, 0.9};
  for (int64_t i = 0; i < 6; ++i) {
    double c = 0.4 + rng.uniform();
    for (int64_t j = 0; j < 3; ++j) batch.xs.at2(i, j) = c * ray[static_cast<size_t>(j)];
  }
  batch.labels = {0, 1, 0, 1, 0, 1};
  ParamVector w = init_params(lin, 122);
  double overlap = centroid_hessian_overlap(lin, w, batch, LossKind::mse);
  REQUIRE(overlap >= 1.0 - 1e-6);
  REQUIRE(overlap <= 1.0);
}

TEST_CASE("plane projection recovers in-plane coefficients exactly") {
  Rng rng(131);
  size_t d = 40;
  std::vector<double> origin(d), d1(d), d2(d), w(d);
  for (size_t i = 0; i < d; ++i) {
    origin[i] = rng.normal();
    d1[i] = rng.normal();
    d2[i] = rng.normal();
  }
  for (size_t i = 0; i < d; ++i) w[i] = origin[i] + 0.3 * d1[i] + 0.7 * d2[i];
  PlanePoint p = project_onto_plane(origin, d1, d2, w);
  REQUIRE(p.u == Catch::Approx(0.3).margin(1e-10));
  REQUIRE(p.v == Catch::Approx(0.7).margin(1e-10));
  REQUIRE(p.residual <= 1e-9);

  for (size_t i = 0; i < d; ++i) w[i] += 2.0 * (i == 0 ? d2[1] : 0) + (i == 1 ? -2.0 * d2[0] : 0);
  PlanePoint off = project_onto_plane(origin, d1, d2, w);
  REQUIRE(off.residual > 0.0);

  std::vector<double> collinear = d1;
  for (auto& v : collinear) v *= -2.0;
  REQUIRE_THROWS_WITH(project_onto_plane(origin, d1, collinear, w),
                      Catch::Matchers::ContainsSubstring("collinear"));
}

TEST_CASE("plane scans reproduce their anchors and reject degenerate frames") {
  auto spec = tiny_mlp(2, 2, {4});
  ParamVector parent = init_params(spec, 141);
  ParamVector child_a = init_params(spec, 142);
  ParamVector child_b = init_params(spec, 143);
  LabeledDataset eval_set = tiny_dataset(20, 2, 144);

  PlaneScanOptions opt;
  opt.n = 5;
  opt.lo = -0.5;
  opt.hi = 1.5;
  opt.trajectory.push_back({0.0, parent});
  opt.trajectory.push_back({1.0, child_a});
  PlaneScan scan = plane_scan(spec, parent, child_a, child_b, eval_set, LossKind::cross_entropy, opt);
  REQUIRE(scan.us == std::vector<double>{-0.5, 0.0, 0.5, 1.0, 1.5});

  auto idx = [&](double val) {
    for (size_t i = 0; i < scan.us.size(); ++i) {
      if (scan.us[i] == val) return static_cast<int64_t>(i);
    }
    FAIL("grid value missing");
    return int64_t{-1};
  };
  EvalResult ep = evaluate(spec, parent, eval_set.inputs, eval_set.labels, LossKind::cross_entropy);
  EvalResult ea = evaluate(spec, child_a, eval_set.inputs, eval_set.labels, LossKind::cross_entropy);
  EvalResult eb = evaluate(spec, child_b, eval_set.inputs, eval_set.labels, LossKind::cross_entropy);
  REQUIRE(scan.test_error.at2(idx(0.0), idx(0.0)) == ep.error);
  REQUIRE(scan.test_error.at2(idx(1.0), idx(0.0)) == ea.error);
  REQUIRE(scan.test_error.at2(idx(0.0), idx(1.0)) == eb.error);
  REQUIRE(scan.fn_dist.at2(idx(1.0), idx(0.0)) == 0.0);

  // Trajectory projections: the parent sits at (0,0), child_a at (1,0).
  REQUIRE(scan.projections.size() == 2);
  REQUIRE(scan.projections[0].second.u == Catch::Approx(0.0).margin(1e-10));
  REQUIRE(scan.projections[1].second.u == Catch::Approx(1.0).margin(1e-10));
  REQUIRE(scan.projections[1].second.v == Catch::Approx(0.0).margin(1e-10));

  ParamVector degenerate = parent;
  for (int64_t i = 0; i < degenerate.dim(); ++i) {
    degenerate.values[i] = parent.values[i] + 2.0 * (child_a.values[i] - parent.values[i]);
  }
  REQUIRE_THROWS_WITH(
      plane_scan(spec, parent, child_a, degenerate, eval_set, LossKind::cross_entropy, opt),
      Catch::Matchers::ContainsSubstring("collinear"));

  PlaneScanOptions bad;
  bad.n = 1;
  REQUIRE_THROWS_AS(plane_scan(spec, parent, child_a, child_b, eval_set, LossKind::cross_entropy, bad),
                    ConfigError);
}

TEST_CASE("tangent plane scans are exact for linear models") {
  auto lin = tiny_mlp(2, 2, {}, true);
  ParamVector parent = init_params(lin, 151);
  ParamVector child_a = init_params(lin, 152);
  ParamVector child_b = init_params(lin, 153);
  LabeledDataset eval_set = tiny_dataset(16, 2, 154);

  PlaneScanOptions opt;
  opt.n = 5;
  opt.tangent_anchor = parent;
  PlaneScan scan = plane_scan(lin, parent, child_a, child_b, eval_set, LossKind::cross_entropy, opt);
  REQUIRE(scan.taylor_error.numel() == 25);
  for (size_t i = 0; i < scan.taylor_error.data.size(); ++i) {
    REQUIRE(std::abs(scan.taylor_error.data[i] - scan.test_error.data[i]) <= 1e-12);
  }
}

TEST_CASE("plane scan csv output is stable and well-formed") {
  auto spec = tiny_mlp(2, 2, {3});
  ParamVector parent = init_params(spec, 161);
  ParamVector child_a = init_params(spec, 162);
  ParamVector child_b = init_params(spec, 163);
  LabeledDataset eval_set = tiny_dataset(10, 2, 164);
  PlaneScanOptions opt;
  opt.n = 3;
  PlaneScan scan = plane_scan(spec, parent, child_a, child_b, eval_set, LossKind::cross_entropy, opt);

  auto dir = std::filesystem::temp_directory_path() / "dllab_plane_csv";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  scan.write_csv(dir / "scan.csv");
  std::ifstream f(dir / "scan.csv");
  std::string line;
  REQUIRE(std::getline(f, line));
  REQUIRE(line == "u,v,test_error,fn_dist,taylor_error");
  int rows = 0;
  while (std::getline(f, line)) {
    if (!line.empty()) ++rows;
  }
  REQUIRE(rows == 9);
  std::filesystem::remove_all(dir);
}
