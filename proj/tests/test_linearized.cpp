#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dllab/data.hpp"
#include "dllab/linearized.hpp"
#include "dllab/trainer.hpp"
#include "oracles.hpp"

using namespace dllab;

namespace {

NetworkSpec small_mlp(std::vector<int> hidden = {6}) {
  NetworkSpec spec;
  spec.kind = ArchKind::mlp;
  spec.input_dim = 2;
  spec.num_classes = 2;
  spec.hidden = std::move(hidden);
  return spec;
}

ParamVector perturbation(const ParamVector& base, double scale, uint64_t seed) {
  ParamVector delta = ParamVector::zeros(base.layout);
  Rng rng(seed);
  for (auto& v : delta.values) v = scale * rng.normal();
  return delta;
}

}  // namespace

TEST_CASE("zero displacement reproduces the base network bit for bit") {
  auto spec = small_mlp({5, 4});
  ParamVector base = init_params(spec, 2);
  Tensor xs = Tensor::zeros({7, 2});
  Rng rng(3);
  for (auto& v : xs.data) v = rng.normal();
  Tensor plain = forward(spec, base, xs);
  for (int order : {1, 2}) {
    TaylorModel tm = TaylorModel::around(spec, base, order);
    Tensor lifted = taylor_logits(tm, xs);
    REQUIRE(lifted.data == plain.data);
  }
  REQUIRE_THROWS_AS(TaylorModel::around(spec, base, 3), ConfigError);
  REQUIRE_THROWS_AS(TaylorModel::around(spec, base, 0), ConfigError);
}

TEST_CASE("first order expansion matches the jacobian form") {
  auto spec = small_mlp();
  ParamVector base = init_params(spec, 5);
  Tensor xs = Tensor::zeros({4, 2});
  Rng rng(6);
  for (auto& v : xs.data) v = rng.normal();

  TaylorModel tm = TaylorModel::around(spec, base, 1);
  tm.delta = perturbation(base, 0.01, 7);
  Tensor got = taylor_logits(tm, xs);

  Tensor jac = jacobian_stack(spec, base, xs);
  Tensor want = forward(spec, base, xs);
  int64_t k = spec.num_classes;
  for (int64_t i = 0; i < xs.dim(0); ++i) {
    for (int64_t kk = 0; kk < k; ++kk) {
      want.at2(i, kk) += dot(jac.row(i * k + kk), tm.delta.values.data(), base.dim());
    }
  }
  REQUIRE(oracles::max_abs_diff(got, want) <= 1e-14);
}

TEST_CASE("second order expansion beats first order near the base point") {
  // The expansions are exact in the displacement only while the activation
  // pattern is frozen, so pick a displacement small enough not to flip units.
  auto spec = small_mlp({8, 6});
  ParamVector base = init_params(spec, 11);
  Tensor xs = Tensor::zeros({6, 2});
  Rng rng(12);
  for (auto& v : xs.data) v = rng.normal();

  ParamVector delta = perturbation(base, 1e-4, 13);
  ParamVector moved = base;
  for (size_t i = 0; i < moved.values.size(); ++i) moved.values[i] += delta.values[i];
  REQUIRE(pattern_hamming(activation_pattern(spec, base, xs),
                          activation_pattern(spec, moved, xs)) == 0);
  Tensor truth = forward(spec, moved, xs);

  TaylorModel t1 = TaylorModel::around(spec, base, 1);
  TaylorModel t2 = TaylorModel::around(spec, base, 2);
  t1.delta = delta;
  t2.delta = delta;
  double err1 = oracles::max_abs_diff(taylor_logits(t1, xs), truth);
  double err2 = oracles::max_abs_diff(taylor_logits(t2, xs), truth);
  REQUIRE(err2 <= err1);
  REQUIRE(err2 <= 1e-6);
}

TEST_CASE("second order jets are only defined for mlps") {
  NetworkSpec cnn;
  cnn.kind = ArchKind::mini_cnn;
  cnn.input_dim = 16;
  cnn.in_channels = 1;
  cnn.in_h = 4;
  cnn.in_w = 4;
  cnn.channels = {2, 2, 2};
  cnn.num_classes = 2;
  ParamVector base = init_params(cnn, 1);
  TaylorModel tm = TaylorModel::around(cnn, base, 2);
  Tensor xs = Tensor::zeros({2, 16});
  REQUIRE_THROWS_AS(taylor_logits(tm, xs), ConfigError);
}

TEST_CASE("linearized training of a linear model is ordinary training") {
  // With no hidden layers the order-1 expansion is the model itself, so the
  // two training paths must agree to high precision on the same stream.
  NetworkSpec lin = small_mlp({});
  DataConfig data;
  data.source = "spirals";
  data.seed = 9;
  data.m_train = 60;
  data.m_test = 30;

  TrainConfig tc;
  tc.net = lin;
  tc.opt.kind = OptKind::sgd;
  tc.opt.momentum = 0.9;
  tc.sched.kind = Schedule::Kind::constant;
  tc.sched.base = 0.05;
  tc.loss = LossKind::cross_entropy;
  tc.epochs = 5;
  tc.batch_size = 20;
  tc.cadence = {1, 1};
  tc.seed = 14;

  auto root = std::filesystem::temp_directory_path() / "dllab_lin_equiv";
  std::filesystem::remove_all(root);
  RunMeta meta = train_fresh(tc, data, root, derive_run_id("lin-equiv", tc.seed));
  Checkpoint final = checkpoint_at_epoch(root / meta.run_id, 5.0);

  auto [train, test] = data.make();
  LinearizedConfig lc;
  lc.order = 1;
  lc.lr = 0.05;
  lc.momentum = 0.9;
  lc.epochs = 5;
  lc.batch_size = 20;
  lc.cadence = {1, 1};
  lc.seed = 14;
  ParamVector base = init_params(lin, mix64(tc.seed, kInitStream));
  LinearizedResult res = train_linearized(lin, base, train, test, LossKind::cross_entropy, lc, "lin");
  REQUIRE(res.status == "ok");

  double worst = 0;
  for (int64_t i = 0; i < base.dim(); ++i) {
    double full = final.weights[static_cast<size_t>(i)];
    double linw = base.values[static_cast<size_t>(i)] + res.delta.values[static_cast<size_t>(i)];
    worst = std::max(worst, std::abs(full - linw));
  }
  REQUIRE(worst <= 1e-10);
  std::filesystem::remove_all(root);
}

TEST_CASE("the jacobian cache changes speed, never bits") {
  auto spec = small_mlp({6});
  DataConfig data;
  data.source = "spirals";
  data.seed = 15;
  data.m_train = 40;
  data.m_test = 20;
  auto [train, test] = data.make();
  ParamVector base = init_params(spec, 16);

  LinearizedConfig with_cache;
  with_cache.epochs = 3;
  with_cache.batch_size = 10;
  with_cache.lr = 0.01;
  with_cache.cache_budget_mb = 64;
  LinearizedConfig no_cache = with_cache;
  no_cache.cache_budget_mb = 0;

  LinearizedResult a = train_linearized(spec, base, train, test, LossKind::cross_entropy, with_cache, "c");
  LinearizedResult b = train_linearized(spec, base, train, test, LossKind::cross_entropy, no_cache, "c");
  REQUIRE(a.used_cache);
  REQUIRE_FALSE(b.used_cache);
  REQUIRE(a.delta.values == b.delta.values);
  REQUIRE(a.series.records().size() == b.series.records().size());
  for (size_t i = 0; i < a.series.records().size(); ++i) {
    REQUIRE(a.series.records()[i].value == b.series.records()[i].value);
  }
}

TEST_CASE("the reported best epoch is the earliest minimum of test error") {
  auto spec = small_mlp({6});
  DataConfig data;
  data.source = "spirals";
  data.seed = 17;
  data.m_train = 40;
  data.m_test = 20;
  auto [train, test] = data.make();
  ParamVector base = init_params(spec, 18);

  LinearizedConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 10;
  cfg.lr = 0.05;
  LinearizedResult res = train_linearized(spec, base, train, test, LossKind::cross_entropy, cfg, "b");

  double best = 2.0;
  double best_epoch = -1;
  for (const auto& r : res.series.select("lin_test_err")) {
    if (r.value < best) {
      best = r.value;
      best_epoch = r.epoch;
    }
  }
  REQUIRE(res.best_test_error == best);
  REQUIRE(res.best_epoch == best_epoch);
}

TEST_CASE("linearized training reports divergence instead of throwing") {
  NetworkSpec lin = small_mlp({});
  DataConfig data;
  data.source = "spirals";
  data.seed = 19;
  data.m_train = 40;
  data.m_test = 20;
  auto [train, test] = data.make();
  ParamVector base = init_params(lin, 20);
  LinearizedConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 10;
  cfg.lr = 1e12;
  LinearizedResult res = train_linearized(lin, base, train, test, LossKind::mse, cfg, "d");
  REQUIRE(res.status == "diverged");
}

TEST_CASE("the low learning-rate baseline stops at a plateau") {
  auto spec = small_mlp({8});
  DataConfig data;
  data.source = "blobs";
  data.seed = 21;
  data.m_train = 40;
  data.m_test = 20;
  data.num_classes = 2;
  data.input_dim = 2;
  data.separation = 8.0;
  auto [train, test] = data.make();

  // Train the base to convergence under a loss with a finite minimum, so the
  // tiny-step continuation genuinely flattens instead of creeping forever.
  TrainConfig tc;
  tc.net = spec;
  tc.opt.momentum = 0.9;
  tc.sched.base = 0.02;
  tc.loss = LossKind::mse;
  tc.epochs = 40;
  tc.batch_size = 10;
  tc.cadence = {1, 1};
  tc.seed = 22;
  auto root = std::filesystem::temp_directory_path() / "dllab_lowlr";
  std::filesystem::remove_all(root);
  RunMeta meta = train_fresh(tc, data, root, derive_run_id("lowlr", tc.seed));
  Checkpoint ck = checkpoint_at_epoch(root / meta.run_id, 40.0);
  ParamVector base = ParamVector::zeros(spec.param_layout());
  base.values = ck.weights;

  BaselineResult res = nonlinear_low_lr_baseline(spec, base, train, test, LossKind::mse,
                                                 1e-5, 400, 10, 0.9, 23, "lowlr");
  REQUIRE(res.status == "ok");
  REQUIRE(res.epochs_ran < 400);
  REQUIRE(res.epochs_ran >= 10);
  auto rows = res.series.select("lowlr_test_err");
  REQUIRE(static_cast<int64_t>(rows.size()) == res.epochs_ran);
  REQUIRE(rows.back().value == res.final_test_error);
  REQUIRE(nonlinear_advantage(0.25, 0.10) == Catch::Approx(0.15));
  std::filesystem::remove_all(root);
}
