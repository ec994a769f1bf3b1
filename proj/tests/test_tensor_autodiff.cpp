#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dllab/autodiff.hpp"
#include "dllab/network.hpp"
#include "dllab/rng.hpp"
#include "dllab/tensor.hpp"
#include "oracles.hpp"

using namespace dllab;

TEST_CASE("dot and axpy agree with naive loops") {
  Rng rng(7);
  std::vector<double> a(37), b(37);
  for (size_t i = 0; i < a.size(); ++i) {
    a[i] = rng.normal();
    b[i] = rng.normal();
  }
  double naive = 0;
  for (size_t i = 0; i < a.size(); ++i) naive += a[i] * b[i];
  REQUIRE(dot(a.data(), b.data(), 37) == Catch::Approx(naive).epsilon(1e-14));

  std::vector<double> y(37, 0.5), y_ref(37, 0.5);
  axpy(y.data(), -1.75, a.data(), 37);
  for (size_t i = 0; i < y_ref.size(); ++i) y_ref[i] += -1.75 * a[i];
  for (size_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == y_ref[i]);
}

TEST_CASE("matmul_nt_acc matches a triple loop and validates shapes") {
  Rng rng(11);
  Tensor a = Tensor::zeros({4, 6}), b = Tensor::zeros({5, 6});
  for (auto& v : a.data) v = rng.normal();
  for (auto& v : b.data) v = rng.normal();
  Tensor c = Tensor::zeros({4, 5});
  matmul_nt_acc(c, a, b);
  for (int64_t i = 0; i < 4; ++i) {
    for (int64_t j = 0; j < 5; ++j) {
      double want = 0;
      for (int64_t k = 0; k < 6; ++k) want += a.at2(i, k) * b.at2(j, k);
      REQUIRE(c.at2(i, j) == Catch::Approx(want).margin(1e-13));
    }
  }
  Tensor bad = Tensor::zeros({4, 4});
  REQUIRE_THROWS_AS(matmul_nt_acc(bad, a, b), Error);
}

TEST_CASE("forward matches an independent straight-line implementation") {
  for (uint64_t seed = 1; seed <= 12; ++seed) {
    auto inst = oracles::random_instance(seed);
    Tensor fast = forward(inst.spec, inst.params, inst.batch.xs);
    Tensor slow = oracles::naive_forward(inst.spec, inst.params, inst.batch.xs).logits;
    REQUIRE(fast.shape == slow.shape);
    REQUIRE(oracles::max_abs_diff(fast, slow) < 1e-12);
  }
}

TEST_CASE("forward rejects non-finite inputs and parameters") {
  auto inst = oracles::random_instance(3);
  Tensor xs = inst.batch.xs;
  xs.data[0] = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(forward(inst.spec, inst.params, xs), NonFiniteError);
  ParamVector p = inst.params;
  p.values[1] = std::numeric_limits<double>::infinity();
  REQUIRE_THROWS_AS(forward(inst.spec, p, inst.batch.xs), NonFiniteError);
}

TEST_CASE("mean squared error on logits matches a hand computation") {
  Tensor logits = Tensor::from({2, 2}, {1.0, -2.0, 0.5, 3.0});
  Tensor targets = Tensor::from({2, 2}, {0.0, 1.0, 1.0, 1.0});
  auto out = loss_on_logits(LossKind::mse, logits, {}, targets, true);
  // residuals 1, -3, -0.5, 2 over m*k = 4 entries
  REQUIRE(out.value == Catch::Approx((1 + 9 + 0.25 + 4) / 4.0).epsilon(1e-15));
  REQUIRE(out.dlogits.at2(0, 0) == Catch::Approx(2.0 * 1.0 / 4.0));
  REQUIRE(out.dlogits.at2(0, 1) == Catch::Approx(2.0 * -3.0 / 4.0));
  REQUIRE(out.dlogits.at2(1, 0) == Catch::Approx(2.0 * -0.5 / 4.0));
  REQUIRE(out.dlogits.at2(1, 1) == Catch::Approx(2.0 * 2.0 / 4.0));
}

TEST_CASE("cross-entropy on logits matches -log softmax by hand") {
  Tensor logits = Tensor::from({1, 3}, {2.0, 0.0, -1.0});
  std::vector<int> labels = {1};
  auto out = loss_on_logits(LossKind::cross_entropy, logits, labels, {}, true);
  double z = std::exp(2.0) + std::exp(0.0) + std::exp(-1.0);
  REQUIRE(out.value == Catch::Approx(-std::log(std::exp(0.0) / z)).epsilon(1e-14));
  for (int j = 0; j < 3; ++j) {
    double p = std::exp(logits.at2(0, j)) / z;
    double want = p - (j == 1 ? 1.0 : 0.0);
    REQUIRE(out.dlogits.at2(0, j) == Catch::Approx(want).margin(1e-14));
  }
  std::vector<int> bad = {3};
  REQUIRE_THROWS_AS(loss_on_logits(LossKind::cross_entropy, logits, bad, {}, false), Error);
}

TEST_CASE("loss gradients agree with central differences") {
  for (uint64_t seed = 20; seed < 32; ++seed) {
    auto inst = oracles::random_instance(seed);
    auto [value, grad] = loss_and_grad(inst.spec, inst.params, inst.batch, inst.loss);
    REQUIRE(value == Catch::Approx(oracles::oracle_loss(inst.spec, inst.params, inst.batch, inst.loss)));
    auto fd = oracles::fd_loss_gradient(inst.spec, inst.params, inst.batch, inst.loss, 1e-5);
    REQUIRE(oracles::max_rel_err(grad.values, fd, 1e-3) < 1e-6);
  }
}

TEST_CASE("stacked logit jacobian agrees with per-coordinate differences") {
  for (uint64_t seed = 40; seed < 46; ++seed) {
    auto inst = oracles::random_instance(seed);
    Tensor jac = jacobian_stack(inst.spec, inst.params, inst.batch.xs);
    Tensor fd = oracles::fd_logit_jacobian(inst.spec, inst.params, inst.batch.xs, 1e-5);
    REQUIRE(jac.shape == fd.shape);
    double scale = 1e-3;
    for (double v : fd.data) scale = std::max(scale, std::abs(v));
    REQUIRE(oracles::max_abs_diff(jac, fd) / scale < 1e-6);
  }
}

TEST_CASE("hessian-vector products are symmetric and match differenced gradients") {
  auto inst = oracles::random_instance(55);
  size_t d = inst.params.values.size();
  Rng rng(99);
  std::vector<double> u(d), v(d);
  for (size_t i = 0; i < d; ++i) {
    u[i] = rng.normal();
    v[i] = rng.normal();
  }
  ParamVector hu = hvp(inst.spec, inst.params, inst.batch, inst.loss, u);
  ParamVector hv = hvp(inst.spec, inst.params, inst.batch, inst.loss, v);
  double vhu = dot(v.data(), hu.values.data(), static_cast<int64_t>(d));
  double uhv = dot(u.data(), hv.values.data(), static_cast<int64_t>(d));
  REQUIRE(vhu == Catch::Approx(uhv).epsilon(1e-5).margin(1e-7));
}

TEST_CASE("assembled dense hessian agrees with double central differences of the loss") {
  for (uint64_t seed : {60ull, 61ull}) {
    auto inst = oracles::random_instance(seed);
    if (inst.params.values.size() > 90) continue;
    Tensor hfast = oracles::hvp_dense_hessian(inst.spec, inst.params, inst.batch, inst.loss);
    Tensor hslow = oracles::fd_loss_hessian(inst.spec, inst.params, inst.batch, inst.loss, 1e-3);
    double scale = 1e-2;
    for (double x : hslow.data) scale = std::max(scale, std::abs(x));
    REQUIRE(oracles::max_abs_diff(hfast, hslow) / scale < 1e-5);
    for (int64_t i = 0; i < hfast.dim(0); ++i) {
      for (int64_t j = 0; j < i; ++j) {
        REQUIRE(hfast.at2(i, j) == Catch::Approx(hfast.at2(j, i)).margin(1e-8 * scale));
      }
    }
  }
}

TEST_CASE("gradients and forwards are bit-reproducible across calls") {
  auto inst = oracles::random_instance(70);
  Tensor f1 = forward(inst.spec, inst.params, inst.batch.xs);
  Tensor f2 = forward(inst.spec, inst.params, inst.batch.xs);
  REQUIRE(f1.data == f2.data);
  auto g1 = loss_and_grad(inst.spec, inst.params, inst.batch, inst.loss);
  auto g2 = loss_and_grad(inst.spec, inst.params, inst.batch, inst.loss);
  REQUIRE(g1.first == g2.first);
  REQUIRE(g1.second.values == g2.second.values);
}

TEST_CASE("single precision forward tracks the double precision path") {
  auto inst = oracles::random_instance(80);
  auto p32 = inst.params.cast<float>();
  TensorT<float> x32 = TensorT<float>::zeros(inst.batch.xs.shape);
  for (size_t i = 0; i < x32.data.size(); ++i) {
    x32.data[i] = static_cast<float>(inst.batch.xs.data[i]);
  }
  TensorT<float> f32 = forward(inst.spec, p32, x32);
  Tensor f64 = forward(inst.spec, inst.params, inst.batch.xs);
  double scale = 1.0;
  for (double v : f64.data) scale = std::max(scale, std::abs(v));
  for (size_t i = 0; i < f64.data.size(); ++i) {
    REQUIRE(std::abs(static_cast<double>(f32.data[i]) - f64.data[i]) / scale < 1e-4);
  }
}
