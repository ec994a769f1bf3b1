#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "dllab/network.hpp"
#include "dllab/param_vector.hpp"
#include "dllab/rng.hpp"
#include "oracles.hpp"

using namespace dllab;

static NetworkSpec spirals_mlp() {
  NetworkSpec spec;
  spec.kind = ArchKind::mlp;
  spec.input_dim = 2;
  spec.num_classes = 2;
  spec.hidden = {64, 64};
  return spec;
}

TEST_CASE("parameter layout enumerates tensors in forward order with packed offsets") {
  auto lay = spirals_mlp().param_layout();
  std::vector<std::string> names;
  for (const auto& e : lay->entries) names.push_back(e.name);
  REQUIRE(names == std::vector<std::string>{"fc0.w", "fc0.b", "fc1.w", "fc1.b", "head.w", "head.b"});
  REQUIRE(lay->find("fc0.w").shape == std::vector<int64_t>{64, 2});
  REQUIRE(lay->find("fc1.w").shape == std::vector<int64_t>{64, 64});
  REQUIRE(lay->find("head.w").shape == std::vector<int64_t>{2, 64});
  int64_t off = 0;
  for (const auto& e : lay->entries) {
    REQUIRE(e.offset == off);
    off += e.size;
  }
  REQUIRE(lay->dim == 64 * 2 + 64 + 64 * 64 + 64 + 2 * 64 + 2);
}

TEST_CASE("bias-free layouts drop the bias entries") {
  auto spec = spirals_mlp();
  spec.bias = false;
  auto lay = spec.param_layout();
  REQUIRE(lay->entries.size() == 3);
  REQUIRE(lay->dim == 64 * 2 + 64 * 64 + 2 * 64);
}

TEST_CASE("mini-cnn layout covers three conv blocks and the head") {
  NetworkSpec spec;
  spec.kind = ArchKind::mini_cnn;
  spec.input_dim = 64;
  spec.in_channels = 1;
  spec.in_h = 8;
  spec.in_w = 8;
  spec.channels = {4, 8, 8};
  spec.num_classes = 3;
  spec.validate();
  auto lay = spec.param_layout();
  REQUIRE(lay->find("conv0.w").shape == std::vector<int64_t>{4, 1, 3, 3});
  REQUIRE(lay->find("conv1.w").shape == std::vector<int64_t>{8, 4, 3, 3});
  REQUIRE(lay->find("conv2.w").shape == std::vector<int64_t>{8, 8, 3, 3});
  REQUIRE(lay->find("head.w").shape == std::vector<int64_t>{3, 8});
  REQUIRE(spec.relu_unit_counts() == std::vector<int64_t>{4 * 8 * 8, 8 * 4 * 4, 8 * 2 * 2});
}

TEST_CASE("spec validation rejects malformed networks") {
  NetworkSpec spec;
  spec.kind = ArchKind::mlp;
  spec.input_dim = 0;
  spec.num_classes = 2;
  REQUIRE_THROWS_AS(spec.validate(), ConfigError);

  NetworkSpec cnn;
  cnn.kind = ArchKind::mini_cnn;
  cnn.input_dim = 36;
  cnn.num_classes = 2;
  cnn.in_channels = 1;
  cnn.in_h = 6;
  cnn.in_w = 6;
  cnn.channels = {2, 2, 2};
  REQUIRE_THROWS_AS(cnn.validate(), ConfigError);  // extents not divisible by 4
  cnn.in_h = 8;
  cnn.in_w = 8;
  cnn.input_dim = 64;
  cnn.channels = {2, 2};
  REQUIRE_THROWS_AS(cnn.validate(), ConfigError);  // needs exactly three conv widths
  cnn.channels = {2, 2, 2};
  REQUIRE_NOTHROW(cnn.validate());
}

TEST_CASE("architecture names round-trip and unknown names are rejected") {
  REQUIRE(arch_from_name("mlp") == ArchKind::mlp);
  REQUIRE(arch_from_name("mini-cnn") == ArchKind::mini_cnn);
  REQUIRE(arch_name(ArchKind::mini_cnn) == "mini-cnn");
  REQUIRE_THROWS_AS(arch_from_name("resnet"), ConfigError);
}

TEST_CASE("initialization is seeded, zero-biased, and kaiming-scaled") {
  auto spec = spirals_mlp();
  ParamVector a = init_params(spec, 42);
  ParamVector b = init_params(spec, 42);
  ParamVector c = init_params(spec, 43);
  REQUIRE(a.values == b.values);
  REQUIRE(a.values != c.values);

  auto lay = spec.param_layout();
  Tensor fc0b = a.slice(lay->find("fc0.b"));
  for (double v : fc0b.data) REQUIRE(v == 0.0);

  // fc1.w has fan_in 64, so the sample std should sit near sqrt(2/64).
  Tensor w = a.slice(lay->find("fc1.w"));
  double mean = 0;
  for (double v : w.data) mean += v;
  mean /= static_cast<double>(w.numel());
  double var = 0;
  for (double v : w.data) var += (v - mean) * (v - mean);
  var /= static_cast<double>(w.numel() - 1);
  double want = 2.0 / 64.0;
  REQUIRE(var > 0.8 * want);
  REQUIRE(var < 1.2 * want);
}

TEST_CASE("flat vector round-trips through named tensors") {
  auto spec = spirals_mlp();
  ParamVector p = init_params(spec, 7);
  auto tensors = p.unflatten();
  ParamVector back = ParamVector::flatten(p.layout, tensors);
  REQUIRE(back.values == p.values);

  Tensor head = p.slice(p.layout->find("head.w"));
  for (auto& v : head.data) v *= -2.0;
  p.store(p.layout->find("head.w"), head);
  Tensor again = p.slice(p.layout->find("head.w"));
  REQUIRE(again.data == head.data);

  Tensor wrong = Tensor::zeros({3, 3});
  REQUIRE_THROWS_AS(p.store(p.layout->find("head.w"), wrong), Error);
}

TEST_CASE("activation patterns mark strictly positive units") {
  NetworkSpec spec;
  spec.kind = ArchKind::mlp;
  spec.input_dim = 2;
  spec.num_classes = 2;
  spec.hidden = {3};
  ParamVector p = ParamVector::zeros(spec.param_layout());
  // fc0.w rows: (1,0), (0,1), (-1,-1); biases zero.
  auto& e = p.layout->find("fc0.w");
  std::vector<double> w = {1, 0, 0, 1, -1, -1};
  std::copy(w.begin(), w.end(), p.values.begin() + e.offset);
  Tensor xs = Tensor::from({2, 2}, {1.0, -1.0, -1.0, 2.0});
  ActivationPattern pat = activation_pattern(spec, p, xs);
  REQUIRE(pat.m == 2);
  REQUIRE(pat.units_per_layer == std::vector<int64_t>{3});
  // example 0: z = (1, -1, 0) -> bits 1,0,0 ; example 1: z = (-1, 2, -1) -> 0,1,0
  REQUIRE(pat.bits[0] == std::vector<uint8_t>{1, 0, 0, 0, 1, 0});

  ActivationPattern same = activation_pattern(spec, p, xs);
  REQUIRE(pattern_hamming(pat, same) == 0);

  ActivationPattern other;
  other.m = 3;
  REQUIRE_THROWS_AS(pattern_hamming(pat, other), Error);
}

TEST_CASE("parameter counts stay within the desk-scale regime") {
  auto spec = spirals_mlp();
  REQUIRE(spec.param_layout()->dim == 4482);
  spec.hidden = {8, 8};
  REQUIRE(spec.param_layout()->dim == 2 * 8 + 8 + 8 * 8 + 8 + 2 * 8 + 2);
}
