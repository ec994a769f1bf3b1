#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "dllab/param_vector.hpp"
#include "dllab/rng.hpp"
#include "dllab/tensor.hpp"

namespace dllab {

enum class ArchKind { mlp, mini_cnn };

inline std::string arch_name(ArchKind k) { return k == ArchKind::mlp ? "mlp" : "mini-cnn"; }

inline ArchKind arch_from_name(const std::string& s) {
  if (s == "mlp") return ArchKind::mlp;
  if (s == "mini-cnn") return ArchKind::mini_cnn;
  throw ConfigError("unknown network kind '" + s + "'");
}

// Feedforward classifier description. ReLU everywhere; an MLP with no hidden
// layers degenerates to a plain linear map, which several tests rely on.
struct NetworkSpec {
  ArchKind kind = ArchKind::mlp;
  int input_dim = 0;
  int num_classes = 0;
  std::vector<int> hidden;    // mlp hidden layer widths
  std::vector<int> channels;  // mini-cnn conv channels (exactly 3 layers)
  int in_channels = 1;
  int in_h = 0;
  int in_w = 0;
  bool bias = true;

  void validate() const {
    if (input_dim < 1) throw ConfigError("network input_dim must be >= 1");
    if (num_classes < 1) throw ConfigError("network must have at least one output");
    if (kind == ArchKind::mlp) {
      for (int w : hidden) {
        if (w < 1) throw ConfigError("mlp hidden width must be >= 1");
      }
    } else {
      if (channels.size() != 3) throw ConfigError("mini-cnn takes exactly three channel counts");
      for (int c : channels) {
        if (c < 1) throw ConfigError("mini-cnn channels must be >= 1");
      }
      if (in_channels < 1 || in_h < 1 || in_w < 1) {
        throw ConfigError("mini-cnn needs in_channels/in_h/in_w");
      }
      if (in_channels * in_h * in_w != input_dim) {
        throw ConfigError("mini-cnn image extents do not multiply to input_dim");
      }
      if (in_h % 4 != 0 || in_w % 4 != 0) {
        throw ConfigError("mini-cnn spatial extents must be divisible by 4 (two 2x2 pools)");
      }
    }
  }

  std::shared_ptr<const ParamLayout> param_layout() const {
    validate();
    auto lay = std::make_shared<ParamLayout>();
    auto add = [&](const std::string& name, std::vector<int64_t> shape) {
      lay->entries.push_back({name, std::move(shape), 0, 0});
    };
    if (kind == ArchKind::mlp) {
      int in = input_dim;
      for (size_t l = 0; l < hidden.size(); ++l) {
        add("fc" + std::to_string(l) + ".w", {hidden[l], in});
        if (bias) add("fc" + std::to_string(l) + ".b", {hidden[l]});
        in = hidden[l];
      }
      add("head.w", {num_classes, in});
      if (bias) add("head.b", {num_classes});
    } else {
      int cin = in_channels;
      for (size_t l = 0; l < channels.size(); ++l) {
        add("conv" + std::to_string(l) + ".w", {channels[l], cin, 3, 3});
        if (bias) add("conv" + std::to_string(l) + ".b", {channels[l]});
        cin = channels[l];
      }
      add("head.w", {num_classes, channels.back()});
      if (bias) add("head.b", {num_classes});
    }
    lay->finalize();
    return lay;
  }

  int64_t param_count() const { return param_layout()->dim; }

  // Unit counts of each ReLU layer, in forward order; these are the widths of
  // the activation-pattern rows. For the cnn the bits are read right after each
  // ReLU, before pooling.
  std::vector<int64_t> relu_unit_counts() const {
    std::vector<int64_t> out;
    if (kind == ArchKind::mlp) {
      for (int w : hidden) out.push_back(w);
    } else {
      out.push_back(static_cast<int64_t>(channels[0]) * in_h * in_w);
      out.push_back(static_cast<int64_t>(channels[1]) * (in_h / 2) * (in_w / 2));
      out.push_back(static_cast<int64_t>(channels[2]) * (in_h / 4) * (in_w / 4));
    }
    return out;
  }
};

// Kaiming-normal weights (std = sqrt(2 / fan_in)), biases exactly zero.
inline ParamVector init_params(const NetworkSpec& spec, uint64_t seed) {
  auto lay = spec.param_layout();
  ParamVector p = ParamVector::zeros(lay);
  Rng rng(seed);
  for (const auto& e : lay->entries) {
    bool is_bias = e.shape.size() == 1;
    if (is_bias) continue;  // already zero
    int64_t fan_in = 1;
    for (size_t i = 1; i < e.shape.size(); ++i) fan_in *= e.shape[i];
    double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (int64_t i = 0; i < e.size; ++i) {
      p.values[static_cast<size_t>(e.offset + i)] = std_dev * rng.normal();
    }
  }
  return p;
}

// Binary ReLU activation pattern over a batch: bit = 1 iff the
// post-nonlinearity activation is strictly positive.
struct ActivationPattern {
  int64_t m = 0;
  std::vector<int64_t> units_per_layer;
  // bits[l] has m * units_per_layer[l] entries, row-major over examples.
  std::vector<std::vector<uint8_t>> bits;

  int64_t total_bits() const {
    int64_t n = 0;
    for (int64_t u : units_per_layer) n += m * u;
    return n;
  }
};

inline int64_t pattern_hamming(const ActivationPattern& a, const ActivationPattern& b) {
  if (a.m != b.m || a.units_per_layer != b.units_per_layer) {
    throw Error("activation patterns have mismatched shapes");
  }
  int64_t diff = 0;
  for (size_t l = 0; l < a.bits.size(); ++l) {
    for (size_t i = 0; i < a.bits[l].size(); ++i) diff += a.bits[l][i] != b.bits[l][i];
  }
  return diff;
}

}  // namespace dllab
