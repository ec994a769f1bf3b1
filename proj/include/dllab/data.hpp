#pragma once

#include <algorithm>
#include <filesystem>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "dllab/binio.hpp"
#include "dllab/rng.hpp"
#include "dllab/tensor.hpp"

namespace dllab {

// In-memory classification dataset. Labels are class indices; one-hot rows
// are materialized on demand.
struct LabeledDataset {
  Tensor inputs;            // [m x input_dim]
  std::vector<int> labels;  // values in [0, num_classes)
  int num_classes = 0;
  std::string split = "full";  // "train" | "test" | "full"
  std::string provenance;

  int64_t size() const { return inputs.dim(0); }
  int64_t input_dim() const { return inputs.dim(1); }

  void validate() const {
    if (num_classes < 2) throw Error("dataset needs at least two classes");
    if (static_cast<int64_t>(labels.size()) != size()) throw Error("label count mismatch");
    for (int c : labels) {
      if (c < 0 || c >= num_classes) throw Error("label out of range");
    }
    require_finite(inputs, "dataset inputs");
  }

  Tensor onehot() const {
    Tensor y = Tensor::zeros({size(), num_classes});
    for (int64_t i = 0; i < size(); ++i) y.at2(i, labels[static_cast<size_t>(i)]) = 1.0;
    return y;
  }
};

// K isotropic unit-variance Gaussian clusters whose means sit on a seeded
// random sphere of the given radius. Classes are interleaved round-robin so
// any prefix split stays balanced within one example.
inline LabeledDataset gen_blobs(uint64_t seed, int64_t m, int num_classes, int input_dim,
                                double separation) {
  if (num_classes < 2) throw ConfigError("gen_blobs needs at least 2 classes");
  if (m < num_classes) throw ConfigError("gen_blobs needs at least one example per class");
  if (input_dim < 1) throw ConfigError("gen_blobs needs input_dim >= 1");
  if (separation < 0) throw ConfigError("blob separation must be non-negative");
  Rng rng(mix64(seed, 0x626c6f62ULL));
  Tensor means = Tensor::zeros({num_classes, input_dim});
  for (int k = 0; k < num_classes; ++k) {
    double* row = means.row(k);
    double nrm = 0;
    for (int j = 0; j < input_dim; ++j) {
      row[j] = rng.normal();
      nrm += row[j] * row[j];
    }
    nrm = std::sqrt(nrm);
    if (nrm == 0) nrm = 1;
    for (int j = 0; j < input_dim; ++j) row[j] *= separation / nrm;
  }
  LabeledDataset ds;
  ds.inputs = Tensor::zeros({m, input_dim});
  ds.labels.resize(static_cast<size_t>(m));
  ds.num_classes = num_classes;
  for (int64_t i = 0; i < m; ++i) {
    int k = static_cast<int>(i % num_classes);
    ds.labels[static_cast<size_t>(i)] = k;
    double* row = ds.inputs.row(i);
    const double* mu = means.row(k);
    for (int j = 0; j < input_dim; ++j) row[j] = mu[j] + rng.normal();
  }
  ds.provenance = "blobs(seed=" + std::to_string(seed) + ",m=" + std::to_string(m) +
                  ",k=" + std::to_string(num_classes) + ",dim=" + std::to_string(input_dim) +
                  ",sep=" + fmt_double(separation) + ")";
  return ds;
}

// Two interleaved planar spirals (K = 2), 1.5 turns, radius growing from a
// small inner offset to 1, plus isotropic Gaussian jitter of the given scale.
inline LabeledDataset gen_spirals(uint64_t seed, int64_t m, double noise) {
  if (m < 2) throw ConfigError("gen_spirals needs at least 2 examples");
  if (noise < 0) throw ConfigError("spiral noise must be non-negative");
  Rng rng(mix64(seed, 0x73706972ULL));
  LabeledDataset ds;
  ds.inputs = Tensor::zeros({m, 2});
  ds.labels.resize(static_cast<size_t>(m));
  ds.num_classes = 2;
  for (int64_t i = 0; i < m; ++i) {
    int c = static_cast<int>(i % 2);
    ds.labels[static_cast<size_t>(i)] = c;
    double u = rng.uniform();
    double theta = u * 3.0 * std::numbers::pi;
    double r = 0.15 + 0.85 * u;
    double phase = theta + (c == 1 ? std::numbers::pi : 0.0);
    double* row = ds.inputs.row(i);
    row[0] = r * std::cos(phase) + noise * rng.normal();
    row[1] = r * std::sin(phase) + noise * rng.normal();
  }
  ds.provenance = "spirals(seed=" + std::to_string(seed) + ",m=" + std::to_string(m) +
                  ",noise=" + fmt_double(noise) + ")";
  return ds;
}

// Disjoint prefix/suffix split covering the whole set. Generators interleave
// classes, so both halves stay balanced within one example per class.
inline std::pair<LabeledDataset, LabeledDataset> split_train_test(const LabeledDataset& ds,
                                                                  int64_t m_train) {
  if (m_train <= 0 || m_train >= ds.size()) throw ConfigError("split point must be inside the dataset");
  auto take = [&](int64_t start, int64_t count, const char* tag) {
    LabeledDataset out;
    out.inputs.shape = {count, ds.input_dim()};
    out.inputs.data.assign(ds.inputs.row(start), ds.inputs.row(start) + count * ds.input_dim());
    out.labels.assign(ds.labels.begin() + start, ds.labels.begin() + start + count);
    out.num_classes = ds.num_classes;
    out.split = tag;
    out.provenance = ds.provenance + "/" + tag;
    return out;
  };
  return {take(0, m_train, "train"), take(m_train, ds.size() - m_train, "test")};
}

// Class-stratified subsample of n indices (balanced within one example),
// drawn with a seeded shuffle inside each class, returned sorted.
inline std::vector<int64_t> stratified_subsample(const LabeledDataset& ds, int64_t n,
                                                 uint64_t seed) {
  if (n <= 0 || n > ds.size()) throw ConfigError("subsample size out of range");
  std::vector<std::vector<int64_t>> per_class(static_cast<size_t>(ds.num_classes));
  for (int64_t i = 0; i < ds.size(); ++i) {
    per_class[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])].push_back(i);
  }
  std::vector<int64_t> picked;
  int64_t base = n / ds.num_classes, extra = n % ds.num_classes;
  for (int k = 0; k < ds.num_classes; ++k) {
    auto& pool = per_class[static_cast<size_t>(k)];
    int64_t want = base + (k < extra ? 1 : 0);
    if (want > static_cast<int64_t>(pool.size())) {
      throw Error("class " + std::to_string(k) + " too small for stratified subsample");
    }
    Rng rng(mix64(seed, 0x73756273ULL, static_cast<uint64_t>(k)));
    auto perm = rng.permutation(static_cast<uint32_t>(pool.size()));
    for (int64_t i = 0; i < want; ++i) picked.push_back(pool[perm[static_cast<size_t>(i)]]);
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

inline LabeledDataset gather(const LabeledDataset& ds, const std::vector<int64_t>& idx) {
  LabeledDataset out;
  out.inputs = Tensor::zeros({static_cast<int64_t>(idx.size()), ds.input_dim()});
  out.labels.resize(idx.size());
  out.num_classes = ds.num_classes;
  out.split = ds.split;
  out.provenance = ds.provenance + "/subsample";
  for (size_t i = 0; i < idx.size(); ++i) {
    std::copy(ds.inputs.row(idx[i]), ds.inputs.row(idx[i]) + ds.input_dim(), out.inputs.row(static_cast<int64_t>(i)));
    out.labels[i] = ds.labels[static_cast<size_t>(idx[i])];
  }
  return out;
}

// DLDS dataset file: magic "DLDS", u32 version, u64 m, u64 input_dim, u64 K,
// m*input_dim little-endian f64 inputs (row-major), m u32 labels, CRC-32.
inline constexpr char kDatasetMagic[4] = {'D', 'L', 'D', 'S'};
inline constexpr uint32_t kDatasetVersion = 1;

inline void save_dataset(const LabeledDataset& ds, const std::filesystem::path& path) {
  ds.validate();
  ByteWriter w;
  w.u32(kDatasetVersion);
  w.u64(static_cast<uint64_t>(ds.size()));
  w.u64(static_cast<uint64_t>(ds.input_dim()));
  w.u64(static_cast<uint64_t>(ds.num_classes));
  w.f64_array(ds.inputs.data.data(), ds.inputs.data.size());
  for (int c : ds.labels) w.u32(static_cast<uint32_t>(c));
  write_framed(path, kDatasetMagic, w);
}

inline LabeledDataset load_dataset(const std::filesystem::path& path) {
  std::vector<uint8_t> payload = read_framed(path, kDatasetMagic);
  ByteReader r(payload.data(), payload.size(), path.string());
  uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(version) + " in " + path.string());
  }
  uint64_t m = r.u64(), dim = r.u64(), k = r.u64();
  LabeledDataset ds;
  ds.inputs = Tensor::zeros({static_cast<int64_t>(m), static_cast<int64_t>(dim)});
  r.f64_array(ds.inputs.data.data(), ds.inputs.data.size());
  ds.labels.resize(m);
  ds.num_classes = static_cast<int>(k);
  for (uint64_t i = 0; i < m; ++i) {
    uint32_t c = r.u32();
    if (c >= k) throw FormatError("label out of range in " + path.string());
    ds.labels[i] = static_cast<int>(c);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes in " + path.string());
  ds.provenance = path.string();
  return ds;
}

// Recipe for a train/test pair, recorded verbatim in run metadata so any run
// can rebuild its exact inputs from the descriptor alone.
struct DataConfig {
  std::string source = "spirals";  // spirals | blobs | file
  uint64_t seed = 7;
  int64_t m_train = 1800;
  int64_t m_test = 900;
  int num_classes = 2;
  int input_dim = 2;
  double separation = 6.0;  // blobs: distance of class means from the origin
  double noise = 0.1;       // spirals: radial noise scale
  std::string train_path;   // file source only
  std::string test_path;

  void validate() const {
    if (source == "spirals") {
      if (noise < 0) throw ConfigError("spirals noise must be >= 0");
    } else if (source == "blobs") {
      if (num_classes < 2) throw ConfigError("blobs needs num_classes >= 2");
      if (input_dim < 1) throw ConfigError("blobs needs input_dim >= 1");
      if (separation <= 0) throw ConfigError("blobs separation must be > 0");
    } else if (source == "file") {
      if (train_path.empty() || test_path.empty()) {
        throw ConfigError("file data source needs train_path and test_path");
      }
    } else {
      throw ConfigError("unknown data source '" + source + "'");
    }
    if (source != "file" && (m_train <= 0 || m_test <= 0)) {
      throw ConfigError("m_train and m_test must be positive");
    }
  }

  std::pair<LabeledDataset, LabeledDataset> make() const {
    validate();
    if (source == "file") {
      LabeledDataset tr = load_dataset(train_path);
      LabeledDataset te = load_dataset(test_path);
      tr.split = "train";
      te.split = "test";
      if (tr.input_dim() != te.input_dim() || tr.num_classes != te.num_classes) {
        throw ConfigError("train/test dataset files disagree on shape");
      }
      return {std::move(tr), std::move(te)};
    }
    LabeledDataset full = source == "spirals"
                              ? gen_spirals(seed, m_train + m_test, noise)
                              : gen_blobs(seed, m_train + m_test, num_classes, input_dim, separation);
    return split_train_test(full, m_train);
  }
};

}  // namespace dllab
