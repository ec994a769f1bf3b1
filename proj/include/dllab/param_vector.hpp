#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dllab/tensor.hpp"

namespace dllab {

// One named tensor inside the flat parameter vector.
struct LayoutEntry {
  std::string name;
  std::vector<int64_t> shape;
  int64_t offset = 0;
  int64_t size = 0;
};

struct ParamLayout {
  std::vector<LayoutEntry> entries;
  int64_t dim = 0;

  void finalize() {
    int64_t off = 0;
    for (auto& e : entries) {
      e.offset = off;
      e.size = Tensor::numel_of(e.shape);
      off += e.size;
    }
    dim = off;
  }

  const LayoutEntry& find(const std::string& name) const {
    for (const auto& e : entries) {
      if (e.name == name) return e;
    }
    throw Error("no layout entry named '" + name + "'");
  }

  bool operator==(const ParamLayout& o) const {
    if (dim != o.dim || entries.size() != o.entries.size()) return false;
    for (size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].name != o.entries[i].name || entries[i].shape != o.entries[i].shape) {
        return false;
      }
    }
    return true;
  }
};

// Flat parameter vector plus the layout describing its tensor views.
template <class S>
struct ParamVectorT {
  std::shared_ptr<const ParamLayout> layout;
  std::vector<S> values;

  int64_t dim() const { return layout ? layout->dim : 0; }

  static ParamVectorT zeros(std::shared_ptr<const ParamLayout> lay) {
    ParamVectorT p;
    p.values.assign(static_cast<size_t>(lay->dim), S(0));
    p.layout = std::move(lay);
    return p;
  }

  TensorT<S> slice(const LayoutEntry& e) const {
    TensorT<S> t;
    t.shape = e.shape;
    t.data.assign(values.begin() + e.offset, values.begin() + e.offset + e.size);
    return t;
  }

  void store(const LayoutEntry& e, const TensorT<S>& t) {
    if (t.numel() != e.size) throw Error("tensor does not fit layout entry " + e.name);
    std::copy(t.data.begin(), t.data.end(), values.begin() + e.offset);
  }

  std::vector<TensorT<S>> unflatten() const {
    std::vector<TensorT<S>> out;
    out.reserve(layout->entries.size());
    for (const auto& e : layout->entries) out.push_back(slice(e));
    return out;
  }

  static ParamVectorT flatten(std::shared_ptr<const ParamLayout> lay,
                              const std::vector<TensorT<S>>& tensors) {
    if (tensors.size() != lay->entries.size()) throw Error("flatten: tensor count mismatch");
    ParamVectorT p = zeros(lay);
    for (size_t i = 0; i < tensors.size(); ++i) p.store(lay->entries[i], tensors[i]);
    return p;
  }

  template <class T>
  ParamVectorT<T> cast() const {
    ParamVectorT<T> out;
    out.layout = layout;
    out.values.assign(values.begin(), values.end());
    return out;
  }
};

using ParamVector = ParamVectorT<double>;

}  // namespace dllab
