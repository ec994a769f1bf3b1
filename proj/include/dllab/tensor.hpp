#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "dllab/common.hpp"

namespace dllab {

// Dense row-major tensor. Scalar type is a template parameter; metrics and
// tests always use double, training may opt into float.
template <class S>
struct TensorT {
  std::vector<int64_t> shape;
  std::vector<S> data;

  TensorT() = default;

  static TensorT zeros(std::vector<int64_t> shp) {
    TensorT t;
    t.shape = std::move(shp);
    t.data.assign(static_cast<size_t>(numel_of(t.shape)), S(0));
    return t;
  }

  static TensorT from(std::vector<int64_t> shp, std::vector<S> values) {
    TensorT t;
    t.shape = std::move(shp);
    t.data = std::move(values);
    if (static_cast<int64_t>(t.data.size()) != numel_of(t.shape)) {
      throw Error("tensor data length does not match shape");
    }
    return t;
  }

  static int64_t numel_of(const std::vector<int64_t>& shp) {
    int64_t n = 1;
    for (int64_t d : shp) {
      if (d < 0) throw Error("negative tensor extent");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  size_t rank() const { return shape.size(); }

  S& at2(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
  S at2(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

  const S* row(int64_t i) const { return data.data() + i * shape.back(); }
  S* row(int64_t i) { return data.data() + i * shape.back(); }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }
};

using Tensor = TensorT<double>;

template <class S>
inline bool all_finite(const TensorT<S>& t) {
  for (S v : t.data) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

template <class S>
inline void require_finite(const TensorT<S>& t, const char* what) {
  if (!all_finite(t)) throw NonFiniteError(std::string("non-finite values in ") + what);
}

// Fixed-order 4-accumulator dot product. The summation order is data
// independent, which keeps results bit-reproducible across calls.
template <class S>
inline S dot(const S* a, const S* b, int64_t n) {
  S s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return ((s0 + s1) + (s2 + s3));
}

template <class S>
inline void axpy(S* y, S a, const S* x, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// C[m x n] += A[m x k] * B[k x n]
template <class S>
inline void matmul_nn_acc(S* c, const S* a, const S* b, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    const S* arow = a + i * k;
    for (int64_t l = 0; l < k; ++l) {
      S av = arow[l];
      if (av == S(0)) continue;
      axpy(crow, av, b + l * n, n);
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T  (rows of both operands are contiguous)
template <class S>
inline void matmul_nt_acc(S* c, const S* a, const S* b, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) crow[j] += dot(arow, b + j * k, k);
  }
}

// Tensor-shaped convenience wrapper: C[m x n] += A[m x k] * B[n x k]^T.
template <class S>
inline void matmul_nt_acc(TensorT<S>& c, const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || c.rank() != 2 || a.dim(1) != b.dim(1) ||
      c.dim(0) != a.dim(0) || c.dim(1) != b.dim(0)) {
    throw Error("shape mismatch in matmul_nt_acc");
  }
  matmul_nt_acc(c.data.data(), a.data.data(), b.data.data(), a.dim(0), a.dim(1), b.dim(0));
}

// C[k x n] += A[m x k]^T * B[m x n]
template <class S>
inline void matmul_tn_acc(S* c, const S* a, const S* b, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    const S* brow = b + i * n;
    for (int64_t l = 0; l < k; ++l) {
      S av = arow[l];
      if (av == S(0)) continue;
      axpy(c + l * n, av, brow, n);
    }
  }
}

inline double squared_norm(const std::vector<double>& v) {
  return dot(v.data(), v.data(), static_cast<int64_t>(v.size()));
}

inline double norm2(const std::vector<double>& v) { return std::sqrt(squared_norm(v)); }

inline double vec_dot(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error("vector length mismatch in dot");
  return dot(a.data(), b.data(), static_cast<int64_t>(a.size()));
}

}  // namespace dllab
