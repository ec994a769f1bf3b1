#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <vector>

#include "dllab/tensor.hpp"

namespace dllab {

// Reverse-mode tape for one forward pass. Every primitive op appends a value
// slot and, when recording, a closure that scatters the node's output adjoint
// into its inputs' adjoints. backward() replays the closures newest-first, so
// one tape can be differentiated repeatedly (once per output seed).
template <class S>
class TapeT {
 public:
  // Arguments: tape, id of the node being differentiated.
  using BackFn = std::function<void(TapeT&, int)>;

  bool recording = true;

  int push(TensorT<S> value) { return push_impl(std::move(value), BackFn{}); }

  int push(TensorT<S> value, BackFn back) {
    return push_impl(std::move(value), recording ? std::move(back) : BackFn{});
  }

  const TensorT<S>& value(int id) const { return slots_[static_cast<size_t>(id)].value; }
  TensorT<S>& value(int id) { return slots_[static_cast<size_t>(id)].value; }

  // Adjoint buffer, allocated to zeros on first touch.
  TensorT<S>& grad(int id) {
    Slot& s = slots_[static_cast<size_t>(id)];
    if (s.grad.data.empty() && s.value.numel() > 0) {
      s.grad = TensorT<S>::zeros(s.value.shape);
    }
    return s.grad;
  }

  bool has_grad(int id) const { return !slots_[static_cast<size_t>(id)].grad.data.empty(); }

  // Reverse accumulation seeding d(root) = seed. Adjoints from any earlier
  // backward() call are discarded first, so repeated calls are independent.
  void backward(int root, const TensorT<S>& seed) {
    for (auto& s : slots_) s.grad.data.clear();
    if (!seed.same_shape(slots_[static_cast<size_t>(root)].value)) {
      throw Error("backward seed shape mismatch");
    }
    grad(root) = seed;
    for (int i = root; i >= 0; --i) {
      if (backs_[static_cast<size_t>(i)] && has_grad(i)) backs_[static_cast<size_t>(i)](*this, i);
    }
  }

  size_t size() const { return slots_.size(); }

 private:
  struct Slot {
    TensorT<S> value;
    TensorT<S> grad;
  };

  int push_impl(TensorT<S> value, BackFn back) {
    slots_.push_back(Slot{std::move(value), {}});
    backs_.push_back(std::move(back));
    return static_cast<int>(slots_.size() - 1);
  }

  std::vector<Slot> slots_;
  std::vector<BackFn> backs_;
};

namespace ops {

// y = x * w^T (+ b broadcast over rows); x is [m x in], w is [out x in].
template <class S>
int linear(TapeT<S>& t, int x, int w, int b) {
  const TensorT<S>& xv = t.value(x);
  const TensorT<S>& wv = t.value(w);
  int64_t m = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
  if (wv.dim(1) != in) throw Error("linear: weight/input width mismatch");
  TensorT<S> y = TensorT<S>::zeros({m, out});
  if (m < 4) {
    matmul_nt_acc(y.data.data(), xv.data.data(), wv.data.data(), m, in, out);
  } else {
    // A transposed copy of w turns the row products into axpy sweeps, which
    // vectorize without reassociating any individual sum.
    std::vector<S> wt(static_cast<size_t>(in * out));
    for (int64_t j = 0; j < out; ++j) {
      for (int64_t l = 0; l < in; ++l) {
        wt[static_cast<size_t>(l * out + j)] = wv.data[static_cast<size_t>(j * in + l)];
      }
    }
    matmul_nn_acc(y.data.data(), xv.data.data(), wt.data(), m, in, out);
  }
  if (b >= 0) {
    const TensorT<S>& bv = t.value(b);
    if (bv.numel() != out) throw Error("linear: bias width mismatch");
    for (int64_t i = 0; i < m; ++i) axpy(y.row(i), S(1), bv.data.data(), out);
  }
  return t.push(std::move(y), [x, w, b, m, in, out](TapeT<S>& tp, int self) {
    const TensorT<S>& dy = tp.grad(self);
    const TensorT<S>& xv = tp.value(x);
    const TensorT<S>& wv = tp.value(w);
    // dx += dy * w
    matmul_nn_acc(tp.grad(x).data.data(), dy.data.data(), wv.data.data(), m, out, in);
    // dw += dy^T * x
    matmul_tn_acc(tp.grad(w).data.data(), dy.data.data(), xv.data.data(), m, out, in);
    if (b >= 0) {
      TensorT<S>& db = tp.grad(b);
      for (int64_t i = 0; i < m; ++i) axpy(db.data.data(), S(1), dy.row(i), out);
    }
  });
}

// Elementwise max(x, 0). The derivative at exactly zero is taken as zero,
// matching the strictly-positive activation-pattern convention.
template <class S>
int relu(TapeT<S>& t, int x) {
  TensorT<S> y = t.value(x);
  for (S& v : y.data) {
    if (!(v > S(0))) v = S(0);
  }
  return t.push(std::move(y), [x](TapeT<S>& tp, int self) {
    const TensorT<S>& dy = tp.grad(self);
    const TensorT<S>& yv = tp.value(self);
    TensorT<S>& dx = tp.grad(x);
    for (int64_t i = 0; i < dy.numel(); ++i) {
      if (yv.data[static_cast<size_t>(i)] > S(0)) dx.data[static_cast<size_t>(i)] += dy.data[static_cast<size_t>(i)];
    }
  });
}

// 3x3 convolution, stride 1, zero padding 1. x is [m,C,H,W], w is [F,C,3,3].
template <class S>
int conv3x3(TapeT<S>& t, int x, int w, int b) {
  const TensorT<S>& xv = t.value(x);
  const TensorT<S>& wv = t.value(w);
  int64_t m = xv.dim(0), c = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  int64_t f = wv.dim(0);
  if (wv.dim(1) != c || wv.dim(2) != 3 || wv.dim(3) != 3) throw Error("conv3x3: bad kernel shape");
  TensorT<S> y = TensorT<S>::zeros({m, f, h, wd});
  const S* bp = b >= 0 ? t.value(b).data.data() : nullptr;
  for (int64_t n = 0; n < m; ++n) {
    for (int64_t fo = 0; fo < f; ++fo) {
      S* yplane = y.data.data() + ((n * f + fo) * h) * wd;
      if (bp) {
        for (int64_t i = 0; i < h * wd; ++i) yplane[i] = bp[fo];
      }
      for (int64_t ci = 0; ci < c; ++ci) {
        const S* xplane = xv.data.data() + ((n * c + ci) * h) * wd;
        const S* ker = wv.data.data() + ((fo * c + ci) * 3) * 3;
        for (int64_t ky = 0; ky < 3; ++ky) {
          for (int64_t kx = 0; kx < 3; ++kx) {
            S kv = ker[ky * 3 + kx];
            if (kv == S(0)) continue;
            int64_t y0 = std::max<int64_t>(0, 1 - ky), y1 = std::min(h, h + 1 - ky);
            int64_t x0 = std::max<int64_t>(0, 1 - kx), x1 = std::min(wd, wd + 1 - kx);
            for (int64_t yy = y0; yy < y1; ++yy) {
              const S* xrow = xplane + (yy + ky - 1) * wd + (kx - 1);
              S* yrow = yplane + yy * wd;
              for (int64_t xx = x0; xx < x1; ++xx) yrow[xx] += kv * xrow[xx];
            }
          }
        }
      }
    }
  }
  return t.push(std::move(y), [x, w, b, m, c, h, wd, f](TapeT<S>& tp, int self) {
    const TensorT<S>& dy = tp.grad(self);
    const TensorT<S>& xv = tp.value(x);
    const TensorT<S>& wv = tp.value(w);
    TensorT<S>& dx = tp.grad(x);
    TensorT<S>& dw = tp.grad(w);
    for (int64_t n = 0; n < m; ++n) {
      for (int64_t fo = 0; fo < f; ++fo) {
        const S* dyplane = dy.data.data() + ((n * f + fo) * h) * wd;
        for (int64_t ci = 0; ci < c; ++ci) {
          const S* xplane = xv.data.data() + ((n * c + ci) * h) * wd;
          S* dxplane = dx.data.data() + ((n * c + ci) * h) * wd;
          const S* ker = wv.data.data() + ((fo * c + ci) * 3) * 3;
          S* dker = dw.data.data() + ((fo * c + ci) * 3) * 3;
          for (int64_t ky = 0; ky < 3; ++ky) {
            for (int64_t kx = 0; kx < 3; ++kx) {
              S kv = ker[ky * 3 + kx];
              S acc = S(0);
              int64_t y0 = std::max<int64_t>(0, 1 - ky), y1 = std::min(h, h + 1 - ky);
              int64_t x0 = std::max<int64_t>(0, 1 - kx), x1 = std::min(wd, wd + 1 - kx);
              for (int64_t yy = y0; yy < y1; ++yy) {
                const S* xrow = xplane + (yy + ky - 1) * wd + (kx - 1);
                S* dxrow = dxplane + (yy + ky - 1) * wd + (kx - 1);
                const S* dyrow = dyplane + yy * wd;
                for (int64_t xx = x0; xx < x1; ++xx) {
                  acc += dyrow[xx] * xrow[xx];
                  dxrow[xx] += kv * dyrow[xx];
                }
              }
              dker[ky * 3 + kx] += acc;
            }
          }
        }
        if (b >= 0) {
          S acc = S(0);
          for (int64_t i = 0; i < h * wd; ++i) acc += dyplane[i];
          tp.grad(b).data[static_cast<size_t>(fo)] += acc;
        }
      }
    }
  });
}

// 2x2 max pooling with stride 2; ties resolve to the first cell in scan
// order, which keeps replays deterministic.
template <class S>
int maxpool2x2(TapeT<S>& t, int x) {
  const TensorT<S>& xv = t.value(x);
  int64_t m = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw Error("maxpool2x2: extents must be even");
  int64_t ho = h / 2, wo = w / 2;
  TensorT<S> y = TensorT<S>::zeros({m, c, ho, wo});
  auto arg = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(y.numel()));
  int64_t oi = 0;
  for (int64_t n = 0; n < m; ++n) {
    for (int64_t ci = 0; ci < c; ++ci) {
      const S* xplane = xv.data.data() + ((n * c + ci) * h) * w;
      int64_t base = ((n * c + ci) * h) * w;
      for (int64_t yy = 0; yy < ho; ++yy) {
        for (int64_t xx = 0; xx < wo; ++xx, ++oi) {
          int64_t best = (2 * yy) * w + 2 * xx;
          S bv = xplane[best];
          const int64_t cand[3] = {(2 * yy) * w + 2 * xx + 1, (2 * yy + 1) * w + 2 * xx,
                                   (2 * yy + 1) * w + 2 * xx + 1};
          for (int64_t idx : cand) {
            if (xplane[idx] > bv) { bv = xplane[idx]; best = idx; }
          }
          y.data[static_cast<size_t>(oi)] = bv;
          (*arg)[static_cast<size_t>(oi)] = base + best;
        }
      }
    }
  }
  return t.push(std::move(y), [x, arg](TapeT<S>& tp, int self) {
    const TensorT<S>& dy = tp.grad(self);
    TensorT<S>& dx = tp.grad(x);
    for (int64_t i = 0; i < dy.numel(); ++i) {
      dx.data[static_cast<size_t>((*arg)[static_cast<size_t>(i)])] += dy.data[static_cast<size_t>(i)];
    }
  });
}

// Global average pool: [m,C,H,W] -> [m,C].
template <class S>
int global_avg_pool(TapeT<S>& t, int x) {
  const TensorT<S>& xv = t.value(x);
  int64_t m = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  TensorT<S> y = TensorT<S>::zeros({m, c});
  for (int64_t i = 0; i < m * c; ++i) {
    const S* plane = xv.data.data() + i * hw;
    S acc = S(0);
    for (int64_t j = 0; j < hw; ++j) acc += plane[j];
    y.data[static_cast<size_t>(i)] = acc / static_cast<S>(hw);
  }
  return t.push(std::move(y), [x, hw](TapeT<S>& tp, int self) {
    const TensorT<S>& dy = tp.grad(self);
    TensorT<S>& dx = tp.grad(x);
    for (int64_t i = 0; i < dy.numel(); ++i) {
      S g = dy.data[static_cast<size_t>(i)] / static_cast<S>(hw);
      S* plane = dx.data.data() + i * hw;
      for (int64_t j = 0; j < hw; ++j) plane[j] += g;
    }
  });
}

// Reinterprets [m, C*H*W] rows as [m,C,H,W] images (pure view change).
template <class S>
int reshape(TapeT<S>& t, int x, std::vector<int64_t> shape) {
  TensorT<S> y;
  y.data = t.value(x).data;
  y.shape = std::move(shape);
  if (y.numel() != TensorT<S>::numel_of(y.shape)) throw Error("reshape: element count mismatch");
  return t.push(std::move(y), [x](TapeT<S>& tp, int self) {
    const TensorT<S>& dy = tp.grad(self);
    TensorT<S>& dx = tp.grad(x);
    for (int64_t i = 0; i < dy.numel(); ++i) dx.data[static_cast<size_t>(i)] += dy.data[static_cast<size_t>(i)];
  });
}

}  // namespace ops
}  // namespace dllab
