#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <new>
#include <string>
#include <vector>

#include "gaqn/autodiff.hpp"

/// Differentiable tensor operations recorded on a Tape. Image tensors are NCHW.
namespace gaqn::ops {

namespace detail {

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

struct ConvGeom {
  int c, h, w;    // input plane
  int k, s, p;    // kernel, stride, padding
  int ho, wo;     // output plane
  int rows() const { return c * k * k; }
  int cols() const { return ho * wo; }
};

/// Unfolds one input plane into columns. Row r of the result starts at cols + r * ld.
template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols, std::size_t ld) {
  for (int c = 0; c < g.c; ++c)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        T* row = cols + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * ld;
        // Output columns whose input column lies inside the plane: [lo, hi).
        const int lo = std::clamp((g.p - kj + g.s - 1) / g.s, 0, g.wo);
        const int hi = std::clamp((g.w + g.p - kj + g.s - 1) / g.s, lo, g.wo);
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.s - g.p + ki;
          T* out = row + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(out, out + g.wo, T(0));
            continue;
          }
          const T* in = x + (static_cast<std::size_t>(c) * g.h + ih) * g.w + (kj - g.p);
          std::fill(out, out + lo, T(0));
          if (g.s == 1) {
            std::copy(in + lo, in + hi, out + lo);
          } else {
            for (int ow = lo; ow < hi; ++ow) out[ow] = in[ow * g.s];
          }
          std::fill(out + hi, out + g.wo, T(0));
        }
      }
}

template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  im2col(x, g, cols, static_cast<std::size_t>(g.cols()));
}

/// Adjoint of im2col: scatters-and-adds columns back onto the input plane.
template <class T>
void col2im(const T* cols, const ConvGeom& g, T* x, std::size_t ld) {
  for (int c = 0; c < g.c; ++c)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        const T* row = cols + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * ld;
        const int lo = std::clamp((g.p - kj + g.s - 1) / g.s, 0, g.wo);
        const int hi = std::clamp((g.w + g.p - kj + g.s - 1) / g.s, lo, g.wo);
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.s - g.p + ki;
          if (ih < 0 || ih >= g.h) continue;
          const T* in = row + oh * g.wo;
          T* out = x + (static_cast<std::size_t>(c) * g.h + ih) * g.w + (kj - g.p);
          for (int ow = lo; ow < hi; ++ow) out[ow * g.s] += in[ow];
        }
      }
}

template <class T>
void col2im(const T* cols, const ConvGeom& g, T* x) {
  col2im(cols, g, x, static_cast<std::size_t>(g.cols()));
}

/// Uninitialised scratch storage, aligned like tensor storage.
template <class T>
class Buffer {
 public:
  explicit Buffer(std::size_t n)
      : data_(static_cast<T*>(::operator new[](n * sizeof(T), kAlign))), size_(n) {}
  T* get() { return data_.get(); }
  const T* get() const { return data_.get(); }
  std::size_t size() const { return size_; }

 private:
  static constexpr std::align_val_t kAlign{64};
  struct Free {
    void operator()(T* p) const { ::operator delete[](p, kAlign); }
  };
  std::unique_ptr<T[], Free> data_;
  std::size_t size_;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <class T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T, class F>
Tensor<T> unary(const Var<T>& x, F&& f) {
  Tensor<T> y(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return y;
}

}  // namespace detail

/// 2-D cross-correlation. x: [N,Cin,H,W], w: [Cout,Cin,k,k], optional b: [Cout].
/// All samples share one GEMM over an im2col matrix of shape [Cin*k*k, N*Ho*Wo].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1, int pad = 0) {
  using namespace detail;
  require(x.value().rank() == 4 && w.value().rank() == 4, "conv2d expects rank-4 input and weight");
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), k = w.dim(2);
  require(w.dim(1) == cin && w.dim(3) == k,
          "conv2d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  require(!b.valid() || (b.value().rank() == 1 && b.dim(0) == cout), "conv2d: bias shape mismatch");
  const ConvGeom g{cin, h, wd, k, stride, pad, (h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1};
  require(g.ho > 0 && g.wo > 0, "conv2d: empty output for input " + shape_str(x.shape()));
  Tensor<T> y({n, cout, g.ho, g.wo});
  if (n == 0) return x.tape().record(std::move(y), {x, w}, [](Tape<T>&, int) {});

  const std::size_t in_stride = static_cast<std::size_t>(cin) * h * wd;
  const int p = g.cols(), rows = g.rows();
  const std::size_t wide = static_cast<std::size_t>(n) * p;
  // Column matrix [rows, N*P]; sample i occupies columns [i*P, (i+1)*P).
  Tape<T>& tape = x.tape();
  const bool keep = tape.grad_enabled() && w.needs_grad();
  // Columns are retained for the weight gradient; otherwise a reusable scratch area is used.
  std::shared_ptr<Buffer<T>> cols;
  T* cbuf = nullptr;
  if (keep) {
    cols = std::make_shared<Buffer<T>>(static_cast<std::size_t>(rows) * wide);
    cbuf = cols->get();
  } else {
    thread_local AlignedVector<T> scratch;
    if (scratch.size() < static_cast<std::size_t>(rows) * wide) scratch.resize(static_cast<std::size_t>(rows) * wide);
    cbuf = scratch.data();
  }
  for (int i = 0; i < n; ++i) {
    const T* xi = x.value().data() + i * in_stride;
    T* dst = cbuf + static_cast<std::size_t>(i) * p;
    if (k == 1 && stride == 1 && pad == 0) {
      for (int r = 0; r < rows; ++r)
        std::copy(xi + static_cast<std::size_t>(r) * p, xi + static_cast<std::size_t>(r + 1) * p, dst + r * wide);
    } else {
      im2col(xi, g, dst, wide);
    }
  }
  Buffer<T> out(static_cast<std::size_t>(cout) * wide);
  MatMap<T> om(out.get(), cout, static_cast<Eigen::Index>(wide));
  om.noalias() = ConstMatMap<T>(w.value().data(), cout, rows) *
                 ConstMatMap<T>(cbuf, rows, static_cast<Eigen::Index>(wide));
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < cout; ++c) {
      const T* src = out.get() + c * wide + static_cast<std::size_t>(i) * p;
      T* dst = y.data() + (static_cast<std::size_t>(i) * cout + c) * p;
      const T bias = b.valid() ? b.value()[c] : T(0);
      for (int j = 0; j < p; ++j) dst[j] = src[j] + bias;
    }

  return tape.record(std::move(y), {x, w, b.valid() ? b : x}, [x, w, b, g, cols, n, in_stride](Tape<T>& t, int self) {
    const Tensor<T>& gy = t.grad(self);
    const int cout = w.dim(0), p = g.cols(), rows = g.rows();
    const std::size_t wide = static_cast<std::size_t>(n) * p;
    Buffer<T> gyw(static_cast<std::size_t>(cout) * wide);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < cout; ++c) {
        const T* src = gy.data() + (static_cast<std::size_t>(i) * cout + c) * p;
        std::copy(src, src + p, gyw.get() + c * wide + static_cast<std::size_t>(i) * p);
      }
    ConstMatMap<T> gym(gyw.get(), cout, static_cast<Eigen::Index>(wide));
    if (w.needs_grad() && cols)
      MatMap<T>(t.grad(w.id()).data(), cout, rows).noalias() +=
          gym * ConstMatMap<T>(cols->get(), rows, static_cast<Eigen::Index>(wide)).transpose();
    if (b.valid() && b.needs_grad())
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(t.grad(b.id()).data(), cout) += gym.rowwise().sum();
    if (x.needs_grad()) {
      Buffer<T> dcols(static_cast<std::size_t>(rows) * wide);
      MatMap<T>(dcols.get(), rows, static_cast<Eigen::Index>(wide)).noalias() =
          ConstMatMap<T>(w.value().data(), cout, rows).transpose() * gym;
      const bool direct = g.k == 1 && g.s == 1 && g.p == 0;
      for (int i = 0; i < n; ++i) {
        T* gx = t.grad(x.id()).data() + i * in_stride;
        const T* src = dcols.get() + static_cast<std::size_t>(i) * p;
        if (direct) {
          for (int r = 0; r < rows; ++r)
            for (int j = 0; j < p; ++j) gx[static_cast<std::size_t>(r) * p + j] += src[r * wide + j];
        } else {
          col2im(src, g, gx, wide);
        }
      }
    }
  });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride = 1, int pad = 0) {
  return conv2d(x, w, Var<T>{}, stride, pad);
}

/// Transposed convolution without padding. x: [N,Cin,H,W], w: [Cin,Cout,k,k], b: [Cout].
/// Output plane is ((H-1)*stride + k) square.
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride) {
  using namespace detail;
  require(x.value().rank() == 4 && w.value().rank() == 4 && x.dim(1) == w.dim(0),
          "conv_transpose2d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(1), k = w.dim(2);
  require(!b.valid() || (b.value().rank() == 1 && b.dim(0) == cout), "conv_transpose2d: bias shape mismatch");
  // Geometry of the equivalent forward convolution on the output plane.
  const ConvGeom g{cout, (h - 1) * stride + k, (wd - 1) * stride + k, k, stride, 0, h, wd};
  const std::size_t in_stride = static_cast<std::size_t>(cin) * h * wd;
  const std::size_t out_stride = static_cast<std::size_t>(cout) * g.h * g.w;
  const std::size_t col_size = static_cast<std::size_t>(g.rows()) * g.cols();

  Tensor<T> y({n, cout, g.h, g.w});
  ConstMatMap<T> wm(w.value().data(), cin, g.rows());
  AlignedVector<T> cols(col_size);
  for (int i = 0; i < n; ++i) {
    MatMap<T>(cols.data(), g.rows(), g.cols()).noalias() =
        wm.transpose() * ConstMatMap<T>(x.value().data() + i * in_stride, cin, g.cols());
    T* yi = y.data() + i * out_stride;
    col2im(cols.data(), g, yi);
    if (b.valid())
      for (int c = 0; c < cout; ++c)
        for (int j = 0; j < g.h * g.w; ++j) yi[c * g.h * g.w + j] += b.value()[c];
  }

  Tape<T>& tape = x.tape();
  return tape.record(std::move(y), {x, w, b.valid() ? b : x},
                     [x, w, b, g, n, cin, in_stride, out_stride, col_size](Tape<T>& t, int self) {
                       const Tensor<T>& gy = t.grad(self);
                       ConstMatMap<T> wm(w.value().data(), cin, g.rows());
                       AlignedVector<T> dcols(col_size);
                       for (int i = 0; i < n; ++i) {
                         const T* gyi = gy.data() + i * out_stride;
                         im2col(gyi, g, dcols.data());
                         ConstMatMap<T> dc(dcols.data(), g.rows(), g.cols());
                         if (x.needs_grad())
                           MatMap<T>(t.grad(x.id()).data() + i * in_stride, cin, g.cols()).noalias() += wm * dc;
                         if (w.needs_grad())
                           MatMap<T>(t.grad(w.id()).data(), cin, g.rows()).noalias() +=
                               ConstMatMap<T>(x.value().data() + i * in_stride, cin, g.cols()) * dc.transpose();
                         if (b.valid() && b.needs_grad()) {
                           const int plane = g.h * g.w;
                           Tensor<T>& gb = t.grad(b.id());
                           for (int c = 0; c < g.c; ++c) {
                             T s = 0;
                             for (int j = 0; j < plane; ++j) s += gyi[c * plane + j];
                             gb[c] += s;
                           }
                         }
                       }
                     });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "add");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    for (const Var<T>& v : {a, b})
      if (v.needs_grad()) {
        Tensor<T>& gv = t.grad(v.id());
        for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
      }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "sub");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (a.needs_grad()) {
      Tensor<T>& ga = t.grad(a.id());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.needs_grad()) {
      Tensor<T>& gb = t.grad(b.id());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "mul");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    if (a.needs_grad()) {
      Tensor<T>& ga = t.grad(a.id());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.value()[i];
    }
    if (b.needs_grad()) {
      Tensor<T>& gb = t.grad(b.id());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.value()[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& x, T c) {
  return x.tape().record(detail::unary(x, [c](T v) { return c * v; }), {x}, [x, c](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> y = detail::unary(x, [](T v) { return T(1) / (T(1) + std::exp(-v)); });
  Var<T> out = x.tape().record(std::move(y), {x}, [x](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& yv = t.value(self);
    Tensor<T>& gx = t.grad(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i] * (T(1) - yv[i]);
  });
  return out;
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  Tensor<T> y = detail::unary(x, [](T v) { return std::tanh(v); });
  return x.tape().record(std::move(y), {x}, [x](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& yv = t.value(self);
    Tensor<T>& gx = t.grad(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - yv[i] * yv[i]);
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> y = detail::unary(x, [](T v) { return v > T(0) ? v : T(0); });
  return x.tape().record(std::move(y), {x}, [x](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv = x.value();
    Tensor<T>& gx = t.grad(x.id());
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T(0)) gx[i] += g[i];
  });
}

template <class T>
Var<T> exp(const Var<T>& x) {
  Tensor<T> y = detail::unary(x, [](T v) { return std::exp(v); });
  return x.tape().record(std::move(y), {x}, [x](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& yv = t.value(self);
    Tensor<T>& gx = t.grad(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i];
  });
}

/// Element-wise clamp; gradient is zero where the input lies outside [lo, hi].
template <class T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  Tensor<T> y = detail::unary(x, [lo, hi](T v) { return std::clamp(v, lo, hi); });
  return x.tape().record(std::move(y), {x}, [x, lo, hi](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& xv = x.value();
    Tensor<T>& gx = t.grad(x.id());
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] >= lo && xv[i] <= hi) gx[i] += g[i];
  });
}

/// Concatenate [N,Ci,H,W] tensors along channels.
template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  detail::require(!xs.empty(), "concat_channels: empty input");
  const int n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  int ctot = 0;
  for (const auto& v : xs) {
    detail::require(v.value().rank() == 4 && v.dim(0) == n && v.dim(2) == h && v.dim(3) == w,
                    "concat_channels: incompatible " + shape_str(v.shape()) + " vs " + shape_str(xs[0].shape()));
    ctot += v.dim(1);
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<T> y({n, ctot, h, w});
  for (int i = 0; i < n; ++i) {
    T* dst = y.data() + static_cast<std::size_t>(i) * ctot * plane;
    for (const auto& v : xs) {
      const std::size_t chunk = static_cast<std::size_t>(v.dim(1)) * plane;
      const T* src = v.value().data() + i * chunk;
      dst = std::copy(src, src + chunk, dst);
    }
  }
  return xs[0].tape().record(std::move(y), xs, [xs, n, ctot, plane](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    for (int i = 0; i < n; ++i) {
      const T* src = g.data() + static_cast<std::size_t>(i) * ctot * plane;
      for (const auto& v : xs) {
        const std::size_t chunk = static_cast<std::size_t>(v.dim(1)) * plane;
        if (v.needs_grad()) {
          T* dst = t.grad(v.id()).data() + i * chunk;
          for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
        }
        src += chunk;
      }
    }
  });
}

/// Channels [begin, begin + count) of an [N,C,H,W] tensor.
template <class T>
Var<T> slice_channels(const Var<T>& x, int begin, int count) {
  detail::require(x.value().rank() == 4 && begin >= 0 && count > 0 && begin + count <= x.dim(1),
                  "slice_channels: range out of bounds for " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> y({n, count, x.dim(2), x.dim(3)});
  for (int i = 0; i < n; ++i) {
    const T* src = x.value().data() + (static_cast<std::size_t>(i) * c + begin) * plane;
    std::copy(src, src + count * plane, y.data() + static_cast<std::size_t>(i) * count * plane);
  }
  return x.tape().record(std::move(y), {x}, [x, begin, count, n, c, plane](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(x.id());
    for (int i = 0; i < n; ++i) {
      const T* src = g.data() + static_cast<std::size_t>(i) * count * plane;
      T* dst = gx.data() + (static_cast<std::size_t>(i) * c + begin) * plane;
      for (std::size_t j = 0; j < count * plane; ++j) dst[j] += src[j];
    }
  });
}

/// 2x2 average pooling with stride 2.
template <class T>
Var<T> avg_pool2(const Var<T>& x) {
  detail::require(x.value().rank() == 4 && x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0,
                  "avg_pool2: needs even spatial dims, got " + shape_str(x.shape()));
  const int nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y({x.dim(0), x.dim(1), h / 2, w / 2});
  const T* xv = x.value().data();
  for (int p = 0; p < nc; ++p)
    for (int i = 0; i < h / 2; ++i)
      for (int j = 0; j < w / 2; ++j) {
        const T* q = xv + (static_cast<std::size_t>(p) * h + 2 * i) * w + 2 * j;
        y[(static_cast<std::size_t>(p) * (h / 2) + i) * (w / 2) + j] = T(0.25) * (q[0] + q[1] + q[w] + q[w + 1]);
      }
  return x.tape().record(std::move(y), {x}, [x, nc, h, w](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(x.id());
    for (int p = 0; p < nc; ++p)
      for (int i = 0; i < h / 2; ++i)
        for (int j = 0; j < w / 2; ++j) {
          const T v = T(0.25) * g[(static_cast<std::size_t>(p) * (h / 2) + i) * (w / 2) + j];
          T* q = gx.data() + (static_cast<std::size_t>(p) * h + 2 * i) * w + 2 * j;
          q[0] += v;
          q[1] += v;
          q[w] += v;
          q[w + 1] += v;
        }
  });
}

/// [N,C,H,W] -> [N,C] mean over the spatial grid.
template <class T>
Var<T> spatial_mean(const Var<T>& x) {
  detail::require(x.value().rank() == 4, "spatial_mean expects rank 4");
  const int nc = x.dim(0) * x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> y({x.dim(0), x.dim(1)});
  for (int p = 0; p < nc; ++p) {
    T s = 0;
    const T* q = x.value().data() + p * plane;
    for (std::size_t j = 0; j < plane; ++j) s += q[j];
    y[p] = s / static_cast<T>(plane);
  }
  return x.tape().record(std::move(y), {x}, [x, nc, plane](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(x.id());
    for (int p = 0; p < nc; ++p) {
      const T v = g[p] / static_cast<T>(plane);
      T* q = gx.data() + p * plane;
      for (std::size_t j = 0; j < plane; ++j) q[j] += v;
    }
  });
}

/// Sums rows of x (leading dim) into `groups` outputs: out[owner[i]] += x[i].
template <class T>
Var<T> segment_sum(const Var<T>& x, const std::vector<int>& owner, int groups) {
  detail::require(static_cast<int>(owner.size()) == x.dim(0), "segment_sum: owner list length mismatch");
  std::vector<int> s = x.shape();
  s[0] = groups;
  Tensor<T> y(s);
  const std::size_t row = x.value().size() / std::max(1, x.dim(0));
  for (std::size_t i = 0; i < owner.size(); ++i) {
    detail::require(owner[i] >= 0 && owner[i] < groups, "segment_sum: owner out of range");
    const T* src = x.value().data() + i * row;
    T* dst = y.data() + static_cast<std::size_t>(owner[i]) * row;
    for (std::size_t j = 0; j < row; ++j) dst[j] += src[j];
  }
  return x.tape().record(std::move(y), {x}, [x, owner, row](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    Tensor<T>& gx = t.grad(x.id());
    for (std::size_t i = 0; i < owner.size(); ++i) {
      const T* src = g.data() + static_cast<std::size_t>(owner[i]) * row;
      T* dst = gx.data() + i * row;
      for (std::size_t j = 0; j < row; ++j) dst[j] += src[j];
    }
  });
}

/// Rows [begin, begin + count) along the leading dimension.
template <class T>
Var<T> slice_rows(const Var<T>& x, int begin, int count) {
  detail::require(begin >= 0 && count >= 0 && begin + count <= x.dim(0), "slice_rows: range out of bounds");
  const std::size_t row = x.value().size() / static_cast<std::size_t>(std::max(1, x.dim(0)));
  return x.tape().record(x.value().rows(begin, count), {x}, [x, begin, row](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad(self);
    T* dst = t.grad(x.id()).data() + static_cast<std::size_t>(begin) * row;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

/// Sum of all elements, as a scalar of shape [1].
template <class T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().storage()) s += v;
  return x.tape().record(Tensor<T>({1}, s), {x}, [x](Tape<T>& t, int self) {
    const T g = t.grad(self)[0];
    Tensor<T>& gx = t.grad(x.id());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

/// Weighted sum of scalar nodes.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& xs, const std::vector<T>& weights) {
  detail::require(!xs.empty() && xs.size() == weights.size(), "weighted_sum: size mismatch");
  T s = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    detail::require(xs[i].value().size() == 1, "weighted_sum expects scalars");
    s += weights[i] * xs[i].value()[0];
  }
  return xs[0].tape().record(Tensor<T>({1}, s), xs, [xs, weights](Tape<T>& t, int self) {
    const T g = t.grad(self)[0];
    for (std::size_t i = 0; i < xs.size(); ++i)
      if (xs[i].needs_grad()) t.grad(xs[i].id())[0] += weights[i] * g;
  });
}

}  // namespace gaqn::ops
