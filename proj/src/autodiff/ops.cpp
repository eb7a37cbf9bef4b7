// SPDX-License-Identifier: Apache-2.0
#include "tpd/autodiff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace tpd::ad {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_same(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

template <typename T>
void require_rank(const char* op, const Var<T>& a, std::size_t rank) {
  if (a.value().rank() != rank) {
    throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got shape " + shape_str(a.shape()));
  }
}

template <typename T>
void accumulate(Tape<T>& t, const Var<T>& v, const Tensor<T>& g) {
  if (!v.requires_grad()) return;
  auto& buf = t.grad_buffer(v);
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

// Unary element-wise op with derivative expressed through (input, output).
template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& a, F f, D df) {
  const Tensor<T>& x = a.value();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape().record(std::move(y), {a}, [a, df](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& x = a.value();
    auto& buf = t.grad_buffer(a);
    for (std::size_t i = 0; i < x.size(); ++i) buf[i] += g[i] * df(x[i]);
  });
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s.at(axis), 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// im2col for one sample: [Ci*k*k, Ho*Wo].
template <typename T>
void im2col(const T* x, std::size_t ci, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t ho, std::size_t wo, T* cols) {
  for (std::size_t c = 0; c < ci; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix < static_cast<std::ptrdiff_t>(w);
            row[oy * wo + ox] = inside ? x[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t ci, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t ho, std::size_t wo, T* dx) {
  for (std::size_t c = 0; c < ci; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            dx[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

// Bilinear 2x source taps along one axis (half-pixel centres, clamped).
struct Tap {
  std::size_t i0, i1;
  double w1;
};

inline std::vector<Tap> upsample_taps(std::size_t n) {
  std::vector<Tap> taps(2 * n);
  for (std::size_t o = 0; o < 2 * n; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > n - 1) i0 = n - 1;
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    taps[o] = Tap{i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

// Continuous cell index for a [-1, 1] coordinate on an axis of n cells,
// clamped to the outermost cell centres.
template <typename T>
inline T to_index(T u, std::size_t n, bool& clamped) {
  const T idx = ((u + T(1)) * static_cast<T>(n) - T(1)) / T(2);
  const T hi = static_cast<T>(n - 1);
  clamped = idx <= T(0) || idx >= hi;
  return std::clamp(idx, T(0), hi);
}

}  // namespace

// ---------------------------------------------------------------------------
// Element-wise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same("add", a, b);
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, a, g);
    accumulate(t, b, g);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same("sub", a, b);
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, a, g);
    if (b.requires_grad()) {
      auto& buf = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) buf[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same("mul", a, b);
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    if (a.requires_grad()) {
      auto& buf = t.grad_buffer(a);
      const auto& bv = b.value();
      for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto& buf = t.grad_buffer(b);
      const auto& av = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return unary(a, [s](T x) { return x * s; }, [s](T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return unary(a, [s](T x) { return x + s; }, [](T) { return T(1); });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return unary(a, [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); });
}

template <typename T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

// Branch-free, vectorised forms: softplus(x) = max(x, 0) + log1p(exp(-|x|)).
template <typename T>
void softplus_array(const Tensor<T>& x, Tensor<T>& y) {
  ConstArrayMap<T> xv(x.ptr(), x.size());
  ArrayMap<T>(y.ptr(), y.size()) = xv.max(T(0)) + (-xv.abs()).exp().log1p();
}

template <typename T>
void sigmoid_array(const Tensor<T>& x, Tensor<T>& y) {
  ConstArrayMap<T> xv(x.ptr(), x.size());
  ArrayMap<T>(y.ptr(), y.size()) = T(1) / (T(1) + (-xv).exp());
}

template <typename T>
Var<T> softplus(const Var<T>& a) {
  Tensor<T> y(a.shape());
  softplus_array(a.value(), y);
  return a.tape().record(std::move(y), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> s(a.shape());
    sigmoid_array(a.value(), s);
    auto& buf = t.grad_buffer(a);
    ArrayMap<T>(buf.ptr(), buf.size()) += ConstArrayMap<T>(g.ptr(), g.size()) * ConstArrayMap<T>(s.ptr(), s.size());
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> y(a.shape());
  sigmoid_array(a.value(), y);
  const std::size_t out_id = a.tape().size();
  return a.tape().record(std::move(y), {a}, [a, out_id](Tape<T>& t, const Tensor<T>& g) {
    const auto& s = t.value(out_id);
    auto& buf = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * s[i] * (T(1) - s[i]);
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  return unary(a, [slope](T x) { return x > T(0) ? x : slope * x; },
               [slope](T x) { return x > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> smooth_leaky_relu(const Var<T>& a, T slope, T delta) {
  const T hi = (T(1) + slope) / T(2), lo = (T(1) - slope) / T(2), d2 = delta * delta;
  return unary(a, [=](T x) { return hi * x + lo * std::sqrt(x * x + d2); },
               [=](T x) { return hi + lo * x / std::sqrt(x * x + d2); });
}

template <typename T>
Var<T> sqrt(const Var<T>& a) {
  return unary(a, [](T x) { return std::sqrt(x); },
               [](T x) { return x > T(0) ? T(0.5) / std::sqrt(x) : T(0); });
}

template <typename T>
Var<T> rsqrt(const Var<T>& a) {
  return unary(a, [](T x) { return T(1) / std::sqrt(x); }, [](T x) { return T(-0.5) / (x * std::sqrt(x)); });
}

template <typename T>
Var<T> abs(const Var<T>& a) {
  return unary(a, [](T x) { return std::abs(x); },
               [](T x) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return unary(a, [](T x) { return x * x; }, [](T x) { return T(2) * x; });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().data()) s += v;
  return a.tape().record(Tensor<T>::scalar(s), {a}, [a](Tape<T>& t, const Tensor<T>& g) {
    auto& buf = t.grad_buffer(a);
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean", "empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> sum_per_sample(const Var<T>& a) {
  const Tensor<T>& x = a.value();
  if (x.rank() < 1) throw ShapeError("sum_per_sample", "rank-0 tensor");
  const std::size_t n = x.dim(0), inner = x.size() / n;
  Tensor<T> y(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < inner; ++j) s += x[i * inner + j];
    y[i] = s;
  }
  return a.tape().record(std::move(y), {a}, [a, n, inner](Tape<T>& t, const Tensor<T>& g) {
    auto& buf = t.grad_buffer(a);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < inner; ++j) buf[i * inner + j] += g[i];
  });
}

template <typename T>
Var<T> l1_distance(const Var<T>& a, const Var<T>& b) {
  require_same("l1_distance", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  T s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
  return a.tape().record(Tensor<T>::scalar(s), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = a.value();
    const auto& bv = b.value();
    auto sign = [](T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); };
    if (a.requires_grad()) {
      auto& buf = t.grad_buffer(a);
      for (std::size_t i = 0; i < av.size(); ++i) buf[i] += g[0] * sign(av[i] - bv[i]);
    }
    if (b.requires_grad()) {
      auto& buf = t.grad_buffer(b);
      for (std::size_t i = 0; i < av.size(); ++i) buf[i] -= g[0] * sign(av[i] - bv[i]);
    }
  });
}

template <typename T>
Var<T> sq_l2_distance(const Var<T>& a, const Var<T>& b) {
  require_same("sq_l2_distance", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  T s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  return a.tape().record(Tensor<T>::scalar(s), {a, b}, [a, b](Tape<T>& t, const Tensor<T>& g) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (a.requires_grad()) {
      auto& buf = t.grad_buffer(a);
      for (std::size_t i = 0; i < av.size(); ++i) buf[i] += T(2) * g[0] * (av[i] - bv[i]);
    }
    if (b.requires_grad()) {
      auto& buf = t.grad_buffer(b);
      for (std::size_t i = 0; i < av.size(); ++i) buf[i] -= T(2) * g[0] * (av[i] - bv[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> y = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(y), {a}, [a](Tape<T>& t, const Tensor<T>& g) { accumulate(t, a, g); });
}

template <typename T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError("slice", "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                                  std::to_string(axis) + " of " + shape_str(s));
  }
  const AxisSplit sp = split_at(s, axis);
  const std::size_t len = end - begin;
  Shape out_shape = s;
  out_shape[axis] = len;
  Tensor<T> y(out_shape);
  const auto& x = a.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(x.ptr() + (o * sp.extent + begin) * sp.inner, len * sp.inner, y.ptr() + o * len * sp.inner);
  }
  return a.tape().record(std::move(y), {a}, [a, sp, begin, len](Tape<T>& t, const Tensor<T>& g) {
    auto& buf = t.grad_buffer(a);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      T* dst = buf.ptr() + (o * sp.extent + begin) * sp.inner;
      const T* src = g.ptr() + o * len * sp.inner;
      for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat", "axis out of range for " + shape_str(out_shape));
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat", parts[0].shape(), s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != out_shape[i]) throw ShapeError("concat", parts[0].shape(), s);
    }
    total += s[axis];
  }
  out_shape[axis] = total;
  Tensor<T> y(out_shape);
  const AxisSplit sp = split_at(out_shape, axis);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis];
    const auto& x = p.value();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(x.ptr() + o * len * sp.inner, len * sp.inner, y.ptr() + (o * total + off) * sp.inner);
    }
    offsets.push_back(off);
    off += len;
  }
  return parts[0].tape().record(std::move(y), parts, [parts, offsets, sp, total, axis](Tape<T>& t, const Tensor<T>& g) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (!parts[k].requires_grad()) continue;
      const std::size_t len = parts[k].shape()[axis];
      auto& buf = t.grad_buffer(parts[k]);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const T* src = g.ptr() + (o * total + offsets[k]) * sp.inner;
        T* dst = buf.ptr() + o * len * sp.inner;
        for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Var<T> detach(const Var<T>& a) {
  return a.tape().constant(a.value());
}

// ---------------------------------------------------------------------------
// Dense

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) throw ShapeError("matmul", a.shape(), b.shape());
  Tensor<T> y(Shape{m, n});
  MapMat<T>(y.ptr(), m, n).noalias() = CMapMat<T>(a.value().ptr(), m, k) * CMapMat<T>(b.value().ptr(), k, n);
  return a.tape().record(std::move(y), {a, b}, [a, b, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    CMapMat<T> gm(g.ptr(), m, n);
    if (a.requires_grad()) {
      MapMat<T>(t.grad_buffer(a).ptr(), m, k).noalias() += gm * CMapMat<T>(b.value().ptr(), k, n).transpose();
    }
    if (b.requires_grad()) {
      MapMat<T>(t.grad_buffer(b).ptr(), k, n).noalias() += CMapMat<T>(a.value().ptr(), m, k).transpose() * gm;
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  const std::size_t m = x.shape()[0], in = x.shape()[1], out = weight.shape()[0];
  if (weight.shape()[1] != in) throw ShapeError("linear", x.shape(), weight.shape());
  const bool has_bias = bias.valid();
  if (has_bias && bias.shape() != Shape{out}) throw ShapeError("linear", weight.shape(), bias.shape());
  Tensor<T> y(Shape{m, out});
  MapMat<T> ym(y.ptr(), m, out);
  ym.noalias() = CMapMat<T>(x.value().ptr(), m, in) * CMapMat<T>(weight.value().ptr(), out, in).transpose();
  if (has_bias) {
    ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.value().ptr(), out);
  }
  std::vector<Var<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return x.tape().record(std::move(y), inputs, [x, weight, bias, has_bias, m, in, out](Tape<T>& t, const Tensor<T>& g) {
    CMapMat<T> gm(g.ptr(), m, out);
    if (x.requires_grad()) {
      MapMat<T>(t.grad_buffer(x).ptr(), m, in).noalias() += gm * CMapMat<T>(weight.value().ptr(), out, in);
    }
    if (weight.requires_grad()) {
      MapMat<T>(t.grad_buffer(weight).ptr(), out, in).noalias() += gm.transpose() * CMapMat<T>(x.value().ptr(), m, in);
    }
    if (has_bias && bias.requires_grad()) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(t.grad_buffer(bias).ptr(), out) += gm.colwise().sum();
    }
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t pad) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const std::size_t n = xs[0], ci = xs[1], h = xs[2], w = xs[3];
  const std::size_t co = ws[0], k = ws[2];
  if (ws[1] != ci || ws[3] != k) throw ShapeError("conv2d", xs, ws);
  if (stride == 0 || h + 2 * pad < k || w + 2 * pad < k) throw ShapeError("conv2d", xs, ws);
  const bool has_bias = bias.valid();
  if (has_bias && bias.shape() != Shape{co}) throw ShapeError("conv2d", ws, bias.shape());
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  const std::size_t kk = ci * k * k, hw = ho * wo;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  Tensor<T> y(Shape{n, co, ho, wo});
  AlignedVector<T> cols(direct ? 0 : kk * hw);
  CMapMat<T> wm(weight.value().ptr(), co, kk);
  for (std::size_t s = 0; s < n; ++s) {
    const T* xp = x.value().ptr() + s * ci * h * w;
    if (!direct) im2col(xp, ci, h, w, k, stride, pad, ho, wo, cols.data());
    MapMat<T> ym(y.ptr() + s * co * hw, co, hw);
    ym.noalias() = wm * CMapMat<T>(direct ? xp : cols.data(), kk, hw);
    if (has_bias) ym.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.value().ptr(), co);
  }

  std::vector<Var<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return x.tape().record(std::move(y), inputs,
                         [=](Tape<T>& t, const Tensor<T>& g) {
                           AlignedVector<T> cols(direct ? 0 : kk * hw);
                           AlignedVector<T> dcols(direct ? 0 : kk * hw);
                           CMapMat<T> wm(weight.value().ptr(), co, kk);
                           T* dw = weight.requires_grad() ? t.grad_buffer(weight).ptr() : nullptr;
                           T* dx = x.requires_grad() ? t.grad_buffer(x).ptr() : nullptr;
                           T* db = (has_bias && bias.requires_grad()) ? t.grad_buffer(bias).ptr() : nullptr;
                           for (std::size_t s = 0; s < n; ++s) {
                             const T* xp = x.value().ptr() + s * ci * h * w;
                             CMapMat<T> gm(g.ptr() + s * co * hw, co, hw);
                             if (dw) {
                               if (!direct) im2col(xp, ci, h, w, k, stride, pad, ho, wo, cols.data());
                               MapMat<T>(dw, co, kk).noalias() += gm * CMapMat<T>(direct ? xp : cols.data(), kk, hw).transpose();
                             }
                             if (db) {
                               Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(db, co) += gm.rowwise().sum();
                             }
                             if (dx) {
                               T* dxp = dx + s * ci * h * w;
                               if (direct) {
                                 MapMat<T>(dxp, kk, hw).noalias() += wm.transpose() * gm;
                               } else {
                                 MapMat<T>(dcols.data(), kk, hw).noalias() = wm.transpose() * gm;
                                 col2im(dcols.data(), ci, h, w, k, stride, pad, ho, wo, dxp);
                               }
                             }
                           }
                         });
}

template <typename T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& s) {
  const Shape& xs = x.shape();
  if (xs.size() < 2 || s.shape() != Shape{xs[0], xs[1]}) throw ShapeError("scale_channels", xs, s.shape());
  const std::size_t nc = xs[0] * xs[1], inner = x.value().size() / nc;
  Tensor<T> y = x.value();
  const auto& sv = s.value();
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t j = 0; j < inner; ++j) y[i * inner + j] *= sv[i];
  return x.tape().record(std::move(y), {x, s}, [x, s, nc, inner](Tape<T>& t, const Tensor<T>& g) {
    if (x.requires_grad()) {
      auto& buf = t.grad_buffer(x);
      const auto& sv = s.value();
      for (std::size_t i = 0; i < nc; ++i)
        for (std::size_t j = 0; j < inner; ++j) buf[i * inner + j] += g[i * inner + j] * sv[i];
    }
    if (s.requires_grad()) {
      auto& buf = t.grad_buffer(s);
      const auto& xv = x.value();
      for (std::size_t i = 0; i < nc; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < inner; ++j) acc += g[i * inner + j] * xv[i * inner + j];
        buf[i] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Resampling

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  require_rank("upsample_nearest2x", x, 4);
  const Shape& s = x.shape();
  const std::size_t nc = s[0] * s[1], h = s[2], w = s[3];
  Tensor<T> y(Shape{s[0], s[1], 2 * h, 2 * w});
  const auto& xv = x.value();
  for (std::size_t c = 0; c < nc; ++c)
    for (std::size_t oy = 0; oy < 2 * h; ++oy)
      for (std::size_t ox = 0; ox < 2 * w; ++ox)
        y[(c * 2 * h + oy) * 2 * w + ox] = xv[(c * h + oy / 2) * w + ox / 2];
  return x.tape().record(std::move(y), {x}, [x, nc, h, w](Tape<T>& t, const Tensor<T>& g) {
    auto& buf = t.grad_buffer(x);
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t oy = 0; oy < 2 * h; ++oy)
        for (std::size_t ox = 0; ox < 2 * w; ++ox)
          buf[(c * h + oy / 2) * w + ox / 2] += g[(c * 2 * h + oy) * 2 * w + ox];
  });
}

template <typename T>
Var<T> upsample_bilinear2x(const Var<T>& x) {
  require_rank("upsample_bilinear2x", x, 4);
  const Shape& s = x.shape();
  const std::size_t nc = s[0] * s[1], h = s[2], w = s[3];
  const auto ty = upsample_taps(h);
  const auto tx = upsample_taps(w);
  Tensor<T> y(Shape{s[0], s[1], 2 * h, 2 * w});
  const auto& xv = x.value();
  for (std::size_t c = 0; c < nc; ++c) {
    const T* src = xv.ptr() + c * h * w;
    for (std::size_t oy = 0; oy < 2 * h; ++oy) {
      const Tap& a = ty[oy];
      const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
      for (std::size_t ox = 0; ox < 2 * w; ++ox) {
        const Tap& b = tx[ox];
        const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
        y[(c * 2 * h + oy) * 2 * w + ox] = wy0 * (wx0 * src[a.i0 * w + b.i0] + wx1 * src[a.i0 * w + b.i1]) +
                                           wy1 * (wx0 * src[a.i1 * w + b.i0] + wx1 * src[a.i1 * w + b.i1]);
      }
    }
  }
  return x.tape().record(std::move(y), {x}, [x, nc, h, w, ty, tx](Tape<T>& t, const Tensor<T>& g) {
    auto& buf = t.grad_buffer(x);
    for (std::size_t c = 0; c < nc; ++c) {
      T* dst = buf.ptr() + c * h * w;
      for (std::size_t oy = 0; oy < 2 * h; ++oy) {
        const Tap& a = ty[oy];
        const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
        for (std::size_t ox = 0; ox < 2 * w; ++ox) {
          const Tap& b = tx[ox];
          const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
          const T gv = g[(c * 2 * h + oy) * 2 * w + ox];
          dst[a.i0 * w + b.i0] += gv * wy0 * wx0;
          dst[a.i0 * w + b.i1] += gv * wy0 * wx1;
          dst[a.i1 * w + b.i0] += gv * wy1 * wx0;
          dst[a.i1 * w + b.i1] += gv * wy1 * wx1;
        }
      }
    }
  });
}

template <typename T>
Var<T> avg_pool2x(const Var<T>& x) {
  require_rank("avg_pool2x", x, 4);
  const Shape& s = x.shape();
  if (s[2] % 2 || s[3] % 2) throw ShapeError("avg_pool2x", "odd spatial size in " + shape_str(s));
  const std::size_t nc = s[0] * s[1], h = s[2] / 2, w = s[3] / 2;
  Tensor<T> y(Shape{s[0], s[1], h, w});
  const auto& xv = x.value();
  for (std::size_t c = 0; c < nc; ++c)
    for (std::size_t oy = 0; oy < h; ++oy)
      for (std::size_t ox = 0; ox < w; ++ox) {
        const T* p = xv.ptr() + (c * 2 * h + 2 * oy) * 2 * w + 2 * ox;
        y[(c * h + oy) * w + ox] = T(0.25) * (p[0] + p[1] + p[2 * w] + p[2 * w + 1]);
      }
  return x.tape().record(std::move(y), {x}, [x, nc, h, w](Tape<T>& t, const Tensor<T>& g) {
    auto& buf = t.grad_buffer(x);
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t oy = 0; oy < h; ++oy)
        for (std::size_t ox = 0; ox < w; ++ox) {
          T* p = buf.ptr() + (c * 2 * h + 2 * oy) * 2 * w + 2 * ox;
          const T gv = T(0.25) * g[(c * h + oy) * w + ox];
          p[0] += gv;
          p[1] += gv;
          p[2 * w] += gv;
          p[2 * w + 1] += gv;
        }
  });
}

template <typename T>
Var<T> grid_sample(const Var<T>& plane, const Var<T>& coords) {
  require_rank("grid_sample", plane, 4);
  require_rank("grid_sample", coords, 3);
  const Shape& ps = plane.shape();
  const Shape& cs = coords.shape();
  if (cs[0] != ps[0] || cs[2] != 2) throw ShapeError("grid_sample", ps, cs);
  if (ps[2] < 2 || ps[3] < 2) throw ShapeError("grid_sample", "plane resolution must be >= 2, got " + shape_str(ps));
  const std::size_t n = ps[0], c = ps[1], h = ps[2], w = ps[3], p = cs[1];

  Tensor<T> y(Shape{n, p, c});
  const auto& pv = plane.value();
  const auto& cv = coords.value();
  for (std::size_t s = 0; s < n; ++s) {
    const T* base = pv.ptr() + s * c * h * w;
    for (std::size_t i = 0; i < p; ++i) {
      bool cu, cvv;
      const T fx = to_index(cv[(s * p + i) * 2 + 0], w, cu);
      const T fy = to_index(cv[(s * p + i) * 2 + 1], h, cvv);
      const std::size_t x0 = std::min(static_cast<std::size_t>(fx), w - 2);
      const std::size_t y0 = std::min(static_cast<std::size_t>(fy), h - 2);
      const T ax = fx - static_cast<T>(x0), ay = fy - static_cast<T>(y0);
      const T w00 = (T(1) - ax) * (T(1) - ay), w01 = ax * (T(1) - ay), w10 = (T(1) - ax) * ay, w11 = ax * ay;
      T* out = y.ptr() + (s * p + i) * c;
      const std::size_t o00 = y0 * w + x0;
      for (std::size_t k = 0; k < c; ++k) {
        const T* g = base + k * h * w + o00;
        out[k] = w00 * g[0] + w01 * g[1] + w10 * g[w] + w11 * g[w + 1];
      }
    }
  }
  return plane.tape().record(std::move(y), {plane, coords}, [plane, coords, n, c, h, w, p](Tape<T>& t, const Tensor<T>& g) {
    const auto& pv = plane.value();
    const auto& cv = coords.value();
    T* dplane = plane.requires_grad() ? t.grad_buffer(plane).ptr() : nullptr;
    T* dcoord = coords.requires_grad() ? t.grad_buffer(coords).ptr() : nullptr;
    for (std::size_t s = 0; s < n; ++s) {
      const T* base = pv.ptr() + s * c * h * w;
      for (std::size_t i = 0; i < p; ++i) {
        bool cu, cvv;
        const T fx = to_index(cv[(s * p + i) * 2 + 0], w, cu);
        const T fy = to_index(cv[(s * p + i) * 2 + 1], h, cvv);
        const std::size_t x0 = std::min(static_cast<std::size_t>(fx), w - 2);
        const std::size_t y0 = std::min(static_cast<std::size_t>(fy), h - 2);
        const T ax = fx - static_cast<T>(x0), ay = fy - static_cast<T>(y0);
        const T w00 = (T(1) - ax) * (T(1) - ay), w01 = ax * (T(1) - ay), w10 = (T(1) - ax) * ay, w11 = ax * ay;
        const T* gout = g.ptr() + (s * p + i) * c;
        const std::size_t o00 = y0 * w + x0;
        if (dplane) {
          T* d = dplane + s * c * h * w + o00;
          for (std::size_t k = 0; k < c; ++k) {
            const T gv = gout[k];
            d[k * h * w] += w00 * gv;
            d[k * h * w + 1] += w01 * gv;
            d[k * h * w + w] += w10 * gv;
            d[k * h * w + w + 1] += w11 * gv;
          }
        }
        if (dcoord) {
          T dax = 0, day = 0;
          for (std::size_t k = 0; k < c; ++k) {
            const T* v = base + k * h * w + o00;
            dax += gout[k] * ((v[1] - v[0]) * (T(1) - ay) + (v[w + 1] - v[w]) * ay);
            day += gout[k] * ((v[w] - v[0]) * (T(1) - ax) + (v[w + 1] - v[1]) * ax);
          }
          // d index / d coord = R / 2; zero where the coordinate was clamped.
          if (!cu) dcoord[(s * p + i) * 2 + 0] += dax * static_cast<T>(w) / T(2);
          if (!cvv) dcoord[(s * p + i) * 2 + 1] += day * static_cast<T>(h) / T(2);
        }
      }
    }
  });
}

template <typename T>
Var<T> volume_composite(const Var<T>& sigma, const Var<T>& color, const Tensor<T>& delta,
                        const std::vector<T>& background, std::size_t height, std::size_t width) {
  require_rank("volume_composite", sigma, 3);
  require_rank("volume_composite", color, 4);
  const Shape& ss = sigma.shape();
  const Shape& cs = color.shape();
  const std::size_t n = ss[0], p = ss[1], s = ss[2], kc = cs[3];
  if (cs[0] != n || cs[1] != p || cs[2] != s) throw ShapeError("volume_composite", ss, cs);
  if (delta.shape() != ss) throw ShapeError("volume_composite", ss, delta.shape());
  if (background.size() != kc) throw ShapeError("volume_composite", "background has " + std::to_string(background.size()) + " channels, color has " + std::to_string(kc));
  if (height * width != p) throw ShapeError("volume_composite", "image " + std::to_string(height) + "x" + std::to_string(width) + " does not match " + std::to_string(p) + " rays");
  if (s < 1) throw ShapeError("volume_composite", "no samples");

  Tensor<T> y(Shape{n, kc + 1, height, width});
  const auto& sv = sigma.value();
  const auto& cv = color.value();
  std::vector<T> acc(kc);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t r = 0; r < p; ++r) {
      const std::size_t ray = b * p + r;
      std::fill(acc.begin(), acc.end(), T(0));
      T trans = 1;
      for (std::size_t i = 0; i < s; ++i) {
        const T alpha = -std::expm1(-sv[ray * s + i] * delta[ray * s + i]);
        const T wgt = trans * alpha;
        const T* c = cv.ptr() + (ray * s + i) * kc;
        for (std::size_t k = 0; k < kc; ++k) acc[k] += wgt * c[k];
        trans *= T(1) - alpha;
      }
      // Equal to the sum of weights, but exactly within [0, 1].
      const T opacity = T(1) - trans;
      for (std::size_t k = 0; k < kc; ++k) y[(b * (kc + 1) + k) * p + r] = acc[k] + (T(1) - opacity) * background[k];
      y[(b * (kc + 1) + kc) * p + r] = opacity;
    }
  }

  return sigma.tape().record(std::move(y), {sigma, color}, [sigma, color, delta, background, n, p, s, kc](Tape<T>& t, const Tensor<T>& g) {
    const auto& sv = sigma.value();
    const auto& cv = color.value();
    T* dsig = sigma.requires_grad() ? t.grad_buffer(sigma).ptr() : nullptr;
    T* dcol = color.requires_grad() ? t.grad_buffer(color).ptr() : nullptr;
    std::vector<T> wgt(s), trans_after(s), e(s), gk(kc);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t r = 0; r < p; ++r) {
        const std::size_t ray = b * p + r;
        for (std::size_t k = 0; k < kc; ++k) gk[k] = g[(b * (kc + 1) + k) * p + r];
        const T go = g[(b * (kc + 1) + kc) * p + r];
        T trans = 1;
        for (std::size_t i = 0; i < s; ++i) {
          const T alpha = -std::expm1(-sv[ray * s + i] * delta[ray * s + i]);
          wgt[i] = trans * alpha;
          trans *= T(1) - alpha;
          trans_after[i] = trans;
          const T* c = cv.ptr() + (ray * s + i) * kc;
          T ei = go;
          for (std::size_t k = 0; k < kc; ++k) ei += gk[k] * (c[k] - background[k]);
          e[i] = ei;
          if (dcol) {
            T* dc = dcol + (ray * s + i) * kc;
            for (std::size_t k = 0; k < kc; ++k) dc[k] += gk[k] * wgt[i];
          }
        }
        if (dsig) {
          // dL/du_j = e_j T_{j+1} - sum_{i>j} e_i w_i, with u_j = sigma_j delta_j.
          T suffix = 0;
          for (std::size_t j = s; j-- > 0;) {
            const T du = e[j] * trans_after[j] - suffix;
            dsig[ray * s + j] += du * delta[ray * s + j];
            suffix += e[j] * wgt[j];
          }
        }
      }
    }
  });
}

#define TPD_INSTANTIATE(T)                                                                                     \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> scale(const Var<T>&, T);                                                                   \
  template Var<T> add_scalar(const Var<T>&, T);                                                              \
  template Var<T> exp(const Var<T>&);                                                                        \
  template Var<T> softplus(const Var<T>&);                                                                   \
  template Var<T> sigmoid(const Var<T>&);                                                                    \
  template Var<T> leaky_relu(const Var<T>&, T);                                                              \
  template Var<T> smooth_leaky_relu(const Var<T>&, T, T);                                                    \
  template Var<T> sqrt(const Var<T>&);                                                                       \
  template Var<T> rsqrt(const Var<T>&);                                                                      \
  template Var<T> abs(const Var<T>&);                                                                        \
  template Var<T> square(const Var<T>&);                                                                     \
  template Var<T> sum(const Var<T>&);                                                                        \
  template Var<T> mean(const Var<T>&);                                                                       \
  template Var<T> sum_per_sample(const Var<T>&);                                                             \
  template Var<T> l1_distance(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> sq_l2_distance(const Var<T>&, const Var<T>&);                                              \
  template Var<T> reshape(const Var<T>&, Shape);                                                             \
  template Var<T> slice(const Var<T>&, std::size_t, std::size_t, std::size_t);                               \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                                           \
  template Var<T> detach(const Var<T>&);                                                                     \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                       \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t);             \
  template Var<T> scale_channels(const Var<T>&, const Var<T>&);                                              \
  template Var<T> upsample_nearest2x(const Var<T>&);                                                         \
  template Var<T> upsample_bilinear2x(const Var<T>&);                                                        \
  template Var<T> avg_pool2x(const Var<T>&);                                                                 \
  template Var<T> grid_sample(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> volume_composite(const Var<T>&, const Var<T>&, const Tensor<T>&, const std::vector<T>&,    \
                                   std::size_t, std::size_t);

TPD_INSTANTIATE(float)
TPD_INSTANTIATE(double)

#undef TPD_INSTANTIATE

}  // namespace tpd::ad
