#pragma once

// Differentiable primitives recorded on a Tape.

#include <Eigen/Core>
#include <cmath>
#include <numbers>
#include <string_view>
#include <vector>

#include "tabench/tape.hpp"

namespace tabench {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

inline MapConstMat mat(const double* p, std::size_t r, std::size_t c) {
  return MapConstMat(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MapMat mat(double* p, std::size_t r, std::size_t c) {
  return MapMat(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline void same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw Error("ops: operands recorded on different tapes");
}

template <class Fwd, class Deriv>
Var unary(Var x, Fwd f, Deriv d) {
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return x.tape->record(std::move(out), {x}, [xi = x.id, d](Tape& t, std::size_t self) {
    if (!t.requires_grad(xi)) return;
    const Tensor& g = t.upstream(self);
    const Tensor& in = t.value(Var{&t, xi});
    const Tensor& out = t.value(Var{&t, self});
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * d(in[i], out[i]);
  });
}

inline double sigmoid(double v) {
  return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.shape() != b.shape()) shape_mismatch("add", a.shape(), b.shape());
  Tensor out = a.value();
  out += b.value();
  return a.tape->record(std::move(out), {a, b}, [ai = a.id, bi = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    if (t.requires_grad(ai)) t.grad_buffer(ai) += g;
    if (t.requires_grad(bi)) t.grad_buffer(bi) += g;
  });
}

inline Var sub(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.shape() != b.shape()) shape_mismatch("sub", a.shape(), b.shape());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape->record(std::move(out), {a, b}, [ai = a.id, bi = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    if (t.requires_grad(ai)) t.grad_buffer(ai) += g;
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.shape() != b.shape()) shape_mismatch("mul", a.shape(), b.shape());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record(std::move(out), {a, b}, [ai = a.id, bi = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& av = t.value(Var{&t, ai});
    const Tensor& bv = t.value(Var{&t, bi});
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var x, double s) {
  Tensor out = x.value();
  out *= s;
  return x.tape->record(std::move(out), {x}, [xi = x.id, s](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
  });
}

inline Var add_scalar(Var x, double s) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v += s;
  return x.tape->record(std::move(out), {x}, [xi = x.id](Tape& t, std::size_t self) {
    t.grad_buffer(xi) += t.upstream(self);
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var x) { return scale(x, s); }

/// ReLU. With a label, installed relu-gradient hooks replace the local derivative.
namespace detail {
// NaN passes through so non-finite inputs stay visible downstream.
inline double relu_value(double v) { return v > 0 || std::isnan(v) ? v : 0.0; }
}  // namespace detail

inline Var relu(Var x, std::string_view label = {}) {
  ReluGrad mode = label.empty() ? ReluGrad::exact : x.tape->hooks().effect(label).relu;
  Var y;
  switch (mode) {
    case ReluGrad::exact:
      y = detail::unary(
          x, detail::relu_value, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
      break;
    case ReluGrad::identity:
      y = detail::unary(
          x, detail::relu_value, [](double, double) { return 1.0; });
      break;
    case ReluGrad::softplus:
      y = detail::unary(
          x, detail::relu_value, [](double v, double) { return detail::sigmoid(v); });
      break;
  }
  if (!label.empty()) x.tape->mark(label, y);
  return y;
}

inline Var gelu(Var x) {
  return detail::unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

inline Var softplus(Var x) {
  return detail::unary(
      x, [](double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](double v, double) { return detail::sigmoid(v); });
}

inline Var exp(Var x) {
  return detail::unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var log(Var x) {
  for (double v : x.value().data())
    if (!(v > 0)) throw Error("log: non-positive input");
  return detail::unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var square(Var x) {
  return detail::unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Var abs(Var x) {
  return detail::unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

/// sqrt(max(x, floor)); derivative is zero below the floor.
inline Var sqrt_floor(Var x, double floor = 1e-24) {
  return detail::unary(
      x, [floor](double v) { return std::sqrt(std::max(v, floor)); },
      [floor](double v, double y) { return v > floor ? 0.5 / y : 0.0; });
}

/// 0.5 * log(max(x, floor^2)): log of a norm given its square.
inline Var log_norm_from_sq(Var sq, double floor = 1e-12) {
  const double f2 = floor * floor;
  return detail::unary(
      sq, [f2](double v) { return 0.5 * std::log(std::max(v, f2)); },
      [f2](double v, double) { return v > f2 ? 0.5 / v : 0.0; });
}

/// sign(v) |v|^p with the derivative evaluated at max(|v|, floor).
inline Var signed_pow(Var x, double p, double floor = 1e-6) {
  return detail::unary(
      x, [p](double v) { return v == 0 ? 0.0 : std::copysign(std::pow(std::abs(v), p), v); },
      [p, floor](double v, double) { return p * std::pow(std::max(std::abs(v), floor), p - 1.0); });
}

/// Clamp to [lo, hi]; gradient passes where lo <= x <= hi.
inline Var clip(Var x, double lo, double hi) {
  return detail::unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

/// Elementwise select: out = mask ? a : b (mask is a constant, nonzero = true).
inline Var select(const Tensor& mask, Var a, Var b) {
  detail::same_tape(a, b);
  if (a.shape() != b.shape()) shape_mismatch("select", a.shape(), b.shape());
  if (mask.shape() != a.shape()) shape_mismatch("select mask", mask.shape(), a.shape());
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] != 0 ? a.value()[i] : b.value()[i];
  return a.tape->record(std::move(out), {a, b}, [ai = a.id, bi = b.id, mask](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad_buffer(ai);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (mask[i] != 0) ga[i] += g[i];
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad_buffer(bi);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (mask[i] == 0) gb[i] += g[i];
    }
  });
}

/// Multiplies by a constant tensor of the same shape.
inline Var mask_mul(Var x, const Tensor& m) {
  if (m.shape() != x.shape()) shape_mismatch("mask_mul", x.shape(), m.shape());
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= m[i];
  return x.tape->record(std::move(out), {x}, [xi = x.id, m](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * m[i];
  });
}

/// Scales each leading-axis slice by its own constant factor.
inline Var scale_rows(Var x, std::vector<double> s) {
  const Tensor& in = x.value();
  if (s.size() != in.dim(0)) throw ShapeError("scale_rows: " + std::to_string(s.size()) + " factors for " + to_string(in.shape()));
  const std::size_t r = in.row_size();
  Tensor out = in;
  for (std::size_t n = 0; n < s.size(); ++n)
    for (std::size_t i = 0; i < r; ++i) out[n * r + i] *= s[n];
  return x.tape->record(std::move(out), {x}, [xi = x.id, s = std::move(s), r](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t n = 0; n < s.size(); ++n)
      for (std::size_t i = 0; i < r; ++i) gx[n * r + i] += g[n * r + i] * s[n];
  });
}

/// Identity in forward, no gradient in backward.
inline Var detach(Var x) { return x.tape->constant(x.value()); }

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record(Tensor::scalar(s), {x}, [xi = x.id](Tape& t, std::size_t self) {
    const double g = t.upstream(self)[0];
    for (auto& v : t.grad_buffer(xi).storage()) v += g;
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

/// Sum over all axes but the first: [N, ...] -> [N].
inline Var sum_rows(Var x) {
  const Tensor& in = x.value();
  const std::size_t n = in.dim(0), r = in.row_size();
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < r; ++j) s += in[i * r + j];
    out[i] = s;
  }
  return x.tape->record(std::move(out), {x}, [xi = x.id, n, r](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < r; ++j) gx[i * r + j] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(Var x, Shape s) {
  Tensor out = x.value().reshaped(std::move(s));
  return x.tape->record(std::move(out), {x}, [xi = x.id](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

namespace detail {
struct Strides {
  std::vector<std::size_t> in_strides;
  Shape out_shape;
};

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Calls f(out_index, in_index) for every element of the permuted tensor.
template <class F>
void for_each_permuted(const Shape& in_shape, const std::vector<std::size_t>& perm, F f) {
  const auto ist = strides_of(in_shape);
  Shape os(perm.size());
  std::vector<std::size_t> pst(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    os[i] = in_shape[perm[i]];
    pst[i] = ist[perm[i]];
  }
  const std::size_t total = numel(os);
  std::vector<std::size_t> idx(perm.size(), 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < total; ++o) {
    f(o, src);
    for (std::size_t d = perm.size(); d-- > 0;) {
      if (++idx[d] < os[d]) {
        src += pst[d];
        break;
      }
      src -= pst[d] * (os[d] - 1);
      idx[d] = 0;
    }
  }
}
}  // namespace detail

inline Var permute(Var x, std::vector<std::size_t> perm) {
  const Shape& is = x.shape();
  if (perm.size() != is.size()) throw ShapeError("permute: rank mismatch for " + to_string(is));
  Shape os(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) os[i] = is.at(perm[i]);
  Tensor out(os);
  const Tensor& in = x.value();
  detail::for_each_permuted(is, perm, [&](std::size_t o, std::size_t s) { out[o] = in[s]; });
  return x.tape->record(std::move(out), {x}, [xi = x.id, perm, is](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    Tensor& gx = t.grad_buffer(xi);
    detail::for_each_permuted(is, perm, [&](std::size_t o, std::size_t s) { gx[s] += g[o]; });
  });
}

/// Slice [begin, end) along `axis`.
inline Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& is = x.shape();
  if (axis >= is.size() || end > is[axis] || begin >= end)
    throw ShapeError("slice: bad range on axis " + std::to_string(axis) + " of " + to_string(is));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= is[i];
  for (std::size_t i = axis + 1; i < is.size(); ++i) inner *= is[i];
  Shape os = is;
  os[axis] = end - begin;
  Tensor out(os);
  const std::size_t len = (end - begin) * inner, stride = is[axis] * inner;
  const Tensor& in = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(in.ptr() + o * stride + begin * inner, len, out.ptr() + o * len);
  return x.tape->record(std::move(out), {x}, [xi = x.id, outer, len, stride, off = begin * inner](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < len; ++i) gx[o * stride + off + i] += g[o * len + i];
  });
}

/// Concatenate two tensors along `axis`.
inline Var concat(Var a, Var b, std::size_t axis) {
  detail::same_tape(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != bs.size() || axis >= as.size()) shape_mismatch("concat", as, bs);
  for (std::size_t i = 0; i < as.size(); ++i)
    if (i != axis && as[i] != bs[i]) shape_mismatch("concat", as, bs);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= as[i];
  for (std::size_t i = axis + 1; i < as.size(); ++i) inner *= as[i];
  const std::size_t la = as[axis] * inner, lb = bs[axis] * inner;
  Shape os = as;
  os[axis] += bs[axis];
  Tensor out(os);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.value().ptr() + o * la, la, out.ptr() + o * (la + lb));
    std::copy_n(b.value().ptr() + o * lb, lb, out.ptr() + o * (la + lb) + la);
  }
  return a.tape->record(std::move(out), {a, b}, [ai = a.id, bi = b.id, outer, la, lb](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad_buffer(ai);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < la; ++i) ga[o * la + i] += g[o * (la + lb) + i];
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad_buffer(bi);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < lb; ++i) gb[o * lb + i] += g[o * (la + lb) + la + i];
    }
  });
}

/// x + b where b's shape equals the trailing dims of x.
inline Var add_broadcast(Var x, Var b) {
  detail::same_tape(x, b);
  const Shape& xs = x.shape();
  const Shape& bs = b.shape();
  if (bs.size() > xs.size() || !std::equal(bs.begin(), bs.end(), xs.end() - static_cast<std::ptrdiff_t>(bs.size())))
    shape_mismatch("add_broadcast", xs, bs);
  const std::size_t m = b.value().size(), reps = x.value().size() / m;
  Tensor out = x.value();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < m; ++i) out[r * m + i] += b.value()[i];
  return x.tape->record(std::move(out), {x, b}, [xi = x.id, bi = b.id, m, reps](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    if (t.requires_grad(xi)) t.grad_buffer(xi) += g;
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad_buffer(bi);
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < m; ++i) gb[i] += g[r * m + i];
    }
  });
}

/// x * w where w's shape equals the trailing dims of x.
inline Var mul_broadcast(Var x, Var w) {
  detail::same_tape(x, w);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws.size() > xs.size() || !std::equal(ws.begin(), ws.end(), xs.end() - static_cast<std::ptrdiff_t>(ws.size())))
    shape_mismatch("mul_broadcast", xs, ws);
  const std::size_t m = w.value().size(), reps = x.value().size() / m;
  Tensor out = x.value();
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < m; ++i) out[r * m + i] *= w.value()[i];
  return x.tape->record(std::move(out), {x, w}, [xi = x.id, wi = w.id, m, reps](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& xv = t.value(Var{&t, xi});
    const Tensor& wv = t.value(Var{&t, wi});
    if (t.requires_grad(xi)) {
      Tensor& gx = t.grad_buffer(xi);
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < m; ++i) gx[r * m + i] += g[r * m + i] * wv[i];
    }
    if (t.requires_grad(wi)) {
      Tensor& gw = t.grad_buffer(wi);
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < m; ++i) gw[i] += g[r * m + i] * xv[r * m + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// [M,K] x [K,N] -> [M,N]
inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) shape_mismatch("matmul", as, bs);
  const std::size_t M = as[0], K = as[1], N = bs[1];
  Tensor out({M, N});
  detail::mat(out.ptr(), M, N).noalias() = detail::mat(a.value().ptr(), M, K) * detail::mat(b.value().ptr(), K, N);
  return a.tape->record(std::move(out), {a, b}, [ai = a.id, bi = b.id, M, K, N](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    auto G = detail::mat(g.ptr(), M, N);
    if (t.requires_grad(ai))
      detail::mat(t.grad_buffer(ai).ptr(), M, K).noalias() += G * detail::mat(t.value(Var{&t, bi}).ptr(), K, N).transpose();
    if (t.requires_grad(bi))
      detail::mat(t.grad_buffer(bi).ptr(), K, N).noalias() += detail::mat(t.value(Var{&t, ai}).ptr(), M, K).transpose() * G;
  });
}

/// Batched [B,M,K] x [B,K,N] -> [B,M,N]
inline Var bmm(Var a, Var b) {
  detail::same_tape(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1]) shape_mismatch("bmm", as, bs);
  const std::size_t B = as[0], M = as[1], K = as[2], N = bs[2];
  Tensor out({B, M, N});
  for (std::size_t i = 0; i < B; ++i)
    detail::mat(out.ptr() + i * M * N, M, N).noalias() =
        detail::mat(a.value().ptr() + i * M * K, M, K) * detail::mat(b.value().ptr() + i * K * N, K, N);
  return a.tape->record(std::move(out), {a, b}, [ai = a.id, bi = b.id, B, M, K, N](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& av = t.value(Var{&t, ai});
    const Tensor& bv = t.value(Var{&t, bi});
    for (std::size_t i = 0; i < B; ++i) {
      auto G = detail::mat(g.ptr() + i * M * N, M, N);
      if (t.requires_grad(ai))
        detail::mat(t.grad_buffer(ai).ptr() + i * M * K, M, K).noalias() +=
            G * detail::mat(bv.ptr() + i * K * N, K, N).transpose();
      if (t.requires_grad(bi))
        detail::mat(t.grad_buffer(bi).ptr() + i * K * N, K, N).noalias() +=
            detail::mat(av.ptr() + i * M * K, M, K).transpose() * G;
    }
  });
}

/// Affine map over the last axis: [..., in] x [in, out] + [out]. Each leading-axis
/// slice is multiplied separately, so a row's result never depends on its batch.
inline Var linear(Var x, Var w, Var b) {
  detail::same_tape(x, w);
  detail::same_tape(x, b);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() < 2 || ws.size() != 2 || xs.back() != ws[0] || b.shape() != Shape{ws[1]}) shape_mismatch("linear", xs, ws);
  const std::size_t in = ws[0], outd = ws[1], rows = x.value().size() / in, N = xs[0], per = rows / N;
  Shape os = xs;
  os.back() = outd;
  Tensor out(os);
  auto Wm = detail::mat(w.value().ptr(), in, outd);
  for (std::size_t n = 0; n < N; ++n) {
    auto O = detail::mat(out.ptr() + n * per * outd, per, outd);
    O.noalias() = detail::mat(x.value().ptr() + n * per * in, per, in) * Wm;
    O.rowwise() += detail::mat(b.value().ptr(), 1, outd).row(0);
  }
  return x.tape->record(std::move(out), {x, w, b}, [xi = x.id, wi = w.id, bi = b.id, in, outd, rows, N, per](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    if (t.requires_grad(xi)) {
      auto Wm = detail::mat(t.value(Var{&t, wi}).ptr(), in, outd);
      Tensor& gx = t.grad_buffer(xi);
      for (std::size_t n = 0; n < N; ++n)
        detail::mat(gx.ptr() + n * per * in, per, in).noalias() += detail::mat(g.ptr() + n * per * outd, per, outd) * Wm.transpose();
    }
    auto G = detail::mat(g.ptr(), rows, outd);
    if (t.requires_grad(wi))
      detail::mat(t.grad_buffer(wi).ptr(), in, outd).noalias() += detail::mat(t.value(Var{&t, xi}).ptr(), rows, in).transpose() * G;
    if (t.requires_grad(bi)) detail::mat(t.grad_buffer(bi).ptr(), 1, outd).row(0) += G.colwise().sum();
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling (NCHW)

namespace detail {

struct ConvGeom {
  std::size_t C, H, W, K, stride, pad, Ho, Wo;
  std::size_t col_rows() const { return C * K * K; }
  std::size_t col_cols() const { return Ho * Wo; }
};

inline void im2col(const double* img, const ConvGeom& g, double* col) {
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ky = 0; ky < g.K; ++ky)
      for (std::size_t kx = 0; kx < g.K; ++kx) {
        double* row = col + ((c * g.K + ky) * g.K + kx) * g.Ho * g.Wo;
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            row[oy * g.Wo + ox] = (iy >= 0 && iy < static_cast<long>(g.H) && ix >= 0 && ix < static_cast<long>(g.W))
                                      ? img[(c * g.H + static_cast<std::size_t>(iy)) * g.W + static_cast<std::size_t>(ix)]
                                      : 0.0;
          }
        }
      }
}

inline void col2im_add(const double* col, const ConvGeom& g, double* img) {
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ky = 0; ky < g.K; ++ky)
      for (std::size_t kx = 0; kx < g.K; ++kx) {
        const double* row = col + ((c * g.K + ky) * g.K + kx) * g.Ho * g.Wo;
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.H)) continue;
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.W)) continue;
            img[(c * g.H + static_cast<std::size_t>(iy)) * g.W + static_cast<std::size_t>(ix)] += row[oy * g.Wo + ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution: x [N,C,H,W], w [Co,C,K,K], b [Co].
inline Var conv2d(Var x, Var w, Var b, std::size_t stride = 1, std::size_t pad = 0) {
  detail::same_tape(x, w);
  detail::same_tape(x, b);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || b.shape() != Shape{ws[0]})
    shape_mismatch("conv2d", xs, ws);
  if (stride == 0) throw Error("conv2d: stride must be positive");
  if (xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3]) shape_mismatch("conv2d", xs, ws);
  const std::size_t N = xs[0], Co = ws[0];
  detail::ConvGeom g{xs[1], xs[2], xs[3], ws[2], stride, pad, 0, 0};
  g.Ho = (g.H + 2 * pad - g.K) / stride + 1;
  g.Wo = (g.W + 2 * pad - g.K) / stride + 1;
  Tensor out({N, Co, g.Ho, g.Wo});
  Buffer col(g.col_rows() * g.col_cols());
  const std::size_t in_img = g.C * g.H * g.W, out_img = Co * g.Ho * g.Wo;
  auto Wm = detail::mat(w.value().ptr(), Co, g.col_rows());
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(x.value().ptr() + n * in_img, g, col.data());
    auto O = detail::mat(out.ptr() + n * out_img, Co, g.col_cols());
    O.noalias() = Wm * detail::mat(col.data(), g.col_rows(), g.col_cols());
    O.colwise() += detail::mat(b.value().ptr(), Co, 1).col(0);
  }
  return x.tape->record(std::move(out), {x, w, b}, [xi = x.id, wi = w.id, bi = b.id, g, N, Co, in_img, out_img](Tape& t, std::size_t self) {
    const Tensor& gy = t.upstream(self);
    const bool gx = t.requires_grad(xi), gw = t.requires_grad(wi), gb = t.requires_grad(bi);
    Buffer col(g.col_rows() * g.col_cols());
    auto Wm = detail::mat(t.value(Var{&t, wi}).ptr(), Co, g.col_rows());
    for (std::size_t n = 0; n < N; ++n) {
      auto G = detail::mat(gy.ptr() + n * out_img, Co, g.col_cols());
      if (gw) {
        detail::im2col(t.value(Var{&t, xi}).ptr() + n * in_img, g, col.data());
        detail::mat(t.grad_buffer(wi).ptr(), Co, g.col_rows()).noalias() +=
            G * detail::mat(col.data(), g.col_rows(), g.col_cols()).transpose();
      }
      if (gb) detail::mat(t.grad_buffer(bi).ptr(), Co, 1).col(0) += G.rowwise().sum();
      if (gx) {
        detail::mat(col.data(), g.col_rows(), g.col_cols()).noalias() = Wm.transpose() * G;
        detail::col2im_add(col.data(), g, t.grad_buffer(xi).ptr() + n * in_img);
      }
    }
  });
}

/// Max pooling with a square window; ties resolve to the first index.
inline Var max_pool2d(Var x, std::size_t k = 2, std::size_t stride = 2) {
  const Shape& xs = x.shape();
  if (xs.size() != 4 || xs[2] < k || xs[3] < k) throw ShapeError("max_pool2d: bad input " + to_string(xs));
  const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const std::size_t Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
  Tensor out({N, C, Ho, Wo});
  std::vector<std::size_t> arg(out.size());
  const Tensor& in = x.value();
  for (std::size_t p = 0; p < N * C; ++p)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = p * H * W + oy * stride * W + ox * stride;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t idx = p * H * W + (oy * stride + ky) * W + ox * stride + kx;
            if (in[idx] > in[best] || std::isnan(in[idx])) best = idx;  // NaN wins so it is not hidden
          }
        const std::size_t o = (p * Ho + oy) * Wo + ox;
        out[o] = in[best];
        arg[o] = best;
      }
  return x.tape->record(std::move(out), {x}, [xi = x.id, arg = std::move(arg)](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t o = 0; o < g.size(); ++o) gx[arg[o]] += g[o];
  });
}

/// k x k mean filter, stride 1, zero padding k/2 (output same size, divisor k*k).
inline Var avg_pool_same(Var x, std::size_t k = 3) {
  const Shape& xs = x.shape();
  if (xs.size() != 4 || k % 2 == 0) throw ShapeError("avg_pool_same: bad input " + to_string(xs));
  const std::size_t P = xs[0] * xs[1], H = xs[2], W = xs[3];
  const long r = static_cast<long>(k / 2);
  const double inv = 1.0 / static_cast<double>(k * k);
  auto apply = [=](const double* in, double* out) {
    for (std::size_t p = 0; p < P; ++p)
      for (long y = 0; y < static_cast<long>(H); ++y)
        for (long xx = 0; xx < static_cast<long>(W); ++xx) {
          double s = 0.0;
          for (long dy = -r; dy <= r; ++dy)
            for (long dx = -r; dx <= r; ++dx) {
              const long iy = y + dy, ix = xx + dx;
              if (iy >= 0 && iy < static_cast<long>(H) && ix >= 0 && ix < static_cast<long>(W))
                s += in[p * H * W + static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)];
            }
          out[p * H * W + static_cast<std::size_t>(y) * W + static_cast<std::size_t>(xx)] += s * inv;
        }
  };
  Tensor out(xs, 0.0);
  apply(x.value().ptr(), out.ptr());
  // The zero-padded mean filter is self-adjoint.
  return x.tape->record(std::move(out), {x}, [xi = x.id, apply](Tape& t, std::size_t self) {
    apply(t.upstream(self).ptr(), t.grad_buffer(xi).ptr());
  });
}

/// Mean over the spatial axes: [N,C,H,W] -> [N,C].
inline Var global_avg_pool(Var x) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("global_avg_pool: expected NCHW, got " + to_string(xs));
  const std::size_t P = xs[0] * xs[1], S = xs[2] * xs[3];
  Tensor out({xs[0], xs[1]});
  for (std::size_t p = 0; p < P; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < S; ++i) s += x.value()[p * S + i];
    out[p] = s / static_cast<double>(S);
  }
  return x.tape->record(std::move(out), {x}, [xi = x.id, P, S](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t i = 0; i < S; ++i) gx[p * S + i] += g[p] / static_cast<double>(S);
  });
}

// ---------------------------------------------------------------------------
// Normalization, softmax, loss

/// Layer norm over the last axis with affine gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  detail::same_tape(x, gain);
  detail::same_tape(x, bias);
  const std::size_t D = x.shape().back(), rows = x.value().size() / D;
  if (gain.shape() != Shape{D} || bias.shape() != Shape{D}) shape_mismatch("layer_norm", x.shape(), gain.shape());
  Tensor out(x.shape());
  std::vector<double> xhat(x.value().size()), rstd(rows);
  const Tensor& in = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double m = 0.0;
    for (std::size_t i = 0; i < D; ++i) m += in[r * D + i];
    m /= static_cast<double>(D);
    double v = 0.0;
    for (std::size_t i = 0; i < D; ++i) v += (in[r * D + i] - m) * (in[r * D + i] - m);
    v /= static_cast<double>(D);
    rstd[r] = 1.0 / std::sqrt(v + eps);
    for (std::size_t i = 0; i < D; ++i) {
      xhat[r * D + i] = (in[r * D + i] - m) * rstd[r];
      out[r * D + i] = xhat[r * D + i] * gain.value()[i] + bias.value()[i];
    }
  }
  return x.tape->record(std::move(out), {x, gain, bias},
                        [xi = x.id, gi = gain.id, bi = bias.id, D, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, std::size_t self) {
                          const Tensor& g = t.upstream(self);
                          const Tensor& gv = t.value(Var{&t, gi});
                          if (t.requires_grad(gi) || t.requires_grad(bi)) {
                            Tensor& gg = t.grad_buffer(gi);
                            Tensor& gb = t.grad_buffer(bi);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t i = 0; i < D; ++i) {
                                gg[i] += g[r * D + i] * xhat[r * D + i];
                                gb[i] += g[r * D + i];
                              }
                          }
                          if (!t.requires_grad(xi)) return;
                          Tensor& gx = t.grad_buffer(xi);
                          for (std::size_t r = 0; r < rows; ++r) {
                            double s1 = 0.0, s2 = 0.0;
                            for (std::size_t i = 0; i < D; ++i) {
                              const double dxh = g[r * D + i] * gv[i];
                              s1 += dxh;
                              s2 += dxh * xhat[r * D + i];
                            }
                            const double invD = 1.0 / static_cast<double>(D);
                            for (std::size_t i = 0; i < D; ++i) {
                              const double dxh = g[r * D + i] * gv[i];
                              gx[r * D + i] += rstd[r] * (dxh - invD * s1 - xhat[r * D + i] * invD * s2);
                            }
                          }
                        });
}

/// Softmax over the last axis.
inline Var softmax(Var x) {
  const std::size_t D = x.shape().back(), rows = x.value().size() / D;
  Tensor out(x.shape());
  const Tensor& in = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double m = in[r * D];
    for (std::size_t i = 1; i < D; ++i) m = std::max(m, in[r * D + i]);
    double s = 0.0;
    for (std::size_t i = 0; i < D; ++i) s += (out[r * D + i] = std::exp(in[r * D + i] - m));
    for (std::size_t i = 0; i < D; ++i) out[r * D + i] /= s;
  }
  return x.tape->record(std::move(out), {x}, [xi = x.id, D, rows](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& y = t.value(Var{&t, self});
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < D; ++i) dot += g[r * D + i] * y[r * D + i];
      for (std::size_t i = 0; i < D; ++i) gx[r * D + i] += y[r * D + i] * (g[r * D + i] - dot);
    }
  });
}

/// Log-softmax over the last axis.
inline Var log_softmax(Var x) {
  const std::size_t D = x.shape().back(), rows = x.value().size() / D;
  Tensor out(x.shape());
  const Tensor& in = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double m = in[r * D];
    for (std::size_t i = 1; i < D; ++i) m = std::max(m, in[r * D + i]);
    double s = 0.0;
    for (std::size_t i = 0; i < D; ++i) s += std::exp(in[r * D + i] - m);
    const double lse = m + std::log(s);
    for (std::size_t i = 0; i < D; ++i) out[r * D + i] = in[r * D + i] - lse;
  }
  return x.tape->record(std::move(out), {x}, [xi = x.id, D, rows](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& y = t.value(Var{&t, self});
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t i = 0; i < D; ++i) gs += g[r * D + i];
      for (std::size_t i = 0; i < D; ++i) gx[r * D + i] += g[r * D + i] - std::exp(y[r * D + i]) * gs;
    }
  });
}

/// Per-example cross-entropy: logits [N,K], labels in [0,K) -> [N].
inline Var cross_entropy_rows(Var logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size())
    throw ShapeError("cross_entropy: logits " + to_string(s) + " vs " + std::to_string(labels.size()) + " labels");
  const std::size_t N = s[0], K = s[1];
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= K)
      throw Error("cross_entropy: label " + std::to_string(y) + " out of range [0, " + std::to_string(K) + ")");
  const Tensor& in = logits.value();
  Tensor out({N});
  std::vector<double> prob(N * K);
  for (std::size_t r = 0; r < N; ++r) {
    double m = in[r * K];
    for (std::size_t i = 1; i < K; ++i) m = std::max(m, in[r * K + i]);
    double z = 0.0;
    for (std::size_t i = 0; i < K; ++i) z += (prob[r * K + i] = std::exp(in[r * K + i] - m));
    for (std::size_t i = 0; i < K; ++i) prob[r * K + i] /= z;
    out[r] = -(in[r * K + static_cast<std::size_t>(labels[r])] - m - std::log(z));
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape->record(std::move(out), {logits}, [li = logits.id, N, K, prob = std::move(prob), ys = std::move(ys)](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    Tensor& gl = t.grad_buffer(li);
    for (std::size_t r = 0; r < N; ++r)
      for (std::size_t i = 0; i < K; ++i)
        gl[r * K + i] += g[r] * (prob[r * K + i] - (static_cast<int>(i) == ys[r] ? 1.0 : 0.0));
  });
}

// ---------------------------------------------------------------------------
// Hook points

/// Residual-branch output marker; scale_branch_grad multiplies its gradient by gamma.
inline Var branch_point(Var x, std::string_view label) {
  const double s = x.tape->hooks().effect(label).branch_scale;
  Var y = x;
  if (s != 1.0) {
    y = x.tape->record(x.value(), {x}, [xi = x.id, s](Tape& t, std::size_t self) {
      const Tensor& g = t.upstream(self);
      Tensor& gx = t.grad_buffer(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
    });
  }
  x.tape->mark(label, y);
  return y;
}

/// Attention-weight marker; skip_attention_grad makes it a backward constant.
inline Var attention_point(Var x, std::string_view label) {
  Var y = x.tape->hooks().effect(label).block_grad ? detach(x) : x;
  x.tape->mark(label, y);
  return y;
}

/// Plain labeled tap (feature capture point).
inline Var feature_point(Var x, std::string_view label) {
  x.tape->mark(label, x);
  return x;
}

}  // namespace tabench
