#pragma once

// Geometric image transforms on NCHW batches: half-pixel bilinear resize,
// zero padding, integer translation, center crop. Each has a plain Tensor form
// (used by victim preprocessing) and a differentiable tape form.

#include <cmath>
#include <vector>

#include "tabench/ops.hpp"

namespace tabench {

namespace detail {

struct Interp1D {
  std::vector<std::size_t> i0, i1;
  std::vector<double> f;
};

// src = (dst + 0.5) * (in / out) - 0.5, clamped to [0, in - 1].
inline Interp1D interp_table(std::size_t in, std::size_t out) {
  Interp1D t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.f.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double s = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(s));
    t.i0[d] = lo;
    t.i1[d] = std::min(lo + 1, in - 1);
    t.f[d] = s - static_cast<double>(lo);
  }
  return t;
}

// Resizes one H x W plane into an rh x rw window of a (oh x ow) output plane at (top, left).
inline void resize_plane(const double* in, std::size_t H, std::size_t W, const Interp1D& ty, const Interp1D& tx,
                         double* out, std::size_t ow, std::size_t top, std::size_t left) {
  for (std::size_t y = 0; y < ty.f.size(); ++y) {
    const double fy = ty.f[y];
    const double* r0 = in + ty.i0[y] * W;
    const double* r1 = in + ty.i1[y] * W;
    double* o = out + (top + y) * ow + left;
    for (std::size_t x = 0; x < tx.f.size(); ++x) {
      const double fx = tx.f[x];
      const double a = r0[tx.i0[x]], b = r0[tx.i1[x]], c = r1[tx.i0[x]], d = r1[tx.i1[x]];
      o[x] = (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d);
    }
  }
  (void)H;
}

inline void resize_plane_adjoint(const double* g, std::size_t W, const Interp1D& ty, const Interp1D& tx,
                                 double* gin, std::size_t ow, std::size_t top, std::size_t left) {
  for (std::size_t y = 0; y < ty.f.size(); ++y) {
    const double fy = ty.f[y];
    double* r0 = gin + ty.i0[y] * W;
    double* r1 = gin + ty.i1[y] * W;
    const double* go = g + (top + y) * ow + left;
    for (std::size_t x = 0; x < tx.f.size(); ++x) {
      const double fx = tx.f[x], v = go[x];
      r0[tx.i0[x]] += (1.0 - fy) * (1.0 - fx) * v;
      r0[tx.i1[x]] += (1.0 - fy) * fx * v;
      r1[tx.i0[x]] += fy * (1.0 - fx) * v;
      r1[tx.i1[x]] += fy * fx * v;
    }
  }
}

inline void require_nchw(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected NCHW, got " + to_string(s));
}

}  // namespace detail

/// Per-example placement of a resized image inside a zero canvas.
struct Placement {
  std::size_t height, width, top, left;
};

// ---------------------------------------------------------------------------
// Plain tensor forms

inline Tensor resize_bilinear(const Tensor& x, std::size_t oh, std::size_t ow) {
  detail::require_nchw(x.shape(), "resize");
  const std::size_t P = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  if (oh == H && ow == W) return x;
  const auto ty = detail::interp_table(H, oh), tx = detail::interp_table(W, ow);
  Tensor out({x.dim(0), x.dim(1), oh, ow});
  for (std::size_t p = 0; p < P; ++p) detail::resize_plane(x.ptr() + p * H * W, H, W, ty, tx, out.ptr() + p * oh * ow, ow, 0, 0);
  return out;
}

/// Crop of size (oh, ow) at offset floor((in - out) / 2).
inline Tensor center_crop(const Tensor& x, std::size_t oh, std::size_t ow) {
  detail::require_nchw(x.shape(), "center_crop");
  const std::size_t H = x.dim(2), W = x.dim(3);
  if (oh > H || ow > W)
    throw ShapeError("center_crop: crop " + std::to_string(oh) + "x" + std::to_string(ow) + " larger than input " + to_string(x.shape()));
  const std::size_t top = (H - oh) / 2, left = (W - ow) / 2, P = x.dim(0) * x.dim(1);
  Tensor out({x.dim(0), x.dim(1), oh, ow});
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      std::copy_n(x.ptr() + p * H * W + (top + y) * W + left, ow, out.ptr() + (p * oh + y) * ow);
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable forms

/// Half-pixel bilinear resize to (oh, ow); same-size resize is an exact identity.
inline Var bilinear_resize(Var x, std::size_t oh, std::size_t ow) {
  detail::require_nchw(x.shape(), "bilinear_resize");
  const std::size_t P = x.shape()[0] * x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  auto ty = detail::interp_table(H, oh), tx = detail::interp_table(W, ow);
  Tensor out = resize_bilinear(x.value(), oh, ow);
  return x.tape->record(std::move(out), {x}, [xi = x.id, P, H, W, oh, ow, ty, tx](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t p = 0; p < P; ++p)
      detail::resize_plane_adjoint(g.ptr() + p * oh * ow, W, ty, tx, gx.ptr() + p * H * W, ow, 0, 0);
  });
}

/// Zero-pad into an (oh, ow) canvas with the input's top-left corner at (top, left).
inline Var pad(Var x, std::size_t top, std::size_t left, std::size_t oh, std::size_t ow) {
  detail::require_nchw(x.shape(), "pad");
  const std::size_t P = x.shape()[0] * x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (top + H > oh || left + W > ow) throw ShapeError("pad: input " + to_string(x.shape()) + " does not fit canvas");
  Tensor out({x.shape()[0], x.shape()[1], oh, ow});
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t y = 0; y < H; ++y)
      std::copy_n(x.value().ptr() + (p * H + y) * W, W, out.ptr() + (p * oh + top + y) * ow + left);
  return x.tape->record(std::move(out), {x}, [xi = x.id, P, H, W, oh, ow, top, left](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t c = 0; c < W; ++c) gx[(p * H + y) * W + c] += g[(p * oh + top + y) * ow + left + c];
  });
}

/// Per-example integer translation by (dy, dx) with zero fill: out[y][x] = in[y - dy][x - dx].
inline Var translate(Var x, std::vector<int> dy, std::vector<int> dx) {
  detail::require_nchw(x.shape(), "translate");
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (dy.size() != N || dx.size() != N) throw ShapeError("translate: need one offset per example");
  auto apply = [=](const double* in, double* out, bool adjoint) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (long y = 0; y < static_cast<long>(H); ++y) {
          const long sy = y - dy[n];
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          for (long xx = 0; xx < static_cast<long>(W); ++xx) {
            const long sx = xx - dx[n];
            if (sx < 0 || sx >= static_cast<long>(W)) continue;
            const std::size_t o = ((n * C + c) * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(xx);
            const std::size_t s = ((n * C + c) * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx);
            if (adjoint)
              out[s] += in[o];
            else
              out[o] = in[s];
          }
        }
  };
  Tensor out(x.shape(), 0.0);
  apply(x.value().ptr(), out.ptr(), false);
  return x.tape->record(std::move(out), {x}, [xi = x.id, apply](Tape& t, std::size_t self) {
    apply(t.upstream(self).ptr(), t.grad_buffer(xi).ptr(), true);
  });
}

/// Per-example bilinear resize to placement size, then zero-pad into (oh, ow) at the placement offset.
inline Var resize_place(Var x, std::vector<Placement> where, std::size_t oh, std::size_t ow) {
  detail::require_nchw(x.shape(), "resize_place");
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (where.size() != N) throw ShapeError("resize_place: need one placement per example");
  std::vector<detail::Interp1D> ty(N), tx(N);
  for (std::size_t n = 0; n < N; ++n) {
    const auto& p = where[n];
    if (p.height == 0 || p.width == 0 || p.top + p.height > oh || p.left + p.width > ow)
      throw ShapeError("resize_place: placement out of canvas");
    ty[n] = detail::interp_table(H, p.height);
    tx[n] = detail::interp_table(W, p.width);
  }
  Tensor out({N, C, oh, ow}, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      detail::resize_plane(x.value().ptr() + (n * C + c) * H * W, H, W, ty[n], tx[n], out.ptr() + (n * C + c) * oh * ow, ow,
                           where[n].top, where[n].left);
  return x.tape->record(std::move(out), {x}, [xi = x.id, N, C, H, W, oh, ow, where = std::move(where), ty = std::move(ty), tx = std::move(tx)](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        detail::resize_plane_adjoint(g.ptr() + (n * C + c) * oh * ow, W, ty[n], tx[n], gx.ptr() + (n * C + c) * H * W, ow,
                                     where[n].top, where[n].left);
  });
}

}  // namespace tabench
