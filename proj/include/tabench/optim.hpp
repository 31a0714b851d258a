#pragma once

// Perturbation initialization, update rules and projection. All functions act
// row-wise on [N, ...] tensors, one row per example.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include "tabench/rng.hpp"
#include "tabench/tensor.hpp"

namespace tabench {

enum class Norm { linf, l2 };
enum class Init { zeros, uniform_random };
enum class Optimizer { plain, MI, NI, PI };

inline std::string to_string(Norm n) { return n == Norm::linf ? "linf" : "l2"; }
inline std::string to_string(Init i) { return i == Init::zeros ? "zeros" : "uniform_random"; }
inline std::string to_string(Optimizer o) {
  switch (o) {
    case Optimizer::plain: return "plain";
    case Optimizer::MI: return "MI";
    case Optimizer::NI: return "NI";
    case Optimizer::PI: return "PI";
  }
  return "?";
}

inline Norm norm_from_string(const std::string& s) {
  if (s == "linf" || s == "inf") return Norm::linf;
  if (s == "l2" || s == "two") return Norm::l2;
  throw Error("attack: unknown norm '" + s + "'");
}
inline Init init_from_string(const std::string& s) {
  if (s == "zeros") return Init::zeros;
  if (s == "uniform_random" || s == "random") return Init::uniform_random;
  throw Error("attack: unknown init '" + s + "'");
}
inline Optimizer optimizer_from_string(const std::string& s) {
  for (auto o : {Optimizer::plain, Optimizer::MI, Optimizer::NI, Optimizer::PI})
    if (to_string(o) == s) return o;
  if (s == "none") return Optimizer::plain;
  throw Error("attack: unknown optimizer '" + s + "'");
}

struct Budget {
  Norm norm = Norm::linf;
  double epsilon = 8.0 / 255.0;
  double step_size = 1.0 / 255.0;
};

/// Per-example momentum state.
struct OptimizerState {
  Tensor g;       // accumulated momentum
  Tensor g_prev;  // previous update direction (PI lookahead)
  std::size_t zero_grad_events = 0;

  explicit OptimizerState(const Shape& s) : g(s, 0.0), g_prev(s, 0.0) {}
};

/// Projects every row onto the norm ball, then onto the image box [0,1] around x.
/// Idempotent: a second application returns bit-identical values.
inline void project(Tensor& delta, const Budget& b, const Tensor& x) {
  if (delta.shape() != x.shape()) shape_mismatch("project", delta.shape(), x.shape());
  const std::size_t n = delta.dim(0), per = delta.row_size();
  for (std::size_t r = 0; r < n; ++r) {
    double* d = delta.ptr() + r * per;
    const double* xr = x.ptr() + r * per;
    if (b.norm == Norm::linf) {
      for (std::size_t i = 0; i < per; ++i) d[i] = std::clamp(d[i], -b.epsilon, b.epsilon);
    } else {
      const double nrm = l2_norm({d, per});
      if (nrm > b.epsilon * (1.0 + 1e-12)) {
        const double s = b.epsilon / nrm;
        for (std::size_t i = 0; i < per; ++i) d[i] *= s;
      }
    }
    for (std::size_t i = 0; i < per; ++i) {
      const double a = xr[i] + d[i];
      if (a > 1.0) d[i] = 1.0 - xr[i];
      else if (a < 0.0) d[i] = -xr[i];
    }
  }
}

/// Zeros, or uniform in the ball (l_inf: per coordinate; l_2: uniform direction,
/// radius eps * U^(1/n)), followed by projection. Row r draws from (seed, r_id).
inline Tensor init_perturbation(Init init, const Budget& b, const Tensor& x, std::uint64_t seed,
                                std::span<const std::size_t> example_ids) {
  Tensor d(x.shape(), 0.0);
  if (init == Init::zeros) return d;
  const std::size_t per = d.row_size();
  for (std::size_t r = 0; r < d.dim(0); ++r) {
    auto rng = make_rng(seed, Stream::perturbation_init, example_ids[r]);
    double* p = d.ptr() + r * per;
    if (b.norm == Norm::linf) {
      for (std::size_t i = 0; i < per; ++i) p[i] = rng.uniform(-b.epsilon, b.epsilon);
    } else {
      for (std::size_t i = 0; i < per; ++i) p[i] = rng.normal();
      const double nrm = std::max(l2_norm({p, per}), 1e-300);
      const double radius = b.epsilon * std::pow(rng.uniform(), 1.0 / static_cast<double>(per));
      for (std::size_t i = 0; i < per; ++i) p[i] *= radius / nrm;
    }
  }
  project(d, b, x);
  return d;
}

/// Momentum update for one row: g <- mu g + grad / ||grad||_1 (momentum only if ||grad||_1 = 0).
inline bool momentum_update(double* g, const double* grad, std::size_t n, double mu) {
  const double l1 = l1_norm({grad, n});
  for (std::size_t i = 0; i < n; ++i) g[i] = mu * g[i] + (l1 > 0 ? grad[i] / l1 : 0.0);
  return l1 == 0;
}

/// Converts direction rows into increments: alpha sign(d) or alpha d / max(||d||_2, 1e-12).
inline Tensor increment(const Tensor& d, const Budget& b) {
  Tensor out(d.shape());
  const std::size_t per = d.row_size();
  for (std::size_t r = 0; r < d.dim(0); ++r) {
    const double* p = d.ptr() + r * per;
    double* o = out.ptr() + r * per;
    if (b.norm == Norm::linf) {
      for (std::size_t i = 0; i < per; ++i) o[i] = p[i] > 0 ? b.step_size : (p[i] < 0 ? -b.step_size : 0.0);
    } else {
      const double s = b.step_size / std::max(l2_norm({p, per}), 1e-12);
      for (std::size_t i = 0; i < per; ++i) o[i] = p[i] * s;
    }
  }
  return out;
}

/// One update: returns the increment to add to delta. For NI/PI the caller must
/// have evaluated grad at lookahead_point().
inline Tensor step(OptimizerState& st, const Tensor& grad, Optimizer opt, double mu, const Budget& b) {
  if (!grad.all_finite()) throw Error("step: non-finite gradient");
  if (opt == Optimizer::plain) return increment(grad, b);
  const std::size_t per = grad.row_size();
  for (std::size_t r = 0; r < grad.dim(0); ++r)
    if (momentum_update(st.g.ptr() + r * per, grad.ptr() + r * per, per, mu)) ++st.zero_grad_events;
  if (opt == Optimizer::PI) st.g_prev = st.g;
  return increment(st.g, b);
}

/// Point at which NI and PI evaluate the gradient; delta itself for plain and MI.
/// The momentum buffer holds l1-normalized gradients, so the look-ahead offset
/// is rescaled by the per-example coordinate count to mean-|.| units.
inline Tensor lookahead_point(const OptimizerState& st, const Tensor& delta, Optimizer opt, double mu, const Budget& b) {
  if (opt == Optimizer::plain || opt == Optimizer::MI) return delta;
  const Tensor& dir = opt == Optimizer::NI ? st.g : st.g_prev;
  const double coef = (opt == Optimizer::NI ? b.step_size * mu : b.step_size) * static_cast<double>(delta.row_size());
  Tensor out = delta;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += coef * dir[i];
  return out;
}

}  // namespace tabench
