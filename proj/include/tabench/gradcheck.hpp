#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "tabench/rng.hpp"
#include "tabench/tape.hpp"

namespace tabench {

using GraphFn = std::function<Var(Tape&, std::span<const Var>)>;

namespace detail {

// Non-scalar outputs are contracted with fixed pseudo-random weights.
inline Tensor projection_weights(const Shape& s) {
  Tensor w(s);
  CounterRng rng{0xC0FFEE, numel(s)};
  for (auto& v : w.storage()) v = rng.uniform(0.5, 1.5);
  return w;
}

inline double evaluate_scalar(const GraphFn& f, std::span<const Tensor> point) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& p : point) vars.push_back(tape.constant(p));
  const Tensor& out = f(tape, vars).value();
  const Tensor w = projection_weights(out.shape());
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
  if (!std::isfinite(s)) throw Error("check_gradient: non-finite evaluation");
  return s;
}

}  // namespace detail

/// Largest relative error between backward() and central differences over all
/// input coordinates: |a - b| / max(1e-12, |a|, |b|).
inline double check_gradient(const GraphFn& f, std::span<const Tensor> point, double h) {
  if (!(h > 0)) throw Error("check_gradient: step must be positive");
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& p : point) vars.push_back(tape.leaf(p, true));
    Var out = f(tape, vars);
    if (!out.value().all_finite()) throw Error("check_gradient: non-finite evaluation");
    tape.backward(out, detail::projection_weights(out.shape()));
    for (const Var& v : vars) analytic.push_back(tape.grad(v));
  }
  double worst = 0.0;
  std::vector<Tensor> probe(point.begin(), point.end());
  for (std::size_t k = 0; k < probe.size(); ++k) {
    for (std::size_t i = 0; i < probe[k].size(); ++i) {
      const double x0 = probe[k][i];
      probe[k][i] = x0 + h;
      const double fp = detail::evaluate_scalar(f, probe);
      probe[k][i] = x0 - h;
      const double fm = detail::evaluate_scalar(f, probe);
      probe[k][i] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({1e-12, std::abs(a), std::abs(numeric)}));
    }
  }
  return worst;
}

inline double check_gradient(const GraphFn& f, std::initializer_list<Tensor> point, double h) {
  std::vector<Tensor> p(point);
  return check_gradient(f, std::span<const Tensor>(p), h);
}

}  // namespace tabench
