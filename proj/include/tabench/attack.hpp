#pragma once

// The iterative attack loop: init -> (augment, gradient, step, project) x T.

#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "tabench/methods.hpp"

namespace tabench {

struct AttackSpec {
  Budget budget;
  std::size_t iterations = 100;
  Init init = Init::zeros;
  Optimizer optimizer = Optimizer::plain;
  double momentum = 1.0;
  AugmentStack stack;
  MethodParams method;
  std::size_t n_backprops = 1;  // > 1: average over augmented copies
  std::uint64_t seed = 0;

  static AttackSpec linf() { return {}; }
  static AttackSpec l2() {
    AttackSpec s;
    s.budget = {Norm::l2, 5.0, 1.0};
    return s;
  }

  void validate() const {
    if (!(budget.epsilon >= 0) || !std::isfinite(budget.epsilon)) throw Error("attack: epsilon must be finite and >= 0");
    if (!(budget.step_size > 0)) throw Error("attack: step_size must be > 0");
    if (n_backprops < 1) throw Error("attack: n_backprops must be >= 1");
  }

  /// Back-end name in canonical order, e.g. "UN-DP-DI2-TI-PI-FGSM", "I-FGSM", "MI-PGD".
  std::string backend_name() const {
    std::string s = stack.name();
    if (optimizer != Optimizer::plain) s += (s.empty() ? "" : "-") + to_string(optimizer);
    if (init == Init::uniform_random) return s + (s.empty() ? "" : "-") + "PGD";
    return s.empty() ? "I-FGSM" : s + "-FGSM";
  }
};

inline void to_json(nlohmann::json& j, const AttackSpec& s) {
  j = nlohmann::json{{"norm", to_string(s.budget.norm)},
                     {"epsilon", s.budget.epsilon},
                     {"step_size", s.budget.step_size},
                     {"iterations", s.iterations},
                     {"init", to_string(s.init)},
                     {"optimizer", to_string(s.optimizer)},
                     {"momentum", s.momentum},
                     {"augment", s.stack},
                     {"method", s.method},
                     {"n_backprops_per_iter", s.n_backprops},
                     {"seed", s.seed}};
}

/// Missing keys fall back to the l_inf defaults (or l_2 defaults when norm is "l2").
inline void from_json(const nlohmann::json& j, AttackSpec& s) {
  const Norm n = norm_from_string(j.value("norm", std::string("linf")));
  s = n == Norm::l2 ? AttackSpec::l2() : AttackSpec::linf();
  s.budget.epsilon = j.value("epsilon", s.budget.epsilon);
  s.budget.step_size = j.value("step_size", s.budget.step_size);
  s.iterations = j.value("iterations", s.iterations);
  s.init = init_from_string(j.value("init", std::string("zeros")));
  s.optimizer = optimizer_from_string(j.value("optimizer", std::string("plain")));
  s.momentum = j.value("momentum", s.momentum);
  if (j.contains("augment")) s.stack = j.at("augment").get<AugmentStack>();
  if (j.contains("method")) s.method = j.at("method").get<MethodParams>();
  s.n_backprops = j.value("n_backprops_per_iter", s.n_backprops);
  s.seed = j.value("seed", s.seed);
  s.validate();
}

struct TraceRow {
  std::size_t iteration = 0;
  double loss = 0;       // mean over active examples at the gradient point
  double grad_norm = 0;  // mean per-example l2 norm of the raw gradient
  std::size_t zero_grad = 0;
};

struct AttackTrace {
  std::vector<TraceRow> rows;
  std::vector<std::string> diagnostics;

  void write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw Error("trace: cannot write '" + path + "'");
    f << "iteration,loss,grad_norm\n" << std::setprecision(17);
    for (const auto& r : rows) f << r.iteration << ',' << r.loss << ',' << r.grad_norm << '\n';
  }
};

struct AttackResult {
  Tensor x_adv;
  AttackTrace trace;
  std::vector<bool> aborted;
};

struct AttackOptions {
  std::size_t jobs = 1;
  std::size_t chunk = 16;                    // fixed, independent of jobs
  const Tensor* stats_batch = nullptr;       // FDA statistics
  std::vector<std::size_t> example_ids;      // defaults to 0..N-1
};

namespace detail {

inline bool all_finite_span(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double a) { return std::isfinite(a); });
}

struct ChunkOutcome {
  Tensor delta;
  std::vector<double> loss_sum, grad_norm_sum;
  std::vector<std::size_t> active, zero_grad;
  std::vector<bool> aborted;
  std::vector<std::string> diagnostics;
};

/// Runs `fn(i)` for i in [0, n) on up to `jobs` threads; each index runs exactly once.
template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F&& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Untargeted attack on one or more substitutes (one sampled per iteration when
/// several are given). x is at canvas size; models resize it internally.
inline AttackResult run_attack(std::span<const Model* const> substitutes, const Tensor& x, std::span<const int> y,
                               const AttackSpec& spec, const AttackOptions& opt = {}) {
  spec.validate();
  if (substitutes.empty()) throw Error("attack: no substitute model");
  if (x.rank() != 4) throw ShapeError("attack: expected NCHW batch, got " + to_string(x.shape()));
  if (y.size() != x.dim(0)) throw Error("attack: label count does not match batch");
  const std::size_t N = x.dim(0);
  std::vector<std::size_t> ids = opt.example_ids;
  if (ids.empty())
    for (std::size_t i = 0; i < N; ++i) ids.push_back(i);
  if (ids.size() != N) throw Error("attack: example id count does not match batch");

  const MethodParams& mp = spec.method;
  const bool feature = is_feature_method(mp.kind);
  if (substitutes.size() > 1 && (feature || mp.kind != MethodKind::none))
    throw Error("attack: method " + to_string(mp.kind) + " needs a single substitute");
  for (const Model* m : substitutes) check_compatible(mp.kind, m->spec());
  std::vector<HookSet> hooks;
  for (const Model* m : substitutes) hooks.push_back(install_backward_method(m->spec(), mp));

  Aggregates agg;
  if (feature) {
    AggregateInputs in{spec.budget, spec.seed, ids, opt.stats_batch};
    in.budget.step_size = spec.budget.step_size;
    agg = precompute_aggregates(mp, *substitutes[0], x, y, in);
  }
  const double amp = un_amplitude(spec.budget.norm == Norm::l2, spec.budget.epsilon, x.dim(2), x.dim(3));

  std::vector<std::size_t> rows(N);
  for (std::size_t i = 0; i < N; ++i) rows[i] = i;
  const std::size_t C = std::max<std::size_t>(opt.chunk, 1);
  const std::size_t n_chunks = (N + C - 1) / C;
  std::vector<detail::ChunkOutcome> out(n_chunks);

  detail::parallel_for(n_chunks, opt.jobs, [&](std::size_t ci) {
    const std::size_t b = ci * C, e = std::min(N, b + C), n = e - b;
    const Tensor xc = x.rows(b, e);
    const std::span<const int> yc = y.subspan(b, n);
    const std::span<const std::size_t> idc(ids.data() + b, n);
    const Aggregates ac = feature ? agg.rows(b, e) : Aggregates{};
    auto& o = out[ci];
    o.loss_sum.assign(spec.iterations, 0.0);
    o.grad_norm_sum.assign(spec.iterations, 0.0);
    o.active.assign(spec.iterations, 0);
    o.zero_grad.assign(spec.iterations, 0);
    o.aborted.assign(n, false);

    Tensor delta = init_perturbation(spec.init, spec.budget, xc, spec.seed, idc);
    OptimizerState st(xc.shape());
    VtState vt;
    const std::size_t per = xc.row_size();
    for (std::size_t t = 0; t < spec.iterations; ++t) {
      std::size_t pick = 0;
      if (substitutes.size() > 1) pick = static_cast<std::size_t>(make_rng(spec.seed, Stream::ensemble_pick, t).below(substitutes.size()));
      const Model& m = *substitutes[pick];
      GradSetup gs{&m, &hooks[pick], false, 1.0};
      AugmentContext ctx{spec.seed, idc, t, 0, amp, &x, std::span<const std::size_t>(rows.data() + b, n)};
      const Tensor point = lookahead_point(st, delta, spec.optimizer, spec.momentum, spec.budget);
      GradEval ge;
      switch (mp.kind) {
        case MethodKind::VT:
        case MethodKind::TAIG:
        case MethodKind::SE:
        case MethodKind::VT_baseline:
        case MethodKind::IR_baseline:
        case MethodKind::TAIG_baseline:
          ge = output_space_gradient(mp, gs, xc, point, yc, spec.stack, ctx, spec.budget.epsilon, &vt);
          break;
        default: {
          const LossFn loss = method_loss(mp, ac, m.spec(), yc);
          ge = spec.n_backprops > 1 ? averaged_gradient(gs, xc, point, yc, spec.n_backprops, spec.stack, ctx, loss)
                                    : single_gradient(gs, xc, point, yc, spec.stack, ctx, loss);
        }
      }
      for (std::size_t r = 0; r < n; ++r) {
        const bool bad = !std::isfinite(ge.loss[r]) || !detail::all_finite_span(ge.grad.row(r));
        if (bad && !o.aborted[r]) {
          o.aborted[r] = true;
          o.diagnostics.push_back("example " + std::to_string(idc[r]) + ": non-finite loss at iteration " + std::to_string(t) +
                                  "; attack stopped for this example");
        }
        if (o.aborted[r]) {
          std::fill(ge.grad.row(r).begin(), ge.grad.row(r).end(), 0.0);
          continue;
        }
        o.loss_sum[t] += ge.loss[r];
        o.grad_norm_sum[t] += l2_norm(ge.grad.row(r));
        ++o.active[t];
      }
      const std::size_t z0 = st.zero_grad_events;
      Tensor inc = step(st, ge.grad, spec.optimizer, spec.momentum, spec.budget);
      o.zero_grad[t] = st.zero_grad_events - z0;
      for (std::size_t r = 0; r < n; ++r)
        if (!o.aborted[r])
          for (std::size_t i = 0; i < per; ++i) delta[r * per + i] += inc[r * per + i];
      project(delta, spec.budget, xc);
    }
    o.delta = std::move(delta);
  });

  AttackResult res;
  res.x_adv = Tensor(x.shape());
  const std::size_t per = x.row_size();
  for (std::size_t ci = 0; ci < n_chunks; ++ci) {
    const auto& o = out[ci];
    const std::size_t b = ci * C;
    for (std::size_t i = 0; i < o.delta.size(); ++i)
      res.x_adv[b * per + i] = std::clamp(x[b * per + i] + o.delta[i], 0.0, 1.0);
    res.aborted.insert(res.aborted.end(), o.aborted.begin(), o.aborted.end());
    res.trace.diagnostics.insert(res.trace.diagnostics.end(), o.diagnostics.begin(), o.diagnostics.end());
  }
  for (std::size_t t = 0; t < spec.iterations; ++t) {
    TraceRow row;
    row.iteration = t + 1;
    std::size_t active = 0;
    for (const auto& o : out) {
      row.loss += o.loss_sum[t];
      row.grad_norm += o.grad_norm_sum[t];
      row.zero_grad += o.zero_grad[t];
      active += o.active[t];
    }
    if (active) {
      row.loss /= static_cast<double>(active);
      row.grad_norm /= static_cast<double>(active);
    }
    res.trace.rows.push_back(row);
  }
  return res;
}

inline AttackResult run_attack(const Model& substitute, const Tensor& x, std::span<const int> y, const AttackSpec& spec,
                               const AttackOptions& opt = {}) {
  const Model* p = &substitute;
  return run_attack(std::span<const Model* const>(&p, 1), x, y, spec, opt);
}

/// Gradient of CE on one model drawn uniformly per iteration (keyed by seed and iteration).
inline Tensor ensemble_gradient(std::span<const Model* const> models, const Tensor& x, const Tensor& delta,
                                std::span<const int> y, std::uint64_t seed, std::size_t iteration, std::size_t* picked = nullptr) {
  if (models.empty()) throw Error("ensemble_gradient: empty model list");
  const std::size_t k = models.size() == 1 ? 0 : static_cast<std::size_t>(make_rng(seed, Stream::ensemble_pick, iteration).below(models.size()));
  if (picked) *picked = k;
  GradSetup gs{models[k], nullptr, false, 1.0};
  std::vector<std::size_t> ids(x.dim(0));
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  AugmentContext ctx{seed, ids, iteration, 0, 0.0, nullptr, {}};
  return single_gradient(gs, x, delta, y, AugmentStack{}, ctx, output_loss(MethodKind::none, y)).grad;
}

}  // namespace tabench
