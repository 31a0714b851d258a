#pragma once

// Gradient-computation methods: backward hooks, middle-layer feature losses with
// their precomputed aggregates, and output-space gradient estimators.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <functional>
#include <optional>

#include "tabench/augment.hpp"
#include "tabench/model.hpp"
#include "tabench/optim.hpp"

namespace tabench {

enum class MethodKind {
  none,
  SGM,
  LinBP,
  ConBP,
  PNA,
  SE,
  NRDM,
  TAP,
  FDA,
  ILA,
  ILApp,
  FIA,
  NAA,
  VT,
  TAIG,
  VT_baseline,
  IR_baseline,
  TAIG_baseline,
};

inline constexpr MethodKind kAllMethods[] = {
    MethodKind::none, MethodKind::SGM,  MethodKind::LinBP, MethodKind::ConBP, MethodKind::PNA,
    MethodKind::SE,   MethodKind::NRDM, MethodKind::TAP,   MethodKind::FDA,   MethodKind::ILA,
    MethodKind::ILApp, MethodKind::FIA, MethodKind::NAA,   MethodKind::VT,    MethodKind::TAIG,
    MethodKind::VT_baseline, MethodKind::IR_baseline, MethodKind::TAIG_baseline};

inline std::string to_string(MethodKind k) {
  switch (k) {
    case MethodKind::none: return "none";
    case MethodKind::SGM: return "SGM";
    case MethodKind::LinBP: return "LinBP";
    case MethodKind::ConBP: return "ConBP";
    case MethodKind::PNA: return "PNA";
    case MethodKind::SE: return "SE";
    case MethodKind::NRDM: return "NRDM";
    case MethodKind::TAP: return "TAP";
    case MethodKind::FDA: return "FDA";
    case MethodKind::ILA: return "ILA";
    case MethodKind::ILApp: return "ILA++";
    case MethodKind::FIA: return "FIA";
    case MethodKind::NAA: return "NAA";
    case MethodKind::VT: return "VT";
    case MethodKind::TAIG: return "TAIG";
    case MethodKind::VT_baseline: return "VT_baseline";
    case MethodKind::IR_baseline: return "IR_baseline";
    case MethodKind::TAIG_baseline: return "TAIG_baseline";
  }
  return "?";
}

inline MethodKind method_from_string(const std::string& s) {
  for (auto k : kAllMethods)
    if (to_string(k) == s) return k;
  if (s == "ILApp" || s == "ILA_pp") return MethodKind::ILApp;
  throw Error("method: unknown kind '" + s + "'");
}

inline bool is_feature_method(MethodKind k) {
  switch (k) {
    case MethodKind::NRDM:
    case MethodKind::TAP:
    case MethodKind::FDA:
    case MethodKind::ILA:
    case MethodKind::ILApp:
    case MethodKind::FIA:
    case MethodKind::NAA: return true;
    default: return false;
  }
}

struct MethodParams {
  MethodKind kind = MethodKind::none;
  std::size_t layer_index = 0;  // 1-based into feature labels; 0 picks the middle block
  double gamma = 0.5;
  double lambda_ridge = 1.0;
  std::size_t n_agg = 8;
  double drop_prob_fia = 0.3;
  double lambda_tap = 0.005;
  double alpha_tap = 0.5;
  double eta_tap = 0.01;
  double beta_vt = 1.5;
  std::size_t ila_reference_iterations = 10;
  bool taig_noise = false;
};

inline void to_json(nlohmann::json& j, const MethodParams& p) {
  j = nlohmann::json{{"kind", to_string(p.kind)},
                     {"layer_index", p.layer_index},
                     {"gamma", p.gamma},
                     {"lambda_ridge", p.lambda_ridge},
                     {"n_agg", p.n_agg},
                     {"drop_prob_fia", p.drop_prob_fia},
                     {"lambda_tap", p.lambda_tap},
                     {"alpha_tap", p.alpha_tap},
                     {"eta_tap", p.eta_tap},
                     {"beta_vt", p.beta_vt},
                     {"ila_reference_iterations", p.ila_reference_iterations},
                     {"taig_noise", p.taig_noise}};
}

inline void from_json(const nlohmann::json& j, MethodParams& p) {
  p = MethodParams{};
  p.kind = method_from_string(j.value("kind", std::string("none")));
  p.layer_index = j.value("layer_index", p.layer_index);
  p.gamma = j.value("gamma", p.gamma);
  p.lambda_ridge = j.value("lambda_ridge", p.lambda_ridge);
  p.n_agg = j.value("n_agg", p.n_agg);
  p.drop_prob_fia = j.value("drop_prob_fia", p.drop_prob_fia);
  p.lambda_tap = j.value("lambda_tap", p.lambda_tap);
  p.alpha_tap = j.value("alpha_tap", p.alpha_tap);
  p.eta_tap = j.value("eta_tap", p.eta_tap);
  p.beta_vt = j.value("beta_vt", p.beta_vt);
  p.ila_reference_iterations = j.value("ila_reference_iterations", p.ila_reference_iterations);
  p.taig_noise = j.value("taig_noise", p.taig_noise);
}

/// Per-example aggregates; every tensor has a leading example axis except channel_mean.
struct Aggregates {
  Tensor clean_features;  // f_l(x)
  Tensor delta_y;         // ILA
  Tensor w_star;          // ILA++
  Tensor g_bar;           // FIA
  Tensor attribution;     // NAA
  Tensor tap_clean;       // s^alpha(f_l(x)), TAP
  Tensor channel_mean;    // FDA, [channels]

  Aggregates rows(std::size_t b, std::size_t e) const {
    Aggregates a;
    auto cut = [&](const Tensor& t) { return t.empty() ? Tensor{} : t.rows(b, e); };
    a.clean_features = cut(clean_features);
    a.delta_y = cut(delta_y);
    a.w_star = cut(w_star);
    a.g_bar = cut(g_bar);
    a.attribution = cut(attribution);
    a.tap_clean = cut(tap_clean);
    a.channel_mean = channel_mean;
    return a;
  }
};

// ---------------------------------------------------------------------------
// Compatibility and hooks

inline bool has_label_kind(const ModelSpec& s, LabelKind k) {
  for (const auto& l : s.layer_labels())
    if (l.kind == k) return true;
  return false;
}

/// Throws when the method cannot run on the architecture.
inline void check_compatible(MethodKind m, const ModelSpec& s) {
  auto fail = [&](const char* why) {
    throw Error("method " + to_string(m) + " is not applicable to " + to_string(s.arch) + ": " + why);
  };
  switch (m) {
    case MethodKind::SGM:
      if (!has_label_kind(s, LabelKind::skip)) fail("no skip connections");
      break;
    case MethodKind::LinBP:
    case MethodKind::ConBP:
      if (!has_label_kind(s, LabelKind::relu)) fail("no ReLU layers");
      break;
    case MethodKind::PNA:
    case MethodKind::SE:
      if (!has_label_kind(s, LabelKind::attention)) fail("no attention layers");
      break;
    default: break;
  }
}

inline std::size_t resolve_layer_index(const MethodParams& p, const ModelSpec& s) {
  const std::size_t n = s.feature_labels().size();
  const std::size_t li = p.layer_index == 0 ? (n + 1) / 2 : p.layer_index;
  if (li < 1 || li > n)
    throw Error("method: layer_index " + std::to_string(li) + " outside 1.." + std::to_string(n) + " for " + to_string(s.arch));
  return li;
}

inline std::string feature_label(const MethodParams& p, const ModelSpec& s) {
  return s.feature_labels()[resolve_layer_index(p, s) - 1];
}

/// Hook set realizing a backward-modification method; empty for other kinds.
inline HookSet install_backward_method(const ModelSpec& s, const MethodParams& p) {
  check_compatible(p.kind, s);
  const auto labels = s.layer_labels();
  HookSet hooks;
  auto of_kind = [&](LabelKind k, int min_block) {
    std::vector<std::string> out;
    for (const auto& l : labels)
      if (l.kind == k && l.block >= min_block) out.push_back(l.name);
    return out;
  };
  switch (p.kind) {
    case MethodKind::SGM: hooks.install({HookKind::scale_branch_grad, of_kind(LabelKind::skip, 0), p.gamma}, labels); break;
    case MethodKind::LinBP:
    case MethodKind::ConBP: {
      const int from = static_cast<int>(resolve_layer_index(p, s));
      const HookKind k = p.kind == MethodKind::LinBP ? HookKind::identity_relu_grad : HookKind::softplus_relu_grad;
      hooks.install({k, of_kind(LabelKind::relu, from), 1.0}, labels);
      break;
    }
    case MethodKind::PNA: hooks.install({HookKind::skip_attention_grad, of_kind(LabelKind::attention, 0), 1.0}, labels); break;
    default: break;
  }
  return hooks;
}

// ---------------------------------------------------------------------------
// Forward helpers

/// Maps canvas-sized inputs to the model's input size (substitute-side resize only).
inline Var to_model_input(const Model& m, Var z) {
  const auto& s = m.spec();
  if (z.shape()[2] == s.input_height && z.shape()[3] == s.input_width) return z;
  return bilinear_resize(z, s.input_height, s.input_width);
}

inline Var tapped_feature(Tape& tape, const std::string& label) {
  auto f = tape.tapped(label);
  if (!f) throw Error("method: feature label '" + label + "' was not produced by the forward pass");
  return *f;
}

namespace detail {

// Channel axis: 1 for [N,C,H,W] maps, last axis for [N,T,D] token features.
inline std::size_t channel_count(const Shape& s) { return s.size() == 4 ? s[1] : s.back(); }

inline std::size_t channel_of(const Shape& s, std::size_t i_in_row) {
  if (s.size() == 4) return i_in_row / (s[2] * s[3]);
  return i_in_row % s.back();
}

inline Tensor positive_part(const Tensor& t, double sign) {
  Tensor o(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) o[i] = std::max(0.0, sign * t[i]);
  return o;
}

}  // namespace detail

/// Clean features f_l at canvas inputs x (no hooks).
inline Tensor clean_features(const Model& m, const Tensor& x, const std::string& label) {
  Tape tape;
  m.forward(tape, to_model_input(m, tape.constant(x)));
  return tapped_feature(tape, label).value();
}

/// Gradient of sum_i log p_{y_i}(x_i) with respect to the feature f_l, plus f_l itself.
inline std::pair<Tensor, Tensor> feature_logprob_grad(const Model& m, const Tensor& x, std::span<const int> y,
                                                      const std::string& label) {
  Tape tape;
  Var in = tape.leaf(x, true);  // gradient flow through the feature needs a differentiable source
  auto fr = m.forward(tape, to_model_input(m, in));
  Var f = tapped_feature(tape, label);
  tape.backward(scale(sum(cross_entropy_rows(fr.logits, y)), -1.0));
  return {tape.grad(f), f.value()};
}

// ---------------------------------------------------------------------------
// Feature losses

/// Per-example loss to maximize, from the captured feature f' = f_l(x + delta).
inline Var feature_loss(const MethodParams& p, const Aggregates& a, Var f, Var delta, Var logits, std::span<const int> y) {
  Tape& tape = *f.tape;
  auto need = [&](const Tensor& t, const char* what) -> const Tensor& {
    if (t.empty()) throw Error(std::string("method ") + to_string(p.kind) + ": missing aggregate " + what);
    if (what != std::string("channel_mean") && t.shape() != f.shape()) shape_mismatch("feature_loss", t.shape(), f.shape());
    return t;
  };
  auto dot = [&](Var v, const Tensor& t) { return sum_rows(mul(v, tape.constant(t))); };
  switch (p.kind) {
    case MethodKind::NRDM: {
      Var d = sub(f, tape.constant(need(a.clean_features, "clean_features")));
      return sqrt_floor(sum_rows(square(d)));
    }
    case MethodKind::TAP: {
      Var ce = cross_entropy_rows(logits, y);
      Var d = sub(tape.constant(need(a.tap_clean, "tap_clean")), signed_pow(f, p.alpha_tap));
      Var smooth = sum_rows(abs(avg_pool_same(delta, 3)));
      return sub(add(ce, scale(sum_rows(square(d)), p.lambda_tap)), scale(smooth, p.eta_tap));
    }
    case MethodKind::FDA: {
      const Tensor& mu = need(a.channel_mean, "channel_mean");
      const Shape& s = f.shape();
      if (mu.size() != detail::channel_count(s)) throw ShapeError("FDA: channel mean size does not match feature " + to_string(s));
      Tensor below(s), above(s);
      const std::size_t per = f.value().row_size();
      for (std::size_t i = 0; i < f.value().size(); ++i) {
        const bool lo = f.value()[i] < mu[detail::channel_of(s, i % per)];
        below[i] = lo ? 1.0 : 0.0;
        above[i] = lo ? 0.0 : 1.0;
      }
      Var nb = log_norm_from_sq(sum_rows(square(mask_mul(f, below))), 1e-12);
      Var na = log_norm_from_sq(sum_rows(square(mask_mul(f, above))), 1e-12);
      return sub(nb, na);
    }
    case MethodKind::ILA: {
      Var d = sub(f, tape.constant(need(a.clean_features, "clean_features")));
      return dot(d, need(a.delta_y, "delta_y"));
    }
    case MethodKind::ILApp: {
      Var d = sub(f, tape.constant(need(a.clean_features, "clean_features")));
      return dot(d, need(a.w_star, "w_star"));
    }
    case MethodKind::FIA: return scale(dot(f, need(a.g_bar, "g_bar")), -1.0);
    case MethodKind::NAA: {
      const Tensor& A = need(a.attribution, "attribution");
      return sub(dot(f, detail::positive_part(A, -1.0)), dot(f, detail::positive_part(A, 1.0)));
    }
    default: throw Error("feature_loss: " + to_string(p.kind) + " is not a feature-level method");
  }
}

// ---------------------------------------------------------------------------
// Aggregates

/// Inputs to precompute_aggregates beyond the attacked batch.
struct AggregateInputs {
  Budget budget;                      // reference attack budget (ILA, ILA++)
  std::uint64_t seed = 0;
  std::span<const std::size_t> example_ids;
  const Tensor* stats_batch = nullptr;  // FDA channel statistics
};

/// Per-example ILA++ weights w* = H^T (H H^T + lambda I)^-1 r.
inline std::vector<double> ridge_weights(const std::vector<std::vector<double>>& H, const std::vector<double>& r, double lambda) {
  if (!(lambda > 0)) throw Error("ILA++: lambda_ridge must be positive");
  const auto T = static_cast<Eigen::Index>(H.size());
  const auto F = static_cast<Eigen::Index>(H.front().size());
  Eigen::MatrixXd Hm(T, F);
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index k = 0; k < F; ++k) Hm(t, k) = H[static_cast<std::size_t>(t)][static_cast<std::size_t>(k)];
  Eigen::VectorXd rv = Eigen::Map<const Eigen::VectorXd>(r.data(), T);
  Eigen::MatrixXd G = Hm * Hm.transpose();
  G.diagonal().array() += lambda;
  Eigen::VectorXd c = G.llt().solve(rv);
  Eigen::VectorXd w = Hm.transpose() * c;
  return std::vector<double>(w.data(), w.data() + F);
}

/// Plain I-FGSM (zeros init, no augmentation) used as the ILA reference attack.
/// Returns features and per-example CE at x_1..x_T.
struct ReferenceTrace {
  std::vector<Tensor> features;           // T entries, each [N, ...]
  std::vector<std::vector<double>> loss;  // T entries, each [N]
  Tensor clean_features;
  std::vector<double> clean_loss;
};

inline ReferenceTrace reference_attack(const Model& m, const Tensor& x, std::span<const int> y, const Budget& b,
                                       std::size_t iterations, const std::string& label) {
  ReferenceTrace tr;
  Tensor delta(x.shape(), 0.0);
  for (std::size_t t = 0; t <= iterations; ++t) {
    Tape tape;
    Var d = tape.leaf(delta, t < iterations);
    auto fr = m.forward(tape, to_model_input(m, add(tape.constant(x), d)));
    Var ce = cross_entropy_rows(fr.logits, y);
    Tensor feat = tapped_feature(tape, label).value();
    std::vector<double> l(ce.value().data().begin(), ce.value().data().end());
    if (t == 0) {
      tr.clean_features = feat;
      tr.clean_loss = l;
    } else {
      tr.features.push_back(std::move(feat));
      tr.loss.push_back(std::move(l));
    }
    if (t == iterations) break;
    tape.backward(sum(ce));
    delta += increment(tape.grad(d), b);
    project(delta, b, x);
  }
  return tr;
}

inline Aggregates precompute_aggregates(const MethodParams& p, const Model& m, const Tensor& x, std::span<const int> y,
                                        const AggregateInputs& in) {
  Aggregates a;
  if (!is_feature_method(p.kind)) return a;
  const std::string label = feature_label(p, m.spec());
  const std::size_t N = x.dim(0);
  if (in.example_ids.size() != N) throw Error("precompute_aggregates: example id count does not match batch");
  switch (p.kind) {
    case MethodKind::NRDM: a.clean_features = clean_features(m, x, label); break;
    case MethodKind::TAP: {
      a.clean_features = clean_features(m, x, label);
      a.tap_clean = a.clean_features;
      for (auto& v : a.tap_clean.storage()) v = v == 0 ? 0.0 : std::copysign(std::pow(std::abs(v), p.alpha_tap), v);
      break;
    }
    case MethodKind::FDA: {
      if (!in.stats_batch) throw Error("method FDA: missing aggregate channel_mean (no statistics batch supplied)");
      Tensor fs = clean_features(m, *in.stats_batch, label);
      const Shape& s = fs.shape();
      const std::size_t C = detail::channel_count(s), per = fs.row_size();
      std::vector<double> acc(C, 0.0);
      std::vector<std::size_t> cnt(C, 0);
      for (std::size_t i = 0; i < fs.size(); ++i) {
        const std::size_t ch = detail::channel_of(s, i % per);
        acc[ch] += fs[i];
        ++cnt[ch];
      }
      a.channel_mean = Tensor({C});
      for (std::size_t c = 0; c < C; ++c) a.channel_mean[c] = acc[c] / static_cast<double>(cnt[c]);
      break;
    }
    case MethodKind::ILA:
    case MethodKind::ILApp: {
      const auto tr = reference_attack(m, x, y, in.budget, p.ila_reference_iterations, label);
      a.clean_features = tr.clean_features;
      if (p.kind == MethodKind::ILA) {
        a.delta_y = Tensor(tr.clean_features.shape(), 0.0);
        if (!tr.features.empty())
          for (std::size_t i = 0; i < a.delta_y.size(); ++i) a.delta_y[i] = tr.features.back()[i] - tr.clean_features[i];
        break;
      }
      if (!(p.lambda_ridge > 0)) throw Error("ILA++: lambda_ridge must be positive");
      a.w_star = Tensor(tr.clean_features.shape(), 0.0);
      if (tr.features.empty()) break;
      const std::size_t per = tr.clean_features.row_size();
      for (std::size_t r = 0; r < N; ++r) {
        std::vector<std::vector<double>> H;
        std::vector<double> rv;
        for (std::size_t t = 0; t < tr.features.size(); ++t) {
          std::vector<double> row(per);
          for (std::size_t k = 0; k < per; ++k) row[k] = tr.features[t][r * per + k] - tr.clean_features[r * per + k];
          H.push_back(std::move(row));
          rv.push_back(tr.loss[t][r] - tr.clean_loss[r]);
        }
        const auto w = ridge_weights(H, rv, p.lambda_ridge);
        std::copy(w.begin(), w.end(), a.w_star.ptr() + r * per);
      }
      break;
    }
    case MethodKind::FIA: {
      Tensor acc;
      for (std::size_t k = 0; k < std::max<std::size_t>(p.n_agg, 1); ++k) {
        Tensor xm = x;
        const std::size_t per = x.row_size();
        for (std::size_t r = 0; r < N; ++r) {
          auto rng = make_rng(in.seed, Stream::fia_mask, in.example_ids[r], k);
          for (std::size_t i = 0; i < per; ++i)
            if (!(rng.uniform() < 1.0 - p.drop_prob_fia)) xm[r * per + i] = 0.0;
        }
        Tensor g = feature_logprob_grad(m, xm, y, label).first;
        if (acc.empty()) acc = std::move(g);
        else acc += g;
      }
      const std::size_t per = acc.row_size();
      for (std::size_t r = 0; r < N; ++r) {
        const double nrm = std::max(l2_norm(acc.row(r)), 1e-12);
        for (std::size_t i = 0; i < per; ++i) acc[r * per + i] /= nrm;
      }
      a.g_bar = std::move(acc);
      break;
    }
    case MethodKind::NAA: {
      const std::size_t n = std::max<std::size_t>(p.n_agg, 1);
      Tensor base(x.shape(), 0.0);
      Tensor f_base = clean_features(m, base, label);
      Tensor f_x = clean_features(m, x, label);
      Tensor acc;
      for (std::size_t k = 1; k <= n; ++k) {
        Tensor xk = x;
        xk *= static_cast<double>(k) / static_cast<double>(n);
        Tensor g = feature_logprob_grad(m, xk, y, label).first;
        if (acc.empty()) acc = std::move(g);
        else acc += g;
      }
      a.attribution = Tensor(f_x.shape());
      for (std::size_t i = 0; i < f_x.size(); ++i)
        a.attribution[i] = (f_x[i] - f_base[i]) * (acc[i] / static_cast<double>(n));
      a.clean_features = std::move(f_x);
      break;
    }
    default: break;
  }
  return a;
}

// ---------------------------------------------------------------------------
// Gradient evaluation

/// Per-example objective on one forward pass.
using LossFn = std::function<Var(Tape&, const ForwardResult&, Var delta)>;

struct GradEval {
  Tensor grad;
  std::vector<double> loss;  // per example
};

struct GradSetup {
  const Model* model = nullptr;
  const HookSet* hooks = nullptr;
  bool block_logits = false;
  double input_scale = 1.0;  // TAIG path point
};

/// One forward/backward pass: gradient w.r.t. delta of sum_i loss_i(model(aug(x + delta))).
/// `offset` (may be empty) is added to delta before augmentation without affecting the returned gradient's variable.
inline GradEval single_gradient(const GradSetup& g, const Tensor& x, const Tensor& delta, std::span<const int> y,
                                const AugmentStack& stack, const AugmentContext& ctx, const LossFn& loss) {
  Tape tape(g.hooks ? *g.hooks : HookSet{});
  Var d = tape.leaf(delta, true);
  Var z = apply_stack(stack, x, d, ctx);
  if (g.input_scale != 1.0) z = scale(z, g.input_scale);
  ForwardOptions opt;
  opt.block_logits = g.block_logits;
  auto fr = g.model->forward(tape, to_model_input(*g.model, z), opt);
  Var l = loss(tape, fr, d);
  GradEval out;
  out.loss.assign(l.value().data().begin(), l.value().data().end());
  (void)y;
  tape.backward(sum(l));
  out.grad = tape.grad(d);
  return out;
}

/// Mean over n_copies of single-pass gradients with independent augmentation draws.
inline GradEval averaged_gradient(const GradSetup& g, const Tensor& x, const Tensor& delta, std::span<const int> y,
                                  std::size_t n_copies, const AugmentStack& stack, const AugmentContext& ctx,
                                  const LossFn& loss) {
  if (n_copies < 1) throw Error("averaged_gradient: n_copies must be >= 1");
  GradEval acc;
  for (std::size_t k = 0; k < n_copies; ++k) {
    AugmentContext c = ctx;
    c.copy = ctx.copy * 1000003 + k;
    GradEval e = single_gradient(g, x, delta, y, stack, c, loss);
    if (k == 0) {
      acc = std::move(e);
      continue;
    }
    acc.grad += e.grad;
    for (std::size_t i = 0; i < acc.loss.size(); ++i) acc.loss[i] += e.loss[i];
  }
  if (n_copies > 1) {
    const double inv = static_cast<double>(n_copies);
    for (auto& v : acc.grad.storage()) v /= inv;
    for (auto& v : acc.loss) v /= inv;
  }
  return acc;
}

/// Cross-entropy per example; SE averages it over every block's class-token logits.
inline LossFn output_loss(MethodKind kind, std::span<const int> y) {
  if (kind == MethodKind::SE)
    return [y](Tape&, const ForwardResult& fr, Var) {
      if (fr.block_logits.empty()) throw Error("method SE: substitute produced no block logits");
      Var acc = cross_entropy_rows(fr.block_logits[0], y);
      for (std::size_t i = 1; i < fr.block_logits.size(); ++i) acc = add(acc, cross_entropy_rows(fr.block_logits[i], y));
      return scale(acc, 1.0 / static_cast<double>(fr.block_logits.size()));
    };
  return [y](Tape&, const ForwardResult& fr, Var) { return cross_entropy_rows(fr.logits, y); };
}

/// Feature-level loss bound to its aggregates and label.
inline LossFn method_loss(const MethodParams& p, const Aggregates& a, const ModelSpec& s, std::span<const int> y) {
  if (!is_feature_method(p.kind)) return output_loss(p.kind, y);
  const std::string label = feature_label(p, s);
  return [p, a, label, y](Tape& tape, const ForwardResult& fr, Var delta) {
    return feature_loss(p, a, tapped_feature(tape, label), delta, fr.logits, y);
  };
}

/// Cross-iteration state of VT, one row per example.
struct VtState {
  Tensor v;
};

/// Output-space estimators (VT, TAIG, SE and the averaged-copy baselines). Falls back
/// to a single pass for other kinds.
inline GradEval output_space_gradient(const MethodParams& p, const GradSetup& g, const Tensor& x, const Tensor& delta,
                                      std::span<const int> y, const AugmentStack& stack, const AugmentContext& ctx,
                                      double epsilon, VtState* vt) {
  const LossFn ce = output_loss(MethodKind::none, y);
  auto with = [&](AugmentKind k) {
    std::vector<AugmentKind> kinds = stack.kinds;
    if (!stack.has(k)) kinds.push_back(k);
    return AugmentStack(std::move(kinds), stack.params, stack.stream_key);
  };
  switch (p.kind) {
    case MethodKind::SE: {
      if (!has_label_kind(g.model->spec(), LabelKind::attention))
        throw Error("method SE is not applicable to " + to_string(g.model->spec().arch) + ": needs a transformer substitute");
      GradSetup gs = g;
      gs.block_logits = true;
      return single_gradient(gs, x, delta, y, stack, ctx, output_loss(MethodKind::SE, y));
    }
    case MethodKind::VT: {
      GradEval e = single_gradient(g, x, delta, y, stack, ctx, ce);
      if (!vt) throw Error("method VT: missing variance state");
      if (vt->v.empty()) vt->v = Tensor(delta.shape(), 0.0);
      GradEval out;
      out.loss = e.loss;
      out.grad = e.grad;
      out.grad += vt->v;
      if (p.n_agg == 0) return out;
      Tensor mean(delta.shape(), 0.0);
      const std::size_t per = delta.row_size();
      const double amp = p.beta_vt * epsilon;
      for (std::size_t k = 0; k < p.n_agg; ++k) {
        Tensor dk = delta;
        for (std::size_t r = 0; r < delta.dim(0); ++r) {
          auto rng = make_rng(ctx.seed, Stream::vt_noise, ctx.example_ids[r], ctx.iteration, k);
          for (std::size_t i = 0; i < per; ++i) dk[r * per + i] += rng.uniform(-amp, amp);
        }
        AugmentContext c = ctx;
        c.copy = ctx.copy * 1000003 + k + 1;
        mean += single_gradient(g, x, dk, y, stack, c, ce).grad;
      }
      for (std::size_t i = 0; i < mean.size(); ++i) vt->v[i] = mean[i] / static_cast<double>(p.n_agg) - e.grad[i];
      return out;
    }
    case MethodKind::TAIG: {
      const std::size_t n = std::max<std::size_t>(p.n_agg, 1);
      const AugmentStack st = p.taig_noise ? with(AugmentKind::UN) : stack;
      GradEval acc;
      for (std::size_t k = 1; k <= n; ++k) {
        GradSetup gs = g;
        gs.input_scale = static_cast<double>(k) / static_cast<double>(n);
        AugmentContext c = ctx;
        c.copy = ctx.copy * 1000003 + k;
        GradEval e = single_gradient(gs, x, delta, y, st, c, ce);
        if (k == 1) {
          acc = std::move(e);
          continue;
        }
        acc.grad += e.grad;
        for (std::size_t i = 0; i < acc.loss.size(); ++i) acc.loss[i] = e.loss[i];
      }
      if (n > 1)
        for (auto& v : acc.grad.storage()) v /= static_cast<double>(n);
      return acc;
    }
    case MethodKind::VT_baseline: return averaged_gradient(g, x, delta, y, p.n_agg + 1, with(AugmentKind::UN), ctx, ce);
    case MethodKind::IR_baseline:
      return averaged_gradient(g, x, delta, y, std::max<std::size_t>(p.n_agg, 1), with(AugmentKind::DP), ctx, ce);
    case MethodKind::TAIG_baseline: {
      std::vector<AugmentKind> kinds = stack.kinds;
      std::erase(kinds, AugmentKind::ADMIX);
      for (auto k : {AugmentKind::UN, AugmentKind::SI})
        if (std::find(kinds.begin(), kinds.end(), k) == kinds.end()) kinds.push_back(k);
      return averaged_gradient(g, x, delta, y, std::max<std::size_t>(p.n_agg, 1),
                               AugmentStack(std::move(kinds), stack.params, stack.stream_key), ctx, ce);
    }
    default: return single_gradient(g, x, delta, y, stack, ctx, ce);
  }
}

}  // namespace tabench
