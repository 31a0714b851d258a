#pragma once

// Shared test helpers: random points and the primitive finite-difference table.

#include <algorithm>
#include <functional>
#include <vector>

#include "tabench/gradcheck.hpp"
#include "tabench/image_ops.hpp"
#include "tabench/model.hpp"

namespace tabench::testing_support {

inline Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  CounterRng rng{seed, 77};
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so ReLU-like kinks stay further than 10h away.
inline Tensor away_from_zero(Shape s, std::uint64_t seed) {
  Tensor t = random_tensor(std::move(s), seed, 0.1, 1.0);
  CounterRng rng{seed, 78};
  for (auto& v : t.storage())
    if (rng.bernoulli(0.5)) v = -v;
  return t;
}

// Every primitive at 10 random non-degenerate points.
struct PrimitiveCase {
  const char* name;
  std::function<std::vector<Tensor>(std::uint64_t)> point;
  GraphFn fn;
};

inline std::vector<PrimitiveCase> primitive_cases() {
  using V = std::vector<Tensor>;
  std::vector<PrimitiveCase> c;
  c.push_back({"add", [](auto s) { return V{random_tensor({3, 4}, s), random_tensor({3, 4}, s + 1)}; },
               [](Tape&, std::span<const Var> in) { return add(in[0], in[1]); }});
  c.push_back({"sub", [](auto s) { return V{random_tensor({3, 4}, s), random_tensor({3, 4}, s + 1)}; },
               [](Tape&, std::span<const Var> in) { return sub(in[0], in[1]); }});
  c.push_back({"mul", [](auto s) { return V{random_tensor({3, 4}, s), random_tensor({3, 4}, s + 1)}; },
               [](Tape&, std::span<const Var> in) { return mul(in[0], in[1]); }});
  c.push_back({"scalar-mul", [](auto s) { return V{random_tensor({6}, s)}; },
               [](Tape&, std::span<const Var> in) { return scale(in[0], -1.7); }});
  c.push_back({"matmul", [](auto s) { return V{random_tensor({3, 4}, s), random_tensor({4, 2}, s + 1)}; },
               [](Tape&, std::span<const Var> in) { return matmul(in[0], in[1]); }});
  c.push_back({"bmm", [](auto s) { return V{random_tensor({2, 3, 4}, s), random_tensor({2, 4, 2}, s + 1)}; },
               [](Tape&, std::span<const Var> in) { return bmm(in[0], in[1]); }});
  c.push_back({"linear", [](auto s) { return V{random_tensor({2, 3, 4}, s), random_tensor({4, 5}, s + 1), random_tensor({5}, s + 2)}; },
               [](Tape&, std::span<const Var> in) { return linear(in[0], in[1], in[2]); }});
  c.push_back({"conv2d-stride-pad", [](auto s) { return V{random_tensor({2, 2, 7, 7}, s), random_tensor({3, 2, 3, 3}, s + 1), random_tensor({3}, s + 2)}; },
               [](Tape&, std::span<const Var> in) { return conv2d(in[0], in[1], in[2], 2, 1); }});
  c.push_back({"relu", [](auto s) { return V{away_from_zero({10}, s)}; },
               [](Tape&, std::span<const Var> in) { return relu(in[0]); }});
  c.push_back({"gelu", [](auto s) { return V{random_tensor({10}, s, -3, 3)}; },
               [](Tape&, std::span<const Var> in) { return gelu(in[0]); }});
  c.push_back({"softplus", [](auto s) { return V{random_tensor({10}, s, -3, 3)}; },
               [](Tape&, std::span<const Var> in) { return softplus(in[0]); }});
  c.push_back({"exp", [](auto s) { return V{random_tensor({10}, s)}; },
               [](Tape&, std::span<const Var> in) { return exp(in[0]); }});
  c.push_back({"log", [](auto s) { return V{random_tensor({10}, s, 0.5, 2.0)}; },
               [](Tape&, std::span<const Var> in) { return log(in[0]); }});
  c.push_back({"mean", [](auto s) { return V{random_tensor({3, 5}, s)}; },
               [](Tape&, std::span<const Var> in) { return mean(in[0]); }});
  c.push_back({"sum", [](auto s) { return V{random_tensor({3, 5}, s)}; },
               [](Tape&, std::span<const Var> in) { return sum(in[0]); }});
  c.push_back({"max-pool", [](auto s) { return V{random_tensor({2, 2, 6, 6}, s)}; },
               [](Tape&, std::span<const Var> in) { return max_pool2d(in[0]); }});
  c.push_back({"layer-norm", [](auto s) { return V{random_tensor({3, 6}, s), random_tensor({6}, s + 1), random_tensor({6}, s + 2)}; },
               [](Tape&, std::span<const Var> in) { return layer_norm(in[0], in[1], in[2]); }});
  c.push_back({"softmax", [](auto s) { return V{random_tensor({3, 5}, s, -2, 2)}; },
               [](Tape&, std::span<const Var> in) { return softmax(in[0]); }});
  c.push_back({"log-softmax", [](auto s) { return V{random_tensor({3, 5}, s, -2, 2)}; },
               [](Tape&, std::span<const Var> in) { return log_softmax(in[0]); }});
  c.push_back({"bilinear-resize-down", [](auto s) { return V{random_tensor({1, 2, 9, 7}, s)}; },
               [](Tape&, std::span<const Var> in) { return bilinear_resize(in[0], 5, 6); }});
  c.push_back({"bilinear-resize-up", [](auto s) { return V{random_tensor({1, 1, 4, 5}, s)}; },
               [](Tape&, std::span<const Var> in) { return bilinear_resize(in[0], 7, 9); }});
  c.push_back({"pad", [](auto s) { return V{random_tensor({2, 1, 3, 3}, s)}; },
               [](Tape&, std::span<const Var> in) { return pad(in[0], 1, 2, 5, 6); }});
  c.push_back({"translate", [](auto s) { return V{random_tensor({2, 1, 5, 5}, s)}; },
               [](Tape&, std::span<const Var> in) { return translate(in[0], {1, -2}, {-1, 3}); }});
  c.push_back({"resize-place", [](auto s) { return V{random_tensor({2, 1, 6, 6}, s)}; },
               [](Tape&, std::span<const Var> in) {
                 return resize_place(in[0], {{4, 4, 1, 2}, {6, 6, 0, 0}}, 6, 6);
               }});
  c.push_back({"select", [](auto s) { return V{random_tensor({8}, s), random_tensor({8}, s + 1)}; },
               [](Tape&, std::span<const Var> in) {
                 return select(Tensor({8}, {1, 0, 0, 1, 1, 0, 1, 0}), in[0], in[1]);
               }});
  c.push_back({"mask-mul", [](auto s) { return V{random_tensor({8}, s)}; },
               [](Tape&, std::span<const Var> in) { return mask_mul(in[0], Tensor({8}, {1, 0, 0, 1, 1, 0, 1, 0})); }});
  c.push_back({"permute", [](auto s) { return V{random_tensor({2, 3, 4}, s)}; },
               [](Tape&, std::span<const Var> in) { return permute(in[0], {2, 0, 1}); }});
  c.push_back({"slice-concat", [](auto s) { return V{random_tensor({2, 5, 3}, s)}; },
               [](Tape&, std::span<const Var> in) {
                 return concat(slice(in[0], 1, 3, 5), slice(in[0], 1, 0, 2), 1);
               }});
  c.push_back({"avg-pool-same", [](auto s) { return V{random_tensor({1, 2, 5, 5}, s)}; },
               [](Tape&, std::span<const Var> in) { return avg_pool_same(in[0], 3); }});
  c.push_back({"global-avg-pool", [](auto s) { return V{random_tensor({2, 3, 4, 4}, s)}; },
               [](Tape&, std::span<const Var> in) { return global_avg_pool(in[0]); }});
  c.push_back({"broadcast", [](auto s) { return V{random_tensor({2, 3, 4}, s), random_tensor({3, 4}, s + 1), random_tensor({4}, s + 2)}; },
               [](Tape&, std::span<const Var> in) { return mul_broadcast(add_broadcast(in[0], in[1]), in[2]); }});
  c.push_back({"signed-pow", [](auto s) { return V{away_from_zero({8}, s)}; },
               [](Tape&, std::span<const Var> in) { return signed_pow(in[0], 0.5); }});
  c.push_back({"abs-sqrt-lognorm", [](auto s) { return V{away_from_zero({3, 4}, s)}; },
               [](Tape&, std::span<const Var> in) {
                 return add(sqrt_floor(sum_rows(square(in[0]))), log_norm_from_sq(sum_rows(abs(in[0]))));
               }});
  c.push_back({"add-scalar", [](auto s) { return V{random_tensor({6}, s)}; },
               [](Tape&, std::span<const Var> in) { return add_scalar(in[0], 0.3); }});
  c.push_back({"square", [](auto s) { return V{random_tensor({6}, s)}; },
               [](Tape&, std::span<const Var> in) { return square(in[0]); }});
  c.push_back({"clip", [](auto s) { return V{away_from_zero({10}, s)}; },
               [](Tape&, std::span<const Var> in) { return clip(in[0], -0.05, 0.05); }});
  c.push_back({"scale-rows", [](auto s) { return V{random_tensor({3, 2, 2}, s)}; },
               [](Tape&, std::span<const Var> in) { return scale_rows(in[0], {1.0, 0.5, 0.25}); }});
  c.push_back({"reshape", [](auto s) { return V{random_tensor({2, 6}, s)}; },
               [](Tape&, std::span<const Var> in) { return reshape(in[0], {3, 4}); }});
  c.push_back({"cross-entropy", [](auto s) { return V{random_tensor({4, 5}, s, -3, 3)}; },
               [](Tape&, std::span<const Var> in) {
                 static const int y[] = {0, 3, 4, 1};
                 return add(sum(cross_entropy_rows(in[0], y)), scale(cross_entropy(in[0], y), 2.0));
               }});
  c.push_back({"label-points", [](auto s) { return V{random_tensor({2, 4}, s)}; },
               [](Tape&, std::span<const Var> in) {
                 return attention_point(feature_point(branch_point(in[0], "b"), "f"), "a");
               }});
  return c;
}


/// Small-input instance of an architecture for finite-difference checks of the whole model.
inline Model small_model(ArchKind a, std::uint64_t seed = 3) {
  ModelSpec s = ModelSpec::defaults(a);
  s.input_height = s.input_width = 8;
  s.width = a == ArchKind::toy_cnn || a == ArchKind::toy_resnet ? 4 : 8;
  s.depth = 2;
  return build_model(s, seed);
}

/// logits of the full model as a function of its input.
inline GraphFn model_fn(const Model& m) {
  return [m](Tape& tape, std::span<const Var> in) { return m.forward(tape, in[0]).logits; };
}

inline Tensor model_point(const Model& m, std::uint64_t seed) {
  const auto& s = m.spec();
  return random_tensor({2, s.input_channels, s.input_height, s.input_width}, seed, 0.0, 1.0);
}

// Central differences at h = 1e-5 carry up to ~2e-10 absolute rounding noise on these
// graphs, so a coordinate with a tiny |grad| cannot meet a relative bound. Points with
// any coordinate below `floor` are skipped.
inline std::vector<Tensor> nondegenerate_points(const GraphFn& f, const std::function<Tensor(std::uint64_t)>& draw,
                                                std::size_t n, std::uint64_t first_seed, double floor = 1e-4,
                                                const std::function<bool(const Tensor&)>& accept = {}) {
  std::vector<Tensor> out;
  for (std::uint64_t seed = first_seed; out.size() < n; ++seed) {
    if (seed > first_seed + 20 * n) throw Error("nondegenerate_points: too few usable points");
    Tensor x = draw(seed);
    Tape tape;
    Var v = tape.leaf(x, true);
    Var y = f(tape, std::span<const Var>(&v, 1));
    tape.backward(y, detail::projection_weights(y.shape()));
    const Tensor g = tape.grad(v);
    if (std::all_of(g.storage().begin(), g.storage().end(), [&](double d) { return std::abs(d) >= floor; }) &&
        (!accept || accept(x)))
      out.push_back(std::move(x));
  }
  return out;
}

// cnn and resnet are piecewise linear in the input, so along any coordinate the forward
// and backward one-sided differences agree to rounding unless a ReLU or max-pool switch
// lies within h. Only function values are used, never the analytic gradient.
inline bool kink_free(const GraphFn& f, const Tensor& x, double h = 1e-5) {
  std::vector<Tensor> p{x};
  const double f0 = detail::evaluate_scalar(f, p);
  for (std::size_t i = 0; i < x.size(); ++i) {
    p[0][i] = x[i] + h;
    const double fp = detail::evaluate_scalar(f, p);
    p[0][i] = x[i] - h;
    const double fm = detail::evaluate_scalar(f, p);
    p[0][i] = x[i];
    const double fwd = (fp - f0) / h, bwd = (f0 - fm) / h;
    if (std::abs(fwd - bwd) > 1e-7 * std::max(std::abs(fwd), std::abs(bwd)) + 1e-9) return false;
  }
  return true;
}

inline std::vector<Tensor> model_points(const Model& m, std::size_t n, std::uint64_t first_seed) {
  const bool piecewise_linear = m.spec().arch == ArchKind::toy_cnn || m.spec().arch == ArchKind::toy_resnet;
  const GraphFn f = model_fn(m);
  // 3e-4 keeps the rounding noise near 5e-7 relative, inside the 1e-6 bound.
  return nondegenerate_points(
      f, [&](std::uint64_t s) { return model_point(m, s); }, n, first_seed, 3e-4,
      [&](const Tensor& x) { return !piecewise_linear || kink_free(f, x); });
}

inline constexpr ArchKind kArchs[] = {ArchKind::toy_cnn, ArchKind::toy_resnet, ArchKind::toy_vit, ArchKind::toy_mixer};

}  // namespace tabench::testing_support
