#pragma once

// Input augmentations applied to the perturbed image once per attack iteration.
//
// Composition for a stack S over clean image x and perturbation d:
//   base = DP in S ? d * M : d
//   z    = x + base;  UN in S ? clip(z + u, 0, 1) : z;  empty S ? clip(z, 0, 1)
//   z    = DI2(z) -> TI(z) -> SI(z) | ADMIX(z)
// Masks, offsets, exponents and mixing partners are constants for autodiff.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tabench/image_ops.hpp"
#include "tabench/rng.hpp"

namespace tabench {

enum class AugmentKind { UN, DP, DI2, TI, SI, ADMIX };

inline constexpr std::array<AugmentKind, 6> kAugmentOrder{AugmentKind::UN, AugmentKind::DP, AugmentKind::DI2,
                                                         AugmentKind::TI, AugmentKind::SI, AugmentKind::ADMIX};

inline std::string to_string(AugmentKind k) {
  switch (k) {
    case AugmentKind::UN: return "UN";
    case AugmentKind::DP: return "DP";
    case AugmentKind::DI2: return "DI2";
    case AugmentKind::TI: return "TI";
    case AugmentKind::SI: return "SI";
    case AugmentKind::ADMIX: return "Admix";
  }
  return "?";
}

inline AugmentKind augment_from_string(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::toupper(c); });
  for (auto k : kAugmentOrder) {
    std::string n = to_string(k);
    std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::toupper(c); });
    if (n == s) return k;
  }
  throw Error("augment: unknown kind '" + s + "'");
}

inline Stream augment_stream(AugmentKind k) {
  return static_cast<Stream>(static_cast<std::uint64_t>(Stream::augment_un) + static_cast<std::uint64_t>(k));
}

/// Defaults are for the 40x40 canvas.
struct AugmentParams {
  std::size_t dp_patch = 4;
  double dp_drop = 0.5;
  std::size_t di2_min_resize = 33;
  double di2_apply_prob = 0.7;
  int ti_max_shift = 1;
  int si_max_exponent = 4;  // scale 2^-i, i ~ U{0..si_max_exponent}
  double admix_eta = 0.2;
};

struct AugmentStack {
  std::vector<AugmentKind> kinds;  // kept in canonical order
  AugmentParams params;
  std::uint64_t stream_key = 0;

  AugmentStack() = default;
  explicit AugmentStack(std::vector<AugmentKind> k, AugmentParams p = {}, std::uint64_t key = 0)
      : kinds(std::move(k)), params(p), stream_key(key) {
    validate();
  }

  bool has(AugmentKind k) const { return std::find(kinds.begin(), kinds.end(), k) != kinds.end(); }
  bool empty() const noexcept { return kinds.empty(); }

  void validate() {
    for (std::size_t i = 0; i < kinds.size(); ++i)
      for (std::size_t j = i + 1; j < kinds.size(); ++j)
        if (kinds[i] == kinds[j]) throw Error("augment: " + to_string(kinds[i]) + " appears twice");
    if (has(AugmentKind::SI) && has(AugmentKind::ADMIX)) throw Error("augment: SI and Admix are exclusive (Admix includes SI)");
    std::sort(kinds.begin(), kinds.end());
    if (params.dp_drop < 0 || params.dp_drop > 1) throw Error("augment: dp_drop outside [0,1]");
    if (params.di2_apply_prob < 0 || params.di2_apply_prob > 1) throw Error("augment: di2_apply_prob outside [0,1]");
    if (params.ti_max_shift < 0 || params.si_max_exponent < 0) throw Error("augment: negative range");
    if (params.dp_patch == 0 || params.di2_min_resize == 0) throw Error("augment: zero size parameter");
  }

  /// "UN-DP-DI2" style prefix; empty for no augmentation.
  std::string name() const {
    std::string s;
    for (auto k : kinds) s += (s.empty() ? "" : "-") + to_string(k);
    return s;
  }
};

inline void to_json(nlohmann::json& j, const AugmentParams& p) {
  j = nlohmann::json{{"dp_patch", p.dp_patch},         {"dp_drop", p.dp_drop},
                     {"di2_min_resize", p.di2_min_resize}, {"di2_apply_prob", p.di2_apply_prob},
                     {"ti_max_shift", p.ti_max_shift}, {"si_max_exponent", p.si_max_exponent},
                     {"admix_eta", p.admix_eta}};
}

inline void from_json(const nlohmann::json& j, AugmentParams& p) {
  p.dp_patch = j.value("dp_patch", p.dp_patch);
  p.dp_drop = j.value("dp_drop", p.dp_drop);
  p.di2_min_resize = j.value("di2_min_resize", p.di2_min_resize);
  p.di2_apply_prob = j.value("di2_apply_prob", p.di2_apply_prob);
  p.ti_max_shift = j.value("ti_max_shift", p.ti_max_shift);
  p.si_max_exponent = j.value("si_max_exponent", p.si_max_exponent);
  p.admix_eta = j.value("admix_eta", p.admix_eta);
}

inline void to_json(nlohmann::json& j, const AugmentStack& s) {
  std::vector<std::string> k;
  for (auto a : s.kinds) k.push_back(to_string(a));
  j = nlohmann::json{{"kinds", k}, {"params", s.params}, {"stream_key", s.stream_key}};
}

inline void from_json(const nlohmann::json& j, AugmentStack& s) {
  std::vector<AugmentKind> kinds;
  for (const auto& n : j.value("kinds", std::vector<std::string>{})) kinds.push_back(augment_from_string(n));
  AugmentParams p;
  if (j.contains("params")) p = j.at("params").get<AugmentParams>();
  s = AugmentStack(std::move(kinds), p, j.value("stream_key", std::uint64_t{0}));
}

/// Where the random draws for one augmented copy come from. Draws for row r are
/// keyed by (seed ^ stack key, kind, example_ids[r], iteration, copy).
struct AugmentContext {
  std::uint64_t seed = 0;
  std::span<const std::size_t> example_ids;
  std::size_t iteration = 0;
  std::size_t copy = 0;
  double un_amplitude = 0.0;       // eps for l_inf, eps / sqrt(H W) for l_2
  const Tensor* pool = nullptr;    // clean images (Admix partners)
  std::span<const std::size_t> pool_rows;  // row of each example in pool; defaults to example_ids
};

inline double un_amplitude(bool l2, double eps, std::size_t H, std::size_t W) {
  return l2 ? eps / std::sqrt(static_cast<double>(H * W)) : eps;
}

namespace detail {

inline CounterRng augment_rng(const AugmentStack& s, const AugmentContext& c, AugmentKind k, std::size_t row) {
  return make_rng(c.seed ^ mix64(s.stream_key), augment_stream(k), c.example_ids[row], c.iteration, c.copy);
}

inline Tensor un_noise(const AugmentStack& s, const AugmentContext& c, const Shape& shape) {
  Tensor u(shape);
  const std::size_t per = u.row_size();
  for (std::size_t r = 0; r < shape[0]; ++r) {
    auto rng = augment_rng(s, c, AugmentKind::UN, r);
    for (std::size_t i = 0; i < per; ++i) u[r * per + i] = rng.uniform(-c.un_amplitude, c.un_amplitude);
  }
  return u;
}

inline Tensor dp_mask(const AugmentStack& s, const AugmentContext& c, const Shape& shape) {
  const std::size_t P = s.params.dp_patch, C = shape[1], H = shape[2], W = shape[3];
  if (H % P || W % P)
    throw Error("augment: DP patch size " + std::to_string(P) + " does not divide " + std::to_string(H) + "x" + std::to_string(W));
  Tensor m(shape);
  const std::size_t gh = H / P, gw = W / P;
  for (std::size_t r = 0; r < shape[0]; ++r) {
    auto rng = augment_rng(s, c, AugmentKind::DP, r);
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px) {
        const double keep = rng.uniform() < 1.0 - s.params.dp_drop ? 1.0 : 0.0;
        for (std::size_t ch = 0; ch < C; ++ch)
          for (std::size_t y = py * P; y < (py + 1) * P; ++y)
            for (std::size_t x = px * P; x < (px + 1) * P; ++x) m[((r * C + ch) * H + y) * W + x] = keep;
      }
  }
  return m;
}

}  // namespace detail

/// One augmented copy of x + delta for every row, differentiable w.r.t. delta.
/// x is [N,C,H,W]; delta is a tape variable of the same shape.
inline Var apply_stack(const AugmentStack& s, const Tensor& x, Var delta, const AugmentContext& c) {
  if (x.shape() != delta.shape()) shape_mismatch("apply_stack", x.shape(), delta.shape());
  if (x.rank() != 4) throw ShapeError("apply_stack: expected NCHW, got " + to_string(x.shape()));
  if (c.example_ids.size() != x.dim(0)) throw Error("apply_stack: example id count does not match batch");
  Tape& tape = *delta.tape;
  const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3);

  Var base = delta;
  if (s.has(AugmentKind::DP)) base = mask_mul(base, detail::dp_mask(s, c, x.shape()));
  Var z = add(tape.constant(x), base);
  if (s.has(AugmentKind::UN))
    z = clip(add(z, tape.constant(detail::un_noise(s, c, x.shape()))), 0.0, 1.0);
  else if (s.empty())
    return clip(z, 0.0, 1.0);

  if (s.has(AugmentKind::DI2)) {
    const std::size_t lo = std::min(s.params.di2_min_resize, std::min(H, W));
    std::vector<Placement> where(N);
    for (std::size_t r = 0; r < N; ++r) {
      auto rng = detail::augment_rng(s, c, AugmentKind::DI2, r);
      if (!rng.bernoulli(s.params.di2_apply_prob)) {
        where[r] = {H, W, 0, 0};
        continue;
      }
      // Square resize r x r; the same side is used for both axes.
      const auto side = static_cast<std::size_t>(rng.uniform_int(static_cast<long>(lo), static_cast<long>(std::min(H, W))));
      const auto top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(H - side)));
      const auto left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(W - side)));
      where[r] = {side, side, top, left};
    }
    z = resize_place(z, std::move(where), H, W);
  }
  if (s.has(AugmentKind::TI)) {
    std::vector<int> dy(N), dx(N);
    for (std::size_t r = 0; r < N; ++r) {
      auto rng = detail::augment_rng(s, c, AugmentKind::TI, r);
      dx[r] = static_cast<int>(rng.uniform_int(-s.params.ti_max_shift, s.params.ti_max_shift));
      dy[r] = static_cast<int>(rng.uniform_int(-s.params.ti_max_shift, s.params.ti_max_shift));
    }
    z = translate(z, std::move(dy), std::move(dx));
  }
  const bool si = s.has(AugmentKind::SI), admix = s.has(AugmentKind::ADMIX);
  if (si || admix) {
    const AugmentKind k = si ? AugmentKind::SI : AugmentKind::ADMIX;
    std::vector<double> factor(N);
    Tensor partner(x.shape());
    for (std::size_t r = 0; r < N; ++r) {
      auto rng = detail::augment_rng(s, c, k, r);
      factor[r] = std::ldexp(1.0, -static_cast<int>(rng.uniform_int(0, s.params.si_max_exponent)));
      if (admix) {
        if (!c.pool || c.pool->dim(0) < 2) throw Error("augment: Admix needs a batch of at least 2 images");
        const std::size_t P = c.pool->dim(0);
        std::size_t other = static_cast<std::size_t>(rng.below(P - 1));
        const std::size_t self = c.pool_rows.empty() ? c.example_ids[r] : c.pool_rows[r];
        if (other >= self) ++other;
        const auto src = c.pool->row(other);
        if (src.size() != partner.row_size()) throw ShapeError("augment: Admix pool image shape differs");
        std::copy(src.begin(), src.end(), partner.row(r).begin());
      }
    }
    z = scale_rows(z, factor);
    if (admix) {
      partner *= s.params.admix_eta;
      z = add(z, tape.constant(partner));
    }
  }
  return z;
}

/// Tensor-level single transform, mainly for inspection and tests.
inline Tensor augment_one(AugmentKind kind, const Tensor& x, const Tensor& delta, const AugmentParams& params,
                          const AugmentContext& c) {
  Tape tape;
  AugmentStack s({kind}, params);
  return apply_stack(s, x, tape.constant(delta), c).value();
}

}  // namespace tabench
