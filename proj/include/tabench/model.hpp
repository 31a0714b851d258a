#pragma once

// Toy classifier zoo: a VGG-like CNN, a ResNet-like network, a small ViT and
// an MLP-Mixer, all operating on 3 x H x W inputs in [0, 1].

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "tabench/image_ops.hpp"
#include "tabench/ops.hpp"
#include "tabench/rng.hpp"

namespace tabench {

enum class ArchKind { toy_cnn, toy_resnet, toy_vit, toy_mixer };

inline std::string to_string(ArchKind a) {
  switch (a) {
    case ArchKind::toy_cnn: return "toy_cnn";
    case ArchKind::toy_resnet: return "toy_resnet";
    case ArchKind::toy_vit: return "toy_vit";
    case ArchKind::toy_mixer: return "toy_mixer";
  }
  return "?";
}

inline ArchKind arch_from_string(const std::string& s) {
  for (auto a : {ArchKind::toy_cnn, ArchKind::toy_resnet, ArchKind::toy_vit, ArchKind::toy_mixer})
    if (to_string(a) == s) return a;
  throw Error("model: unsupported arch_kind '" + s + "'");
}

struct ModelSpec {
  ArchKind arch = ArchKind::toy_cnn;
  std::size_t input_channels = 3;
  std::size_t input_height = 32;
  std::size_t input_width = 32;
  std::size_t num_classes = 8;
  std::size_t width = 16;  // conv channels (cnn/resnet) or embedding dim (vit/mixer)
  std::size_t depth = 3;

  static ModelSpec defaults(ArchKind a) {
    ModelSpec s;
    s.arch = a;
    s.width = (a == ArchKind::toy_vit || a == ArchKind::toy_mixer) ? 48 : 16;
    return s;
  }

  std::vector<LayerLabel> layer_labels() const;
  std::vector<std::string> feature_labels() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"arch", to_string(s.arch)},
                     {"input_channels", s.input_channels},
                     {"input_height", s.input_height},
                     {"input_width", s.input_width},
                     {"num_classes", s.num_classes},
                     {"width", s.width},
                     {"depth", s.depth}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  s = ModelSpec::defaults(arch_from_string(j.at("arch").get<std::string>()));
  s.input_channels = j.value("input_channels", s.input_channels);
  s.input_height = j.value("input_height", s.input_height);
  s.input_width = j.value("input_width", s.input_width);
  s.num_classes = j.value("num_classes", s.num_classes);
  s.width = j.value("width", s.width);
  s.depth = j.value("depth", s.depth);
}

inline std::vector<LayerLabel> ModelSpec::layer_labels() const {
  std::vector<LayerLabel> out;
  const int d = static_cast<int>(depth);
  auto b = [](int i) { return std::to_string(i); };
  switch (arch) {
    case ArchKind::toy_cnn:
      for (int i = 1; i <= d; ++i) {
        out.push_back({"block" + b(i) + ".relu", LabelKind::relu, i});
        out.push_back({"block" + b(i) + ".out", LabelKind::feature, i});
      }
      break;
    case ArchKind::toy_resnet:
      out.push_back({"stem.relu", LabelKind::relu, 0});
      for (int i = 1; i <= d; ++i) {
        out.push_back({"block" + b(i) + ".relu1", LabelKind::relu, i});
        out.push_back({"block" + b(i) + ".skip", LabelKind::skip, i});
        out.push_back({"block" + b(i) + ".relu", LabelKind::relu, i});
        out.push_back({"block" + b(i) + ".out", LabelKind::feature, i});
      }
      break;
    case ArchKind::toy_vit:
      for (int i = 1; i <= d; ++i) {
        out.push_back({"vit.attn" + b(i) + ".weights", LabelKind::attention, i});
        out.push_back({"vit.attn" + b(i) + ".skip", LabelKind::skip, i});
        out.push_back({"vit.mlp" + b(i) + ".skip", LabelKind::skip, i});
        out.push_back({"vit.block" + b(i) + ".out", LabelKind::feature, i});
      }
      break;
    case ArchKind::toy_mixer:
      for (int i = 1; i <= d; ++i) {
        out.push_back({"mixer.token" + b(i) + ".skip", LabelKind::skip, i});
        out.push_back({"mixer.channel" + b(i) + ".skip", LabelKind::skip, i});
        out.push_back({"mixer.block" + b(i) + ".out", LabelKind::feature, i});
      }
      break;
  }
  return out;
}

/// Feature (capture) labels in block order; a method's layer_index is 1-based into this list.
inline std::vector<std::string> ModelSpec::feature_labels() const {
  std::vector<std::string> out;
  for (const auto& l : layer_labels())
    if (l.kind == LabelKind::feature) out.push_back(l.name);
  return out;
}

struct ParamInfo {
  std::string name;
  Shape shape;
  std::size_t offset;
  std::size_t fan_in;  // 0 = constant init
  double fill = 0.0;   // value for constant init
};

namespace detail {

inline constexpr std::size_t kPatch = 4;

class LayoutBuilder {
 public:
  void add(std::string name, Shape shape, std::size_t fan_in, double fill = 0.0) {
    const std::size_t n = numel(shape);
    params.push_back({std::move(name), std::move(shape), total, fan_in, fill});
    total += n;
  }
  std::vector<ParamInfo> params;
  std::size_t total = 0;
};

inline void validate(const ModelSpec& s) {
  if (s.input_channels == 0 || s.input_height == 0 || s.input_width == 0 || s.num_classes < 2 || s.width == 0)
    throw Error("model: invalid spec dimensions");
  switch (s.arch) {
    case ArchKind::toy_cnn:
    case ArchKind::toy_resnet: {
      if (s.depth < 1) throw Error("model: depth must be >= 1");
      if (s.arch == ArchKind::toy_resnet && s.depth < 2) throw Error("model: toy_resnet needs >= 2 residual blocks");
      const std::size_t f = std::size_t{1} << s.depth;
      if (s.input_height % f || s.input_width % f) throw Error("model: input size not divisible by 2^depth");
      break;
    }
    case ArchKind::toy_vit:
    case ArchKind::toy_mixer:
      if (s.arch == ArchKind::toy_vit && s.depth < 2) throw Error("model: toy_vit needs >= 2 attention blocks");
      if (s.depth < 1) throw Error("model: depth must be >= 1");
      if (s.input_height % kPatch || s.input_width % kPatch) throw Error("model: input size not divisible by patch size");
      if (s.arch == ArchKind::toy_vit && s.width % 2) throw Error("model: toy_vit width must be even (2 heads)");
      break;
  }
}

inline std::vector<ParamInfo> param_layout(const ModelSpec& s, std::size_t* total = nullptr) {
  validate(s);
  LayoutBuilder L;
  const std::size_t w = s.width, K = s.num_classes, C = s.input_channels;
  const std::string bs = "block";
  switch (s.arch) {
    case ArchKind::toy_cnn: {
      for (std::size_t i = 1; i <= s.depth; ++i) {
        const std::size_t in = i == 1 ? C : w;
        L.add(bs + std::to_string(i) + ".conv.w", {w, in, 3, 3}, in * 9);
        L.add(bs + std::to_string(i) + ".conv.b", {w}, 0);
      }
      const std::size_t sp = (s.input_height >> s.depth) * (s.input_width >> s.depth);
      L.add("head.w", {w * sp, K}, w * sp);
      L.add("head.b", {K}, 0);
      break;
    }
    case ArchKind::toy_resnet: {
      L.add("stem.conv.w", {w, C, 3, 3}, C * 9);
      L.add("stem.conv.b", {w}, 0);
      for (std::size_t i = 1; i <= s.depth; ++i) {
        L.add(bs + std::to_string(i) + ".conv1.w", {w, w, 3, 3}, w * 9);
        L.add(bs + std::to_string(i) + ".conv1.b", {w}, 0);
        L.add(bs + std::to_string(i) + ".conv2.w", {w, w, 3, 3}, w * 9);
        L.add(bs + std::to_string(i) + ".conv2.b", {w}, 0);
      }
      L.add("head.w", {w, K}, w);
      L.add("head.b", {K}, 0);
      break;
    }
    case ArchKind::toy_vit:
    case ArchKind::toy_mixer: {
      const std::size_t pd = C * kPatch * kPatch;
      const std::size_t T = (s.input_height / kPatch) * (s.input_width / kPatch);
      L.add("embed.w", {pd, w}, pd);
      L.add("embed.b", {w}, 0);
      if (s.arch == ArchKind::toy_vit) {
        L.add("cls", {w}, w);
        L.add("pos", {T + 1, w}, w);
        for (std::size_t i = 1; i <= s.depth; ++i) {
          const std::string p = bs + std::to_string(i);
          L.add(p + ".ln1.g", {w}, 0, 1.0);
          L.add(p + ".ln1.b", {w}, 0);
          L.add(p + ".qkv.w", {w, 3 * w}, w);
          L.add(p + ".qkv.b", {3 * w}, 0);
          L.add(p + ".proj.w", {w, w}, w);
          L.add(p + ".proj.b", {w}, 0);
          L.add(p + ".ln2.g", {w}, 0, 1.0);
          L.add(p + ".ln2.b", {w}, 0);
          L.add(p + ".fc1.w", {w, 2 * w}, w);
          L.add(p + ".fc1.b", {2 * w}, 0);
          L.add(p + ".fc2.w", {2 * w, w}, 2 * w);
          L.add(p + ".fc2.b", {w}, 0);
        }
      } else {
        const std::size_t th = 64;
        for (std::size_t i = 1; i <= s.depth; ++i) {
          const std::string p = bs + std::to_string(i);
          L.add(p + ".ln1.g", {w}, 0, 1.0);
          L.add(p + ".ln1.b", {w}, 0);
          L.add(p + ".tok1.w", {T, th}, T);
          L.add(p + ".tok1.b", {th}, 0);
          L.add(p + ".tok2.w", {th, T}, th);
          L.add(p + ".tok2.b", {T}, 0);
          L.add(p + ".ln2.g", {w}, 0, 1.0);
          L.add(p + ".ln2.b", {w}, 0);
          L.add(p + ".ch1.w", {w, 2 * w}, w);
          L.add(p + ".ch1.b", {2 * w}, 0);
          L.add(p + ".ch2.w", {2 * w, w}, 2 * w);
          L.add(p + ".ch2.b", {w}, 0);
        }
      }
      L.add("norm.g", {w}, 0, 1.0);
      L.add("norm.b", {w}, 0);
      L.add("head.w", {w, K}, w);
      L.add("head.b", {K}, 0);
      break;
    }
  }
  if (total) *total = L.total;
  return L.params;
}

}  // namespace detail

inline std::size_t param_count(const ModelSpec& s) {
  std::size_t n = 0;
  detail::param_layout(s, &n);
  return n;
}

/// Which paths of a residual connection carry gradient.
enum class ResidualRoute { both, skip_only, branch_only };

struct ForwardOptions {
  bool param_grads = false;
  // Labels of ReLUs replaced by identity in the forward pass (linearized reference graphs).
  std::set<std::string> linearize_relus;
  // Per skip label: restrict gradient to one residual path (forward values unchanged).
  std::map<std::string, ResidualRoute> residual_routes;
  // toy_vit: also produce logits from every block's class token through the shared head.
  bool block_logits = false;
};

struct ForwardResult {
  Var logits;
  std::vector<Var> params;        // one leaf per ParamInfo
  std::vector<Var> block_logits;  // toy_vit with block_logits = true
};

/// Training provenance stored in checkpoint headers.
struct TrainMeta {
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double clean_test_accuracy = -1.0;
  double robust_accuracy = -1.0;
  std::string kind = "init";  // init | standard | adversarial | lgv
};

inline void to_json(nlohmann::json& j, const TrainMeta& m) {
  j = nlohmann::json{{"seed", m.seed},
                     {"epochs", m.epochs},
                     {"clean_test_accuracy", m.clean_test_accuracy},
                     {"robust_accuracy", m.robust_accuracy},
                     {"kind", m.kind}};
}

inline void from_json(const nlohmann::json& j, TrainMeta& m) {
  m.seed = j.value("seed", std::uint64_t{0});
  m.epochs = j.value("epochs", std::size_t{0});
  m.clean_test_accuracy = j.value("clean_test_accuracy", -1.0);
  m.robust_accuracy = j.value("robust_accuracy", -1.0);
  m.kind = j.value("kind", std::string("init"));
}

/// Immutable classifier: architecture, parameter layout and a flat weight blob.
class Model {
 public:
  Model(ModelSpec spec, std::vector<double> weights, TrainMeta meta = {})
      : spec_(spec), layout_(detail::param_layout(spec, &count_)), weights_(std::move(weights)), meta_(std::move(meta)) {
    if (weights_.size() != count_)
      throw Error("model: weight blob has " + std::to_string(weights_.size()) + " values, spec implies " + std::to_string(count_));
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  const std::vector<ParamInfo>& layout() const noexcept { return layout_; }
  const std::vector<double>& weights() const noexcept { return weights_; }
  const TrainMeta& meta() const noexcept { return meta_; }
  std::size_t param_count() const noexcept { return count_; }
  std::vector<LayerLabel> labels() const { return spec_.layer_labels(); }

  Model with_weights(std::vector<double> w, TrainMeta meta) const { return Model(spec_, std::move(w), std::move(meta)); }

  ForwardResult forward(Tape& tape, Var input, const ForwardOptions& opt = {}) const {
    const Shape expect{spec_.input_channels, spec_.input_height, spec_.input_width};
    const Shape& s = input.shape();
    if (s.size() != 4 || !std::equal(expect.begin(), expect.end(), s.begin() + 1))
      throw ShapeError("predict: input " + to_string(s) + " does not match model input [N," + std::to_string(expect[0]) + "," +
                       std::to_string(expect[1]) + "," + std::to_string(expect[2]) + "]");
    ForwardResult r;
    for (const auto& p : layout_) {
      std::vector<double> v(weights_.begin() + static_cast<std::ptrdiff_t>(p.offset),
                            weights_.begin() + static_cast<std::ptrdiff_t>(p.offset + numel(p.shape)));
      r.params.push_back(tape.leaf(Tensor(p.shape, std::move(v)), opt.param_grads));
    }
    Ctx c{tape, opt, r.params};
    switch (spec_.arch) {
      case ArchKind::toy_cnn: r.logits = forward_cnn(c, input); break;
      case ArchKind::toy_resnet: r.logits = forward_resnet(c, input); break;
      case ArchKind::toy_vit: r.logits = forward_vit(c, input, r.block_logits); break;
      case ArchKind::toy_mixer: r.logits = forward_mixer(c, input); break;
    }
    return r;
  }

 private:
  struct Ctx {
    Tape& tape;
    const ForwardOptions& opt;
    const std::vector<Var>& params;
    std::size_t next = 0;
    Var take() { return params[next++]; }
  };

  static Var act(Ctx& c, Var x, const std::string& label) {
    if (c.opt.linearize_relus.count(label)) {
      c.tape.mark(label, x);
      return x;
    }
    return relu(x, label);
  }

  static Var residual(Ctx& c, Var skip, Var branch, const std::string& label) {
    branch = branch_point(branch, label);
    auto it = c.opt.residual_routes.find(label);
    const ResidualRoute route = it == c.opt.residual_routes.end() ? ResidualRoute::both : it->second;
    switch (route) {
      case ResidualRoute::skip_only: return add(skip, detach(branch));
      case ResidualRoute::branch_only: return add(detach(skip), branch);
      case ResidualRoute::both: break;
    }
    return add(skip, branch);
  }

  Var forward_cnn(Ctx& c, Var x) const {
    for (std::size_t i = 1; i <= spec_.depth; ++i) {
      const std::string p = "block" + std::to_string(i);
      Var w = c.take(), b = c.take();
      x = conv2d(x, w, b, 1, 1);
      x = act(c, x, p + ".relu");
      x = feature_point(max_pool2d(x), p + ".out");
    }
    x = reshape(x, {x.shape()[0], x.value().row_size()});
    Var w = c.take(), b = c.take();
    return linear(x, w, b);
  }

  Var forward_resnet(Ctx& c, Var x) const {
    {
      Var w = c.take(), b = c.take();
      x = max_pool2d(act(c, conv2d(x, w, b, 1, 1), "stem.relu"));
    }
    for (std::size_t i = 1; i <= spec_.depth; ++i) {
      const std::string p = "block" + std::to_string(i);
      Var w1 = c.take(), b1 = c.take(), w2 = c.take(), b2 = c.take();
      Var h = act(c, conv2d(x, w1, b1, 1, 1), p + ".relu1");
      h = conv2d(h, w2, b2, 1, 1);
      x = act(c, residual(c, x, h, p + ".skip"), p + ".relu");
      x = feature_point(x, p + ".out");
      if (i < spec_.depth) x = max_pool2d(x);
    }
    x = global_avg_pool(x);
    Var w = c.take(), b = c.take();
    return linear(x, w, b);
  }

  Var patchify(Var x) const {
    const std::size_t N = x.shape()[0], C = spec_.input_channels, P = detail::kPatch;
    const std::size_t gh = spec_.input_height / P, gw = spec_.input_width / P;
    x = reshape(x, {N, C, gh, P, gw, P});
    x = permute(x, {0, 2, 4, 1, 3, 5});
    return reshape(x, {N, gh * gw, C * P * P});
  }

  static Var attention(Ctx&, Var h, Var qkv_w, Var qkv_b, Var proj_w, Var proj_b, const std::string& label) {
    const std::size_t N = h.shape()[0], T = h.shape()[1], D = h.shape()[2], heads = 2, dh = D / heads;
    Var qkv = linear(h, qkv_w, qkv_b);                    // [N,T,3D]
    qkv = reshape(qkv, {N, T, 3, heads, dh});
    qkv = permute(qkv, {2, 0, 3, 1, 4});                  // [3,N,heads,T,dh]
    auto part = [&](std::size_t k) { return reshape(slice(qkv, 0, k, k + 1), {N * heads, T, dh}); };
    Var q = part(0), k = part(1), v = part(2);
    Var scores = scale(bmm(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
    Var a = attention_point(softmax(scores), label);
    Var o = bmm(a, v);                                     // [N*heads,T,dh]
    o = permute(reshape(o, {N, heads, T, dh}), {0, 2, 1, 3});
    o = reshape(o, {N, T, D});
    return linear(o, proj_w, proj_b);
  }

  Var forward_vit(Ctx& c, Var x, std::vector<Var>& block_logits) const {
    const std::size_t N = x.shape()[0], D = spec_.width;
    Var ew = c.take(), eb = c.take(), cls = c.take(), pos = c.take();
    Var tokens = linear(patchify(x), ew, eb);  // [N,T,D]
    Tensor ones({N, 1, D}, 1.0);
    Var cls_rows = mul_broadcast(c.tape.constant(ones), reshape(cls, {1, D}));  // [N,1,D]
    Var h = add_broadcast(concat(cls_rows, tokens, 1), pos);
    const std::size_t first_block = c.next;
    const std::size_t per_block = 12;
    Var ng = c.params[first_block + per_block * spec_.depth];
    Var nb = c.params[first_block + per_block * spec_.depth + 1];
    Var hw = c.params[first_block + per_block * spec_.depth + 2];
    Var hb = c.params[first_block + per_block * spec_.depth + 3];
    auto head = [&](Var hidden) {
      Var tok = reshape(slice(hidden, 1, 0, 1), {N, D});
      return linear(layer_norm(tok, ng, nb), hw, hb);
    };
    for (std::size_t i = 1; i <= spec_.depth; ++i) {
      const std::string p = std::to_string(i);
      Var g1 = c.take(), b1 = c.take(), qw = c.take(), qb = c.take(), pw = c.take(), pb = c.take();
      Var g2 = c.take(), b2 = c.take(), f1w = c.take(), f1b = c.take(), f2w = c.take(), f2b = c.take();
      Var a = attention(c, layer_norm(h, g1, b1), qw, qb, pw, pb, "vit.attn" + p + ".weights");
      h = residual(c, h, a, "vit.attn" + p + ".skip");
      Var m = linear(gelu(linear(layer_norm(h, g2, b2), f1w, f1b)), f2w, f2b);
      h = residual(c, h, m, "vit.mlp" + p + ".skip");
      h = feature_point(h, "vit.block" + p + ".out");
      if (c.opt.block_logits) block_logits.push_back(head(h));
    }
    c.next += 4;
    return head(h);
  }

  Var forward_mixer(Ctx& c, Var x) const {
    const std::size_t N = x.shape()[0], D = spec_.width;
    Var ew = c.take(), eb = c.take();
    Var h = linear(patchify(x), ew, eb);  // [N,T,D]
    const std::size_t T = h.shape()[1];
    for (std::size_t i = 1; i <= spec_.depth; ++i) {
      const std::string p = std::to_string(i);
      Var g1 = c.take(), b1 = c.take(), t1w = c.take(), t1b = c.take(), t2w = c.take(), t2b = c.take();
      Var g2 = c.take(), b2 = c.take(), c1w = c.take(), c1b = c.take(), c2w = c.take(), c2b = c.take();
      Var t = permute(layer_norm(h, g1, b1), {0, 2, 1});  // [N,D,T]
      t = linear(gelu(linear(t, t1w, t1b)), t2w, t2b);
      h = residual(c, h, permute(t, {0, 2, 1}), "mixer.token" + p + ".skip");
      Var m = linear(gelu(linear(layer_norm(h, g2, b2), c1w, c1b)), c2w, c2b);
      h = residual(c, h, m, "mixer.channel" + p + ".skip");
      h = feature_point(h, "mixer.block" + p + ".out");
    }
    Var ng = c.take(), nb = c.take();
    h = layer_norm(h, ng, nb);
    Var pooled = global_avg_pool(reshape(permute(h, {0, 2, 1}), {N, D, T, 1}));
    Var hw = c.take(), hb = c.take();
    return linear(pooled, hw, hb);
  }

  ModelSpec spec_;
  std::size_t count_ = 0;
  std::vector<ParamInfo> layout_;
  std::vector<double> weights_;
  TrainMeta meta_;
};

/// Deterministic initialization: weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)) drawn
/// from a counter stream keyed by (seed, parameter index); biases zero; norm gains one.
inline Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  std::size_t total = 0;
  const auto layout = detail::param_layout(spec, &total);
  std::vector<double> w(total, 0.0);
  for (std::size_t k = 0; k < layout.size(); ++k) {
    const auto& p = layout[k];
    const std::size_t n = numel(p.shape);
    if (p.fan_in == 0) {
      std::fill_n(w.begin() + static_cast<std::ptrdiff_t>(p.offset), n, p.fill);
      continue;
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(p.fan_in));
    auto rng = make_rng(seed, Stream::init_weights, k);
    for (std::size_t i = 0; i < n; ++i) w[p.offset + i] = rng.uniform(-bound, bound);
  }
  TrainMeta meta;
  meta.seed = seed;
  return Model(spec, std::move(w), meta);
}

/// Logits for a batch, evaluated in fixed-size chunks.
inline Tensor predict(const Model& m, const Tensor& batch, std::size_t chunk = 64) {
  if (batch.rank() != 4) throw ShapeError("predict: expected NCHW batch, got " + to_string(batch.shape()));
  const std::size_t N = batch.dim(0), K = m.spec().num_classes;
  Tensor out({N, K});
  for (std::size_t b = 0; b < N; b += chunk) {
    const std::size_t e = std::min(N, b + chunk);
    Tape tape;
    Var x = tape.constant(batch.rows(b, e));
    Var logits = m.forward(tape, x).logits;
    std::copy_n(logits.value().ptr(), (e - b) * K, out.ptr() + b * K);
  }
  return out;
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.dim(0));
  const std::size_t K = logits.dim(1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (logits[i * K + k] > logits[i * K + best]) best = k;
    out[i] = static_cast<int>(best);
  }
  return out;
}

/// Mean cross-entropy over the batch.
inline Var cross_entropy(Var logits, std::span<const int> labels) { return mean(cross_entropy_rows(logits, labels)); }

}  // namespace tabench
