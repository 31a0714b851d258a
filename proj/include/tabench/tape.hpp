#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tabench/tensor.hpp"

namespace tabench {

class Tape;

enum class LabelKind { relu, skip, attention, feature };

/// A hookable point in a model's forward pass.
struct LayerLabel {
  std::string name;
  LabelKind kind;
  int block = 0;  // 1-based block index, 0 for stem/head
  friend bool operator==(const LayerLabel&, const LayerLabel&) = default;
};

enum class HookKind {
  scale_branch_grad,
  identity_relu_grad,
  softplus_relu_grad,
  skip_attention_grad,
  capture_forward,
};

struct HookDescriptor {
  HookKind kind;
  std::vector<std::string> labels;
  double gamma = 1.0;  // scale_branch_grad only
};

enum class ReluGrad { exact, identity, softplus };

/// Per-label effect of the installed hooks. Default-constructed = no effect.
struct HookEffect {
  ReluGrad relu = ReluGrad::exact;
  double branch_scale = 1.0;
  bool block_grad = false;
  bool capture = false;
};

/// Attack-local set of backward modifications. Validation happens at install
/// time against the target model's label set, never during backward.
class HookSet {
 public:
  void install(const HookDescriptor& hook, std::span<const LayerLabel> model_labels) {
    if (hook.kind == HookKind::scale_branch_grad && !(hook.gamma > 0.0 && hook.gamma <= 1.0))
      throw Error("hook: scale_branch_grad gamma must lie in (0, 1], got " + std::to_string(hook.gamma));
    for (const auto& name : hook.labels) {
      auto it = std::find_if(model_labels.begin(), model_labels.end(),
                             [&](const LayerLabel& l) { return l.name == name; });
      if (it == model_labels.end()) throw Error("hook: label '" + name + "' does not exist in model");
      HookEffect& e = effects_[name];
      switch (hook.kind) {
        case HookKind::scale_branch_grad:
          require(*it, LabelKind::skip, "scale_branch_grad");
          e.branch_scale = hook.gamma;
          break;
        case HookKind::identity_relu_grad:
        case HookKind::softplus_relu_grad: {
          require(*it, LabelKind::relu, "relu gradient hook");
          auto mode = hook.kind == HookKind::identity_relu_grad ? ReluGrad::identity : ReluGrad::softplus;
          if (e.relu != ReluGrad::exact && e.relu != mode)
            throw Error("hook: conflicting relu gradient hooks on '" + name + "'");
          e.relu = mode;
          break;
        }
        case HookKind::skip_attention_grad:
          require(*it, LabelKind::attention, "skip_attention_grad");
          e.block_grad = true;
          break;
        case HookKind::capture_forward:
          e.capture = true;
          break;
      }
    }
  }

  HookEffect effect(std::string_view label) const {
    auto it = effects_.find(std::string(label));
    return it == effects_.end() ? HookEffect{} : it->second;
  }

  bool empty() const noexcept { return effects_.empty(); }

 private:
  static void require(const LayerLabel& l, LabelKind k, const char* what) {
    if (l.kind != k) throw Error(std::string("hook: ") + what + " cannot target label '" + l.name + "'");
  }

  std::map<std::string, HookEffect> effects_;
};

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Single-use record of one forward pass and its backward pass.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(HookSet hooks = {}) : hooks_(std::move(hooks)) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false) {
    check_open("leaf");
    nodes_.push_back(Node{std::move(value), {}, requires_grad, false, {}});
    return {this, nodes_.size() - 1};
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op node. `fn` is dropped when no parent needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    check_open("forward");
    bool rg = false;
    for (const Var& p : parents) {
      if (p.tape != this) throw Error("tape: operand belongs to a different tape");
      rg = rg || nodes_[p.id].requires_grad;
    }
    if (!value.all_finite() && strict_finite_) throw Error("tape: op produced non-finite values");
    nodes_.push_back(Node{std::move(value), {}, rg, true, rg ? std::move(fn) : BackwardFn{}});
    ++arithmetic_nodes_;
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t arithmetic_node_count() const noexcept { return arithmetic_nodes_; }

  const HookSet& hooks() const noexcept { return hooks_; }

  /// Accumulation buffer for a node's gradient; allocated on first use.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }

  const Tensor& upstream(std::size_t id) const { return nodes_[id].grad; }

  void backward(Var out, const Tensor& seed) {
    if (consumed_) throw Error("tape: backward called twice on the same tape");
    if (out.tape != this) throw Error("tape: output belongs to a different tape");
    if (seed.shape() != value(out).shape()) shape_mismatch("backward seed", seed.shape(), value(out).shape());
    consumed_ = true;
    backward_counter().fetch_add(1, std::memory_order_relaxed);
    if (!nodes_[out.id].requires_grad) return;
    grad_buffer(out.id) += seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.fn && !n.grad.empty()) n.fn(*this, i);
    }
  }

  /// Backward from a scalar (single element) output with seed 1.
  void backward(Var out) { backward(out, Tensor(value(out).shape(), 1.0)); }

  /// Gradient of the last backward pass; zeros if the node was not reached.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad.empty() ? Tensor(n.value.shape(), 0.0) : n.grad;
  }

  std::map<std::size_t, Tensor> gradients() const {
    std::map<std::size_t, Tensor> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (!nodes_[i].is_op && nodes_[i].requires_grad) out.emplace(i, grad(Var{const_cast<Tape*>(this), i}));
    return out;
  }

  // Labeled points seen during forward.
  void mark(std::string_view label, Var v) {
    taps_[std::string(label)] = v.id;
    if (hooks_.effect(label).capture) captures_[std::string(label)] = value(v);
  }

  std::optional<Var> tapped(std::string_view label) {
    auto it = taps_.find(std::string(label));
    if (it == taps_.end()) return std::nullopt;
    return Var{this, it->second};
  }

  const std::map<std::string, Tensor>& captures() const noexcept { return captures_; }

  bool consumed() const noexcept { return consumed_; }

  /// Global count of backward passes, used to assert backprop parity between methods.
  static std::uint64_t backward_passes() { return backward_counter().load(std::memory_order_relaxed); }

  void set_strict_finite(bool on) noexcept { strict_finite_ = on; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool is_op = false;
    BackwardFn fn;
  };

  static std::atomic<std::uint64_t>& backward_counter() {
    static std::atomic<std::uint64_t> c{0};
    return c;
  }

  void check_open(const char* what) const {
    if (consumed_) throw Error(std::string("tape: ") + what + " after backward; tapes are single-use");
  }

  HookSet hooks_;
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> taps_;
  std::map<std::string, Tensor> captures_;
  std::size_t arithmetic_nodes_ = 0;
  bool consumed_ = false;
  bool strict_finite_ = false;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

}  // namespace tabench
