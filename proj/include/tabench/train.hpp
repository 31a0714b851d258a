#pragma once

// Substitute/victim training: SGD with momentum, optional PGD adversarial
// training, and LGV snapshot collection.

#include <chrono>
#include <functional>
#include <numeric>

#include "tabench/attack.hpp"
#include "tabench/dataset.hpp"

namespace tabench {

enum class Schedule { constant, step };

struct LgvConfig {
  bool enabled = false;
  double high_lr_factor = 10.0;
  std::size_t n_snapshots = 8;
  std::size_t snapshot_interval = 0;  // SGD steps; 0 = half an epoch
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr = 0.01;
  Schedule schedule = Schedule::step;  // step: x0.1 at 50% and 75% of epochs
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  bool adversarial = false;
  AttackSpec inner = default_inner();
  LgvConfig lgv;
  std::size_t jobs = 1;

  static AttackSpec default_inner() {
    AttackSpec s;
    s.budget = {Norm::linf, 8.0 / 255.0, 2.0 / 255.0};
    s.iterations = 5;
    s.init = Init::uniform_random;
    return s;
  }

  void validate() const {
    if (epochs < 1) throw Error("train: epochs must be >= 1");
    if (batch_size < 1) throw Error("train: batch_size must be >= 1");
    if (!(lr > 0)) throw Error("train: lr must be > 0");
    if (adversarial) {
      if (inner.budget.norm != Norm::linf || inner.init != Init::uniform_random)
        throw Error("train: inner attack must be an l_inf PGD-family attack");
      if (inner.iterations > 10) throw Error("train: inner attack limited to 10 iterations");
      inner.validate();
    }
  }

  double lr_at(std::size_t epoch) const {
    if (schedule == Schedule::constant) return lr;
    if (2 * epoch >= epochs && 4 * epoch >= 3 * epochs) return lr * 0.01;
    if (2 * epoch >= epochs) return lr * 0.1;
    return lr;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"schedule", c.schedule == Schedule::step ? "step" : "constant"},
                     {"momentum", c.momentum},
                     {"weight_decay", c.weight_decay},
                     {"seed", c.seed},
                     {"adversarial", c.adversarial},
                     {"inner", c.inner},
                     {"lgv",
                      {{"enabled", c.lgv.enabled},
                       {"high_lr_factor", c.lgv.high_lr_factor},
                       {"n_snapshots", c.lgv.n_snapshots},
                       {"snapshot_interval", c.lgv.snapshot_interval}}}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  const std::string sched = j.value("schedule", std::string("step"));
  if (sched != "step" && sched != "constant") throw Error("train: unknown schedule '" + sched + "'");
  c.schedule = sched == "step" ? Schedule::step : Schedule::constant;
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  c.adversarial = j.value("adversarial", c.adversarial);
  if (j.contains("inner")) c.inner = j.at("inner").get<AttackSpec>();
  if (j.contains("lgv")) {
    const auto& l = j.at("lgv");
    c.lgv.enabled = l.value("enabled", c.lgv.enabled);
    c.lgv.high_lr_factor = l.value("high_lr_factor", c.lgv.high_lr_factor);
    c.lgv.n_snapshots = l.value("n_snapshots", c.lgv.n_snapshots);
    c.lgv.snapshot_interval = l.value("snapshot_interval", c.lgv.snapshot_interval);
  }
  c.validate();
}

/// Model-input-sized copy of a dataset's images.
inline Tensor model_inputs(const ModelSpec& s, const Tensor& images) {
  return resize_bilinear(images, s.input_height, s.input_width);
}

/// Fraction of rows whose argmax matches the label; inputs must already be model-sized.
inline double accuracy(const Model& m, const Tensor& inputs, std::span<const int> labels) {
  const auto pred = argmax_rows(predict(m, inputs));
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == labels[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

struct TrainLog {
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch (or per snapshot interval for LGV)
};

namespace detail {

class SgdRun {
 public:
  SgdRun(const Model& init, const TrainConfig& cfg, const Dataset& data)
      : spec_(init.spec()), cfg_(cfg), w_(init.weights()), v_(w_.size(), 0.0), inputs_(model_inputs(spec_, data.images)),
        labels_(data.labels), indices_(data.indices) {}

  Model model(TrainMeta meta) const { return Model(spec_, w_, std::move(meta)); }

  std::vector<std::size_t> order(std::size_t epoch) const {
    std::vector<std::size_t> p(labels_.size());
    std::iota(p.begin(), p.end(), std::size_t{0});
    auto rng = make_rng(cfg_.seed, Stream::shuffle, epoch);
    for (std::size_t i = p.size(); i > 1; --i) std::swap(p[i - 1], p[static_cast<std::size_t>(rng.below(i))]);
    return p;
  }

  /// One SGD step on the given rows; returns the minibatch loss.
  double step(std::span<const std::size_t> rows, double lr, std::size_t epoch, std::size_t step_no) {
    const std::size_t per = inputs_.row_size();
    Shape s = inputs_.shape();
    s[0] = rows.size();
    Tensor xb(s);
    std::vector<int> yb;
    std::vector<std::size_t> ids;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      std::copy_n(inputs_.ptr() + rows[k] * per, per, xb.ptr() + k * per);
      yb.push_back(labels_[rows[k]]);
      ids.push_back(indices_[rows[k]]);
    }
    const Model cur(spec_, w_, {});
    if (cfg_.adversarial) {
      AttackSpec inner = cfg_.inner;
      inner.seed = mix64(cfg_.seed ^ mix64(epoch * 0x100000001ULL + step_no));
      AttackOptions ao;
      ao.jobs = cfg_.jobs;
      ao.example_ids = ids;
      xb = run_attack(cur, xb, yb, inner, ao).x_adv;
    }
    Tape tape;
    ForwardOptions fo;
    fo.param_grads = true;
    auto fr = cur.forward(tape, tape.constant(xb), fo);
    Var loss = cross_entropy(fr.logits, yb);
    const double lv = loss.value()[0];
    if (!std::isfinite(lv))
      throw Error("train: loss diverged (non-finite) at epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(step_no + 1));
    tape.backward(loss);
    std::size_t off = 0;
    for (const Var& p : fr.params) {
      const Tensor g = tape.grad(p);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = g[i] + cfg_.weight_decay * w_[off + i];
        v_[off + i] = cfg_.momentum * v_[off + i] + gi;
        w_[off + i] -= lr * v_[off + i];
      }
      off += g.size();
    }
    return lv;
  }

  std::size_t size() const noexcept { return labels_.size(); }

 private:
  ModelSpec spec_;
  TrainConfig cfg_;
  std::vector<double> w_, v_;
  Tensor inputs_;
  std::vector<int> labels_;
  std::vector<std::size_t> indices_;
};

}  // namespace detail

/// Robust accuracy under the inner attack on model-sized inputs.
inline double robust_accuracy(const Model& m, const Dataset& test, const AttackSpec& attack, std::size_t jobs = 1) {
  const Tensor x = model_inputs(m.spec(), test.images);
  AttackOptions ao;
  ao.jobs = jobs;
  ao.example_ids = test.indices;
  const Tensor adv = run_attack(m, x, test.labels, attack, ao).x_adv;
  return accuracy(m, adv, test.labels);
}

/// Standard or adversarial training from build_model(spec, cfg.seed). Deterministic given cfg.
inline Model train(const ModelSpec& spec, const Dataset& train_set, const Dataset& test_set, const TrainConfig& cfg,
                   TrainLog* log = nullptr) {
  cfg.validate();
  detail::SgdRun run(build_model(spec, cfg.seed), cfg, train_set);
  const std::size_t n = run.size();
  std::size_t global_step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto ord = run.order(e);
    double acc = 0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < n; b += cfg.batch_size) {
      const std::size_t end = std::min(n, b + cfg.batch_size);
      acc += run.step(std::span<const std::size_t>(ord.data() + b, end - b), cfg.lr_at(e), e, global_step++);
      ++batches;
    }
    if (log) log->epoch_loss.push_back(acc / static_cast<double>(batches));
  }
  TrainMeta meta;
  meta.seed = cfg.seed;
  meta.epochs = cfg.epochs;
  meta.kind = cfg.adversarial ? "adversarial" : "standard";
  Model m = run.model(meta);
  meta.clean_test_accuracy = accuracy(m, model_inputs(spec, test_set.images), test_set.labels);
  if (cfg.adversarial) meta.robust_accuracy = robust_accuracy(m, test_set, cfg.inner, cfg.jobs);
  return run.model(meta);
}

/// Adversarial training (PGD inner attack on every minibatch).
inline Model adversarial_train(const ModelSpec& spec, const Dataset& train_set, const Dataset& test_set, TrainConfig cfg,
                               TrainLog* log = nullptr) {
  cfg.adversarial = true;
  return train(spec, train_set, test_set, cfg, log);
}

/// Resumes SGD from `base` at high_lr_factor * lr and snapshots every interval steps.
inline std::vector<Model> collect_lgv(const Model& base, const Dataset& train_set, const TrainConfig& cfg) {
  std::vector<Model> out;
  if (cfg.lgv.n_snapshots == 0) return out;
  TrainConfig c = cfg;
  c.adversarial = false;
  c.seed = mix64(cfg.seed ^ static_cast<std::uint64_t>(Stream::lgv));
  detail::SgdRun run(base, c, train_set);
  const std::size_t n = run.size();
  const std::size_t per_epoch = (n + c.batch_size - 1) / c.batch_size;
  const std::size_t interval = cfg.lgv.snapshot_interval ? cfg.lgv.snapshot_interval : std::max<std::size_t>(1, per_epoch / 2);
  const double lr = cfg.lr * cfg.lgv.high_lr_factor;
  std::size_t steps = 0;
  for (std::size_t e = 0; out.size() < cfg.lgv.n_snapshots; ++e) {
    const auto ord = run.order(e);
    for (std::size_t b = 0; b < n && out.size() < cfg.lgv.n_snapshots; b += c.batch_size) {
      const std::size_t end = std::min(n, b + c.batch_size);
      run.step(std::span<const std::size_t>(ord.data() + b, end - b), lr, e, steps);
      if (++steps % interval == 0) {
        TrainMeta meta = base.meta();
        meta.kind = "lgv";
        meta.epochs = base.meta().epochs;
        out.push_back(run.model(meta));
      }
    }
  }
  return out;
}

}  // namespace tabench
