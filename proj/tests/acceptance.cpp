// Acceptance gate: runs every criterion and prints one PASS/FAIL line each.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "oracles.hpp"
#include "support.hpp"
#include "tabench/bench.hpp"

using namespace tabench;
using namespace tabench::testing_support;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// Shared trained models (desk-scale protocol: canvas 40, model input 32)

const Dataset& train_set() {
  static const Dataset d = gen_dataset(7, 2000, 8);
  return d;
}

const Dataset& test_pool() {
  static const Dataset d = gen_dataset(7, 1024, 8, kCanvas, 1000000);
  return d;
}

TrainConfig train_cfg(std::uint64_t seed, std::size_t epochs = 8) {
  TrainConfig c;
  c.epochs = epochs;
  c.seed = seed;
  return c;
}

const Model& cached(const std::string& key, const std::function<Model()>& make) {
  static std::map<std::string, Model> cache;
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, make()).first;
  return it->second;
}

const Model& cnn_substitute(std::uint64_t seed) {
  return cached("cnn" + std::to_string(seed), [&] {
    return train(ModelSpec::defaults(ArchKind::toy_cnn), train_set(), test_pool(), train_cfg(seed));
  });
}

const Model& resnet_victim(std::uint64_t seed) {
  return cached("resnet" + std::to_string(seed), [&] {
    return train(ModelSpec::defaults(ArchKind::toy_resnet), train_set(), test_pool(), train_cfg(100 + seed));
  });
}

Victim as_victim(const std::string& name, const Model& m) {
  VictimEntry e;
  e.name = name;
  e.model = name;
  e.pipeline = parse_pipeline("resize(32)");
  e.input_size = m.spec().input_height;
  return Victim(e, m);
}

double victim_accuracy(const Victim& v, const Tensor& x, std::span<const int> y) {
  const auto pred = v.classify(x);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == y[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

Tensor attack(const Model& sub, const BenignSet& b, const AttackSpec& spec) {
  AttackOptions ao;
  ao.example_ids = b.indices;
  return run_attack(sub, b.images, b.labels, spec, ao).x_adv;
}

// ---------------------------------------------------------------------------

Outcome c1_gradients() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string where;
  const auto cases = primitive_cases();
  for (const auto& c : cases)
    for (std::uint64_t k = 0; k < 10; ++k) {
      const double e = check_gradient(c.fn, c.point(100 * k + 11), 1e-5);
      if (e > worst) worst = e, where = c.name;
    }
  for (ArchKind a : kArchs) {
    const Model m = small_model(a);
    for (const Tensor& x : model_points(m, 10, 40)) {
      const double e = check_gradient(model_fn(m), {x}, 1e-5);
      if (e > worst) worst = e, where = to_string(a);
    }
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-6 && t < 60, std::to_string(cases.size()) + " primitives + 4 models x 10 points, max rel err " +
                                       fmt("%.2e", worst) + " (" + where + "), " + fmt("%.1f s", t)};
}

Outcome c2_budget_fuzz() {
  const auto t0 = Clock::now();
  const Model m = small_model(ArchKind::toy_cnn, 4);
  AugmentParams ap;
  ap.dp_patch = 2;
  ap.di2_min_resize = 6;
  const AugmentKind kinds[6] = {AugmentKind::UN, AugmentKind::DP, AugmentKind::DI2, AugmentKind::TI, AugmentKind::SI, AugmentKind::ADMIX};
  const Optimizer opts[4] = {Optimizer::plain, Optimizer::MI, Optimizer::NI, Optimizer::PI};
  CounterRng rng{2024, 2};
  std::size_t violations = 0;
  double worst_excess = -1;
  for (std::size_t trial = 0; trial < 10000; ++trial) {
    AttackSpec s;
    s.budget.norm = rng.bernoulli(0.5) ? Norm::linf : Norm::l2;
    s.budget.epsilon = s.budget.norm == Norm::linf ? std::exp(rng.uniform(std::log(1e-4), 0.0)) : std::exp(rng.uniform(std::log(1e-3), std::log(8.0)));
    s.budget.step_size = s.budget.epsilon * rng.uniform(0.05, 2.0);
    s.iterations = 5;
    s.init = rng.bernoulli(0.5) ? Init::zeros : Init::uniform_random;
    s.optimizer = opts[rng.below(4)];
    s.momentum = rng.uniform(0.0, 1.5);
    std::vector<AugmentKind> st;
    for (const auto k : kinds)
      if (rng.bernoulli(0.4)) st.push_back(k);
    if (std::count(st.begin(), st.end(), AugmentKind::SI) && std::count(st.begin(), st.end(), AugmentKind::ADMIX)) st.pop_back();
    s.stack = AugmentStack(st, ap, rng.below(1000));
    s.n_backprops = 1 + rng.below(2);
    s.seed = trial;
    const Tensor x = random_tensor({2, 3, 8, 8}, trial, 0, 1);
    const int y[] = {static_cast<int>(rng.below(8)), static_cast<int>(rng.below(8))};
    const Tensor adv = run_attack(m, x, y, s).x_adv;
    for (std::size_t n = 0; n < 2; ++n) {
      double linf = 0, l2 = 0;
      bool box = true;
      for (std::size_t i = 0; i < x.row_size(); ++i) {
        const double a = adv.row(n)[i], d = a - x.row(n)[i];
        box = box && a >= 0 && a <= 1;
        linf = std::max(linf, std::abs(d));
        l2 += d * d;
      }
      const double excess = s.budget.norm == Norm::linf ? linf - s.budget.epsilon : std::sqrt(l2) - s.budget.epsilon;
      worst_excess = std::max(worst_excess, excess);
      const double tol = s.budget.norm == Norm::linf ? 1e-12 : 1e-9;
      if (excess > tol || !box) ++violations;
    }
  }
  const double t = seconds_since(t0);
  return {violations == 0 && t < 120, "10000 configs, " + std::to_string(violations) + " violations, worst norm excess " +
                                          fmt("%.2e", worst_excess) + ", " + fmt("%.1f s", t)};
}

Outcome c3_metrics() {
  AccuracyMatrix row;
  row.substitutes = {"resnet50"};
  const double t2[] = {2.72, 7.92, 29.42, 28.52, 48.32, 47.64, 36.82, 47.66, 38.70};
  row.acc.assign(1, {});
  for (std::size_t v = 0; v < 9; ++v) {
    row.victims.push_back("v" + std::to_string(v));
    row.acc[0].push_back(t2[v] / 100);
  }
  row.masked.assign(1, std::vector<bool>(9, false));
  const double aa = 100 * metrics(row).aa[0];

  AccuracyMatrix col;
  col.victims = {"v"};
  const double t1[] = {87.79, 91.21, 93.71, 95.46, 88.32, 90.28, 90.28, 89.56, 94.81, 94.37};
  for (std::size_t s = 0; s < 10; ++s) {
    col.substitutes.push_back("s" + std::to_string(s));
    col.acc.push_back({t1[s] / 100});
    col.masked.push_back({false});
  }
  const Metrics m = metrics(col);
  const double err = std::max({std::abs(aa - 31.97), std::abs(100 * m.aaa - 91.58), std::abs(100 * m.waa - 95.46),
                               std::abs(100 * m.baa - 87.79)});
  return {err <= 0.005, "AA " + fmt("%.4f", aa) + ", AAA " + fmt("%.4f", 100 * m.aaa) + ", WAA " + fmt("%.2f", 100 * m.waa) +
                            ", BAA " + fmt("%.2f", 100 * m.baa) + ", max deviation " + fmt("%.4f", err) + " pp"};
}

Outcome c4_hooks() {
  const Model m = small_model(ArchKind::toy_resnet, 8);
  double sgm = 0, lin = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor x = random_tensor({2, 3, 8, 8}, 1 + seed, 0, 1);
    const int y[] = {2, 5};
    for (double gamma : {0.2, 0.5, 0.9}) {
      MethodParams p;
      p.kind = MethodKind::SGM;
      p.gamma = gamma;
      const Tensor hooked = ce_input_grad(m, x, y, install_backward_method(m.spec(), p));
      Tensor oracle(x.shape(), 0.0);
      for (int mask = 0; mask < 4; ++mask) {
        ForwardOptions opt;
        int branches = 0;
        for (int b = 0; b < 2; ++b) {
          const bool br = mask >> b & 1;
          branches += br;
          opt.residual_routes["block" + std::to_string(b + 1) + ".skip"] = br ? ResidualRoute::branch_only : ResidualRoute::skip_only;
        }
        Tensor g = ce_input_grad(m, x, y, {}, opt);
        g *= std::pow(gamma, branches);
        oracle += g;
      }
      sgm = std::max(sgm, max_abs_diff(hooked, oracle) / max_abs(oracle.data()));
    }
    MethodParams p;
    p.kind = MethodKind::LinBP;
    p.layer_index = 2;
    ForwardOptions linearized;
    linearized.linearize_relus = {"block2.relu1", "block2.relu"};
    const Tensor c = random_tensor({2, m.spec().num_classes}, 20 + seed);
    const Tensor oracle = input_grad(m, x, c, {}, linearized);
    lin = std::max(lin, max_abs_diff(input_grad(m, x, c, install_backward_method(m.spec(), p)), oracle) / max_abs(oracle.data()));
  }
  const Model vit = small_model(ArchKind::toy_vit, 8);
  MethodParams pna;
  pna.kind = MethodKind::PNA;
  bool identical = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor x = random_tensor({2, 3, 8, 8}, 50 + seed, 0, 1);
    Tape a, b(install_backward_method(vit.spec(), pna));
    identical = identical && vit.forward(a, a.constant(x)).logits.value() == vit.forward(b, b.constant(x)).logits.value();
  }
  return {sgm <= 1e-12 && lin <= 1e-12 && identical, "SGM rel err " + fmt("%.2e", sgm) + ", LinBP rel err " + fmt("%.2e", lin) +
                                                         ", PNA forward " + (identical ? "bit-identical" : "DIFFERS")};
}

Outcome c5_feature_losses() {
  double worst = 0;
  for (MethodKind k : {MethodKind::ILA, MethodKind::ILApp, MethodKind::FIA, MethodKind::NAA, MethodKind::FDA, MethodKind::NRDM,
                       MethodKind::TAP})
    for (std::uint64_t s = 0; s < 100; ++s) {
      Case c = random_case(s);
      c.p.kind = k;
      Tape tape;
      Var v = feature_loss(c.p, c.a, tape.constant(c.f), tape.constant(c.delta), tape.constant(c.logits), c.y);
      for (std::size_t r = 0; r < c.fshape[0]; ++r) worst = std::max(worst, std::abs(v.value()[r] - oracle_loss(k, c, r)));
    }
  return {worst <= 1e-10, "7 losses x 100 cases, max abs err " + fmt("%.2e", worst)};
}

Outcome c6_white_box() {
  const auto t0 = Clock::now();
  const Model& m = cnn_substitute(1);
  const double t_train = seconds_since(t0);
  const Victim self = as_victim("cnn", m);
  const BenignSet b = select_benign(test_pool(), std::span<const Victim>(&self, 1), 256, 1);
  AttackSpec s;
  s.budget = {Norm::linf, 8.0 / 255, 1.0 / 255};
  s.iterations = 100;
  const auto t1 = Clock::now();
  const double acc = victim_accuracy(self, attack(m, b, s), b.labels);
  const double t_attack = seconds_since(t1);
  return {acc <= 0.02 && t_attack < 120, "clean test acc " + fmt("%.3f", m.meta().clean_test_accuracy) + ", attacked acc " +
                                             fmt("%.4f", acc) + " on 256, attack " + fmt("%.1f s", t_attack) + " (training " +
                                             fmt("%.1f s", t_train) + ")"};
}

Outcome c7_backend() {
  const auto t0 = Clock::now();
  double plain = 0, strong = 0;
  std::string per;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const Model& sub = cnn_substitute(seed);
    const Victim v = as_victim("resnet", resnet_victim(seed)), self = as_victim("cnn", sub);
    const std::vector<Victim> both{v, self};
    const BenignSet b = select_benign(test_pool(), both, 128, seed);
    AttackSpec s;
    s.budget = {Norm::linf, 8.0 / 255, 1.0 / 255};
    s.iterations = 100;
    s.seed = seed;
    const double a = victim_accuracy(v, attack(sub, b, s), b.labels);
    s.optimizer = Optimizer::PI;
    s.stack = AugmentStack({AugmentKind::UN, AugmentKind::DP, AugmentKind::DI2, AugmentKind::TI});
    const double c = victim_accuracy(v, attack(sub, b, s), b.labels);
    plain += a / 3;
    strong += c / 3;
    per += (per.empty() ? "" : ", ") + fmt("%.3f", a) + "->" + fmt("%.3f", c);
  }
  const double t = seconds_since(t0);
  const double gap = 100 * (plain - strong);
  return {gap >= 5 && t < 600, "victim acc I-FGSM " + fmt("%.3f", plain) + " vs UN-DP-DI2-TI-PI-FGSM " + fmt("%.3f", strong) +
                                   " (gap " + fmt("%.1f", gap) + " pp; per seed " + per + "), " + fmt("%.1f s", t)};
}

Outcome c8_parity() {
  const Model m = small_model(ArchKind::toy_cnn, 8);
  const Tensor x = random_tensor({3, 3, 8, 8}, 1, 0.2, 0.8);
  const int y[] = {1, 2, 3};
  AugmentParams ap;
  ap.dp_patch = 2;
  auto per_iteration = [&](MethodParams p, const AugmentStack& st) {
    std::vector<std::uint64_t> counts;
    for (std::size_t iters : {1u, 2u, 3u}) {
      AttackSpec s;
      s.iterations = iters;
      s.method = p;
      s.stack = st;
      const auto before = Tape::backward_passes();
      run_attack(m, x, y, s);
      counts.push_back(Tape::backward_passes() - before);
    }
    return counts;
  };
  bool ok = true;
  std::string d;
  for (const auto& [a, b] : {std::pair{MethodKind::VT, MethodKind::VT_baseline}, std::pair{MethodKind::TAIG, MethodKind::TAIG_baseline}})
    for (std::size_t n : {1u, 5u, 20u})
      for (const auto& st : {AugmentStack({}, ap), AugmentStack({AugmentKind::UN, AugmentKind::DI2, AugmentKind::ADMIX}, ap)}) {
        MethodParams pa, pb;
        pa.kind = a;
        pb.kind = b;
        pa.n_agg = pb.n_agg = n;
        const auto ca = per_iteration(pa, st), cb = per_iteration(pb, st);
        // Constant increments: the per-iteration cost is ca[2] - ca[1] == ca[1] - ca[0].
        const bool same = ca == cb && ca[2] - ca[1] == ca[1] - ca[0];
        ok = ok && same;
        if (n == 20 && st.empty())
          d += (d.empty() ? "" : ", ") + to_string(a) + " " + std::to_string(ca[1] - ca[0]) + "/iter vs " + std::to_string(cb[1] - cb[0]);
      }
  return {ok, "12 settings per pair checked via backward counter; n=20: " + d};
}

Outcome c9_grid_count() {
  const auto g = enumerate_grid();
  std::set<std::tuple<Init, Optimizer, std::set<AugmentKind>>> want, got;
  const AugmentKind all[6] = {AugmentKind::UN, AugmentKind::DP, AugmentKind::DI2, AugmentKind::TI, AugmentKind::SI, AugmentKind::ADMIX};
  for (Init i : {Init::zeros, Init::uniform_random})
    for (Optimizer o : {Optimizer::plain, Optimizer::MI, Optimizer::NI, Optimizer::PI})
      for (unsigned mask = 0; mask < 64; ++mask) {
        if ((mask & 16) && (mask & 32)) continue;
        std::set<AugmentKind> s;
        for (int k = 0; k < 6; ++k)
          if (mask & (1u << k)) s.insert(all[k]);
        want.insert({i, o, s});
      }
  std::set<std::string> names;
  for (const auto& c : g) {
    got.insert({c.init, c.optimizer, std::set<AugmentKind>(c.augment.begin(), c.augment.end())});
    names.insert(c.name());
  }
  return {g.size() == 384 && got == want && names.size() == 384,
          std::to_string(g.size()) + " combinations, brute force " + std::to_string(want.size()) + ", " +
              std::to_string(names.size()) + " distinct names"};
}

Outcome c10_robust_victim() {
  const auto t0 = Clock::now();
  double std_acc = 0, rob_acc = 0, clean_gap = 0;
  std::string per;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const Model& sub = cnn_substitute(seed);
    // Width 32: at width 16 adversarial training costs more than 5 points of clean accuracy.
    ModelSpec spec = ModelSpec::defaults(ArchKind::toy_cnn);
    spec.width = 32;
    TrainConfig c = train_cfg(200 + seed, 12);
    const Model standard = train(spec, train_set(), test_pool(), c);
    c.epochs = 16;
    c.inner.budget = {Norm::linf, 1.0 / 255, 0.8 / 255};
    c.inner.iterations = 3;
    const Model robust = adversarial_train(spec, train_set(), test_pool(), c);
    clean_gap = std::max(clean_gap, 100 * std::abs(standard.meta().clean_test_accuracy - robust.meta().clean_test_accuracy));
    const std::vector<Victim> vs{as_victim("standard", standard), as_victim("robust", robust)};
    const BenignSet b = select_benign(test_pool(), vs, 96, seed);
    AttackSpec s;
    s.budget = {Norm::linf, 8.0 / 255, 1.0 / 255};
    s.iterations = 50;
    s.seed = seed;
    const Tensor adv = attack(sub, b, s);
    const double a = victim_accuracy(vs[0], adv, b.labels), r = victim_accuracy(vs[1], adv, b.labels);
    std_acc += a / 3;
    rob_acc += r / 3;
    per += (per.empty() ? "" : ", ") + fmt("%.3f", a) + "/" + fmt("%.3f", r) + " clean " +
           fmt("%.3f", standard.meta().clean_test_accuracy) + "/" + fmt("%.3f", robust.meta().clean_test_accuracy);
  }
  return {rob_acc >= std_acc && clean_gap <= 5, "standard " + fmt("%.3f", std_acc) + " vs robust " + fmt("%.3f", rob_acc) +
                                                    " (per seed " + per + "), max clean gap " + fmt("%.2f", clean_gap) + " pp, " +
                                                    fmt("%.1f s", seconds_since(t0))};
}

Outcome c11_grid_determinism() {
  const auto t0 = Clock::now();
  const fs::path root = fs::temp_directory_path() / "tabench_acceptance_grid";
  fs::remove_all(root);
  const std::string config = std::string(TABENCH_SOURCE_DIR) + "/configs/tiny.json";
  std::string csv[2];
  std::size_t ranked = 0;
  for (int k = 0; k < 2; ++k) {
    const fs::path out = root / (k ? "jobs8" : "jobs1");
    const std::string cmd = std::string(TABENCH_CLI) + " --config " + config + " --out " + out.string() + " --jobs " +
                            (k ? "8" : "1") + " grid > /dev/null 2>&1";
    if (std::system(cmd.c_str()) != 0) return {false, "grid command failed: " + cmd};
    std::ifstream f(out / "grid" / "results.csv", std::ios::binary);
    csv[k] = {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
    std::ifstream r(out / "grid" / "ranking.csv");
    std::string line;
    ranked = 0;
    while (std::getline(r, line)) ranked += !line.empty() && line[0] != '#' && line.rfind("rank", 0) != 0;
  }
  fs::remove_all(root);
  const bool same = !csv[0].empty() && csv[0] == csv[1];
  return {same && ranked == 384, std::string(same ? "byte-identical" : "DIFFERENT") + " results.csv (" +
                                     std::to_string(csv[0].size()) + " bytes), " + std::to_string(ranked) + " ranked combinations, " +
                                     fmt("%.1f s", seconds_since(t0))};
}

Outcome c12_resize() {
  const Tensor r = resize_bilinear(Tensor({1, 1, 1, 2}, {0.0, 1.0}), 1, 4);
  const bool half = r == Tensor({1, 1, 1, 4}, {0.0, 0.25, 0.75, 1.0});
  bool identity = true;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Tensor x = random_tensor({2, 3, 5 + s % 7, 4 + s % 5}, s, 0, 1);
    identity = identity && resize_bilinear(x, x.dim(2), x.dim(3)) == x;
  }
  return {half && identity, std::string("2->4 gives [") + fmt("%g", r[0]) + ", " + fmt("%g", r[1]) + ", " + fmt("%g", r[2]) + ", " +
                                fmt("%g", r[3]) + "], same-size resize " + (identity ? "bitwise identity" : "NOT identity")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, Outcome (*)()>> criteria{
      {"gradient correctness", c1_gradients},      {"budget/box invariants", c2_budget_fuzz},
      {"metric oracle", c3_metrics},               {"hook equivalence", c4_hooks},
      {"feature-loss oracles", c5_feature_losses}, {"white-box strength", c6_white_box},
      {"back-end superiority", c7_backend},        {"fair-baseline backprop parity", c8_parity},
      {"grid enumeration", c9_grid_count},         {"robust-victim direction", c10_robust_victim},
      {"grid determinism", c11_grid_determinism},  {"preprocessing bit-exactness", c12_resize},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << criteria[i].first << ": " << o.detail << std::endl;
  }
  return failed ? 1 : 0;
}
