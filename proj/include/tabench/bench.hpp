#pragma once

// Config schema and the command implementations behind the `tabench` CLI.
// Output directory layout:
//   models/<name>.tabx          trained checkpoints (LGV: <name>.<k>.tabx)
//   victims.json                append-only victim registry
//   adv/<sub>__<backend>__<method>.tabt, .trace.csv
//   results.csv results.json summary.json accuracy_bars.svg
//   grid/ranking.csv + grid/results.*   tune/<method>.json

#include <filesystem>
#include <iostream>
#include <optional>

#include "tabench/harness.hpp"

namespace tabench {

struct DatasetConfig {
  std::uint64_t seed = 7;
  std::size_t classes = 8;
  std::size_t canvas = kCanvas;
  std::size_t n_train = 2000;
  std::size_t n_test = 1024;  // pool that benign examples are drawn from
  std::size_t n_validation = 256;
  std::size_t test_offset = 1000000;
  std::size_t validation_offset = 2000000;

  Dataset train() const { return gen_dataset(seed, n_train, classes, canvas, 0); }
  Dataset test() const { return gen_dataset(seed, n_test, classes, canvas, test_offset); }
  Dataset validation() const { return gen_dataset(seed, n_validation, classes, canvas, validation_offset); }
};

struct ModelEntry {
  std::string name;
  ModelSpec spec = ModelSpec::defaults(ArchKind::toy_cnn);
  TrainConfig train;
  std::string kind = "standard";  // standard | adversarial | lgv
  std::string base;               // lgv only: model the trajectory starts from
};

struct AttackConfig {
  AttackSpec spec;
  std::vector<std::string> substitutes;
  std::size_t n_examples = 256;
};

struct GridConfig {
  std::vector<std::string> substitutes;
  std::size_t n_examples = 64;
  std::size_t max_cells = 0;
  std::size_t iterations = 0;  // 0: use attack.iterations
};

struct TuneConfig {
  std::string substitute;
  MethodParams base;
  std::vector<std::size_t> layer_index;  // empty: every block
  std::vector<double> gamma;             // empty: base.gamma
  std::size_t n_examples = 64;
};

struct BenchConfig {
  DatasetConfig dataset;
  std::vector<ModelEntry> models;
  std::vector<VictimEntry> victims;
  AttackConfig attack;
  GridConfig grid;
  TuneConfig tune;

  const ModelEntry& model(const std::string& name) const {
    for (const auto& m : models)
      if (m.name == name) return m;
    throw Error("config: unknown model '" + name + "'");
  }
};

inline BenchConfig parse_config(const nlohmann::json& j) {
  static const std::set<std::string> top{"dataset", "models", "victims", "attack", "grid", "tune"};
  for (const auto& [k, v] : j.items())
    if (!top.count(k)) throw Error("config: unknown top-level key '" + k + "'");
  BenchConfig c;
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    auto& o = c.dataset;
    o.seed = d.value("seed", o.seed);
    o.classes = d.value("classes", o.classes);
    o.canvas = d.value("canvas", o.canvas);
    o.n_train = d.value("train", o.n_train);
    o.n_test = d.value("test", o.n_test);
    o.n_validation = d.value("validation", o.n_validation);
    o.test_offset = d.value("test_offset", o.test_offset);
    o.validation_offset = d.value("validation_offset", o.validation_offset);
    if (o.test_offset < o.n_train || o.validation_offset < o.test_offset + o.n_test)
      throw Error("config: dataset splits overlap (need train < test_offset < validation_offset ranges)");
  }
  std::set<std::string> names;
  for (const auto& m : j.value("models", nlohmann::json::array())) {
    ModelEntry e;
    e.name = m.at("name").get<std::string>();
    if (e.name.empty() || e.name.find_first_of("/\\ .") != std::string::npos)
      throw Error("config: bad model name '" + e.name + "'");
    if (!names.insert(e.name).second) throw Error("config: duplicate model '" + e.name + "'");
    if (m.contains("arch")) e.spec = m.at("arch").get<ModelSpec>();
    if (m.contains("train")) e.train = m.at("train").get<TrainConfig>();
    e.kind = m.value("kind", e.kind);
    e.base = m.value("base", std::string{});
    if (e.kind != "standard" && e.kind != "adversarial" && e.kind != "lgv")
      throw Error("config: model '" + e.name + "' has unknown kind '" + e.kind + "'");
    if (e.kind == "lgv" && e.base.empty()) throw Error("config: lgv model '" + e.name + "' needs a base");
    c.models.push_back(std::move(e));
  }
  for (const auto& m : c.models)
    if (m.kind == "lgv" && c.model(m.base).kind == "lgv") throw Error("config: lgv base must be a single checkpoint");
  for (const auto& v : j.value("victims", nlohmann::json::array())) {
    VictimEntry e = v.get<VictimEntry>();
    const auto& m = c.model(e.model);
    if (m.kind == "lgv") throw Error("config: victim '" + e.name + "' refers to an lgv snapshot set");
    e.input_size = m.spec.input_height;
    e.checkpoint = "models/" + e.model + ".tabx";
    c.victims.push_back(e);
  }
  if (j.contains("attack")) {
    const auto& a = j.at("attack");
    c.attack.spec = a.get<AttackSpec>();
    c.attack.substitutes = a.value("substitutes", std::vector<std::string>{});
    c.attack.n_examples = a.value("n_examples", c.attack.n_examples);
  }
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    c.grid.substitutes = g.value("substitutes", std::vector<std::string>{});
    c.grid.n_examples = g.value("n_examples", c.grid.n_examples);
    c.grid.max_cells = g.value("max_cells", c.grid.max_cells);
    c.grid.iterations = g.value("iterations", c.grid.iterations);
  }
  if (j.contains("tune")) {
    const auto& t = j.at("tune");
    c.tune.substitute = t.value("substitute", std::string{});
    if (t.contains("method")) c.tune.base = t.at("method").get<MethodParams>();
    c.tune.layer_index = t.value("layer_index", std::vector<std::size_t>{});
    c.tune.gamma = t.value("gamma", std::vector<double>{});
    c.tune.n_examples = t.value("n_examples", c.tune.n_examples);
  }
  for (const auto* list : {&c.attack.substitutes, &c.grid.substitutes})
    for (const auto& s : *list) (void)c.model(s);
  if (!c.tune.substitute.empty()) (void)c.model(c.tune.substitute);
  return c;
}

inline BenchConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw Error("config: " + path + ": " + e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------

class Bench {
 public:
  Bench(BenchConfig cfg, std::filesystem::path out, std::size_t jobs = 1, std::optional<std::uint64_t> seed = {},
        std::ostream* log = &std::cerr)
      : cfg_(std::move(cfg)), out_(std::move(out)), jobs_(std::max<std::size_t>(1, jobs)), log_(log) {
    if (seed) cfg_.attack.spec.seed = *seed;
    std::filesystem::create_directories(out_ / "models");
  }

  const BenchConfig& config() const noexcept { return cfg_; }
  const std::filesystem::path& out() const noexcept { return out_; }

  // --- models --------------------------------------------------------------

  std::filesystem::path checkpoint_path(const std::string& name, std::optional<std::size_t> snapshot = {}) const {
    return out_ / "models" / (snapshot ? name + "." + std::to_string(*snapshot) + ".tabx" : name + ".tabx");
  }

  bool trained(const ModelEntry& m) const {
    if (m.kind != "lgv") return std::filesystem::exists(checkpoint_path(m.name));
    return m.train.lgv.n_snapshots == 0 || std::filesystem::exists(checkpoint_path(m.name, m.train.lgv.n_snapshots - 1));
  }

  /// Trains (or skips, when the checkpoint exists) every model of the given kind.
  void train_kind(const std::string& kind, bool force = false) {
    for (const auto& m : cfg_.models)
      if (m.kind == kind && (force || !trained(m))) train_one(m);
    register_victims();
  }

  /// Loads a substitute; LGV entries expand to their snapshot list.
  std::vector<Model> load_models(const std::string& name) {
    const auto& m = cfg_.model(name);
    ensure(m);
    std::vector<Model> out;
    if (m.kind != "lgv") {
      out.push_back(load_checkpoint(checkpoint_path(name).string()));
    } else {
      for (std::size_t k = 0; k < m.train.lgv.n_snapshots; ++k) out.push_back(load_checkpoint(checkpoint_path(name, k).string()));
      if (out.empty()) throw Error("lgv model '" + name + "' has no snapshots");
    }
    return out;
  }

  // --- victims -------------------------------------------------------------

  void register_victims() {
    VictimRegistry reg((out_ / "victims.json").string());
    for (const auto& v : cfg_.victims)
      if (trained(cfg_.model(v.model))) reg.append(v);
  }

  std::vector<Victim> victims() {
    for (const auto& v : cfg_.victims) ensure(cfg_.model(v.model));
    register_victims();
    VictimRegistry reg((out_ / "victims.json").string());
    std::vector<Victim> out;
    for (const auto& e : reg.entries()) {
      const std::filesystem::path p = std::filesystem::path(e.checkpoint).is_absolute() ? std::filesystem::path(e.checkpoint) : out_ / e.checkpoint;
      out.emplace_back(e, load_checkpoint(p.string()));
    }
    if (out.empty()) throw Error("no victims registered");
    return out;
  }

  // --- commands ------------------------------------------------------------

  /// Generates adversarial examples for every configured substitute.
  std::vector<std::filesystem::path> attack() {
    if (cfg_.attack.substitutes.empty()) throw Error("attack: no substitutes configured");
    const auto vics = victims();
    const BenignSet benign = select_benign(cfg_.dataset.test(), vics, cfg_.attack.n_examples, cfg_.attack.spec.seed);
    std::filesystem::create_directories(out_ / "adv");
    std::vector<std::filesystem::path> files;
    for (const auto& sub : cfg_.attack.substitutes) {
      const auto models = load_models(sub);
      std::vector<const Model*> ptrs;
      for (const auto& m : models) ptrs.push_back(&m);
      AttackOptions ao;
      ao.jobs = jobs_;
      ao.example_ids = benign.indices;
      std::optional<Tensor> stats;
      if (cfg_.attack.spec.method.kind == MethodKind::FDA) ao.stats_batch = &stats.emplace(cfg_.dataset.train().images);
      const auto res = run_attack(ptrs, benign.images, benign.labels, cfg_.attack.spec, ao);
      for (const auto& d : res.trace.diagnostics) say("attack: " + d);
      const std::string stem = sub + "__" + cfg_.attack.spec.backend_name() + "__" + to_string(cfg_.attack.spec.method.kind);
      const auto path = out_ / "adv" / (stem + ".tabt");
      save_examples(path.string(), res.x_adv, benign.labels, benign.indices,
                    {{"substitute", sub}, {"attack", cfg_.attack.spec}});
      res.trace.write_csv((out_ / "adv" / (stem + ".trace.csv")).string());
      say("attack: wrote " + path.string());
      files.push_back(path);
    }
    return files;
  }

  /// Evaluates every adversarial example file in adv/ against the registered victims and writes the report.
  std::vector<ReportRecord> evaluate_all() {
    const auto dir = out_ / "adv";
    if (!std::filesystem::is_directory(dir)) throw Error("evaluate: no adversarial examples under " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (e.path().extension() == ".tabt") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw Error("evaluate: no .tabt files under " + dir.string());
    const auto vics = victims();
    std::vector<ReportRecord> records;
    for (const auto& f : files) {
      const auto ef = load_examples(f.string());
      const AttackSpec spec = ef.meta.at("attack").get<AttackSpec>();
      const auto rs = evaluate(ef.set.images, ef.set.labels, ef.meta.at("substitute").get<std::string>(), vics, spec);
      records.insert(records.end(), rs.begin(), rs.end());
    }
    report(records, out_.string());
    say("evaluate: " + std::to_string(records.size()) + " records");
    return records;
  }

  /// Rewrites results.csv / summary.json from results.json.
  std::vector<ReportRecord> report_only() {
    std::ifstream f(out_ / "results.json");
    if (!f) throw Error("report: no results.json under " + out_.string());
    const auto records = nlohmann::json::parse(f).get<std::vector<ReportRecord>>();
    report(records, out_.string());
    return records;
  }

  GridResult grid() {
    auto subs_names = cfg_.grid.substitutes.empty() ? cfg_.attack.substitutes : cfg_.grid.substitutes;
    if (subs_names.empty()) throw Error("grid: no substitutes configured");
    std::vector<NamedModel> subs;
    for (const auto& s : subs_names) {
      auto ms = load_models(s);
      if (ms.size() != 1) throw Error("grid: substitute '" + s + "' must be a single checkpoint");
      subs.push_back({s, std::move(ms.front())});
    }
    const auto vics = victims();
    const BenignSet benign = select_benign(cfg_.dataset.test(), vics, cfg_.grid.n_examples, cfg_.attack.spec.seed);
    AttackSpec base = cfg_.attack.spec;
    base.method = MethodParams{};
    if (cfg_.grid.iterations) base.iterations = cfg_.grid.iterations;
    const GridResult g = grid_search(base, subs, vics, benign, cfg_.grid.max_cells, jobs_);
    const auto dir = out_ / "grid";
    std::filesystem::create_directories(dir);
    std::ostringstream rank;
    rank << "rank,combination,AAA,WAA,BAA\r\n" << std::setprecision(17);
    for (std::size_t i = 0; i < g.ranking.size(); ++i) {
      const auto& e = g.ranking[i];
      rank << i + 1 << ',' << e.name << ',' << e.metrics.aaa << ',' << e.metrics.waa << ',' << e.metrics.baa << "\r\n";
    }
    if (g.truncated) rank << "# TRUNCATED: " << g.ranking.size() * subs.size() << " of " << g.total_cells << " cells\r\n";
    detail::write_text(dir / "ranking.csv", rank.str());
    std::vector<ReportRecord> records;
    for (const auto& e : g.ranking) records.insert(records.end(), e.records.begin(), e.records.end());
    report(records, dir.string(), false);
    say("grid: " + std::to_string(g.ranking.size()) + " combinations" + (g.truncated ? " (truncated)" : ""));
    return g;
  }

  TuneOutcome tune() {
    const auto& t = cfg_.tune;
    if (t.substitute.empty()) throw Error("tune: no substitute configured");
    auto ms = load_models(t.substitute);
    if (ms.size() != 1) throw Error("tune: substitute must be a single checkpoint");
    const Model& sub = ms.front();
    const auto vics = victims();
    const BenignSet val = select_benign(cfg_.dataset.validation(), vics, t.n_examples, cfg_.attack.spec.seed);
    const Dataset test = cfg_.dataset.test();
    std::vector<std::size_t> layers = t.layer_index;
    if (layers.empty())
      for (std::size_t l = 1; l <= sub.spec().depth; ++l) layers.push_back(l);
    const auto table = search_table(t.base, layers, t.gamma);
    const Tensor stats = cfg_.dataset.train().images;
    auto eval = [&](const MethodParams& p) {
      AttackSpec spec = cfg_.attack.spec;
      spec.method = p;
      AttackOptions ao;
      ao.jobs = jobs_;
      ao.example_ids = val.indices;
      if (p.kind == MethodKind::FDA) ao.stats_batch = &stats;
      const auto res = run_attack(sub, val.images, val.labels, spec, ao);
      auto rs = evaluate(res.x_adv, val.labels, t.substitute, vics, spec);
      for (auto& r : rs) r.substitute = t.substitute;
      const double aa = summarize(rs).front().metrics.aaa;
      say("tune: " + nlohmann::json(p).dump() + " AA " + std::to_string(aa));
      return aa;
    };
    const auto outcome = tune_hyperparams(table, val.indices, test.indices, eval);
    std::filesystem::create_directories(out_ / "tune");
    nlohmann::json j{{"substitute", t.substitute}, {"best", outcome.best}, {"candidates", nlohmann::json::array()}};
    for (std::size_t i = 0; i < table.size(); ++i) j["candidates"].push_back({{"params", table[i]}, {"AA", outcome.aa[i]}});
    detail::write_text(out_ / "tune" / (to_string(t.base.kind) + ".json"), j.dump(2) + "\n");
    return outcome;
  }

 private:
  void say(const std::string& s) const {
    if (log_) *log_ << s << '\n';
  }

  void ensure(const ModelEntry& m) {
    if (!trained(m)) train_one(m);
  }

  void train_one(const ModelEntry& m) {
    TrainConfig tc = m.train;
    tc.jobs = jobs_;
    const Dataset tr = cfg_.dataset.train();
    if (m.kind == "lgv") {
      const auto& base_entry = cfg_.model(m.base);
      ensure(base_entry);
      const Model base = load_checkpoint(checkpoint_path(m.base).string());
      say("lgv: collecting " + std::to_string(tc.lgv.n_snapshots) + " snapshots for " + m.name);
      const auto snaps = collect_lgv(base, tr, tc);
      for (std::size_t k = 0; k < snaps.size(); ++k) save_checkpoint(snaps[k], checkpoint_path(m.name, k).string());
      return;
    }
    say("train: " + m.name + " (" + m.kind + ")");
    const Dataset te = cfg_.dataset.test();
    const Model out = m.kind == "adversarial" ? adversarial_train(m.spec, tr, te, tc) : train(m.spec, tr, te, tc);
    say("train: " + m.name + " clean accuracy " + std::to_string(out.meta().clean_test_accuracy));
    save_checkpoint(out, checkpoint_path(m.name).string());
  }

  BenchConfig cfg_;
  std::filesystem::path out_;
  std::size_t jobs_;
  std::ostream* log_;
};

}  // namespace tabench
