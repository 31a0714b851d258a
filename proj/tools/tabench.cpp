#include <CLI11.hpp>

#include "tabench/bench.hpp"

int main(int argc, char** argv) {
  CLI::App app{"tabench: transfer-attack benchmark on synthetic data"};
  app.require_subcommand(1);

  std::string config, out = "out";
  std::size_t jobs = 1;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config, "JSON config file")->required()->check(CLI::ExistingFile);
  app.add_option("--out", out, "output directory");
  app.add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--seed", seed, "override the harness/attack seed");

  bool force = false;
  auto* train = app.add_subcommand("train", "train standard models");
  auto* advtrain = app.add_subcommand("advtrain", "adversarially train robust models");
  auto* lgv = app.add_subcommand("lgv", "collect LGV snapshot sets");
  for (auto* s : {train, advtrain, lgv}) s->add_flag("--force", force, "retrain even if checkpoints exist");
  auto* attack = app.add_subcommand("attack", "generate adversarial examples on the substitutes");
  auto* evaluate = app.add_subcommand("evaluate", "evaluate adversarial examples on the victims and report");
  auto* grid = app.add_subcommand("grid", "grid search over optimization back-ends");
  auto* tune = app.add_subcommand("tune", "tune gradient-method hyper-parameters on the validation split");
  auto* report = app.add_subcommand("report", "rewrite CSV and summary from results.json");

  CLI11_PARSE(app, argc, argv);

  try {
    tabench::Bench bench(tabench::load_config(config), out, jobs, seed);
    if (train->parsed()) bench.train_kind("standard", force);
    if (advtrain->parsed()) bench.train_kind("adversarial", force);
    if (lgv->parsed()) bench.train_kind("lgv", force);
    if (attack->parsed()) bench.attack();
    if (evaluate->parsed()) bench.evaluate_all();
    if (report->parsed()) bench.report_only();
    if (tune->parsed()) {
      const auto r = bench.tune();
      std::cout << nlohmann::json(r.best).dump() << '\n';
    }
    if (grid->parsed()) {
      const auto g = bench.grid();
      for (std::size_t i = 0; i < std::min<std::size_t>(10, g.ranking.size()); ++i)
        std::cout << i + 1 << ". " << g.ranking[i].name << "  AAA " << 100 * g.ranking[i].metrics.aaa << "%\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
