// svmu: train / attack / random-label / gradient-check driver.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <optional>

#include "svmu/experiments.hpp"

namespace {

using namespace svmu;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "experiment config file")->required()->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "override every seed in the config");
  app->add_option("--out", c.out, "output directory");
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = load_experiment_config(c.config);
  if (c.seed) cfg.override_seed(*c.seed);
  if (!c.out.empty()) cfg.output_dir = c.out;
  return cfg;
}

void print_table(const CsvTable& t) {
  for (std::size_t i = 0; i < t.columns.size(); ++i) std::cout << (i ? "," : "") << t.columns[i];
  std::cout << '\n';
  for (const auto& r : t.rows) {
    for (std::size_t i = 0; i < r.size(); ++i) std::cout << (i ? "," : "") << r[i];
    std::cout << '\n';
  }
}

int cmd_train(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const ConvergenceResult res = run_convergence(cfg);
  std::cout << "network " << res.data.spec.describe() << " (" << res.data.spec.param_count() << " parameters)\n"
            << "train " << res.data.train.size() << ", validation " << res.data.validation.size() << ", test "
            << res.data.test.size() << "\n";
  print_table(res.summary);
  std::cout << "svm-update status: " << to_string(res.svm.status) << "\n";
  std::cout << "outputs in " << cfg.output_dir.string() << "\n";
  return 0;
}

int cmd_adversarial(const Common& c, const std::string& pa, const std::string& pb) {
  const ExperimentConfig cfg = load(c);
  const PreparedData d = prepare_data(cfg);
  const ParamVector a = load_params(pa, d.spec);
  const ParamVector b = load_params(pb, d.spec);
  const AdversarialSummary s = run_adversarial(cfg, d.spec, d.test, a, b, "a", "b");
  std::cout << "samples classified correctly by both: " << s.evaluated << "\n";
  print_table(s.table);
  std::cout << "frobenius a > b: mean difference " << format_double(s.frobenius_test.mean_diff) << ", t "
            << format_double(s.frobenius_test.t) << ", one-sided p " << format_double(s.frobenius_test.p_value)
            << "\n";
  return 0;
}

int cmd_random_labels(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const RandomLabelResult r = run_random_labels(cfg);
  std::cout << "median schedule term after epoch 1: true " << format_double(r.median_schedule_true) << ", shuffled "
            << format_double(r.median_schedule_shuffled) << "\n"
            << "spearman(ratio, full bound) over " << r.applied_updates << " updates: rho "
            << format_double(r.ratio_vs_bound.rho) << ", p " << format_double(r.ratio_vs_bound.p_value) << "\n"
            << "largest shuffled-label batch: " << r.shuffled_max_batch << "\n"
            << "shuffled run status: " << to_string(r.shuffled_run.status) << "\n";
  return 0;
}

int cmd_gradcheck(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const GradcheckReport r = run_gradcheck(cfg);
  std::cout << "pairs " << r.pairs << ", coordinates " << r.coordinates << " (" << r.excluded
            << " excluded at kinks)\nmax relative error " << format_double(r.max_relative_error)
            << "\nsecond-order residual ratio (median of " << r.richardson_samples << ") "
            << format_double(r.richardson_median_ratio) << "\n";
  for (const auto& f : r.failures) std::cout << "FAIL " << f << "\n";
  std::cout << (r.passed ? "gradcheck passed" : "gradcheck FAILED") << "\n";
  return r.passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"svm-update training experiments"};
  app.require_subcommand(1);

  Common train_c, adv_c, rl_c, gc_c;
  std::string params_a, params_b;
  auto* train = app.add_subcommand("train", "train with the svm update and the sgd grid, write metrics");
  add_common(train, train_c);
  auto* adv = app.add_subcommand("adversarial", "minimal adversarial noise for two parameter files");
  add_common(adv, adv_c);
  adv->add_option("--params-a", params_a, "first parameter file")->required()->check(CLI::ExistingFile);
  adv->add_option("--params-b", params_b, "second parameter file")->required()->check(CLI::ExistingFile);
  auto* rl = app.add_subcommand("random-labels", "paired runs on true and shuffled labels");
  add_common(rl, rl_c);
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
  add_common(gc, gc_c);

  CLI11_PARSE(app, argc, argv);
  try {
    if (train->parsed()) return cmd_train(train_c);
    if (adv->parsed()) return cmd_adversarial(adv_c, params_a, params_b);
    if (rl->parsed()) return cmd_random_labels(rl_c);
    if (gc->parsed()) return cmd_gradcheck(gc_c);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
