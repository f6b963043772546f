#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <unistd.h>

#include "svmu/experiments.hpp"

using namespace svmu;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("svmu_exp_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

// Two-class linear model f_j = <W_j, x> + b_j on a 2x2x1 input.
struct Linear2 {
  NetworkSpec spec = parse_network("linear", {2, 2, 1}, 2);
  ParamVector w{std::vector<double>{0.8, -0.3, 0.5, 0.1, -0.4, 0.2, -0.6, 0.9, 0.05, -0.05}};
  Sample x{{0.9, 0.1, 0.7, 0.2}, 1};

  [[nodiscard]] std::vector<double> diff() const {  // W_1 - W_2
    std::vector<double> d(4);
    for (std::size_t i = 0; i < 4; ++i) d[i] = w[i] - w[4 + i];
    return d;
  }
  [[nodiscard]] double gap() const {
    const auto f = forward(spec, w, x);
    return f[0] - f[1];
  }
};

}  // namespace

TEST_CASE("experiment config: defaults, overrides and unknown keys") {
  const auto c = experiment_config_from(Config::parse(
      "experiment = adversarial\n"
      "network = dense:4,relu  # trailing comment\n"
      "trainer.step_size = 0.25\n"
      "trainer.negatives = random:2\n"
      "sgd.grid = 0.5, 0.05\n"
      "adversarial.norms = frobenius,nuclear\n"
      "gradcheck.input = 3x4x2\n"
      "seed = 9\n"));
  CHECK(c.experiment == ExperimentKind::adversarial);
  CHECK(c.network == "dense:4,relu");
  CHECK(c.trainer.step_size == 0.25);
  CHECK(c.trainer.seed == 9);
  CHECK(c.sgd.seed == 9);
  CHECK(c.gradcheck.seed == 9);
  CHECK(c.trainer.negative_policy.kind == NegativePolicy::Kind::random_subset);
  CHECK(c.sgd_grid == std::vector<double>{0.5, 0.05});
  CHECK(c.adversarial_norms == std::vector<NormKind>{NormKind::frobenius, NormKind::nuclear});
  CHECK(c.gradcheck.input.c == 2);
  CHECK(c.trainer.r_decay == TrainerConfig{}.r_decay);

  CHECK_THROWS_AS(experiment_config_from(Config::parse("trainer.stepsize = 1\n")), ConfigError);
  CHECK_THROWS_AS(experiment_config_from(Config::parse("trainer.step_size = fast\n")), ConfigError);
  CHECK_THROWS_AS(experiment_config_from(Config::parse("experiment = nope\n")), ConfigError);
  CHECK_THROWS_AS(experiment_config_from(Config::parse("trainer.r_decay = 1.5\n")), std::invalid_argument);
  CHECK_THROWS_AS(Config::parse("no equals sign\n"), ConfigError);
  CHECK_THROWS_AS(load_experiment_config("/nonexistent/x.cfg"), ConfigError);
}

TEST_CASE("config files later assignments win") {
  const Config c = Config::parse("a = 1\na = 2\nflag = true\n");
  CHECK(c.get_int("a", 0) == 2);
  CHECK(c.get_bool("flag", false));
  CHECK(c.get_double("missing", 3.5) == 3.5);
}

TEST_CASE("csv writer and strict reader") {
  const fs::path dir = scratch("csv");
  CsvTable t;
  t.columns = {"a", "b"};
  t.rows = {{"1", format_double(0.1)}, {"x", format_double(NAN)}};
  write_csv(dir / "t.csv", t);
  CHECK(slurp(dir / "t.csv").rfind("# schema=1\n", 0) == 0);
  for (const auto& e : fs::directory_iterator(dir)) CHECK(e.path().filename() == "t.csv");
  const CsvTable back = read_csv(dir / "t.csv");
  CHECK(back.columns == t.columns);
  CHECK(back.rows == t.rows);
  CHECK(std::stod(back.rows[0][1]) == 0.1);
  CHECK(format_double(INFINITY) == "inf");

  spit(dir / "bad1.csv", "a,b\n1,2\n");
  CHECK_THROWS(read_csv(dir / "bad1.csv"));
  spit(dir / "bad2.csv", "# schema=1\na,b\n1,2,3\n");
  CHECK_THROWS(read_csv(dir / "bad2.csv"));
  spit(dir / "bad3.csv", "# schema=1\na,b\n1,\n");
  CHECK_THROWS(read_csv(dir / "bad3.csv"));
  CHECK_THROWS(read_csv(dir / "missing.csv"));
  CsvTable ragged = t;
  ragged.rows.push_back({"only one"});
  CHECK_THROWS(write_csv(dir / "r.csv", ragged));
}

TEST_CASE("metrics tables round trip exactly") {
  std::vector<MetricsRow> rows(2);
  rows[1].epoch = 1.0 / 3.0;
  rows[1].updates = 7;
  rows[1].train_hinge = 0.123456789012345678;
  rows[1].schedule_term = 1e-300;
  rows[1].gated = 1;
  rows[1].wall_seconds = NAN;
  const auto back = metrics_from_table(metrics_table(rows));
  REQUIRE(back.size() == 2);
  CHECK(back[1].epoch == rows[1].epoch);
  CHECK(back[1].updates == 7);
  CHECK(back[1].train_hinge == rows[1].train_hinge);
  CHECK(back[1].schedule_term == rows[1].schedule_term);
  CHECK(back[1].gated == 1);
  CHECK(std::isnan(back[1].wall_seconds));
  CsvTable other;
  other.columns = {"x"};
  CHECK_THROWS(metrics_from_table(other));
}

TEST_CASE("parameter files") {
  const fs::path dir = scratch("params");
  const NetworkSpec spec = parse_network("dense:5,relu,dense:2", {1, 1, 3}, 2);
  const ParamVector w = init_params(spec, 3);
  save_params(dir / "w.params", spec, w);
  CHECK(load_params(dir / "w.params", spec) == w);
  CHECK_THROWS_AS(load_params(dir / "w.params", parse_network("dense:6,relu,dense:2", {1, 1, 3}, 2)), std::runtime_error);
  CHECK_THROWS_AS(save_params(dir / "x.params", spec, ParamVector(3)), ShapeError);
  std::string raw = slurp(dir / "w.params");
  spit(dir / "trunc.params", raw.substr(0, raw.size() - 8));
  CHECK_THROWS_AS(load_params(dir / "trunc.params", spec), std::runtime_error);
  raw[0] = 'X';
  spit(dir / "magic.params", raw);
  CHECK_THROWS_AS(load_params(dir / "magic.params", spec), std::runtime_error);
}

TEST_CASE("epochs_to_target") {
  std::vector<MetricsRow> rows(3);
  rows[0].train_hinge = 1.0;
  rows[1].epoch = 0.5;
  rows[1].train_hinge = 0.2;
  rows[2].epoch = 1.0;
  rows[2].train_hinge = 0.05;
  CHECK(*epochs_to_target(rows, 0.2) == 0.5);
  CHECK(*epochs_to_target(rows, 0.1) == 1.0);
  CHECK(!epochs_to_target(rows, 0.01));
}

TEST_CASE("perturbation norms of a diagonal slice") {
  const Shape s{2, 2, 1};
  const std::vector<double> d{3, 0, 0, -4};
  const auto n = perturbation_norms(d, s);
  CHECK(n.frobenius == doctest::Approx(5));
  CHECK(n.infinity == doctest::Approx(4));
  CHECK(n.nuclear == doctest::Approx(7));
  CHECK(n.one == doctest::Approx(7));
  CHECK(n.get(NormKind::nuclear) == n.nuclear);
  CHECK(parse_norm_kind(to_string(NormKind::one)) == NormKind::one);
  CHECK_THROWS(parse_norm_kind("l7"));
}

TEST_CASE("nuclear norm sums singular values over channels") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0, 1);
  const Shape s{3, 4, 2};
  std::vector<double> d(s.size());
  for (double& v : d) v = g(rng);
  double ref = 0.0;
  for (int c = 0; c < 2; ++c) {
    Eigen::MatrixXd m(3, 4);
    for (int h = 0; h < 3; ++h)
      for (int w = 0; w < 4; ++w) m(h, w) = d[static_cast<std::size_t>((h * 4 + w) * 2 + c)];
    ref += Eigen::BDCSVD<Eigen::MatrixXd>(m).singularValues().sum();
  }
  CHECK(perturbation_norm(d, s, NormKind::nuclear) == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("projections land on the ball and are idempotent") {
  const Shape s{2, 2, 1};
  {
    std::vector<double> d{3, 0, 0, -4};
    project_to_ball(d, s, NormKind::nuclear, 3.0);  // singular values (4, 3) -> (2, 1)
    CHECK(d[0] == doctest::Approx(1));
    CHECK(d[3] == doctest::Approx(-2));
    CHECK(std::abs(d[1]) < 1e-12);
  }
  {
    std::vector<double> d{3, -4, 0, 0};
    project_to_ball(d, s, NormKind::one, 3.0);
    CHECK(d == std::vector<double>{1, -2, 0, 0});
  }
  {
    std::vector<double> d{3, -4, 0.5, 0};
    project_to_ball(d, s, NormKind::infinity, 1.0);
    CHECK(d == std::vector<double>{1, -1, 0.5, 0});
  }
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0, 1);
  for (NormKind k : {NormKind::frobenius, NormKind::infinity, NormKind::nuclear, NormKind::one}) {
    const Shape big{4, 3, 2};
    std::vector<double> d(big.size());
    for (double& v : d) v = 3.0 * g(rng);
    project_to_ball(d, big, k, 1.5);
    CHECK(perturbation_norm(d, big, k) == doctest::Approx(1.5).epsilon(1e-9));
    const auto again = d;
    project_to_ball(d, big, k, 1.5);
    for (std::size_t i = 0; i < d.size(); ++i) CHECK(d[i] == doctest::Approx(again[i]).epsilon(1e-9));
    std::vector<double> small(big.size(), 0.01);
    const auto keep = small;
    project_to_ball(small, big, k, 1.5);
    CHECK(small == keep);
  }
}

TEST_CASE("minimal attack on a linear model matches the dual-norm distance") {
  const Linear2 m;
  const auto d = m.diff();
  REQUIRE(m.gap() > 0.0);
  double l2 = 0.0, l1 = 0.0, linf = 0.0;
  for (double v : d) {
    l2 += v * v;
    l1 += std::abs(v);
    linf = std::max(linf, std::abs(v));
  }
  Eigen::Matrix2d W;
  W << d[0], d[1], d[2], d[3];
  const double spectral = Eigen::JacobiSVD<Eigen::Matrix2d>(W).singularValues()(0);
  const std::pair<NormKind, double> cases[] = {{NormKind::frobenius, m.gap() / std::sqrt(l2)},
                                               {NormKind::infinity, m.gap() / l1},
                                               {NormKind::one, m.gap() / linf},
                                               {NormKind::nuclear, m.gap() / spectral}};
  for (const auto& [k, expect] : cases) {
    CAPTURE(to_string(k));
    AttackOptions opt;
    opt.norm = k;
    opt.pgd_steps = 100;
    const auto r = minimal_adversarial_noise(m.spec, m.w, m.x, opt);
    REQUIRE(r.success);
    CHECK(r.original_label == 1);
    CHECK(r.adversarial_label == 2);
    CHECK(r.lower_budget <= r.budget);
    CHECK(r.norms.get(k) == doctest::Approx(expect).epsilon(0.01));
    CHECK(r.norms.get(k) >= expect * (1 - 1e-9));
    std::vector<double> xa = m.x.input;
    for (std::size_t i = 0; i < xa.size(); ++i) xa[i] += r.perturbation[i];
    CHECK(predict(forward(m.spec, m.w, xa)) == 2);
  }
}

TEST_CASE("an already misclassified sample needs no noise") {
  Linear2 m;
  m.x.label = 2;
  const auto r = minimal_adversarial_noise(m.spec, m.w, m.x);
  CHECK(r.success);
  CHECK(r.norms.frobenius == 0.0);
  CHECK(r.iterations == 0);
}

TEST_CASE("spearman and the paired t test against reference values") {
  const std::vector<double> x{1, 2, 3, 4, 5}, y{2, 1, 4, 3, 5};
  const auto c = stats::spearman(x, y);
  CHECK(c.rho == doctest::Approx(0.8));
  CHECK(c.p_value == doctest::Approx(0.10408803866182788).epsilon(1e-6));
  CHECK(c.n == 5);
  // Ties share the average rank.
  const std::vector<double> xt{1, 2, 2, 3, 4, 5, 6}, yt{3, 1, 2, 2, 6, 5, 4};
  const auto ct = stats::spearman(xt, yt);
  CHECK(ct.rho == doctest::Approx(0.6090909090909091));
  CHECK(ct.p_value == doctest::Approx(0.14657668536668256).epsilon(1e-6));
  CHECK(stats::ranks(xt) == std::vector<double>{1, 2.5, 2.5, 4, 5, 6, 7});
  const std::vector<double> flat(5, 1.0);
  CHECK(stats::spearman(x, flat).p_value == 1.0);

  const std::vector<double> a{2, 3, 5, 7}, b{1, 1, 2, 3};
  const auto t = stats::paired_t_greater(a, b);
  CHECK(t.t == doctest::Approx(3.872983346207417));
  CHECK(t.df == 3);
  CHECK(t.p_value == doctest::Approx(0.015233145831085489).epsilon(1e-6));
  CHECK(t.mean_diff == doctest::Approx(2.5));
  const std::vector<double> a2{0.3, 0.1, 0.5, 0.2, 0.9, 0.4}, b2{0.1, 0.2, 0.3, 0.2, 0.4, 0.5};
  CHECK(stats::paired_t_greater(a2, b2).p_value == doctest::Approx(0.1360895515830918).epsilon(1e-6));
  CHECK(stats::median(std::vector<double>{3, 1, 2, 10}) == 2.5);
  CHECK(stats::stddev(std::vector<double>{1, 2, 3, 4}) == doctest::Approx(std::sqrt(5.0 / 3.0)));
}

TEST_CASE("gradient check passes on the backprop gradient and catches a wrong one") {
  GradcheckOptions opt;
  opt.pairs = 24;
  const auto ok = gradient_check(opt);
  CHECK(ok.passed);
  CHECK(ok.pairs == 24);
  CHECK(ok.max_relative_error < 1e-5);
  CHECK(ok.richardson_median_ratio == doctest::Approx(4.0).epsilon(0.1));

  const GradientFn scaled = [](const NetworkSpec& s, const ParamVector& w, const Sample& x, int j) {
    ParamVector g = output_gradient(s, w, x, j);
    for (double& v : g) v *= 1.001;
    return g;
  };
  const auto bad = gradient_check(opt, scaled);
  CHECK(!bad.passed);
  CHECK(!bad.failures.empty());

  const GradientFn dropped = [](const NetworkSpec& s, const ParamVector& w, const Sample& x, int j) {
    ParamVector g = output_gradient(s, w, x, j);
    g[g.size() - 1] = 0.0;  // a missing bias gradient
    return g;
  };
  CHECK(!gradient_check(opt, dropped).passed);
}

TEST_CASE("convergence run on a tiny problem writes consistent outputs") {
  ExperimentConfig cfg;
  cfg.dataset = "blobs:K=3,n=40,test_n=20,dim=4,sep=4,seed=2";
  cfg.network = "dense:4,relu";
  cfg.trainer.num_iter = 6;
  cfg.trainer.batch_size_init = 8;
  cfg.trainer.eval_every = 2;
  cfg.trainer.record_wall_time = false;
  cfg.sgd.batch_size = 7;
  cfg.sgd.record_wall_time = false;
  cfg.sgd_grid = {0.1, 0.01};
  cfg.sgd_epochs = 2;
  cfg.output_dir = scratch("conv");
  const auto r = run_convergence(cfg);
  REQUIRE(r.sgd_runs.size() == 2);
  CHECK(r.sgd_runs[0].result.metrics.back().epoch == doctest::Approx(2.0));
  CHECK(r.sgd_runs[r.sgd_best].validation_hinge <= r.sgd_runs[1 - r.sgd_best].validation_hinge);
  for (const char* f : {"svm_metrics.csv", "sgd_metrics.csv", "summary.csv", "svm.params", "sgd.params"})
    CHECK(fs::exists(cfg.output_dir / f));
  CHECK(load_params(cfg.output_dir / "svm.params", r.data.spec) == r.svm.params);
  const auto back = metrics_from_table(read_csv(cfg.output_dir / "svm_metrics.csv"));
  REQUIRE(back.size() == r.svm.metrics.size());
  CHECK(back.back().train_hinge == r.svm.metrics.back().train_hinge);
  CHECK(r.data.validation.size() > 0);

  cfg.trainer.num_iter = 0;
  cfg.output_dir = scratch("conv0");
  CHECK(run_convergence(cfg).svm.metrics.size() == 1);
}

TEST_CASE("adversarial run: identical networks give identical rows, no samples give an empty table") {
  const Linear2 m;
  Dataset test;
  test.shape = {2, 2, 1};
  test.num_classes = 2;
  test.samples = {m.x, {{0.1, 0.9, 0.2, 0.8}, 2}, {{0.5, 0.5, 0.5, 0.5}, 1}};
  ExperimentConfig cfg;
  cfg.output_dir = scratch("adv");
  cfg.adversarial_norms = {NormKind::frobenius, NormKind::infinity};
  const auto r = run_adversarial(cfg, m.spec, test, m.w, m.w, "a", "b");
  REQUIRE(r.table.rows.size() == 2);
  for (std::size_t c = 1; c < r.table.columns.size(); ++c) CHECK(r.table.rows[0][c] == r.table.rows[1][c]);
  CHECK(r.table.rows[0][4] == "nan");
  CHECK(r.frobenius_test.mean_diff == 0.0);
  CHECK(fs::exists(cfg.output_dir / "adversarial_samples.csv"));

  cfg.adversarial_samples = 0;
  const auto none = run_adversarial(cfg, m.spec, test, m.w, m.w);
  CHECK(none.evaluated == 0);
  CHECK(none.table.rows.empty());
  CHECK(read_csv(cfg.output_dir / "adversarial.csv").rows.empty());
}
