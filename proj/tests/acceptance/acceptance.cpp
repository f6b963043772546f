// Acceptance run: one PASS/FAIL line per criterion.
//
// Criteria 5-8 and 10 use MNIST when the IDX files are found ($MNIST_DIR or
// <source>/data/mnist) and the procedural digit set otherwise; those lines say
// which data they ran on.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "../qp_oracle.hpp"
#include "svmu/experiments.hpp"

using namespace svmu;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, bool pass, const std::string& what, const std::string& detail) {
  std::printf("criterion %2d: %s  %s | %s\n", id, pass ? "PASS" : "FAIL", what.c_str(), detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

GramMatrix gram_of(const Eigen::MatrixXd& G) {
  const Eigen::MatrixXd K = G.transpose() * G;
  GramMatrix out(static_cast<std::size_t>(K.rows()));
  for (Eigen::Index i = 0; i < K.rows(); ++i)
    for (Eigen::Index j = 0; j < K.cols(); ++j) out(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = K(i, j);
  return out;
}

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd G(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) G(i, j) = n(rng);
  return G;
}

std::vector<int> random_labels(std::size_t M, std::mt19937_64& rng) {
  std::vector<int> y(M);
  for (int& v : y) v = (rng() & 1) ? 1 : -1;
  return y;
}

void criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckOptions opt;
  opt.pairs = 100;
  const GradcheckReport r = gradient_check(opt);
  const double dt = seconds_since(t0);
  report(1, r.passed && r.max_relative_error <= 1e-5 && dt <= 60.0, "gradient correctness",
         fmt("%d triples, max relative error %.3g, %zu coordinates (%zu excluded at kinks), Richardson median %.3f, %.2fs",
             r.pairs, r.max_relative_error, r.coordinates, r.excluded, r.richardson_median_ratio, dt));
}

void criterion_2() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2);
  const double Cs[] = {0.1, 1.0, 10.0};
  double worst_gap = 0.0, worst_kkt = 0.0;
  for (int p = 0; p < 50; ++p) {
    const auto M = static_cast<Eigen::Index>(2 + rng() % 19);
    const auto P = static_cast<Eigen::Index>(1 + rng() % static_cast<std::uint64_t>(2 * M));
    const GramMatrix K = gram_of(random_matrix(P, M, rng));
    const auto y = random_labels(static_cast<std::size_t>(M), rng);
    SolverOptions opt;
    opt.C = Cs[p % 3];
    opt.tol = 1e-9;
    opt.max_sweeps = 1000000;
    const DualSolution sol = solve_dual(K, y, opt);
    const Eigen::MatrixXd Q = oracle::signed_gram(K.entries(), y);
    const double ref = oracle::objective(Q, oracle::fista(Q, 1.0, opt.C), 1.0);
    worst_gap = std::max(worst_gap, std::abs(sol.dual_objective - ref));
    worst_kkt = std::max(worst_kkt, kkt_check(sol, 1.0, opt.C).max_violation());
  }
  const double dt = seconds_since(t0);
  report(2, worst_gap <= 1e-6 && worst_kkt <= 1e-6 && dt <= 120.0, "QP solver equivalence",
         fmt("50 problems, max |objective - reference| %.3g, max KKT violation %.3g, %.2fs", worst_gap, worst_kkt, dt));
}

void criterion_3() {
  std::mt19937_64 rng(3);
  double worst = 0.0;
  for (int p = 0; p < 20; ++p) {
    const auto M = static_cast<Eigen::Index>(2 + rng() % 19);
    const GramMatrix K = gram_of(random_matrix(2 * M, M, rng));
    const auto y = random_labels(static_cast<std::size_t>(M), rng);
    SolverOptions opt;
    opt.C = 1e6;
    opt.tol = 1e-12;
    opt.max_sweeps = 10000000;
    const DualSolution a = solve_dual(K, y, opt);
    opt.epsilon = 2.0;
    const DualSolution b = solve_dual(K, y, opt);
    for (std::size_t i = 0; i < a.alpha.size(); ++i) worst = std::max(worst, std::abs(b.alpha[i] - 2.0 * a.alpha[i]));
  }
  report(3, worst <= 1e-5, "scaling property", fmt("20 problems, max |alpha(2e) - 2 alpha(e)| %.3g", worst));
}

void criterion_4(const fs::path& configs) {
  const ExperimentConfig cfg = load_experiment_config(configs / "blobs.cfg");
  const TrainTest data = load_dataset(cfg.dataset);
  const NetworkSpec spec = parse_network(cfg.network + ",dense:" + std::to_string(data.train.num_classes),
                                         data.train.shape, data.train.num_classes);
  TrainerConfig tc = cfg.trainer;
  tc.track_train_loss = false;
  const TrainResult r = train(data.train, nullptr, spec, tc);
  int applied = 0, decreased = 0;
  std::vector<double> ratios;
  for (const auto& d : r.diagnostics) {
    if (d.gated) continue;
    ++applied;
    decreased += d.minibatch_after < d.minibatch_before;
    if (ratios.size() < 20 && d.h_residual_half != 0.0) ratios.push_back(std::abs(d.h_residual / d.h_residual_half));
  }
  const double frac = applied ? static_cast<double>(decreased) / applied : 0.0;
  const double med = ratios.empty() ? 0.0 : stats::median(ratios);
  report(4, applied > 0 && frac >= 0.9 && ratios.size() == 20 && med >= 3.5, "first-order descent",
         fmt("%zu samples, %d/%d non-gated updates decrease the minibatch hinge (%.1f%%), residual ratio median %.3f over %zu updates",
             data.train.size(), decreased, applied, 100.0 * frac, med, ratios.size()));
}

void criterion_9(const std::string& mnist_dir) {
  bool ok = true;
  std::string detail;
  {
    Dataset d;
    d.shape = {2, 3, 1};
    d.num_classes = 10;
    const std::uint8_t px[3][6] = {{0, 255, 17, 128, 3, 90}, {1, 2, 3, 4, 5, 6}, {255, 254, 0, 0, 77, 200}};
    const int labels[3] = {8, 1, 10};
    for (int i = 0; i < 3; ++i) {
      Sample s;
      for (std::uint8_t v : px[i]) s.input.push_back(v / 255.0);
      s.label = labels[i];
      d.samples.push_back(s);
    }
    const auto [img, lab] = serialize_idx(d);
    const Dataset back = parse_idx(img, lab);
    const auto [img2, lab2] = serialize_idx(back);
    ok &= img == img2 && lab == lab2 && back.size() == 3 && back.samples[2].label == 10 &&
          back.samples[0].input[1] == 1.0 && img.size() == 16 + 18 && lab.size() == 8 + 3;
    detail += "IDX fixture round trip " + std::string(ok ? "exact" : "MISMATCH");
  }
  {
    std::mt19937_64 rng(9);
    Dataset d;
    d.shape = {32, 32, 3};
    d.num_classes = 10;
    for (int i = 0; i < 3; ++i) {
      Sample s;
      for (int k = 0; k < 3072; ++k) s.input.push_back(static_cast<double>(rng() % 256) / 255.0);
      s.label = 1 + i * 4;
      d.samples.push_back(s);
    }
    const Bytes raw = serialize_cifar10(d);
    const Dataset back = parse_cifar10(raw);
    const bool c = raw.size() == 3 * 3073 && serialize_cifar10(back) == raw && back.samples[2].label == 9 &&
                   back.samples[1].input == d.samples[1].input;
    ok &= c;
    detail += std::string(", CIFAR-10 fixture round trip ") + (c ? "exact" : "MISMATCH");
  }
  if (!mnist_dir.empty()) {
    const TrainTest m = load_dataset("mnist:dir=" + mnist_dir);
    const bool c = m.train.size() == 60000 && m.test.size() == 10000;
    ok &= c;
    detail += fmt(", MNIST counts %zu/%zu", m.train.size(), m.test.size());
  } else {
    detail += ", official MNIST files absent so the 60000/10000 count check did not run";
  }
  report(9, ok, "parser bit-exactness", detail);
}

struct Paths {
  fs::path configs;
  fs::path out;
  std::string mnist_dir;
};

ExperimentConfig load_for(const Paths& p, const std::string& base, const fs::path& sub) {
  const bool mnist = !p.mnist_dir.empty();
  Config c = Config::load(p.configs / ((mnist ? "mnist" : "digits") + base + ".cfg"));
  if (mnist) c.set("dataset", "mnist:dir=" + p.mnist_dir);
  c.set("output_dir", (p.out / sub).string());
  return experiment_config_from(c);
}

bool same_files(const fs::path& a, const fs::path& b, std::string& first_diff) {
  bool same = true;
  for (const auto& e : fs::directory_iterator(a)) {
    if (e.path().extension() != ".csv" && e.path().extension() != ".params") continue;
    const fs::path other = b / e.path().filename();
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) {
      if (same) first_diff = e.path().filename().string();
      same = false;
    }
  }
  return same;
}

void experiment_criteria(const Paths& p) {
  const std::string data = p.mnist_dir.empty() ? "procedural digit stand-in" : "MNIST";

  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig cfg = load_for(p, "", "convergence_a");
  const ConvergenceResult conv = run_convergence(cfg);
  const double conv_seconds = seconds_since(t0);
  {
    double target = INFINITY, sgd_epoch = 0.0;
    for (const auto& run : conv.sgd_runs)
      if (run.result.metrics.back().train_hinge < target) {
        target = run.result.metrics.back().train_hinge;
        sgd_epoch = run.result.metrics.back().epoch;
      }
    const auto svm_epochs = epochs_to_target(conv.svm.metrics, target);
    const MetricsRow& svm_last = conv.svm.metrics.back();
    const MetricsRow& sgd_last = conv.sgd_runs[conv.sgd_best].result.metrics.back();
    const double acc_gap = std::abs(svm_last.test_acc - sgd_last.test_acc);
    const bool pass = svm_epochs && *svm_epochs <= 2.0 && std::abs(sgd_epoch - cfg.sgd_epochs) < 1e-9 && acc_gap <= 0.02;
    report(5, pass, "convergence speed [" + data + "]",
           fmt("target = best SGD train hinge at epoch %.0f = %.5g; svm reaches it at epoch %s (svm final %.5g at epoch %.3f); "
               "test acc svm %.4f vs sgd(lr %g) %.4f, gap %.2f pp; %zu train/%zu test; %.0fs",
               sgd_epoch, target, svm_epochs ? fmt("%.3f", *svm_epochs).c_str() : "never", svm_last.train_hinge,
               svm_last.epoch, svm_last.test_acc, conv.sgd_runs[conv.sgd_best].learning_rate, sgd_last.test_acc,
               100.0 * acc_gap, conv.data.train.size(), conv.data.test.size(), conv_seconds));
  }
  {
    long evals = 0, violations = 0;
    bool ok = true;
    auto scan = [&](const std::vector<EvalResult>& v) {
      for (const auto& e : v) {
        ++evals;
        violations += e.corollary_violations;
        ok &= e.corollary_ok;
      }
    };
    scan(conv.svm.train_evals);
    scan(conv.svm.test_evals);
    for (const auto& run : conv.sgd_runs) {
      scan(run.result.train_evals);
      scan(run.result.test_evals);
    }
    report(6, ok && violations == 0 && evals > 0, "corollary invariant [" + data + "]",
           fmt("%ld evaluations, %ld violating samples", evals, violations));
  }
  {
    const auto t1 = std::chrono::steady_clock::now();
    const ExperimentConfig rl = load_for(p, "_random_labels", "random_labels");
    const RandomLabelResult r = run_random_labels(rl);
    const auto& c = r.ratio_vs_bound;
    const bool pass = r.median_schedule_shuffled > r.median_schedule_true && c.rho < 0.0 && c.p_value < 0.05 &&
                      r.applied_updates >= 50;
    report(7, pass, "random-label bound growth [" + data + "]",
           fmt("median schedule term after epoch 1: shuffled %.4g vs true %.4g; ratio vs bound Spearman rho %.3f, p %.3g "
               "over %zu applied updates; shuffled batch reached %zu of %zu; %.0fs",
               r.median_schedule_shuffled, r.median_schedule_true, c.rho, c.p_value, r.applied_updates,
               r.shuffled_max_batch, conv.data.train.size(), seconds_since(t1)));
  }
  {
    ExperimentConfig adv = cfg;
    adv.output_dir = p.out / "adversarial";
    adv.adversarial_norms = {NormKind::frobenius, NormKind::infinity, NormKind::nuclear, NormKind::one};
    const auto t1 = std::chrono::steady_clock::now();
    const AdversarialSummary a = run_adversarial(adv, conv.data.spec, conv.data.test, conv.svm.params,
                                                 conv.sgd_runs[conv.sgd_best].result.params);
    const auto& t = a.frobenius_test;
    const bool pass = a.evaluated >= 200 && t.df + 1 >= 200 && t.mean_diff > 0.0 && t.p_value < 0.05;
    report(8, pass, "adversarial robustness [" + data + "]",
           fmt("%zu samples, mean frobenius svm %s vs sgd %s, paired t %.3f (df %.0f), one-sided p %.3g; %.0fs",
               a.evaluated, a.table.rows.empty() ? "-" : a.table.rows[0][2].c_str(),
               a.table.rows.empty() ? "-" : a.table.rows[1][2].c_str(), t.t, t.df, t.p_value, seconds_since(t1)));
  }
  {
    const ExperimentConfig again = load_for(p, "", "convergence_b");
    run_convergence(again);
    std::string diff;
    const bool same = same_files(cfg.output_dir, again.output_dir, diff) && same_files(again.output_dir, cfg.output_dir, diff);
    report(10, same, "determinism [" + data + "]",
           same ? "repeated convergence run wrote byte-identical CSV and parameter files" : "files differ: " + diff);
  }

}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  Paths p;
  std::string configs, out, mnist;
  app.add_option("--configs", configs, "directory holding the experiment configs")->required();
  app.add_option("--out", out, "output directory")->required();
  app.add_option("--mnist-dir", mnist, "MNIST IDX directory (default: $MNIST_DIR, then <configs>/../data/mnist)");
  bool fast_only = false;
  app.add_flag("--fast-only", fast_only, "only the criteria that do not train on the large data set");
  CLI11_PARSE(app, argc, argv);

  p.configs = configs;
  p.out = out;
  if (mnist.empty()) {
    if (const char* env = std::getenv("MNIST_DIR")) mnist = env;
    else mnist = (p.configs.parent_path() / "data" / "mnist").string();
  }
  if (mnist_available(mnist)) p.mnist_dir = mnist;
  fs::create_directories(p.out);

  try {
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4(p.configs);
    criterion_9(p.mnist_dir);
    if (!fast_only) experiment_criteria(p);
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
