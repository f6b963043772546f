#include "svmu/svm_step.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace svmu {

namespace {

void check_labels(std::size_t M, std::span<const int> labels) {
  if (labels.size() != M) throw std::invalid_argument("labels must have one entry per record");
  for (int y : labels)
    if (y != 1 && y != -1) throw std::invalid_argument("labels must be +1 or -1");
}

// Cheap PSD screen: nonnegative diagonal and every 2x2 principal minor
// nonnegative, both up to a tolerance relative to the trace.
void screen_psd(const GramMatrix& K) {
  const std::size_t M = K.size();
  const double tr = K.trace();
  const double tol = 1e-8 * std::max(tr, 1e-300);
  for (std::size_t m = 0; m < M; ++m)
    if (K(m, m) < -tol) throw NumericalError("gram matrix has a negative diagonal entry");
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t n = m + 1; n < M; ++n) {
      if (std::abs(K(m, n) - K(n, m)) > 1e-10 * std::max({std::abs(K(m, n)), std::abs(K(n, m)), 1e-300}))
        throw NumericalError("gram matrix is not symmetric");
      const double minor = K(m, m) * K(n, n) - K(m, n) * K(n, m);
      if (minor < -tol * std::max(tr, 1.0)) throw NumericalError("gram matrix is not positive semidefinite");
    }
  }
}

double kkt_violation(double alpha, double margin, double epsilon, double C) {
  if (alpha <= 0.0) return std::max(0.0, epsilon - margin);
  if (alpha >= C) return std::max(0.0, margin - epsilon);
  return std::abs(margin - epsilon);
}

double max_kkt(const DualSolution& s, double epsilon, double C) {
  double v = 0.0;
  for (std::size_t m = 0; m < s.alpha.size(); ++m)
    if (!s.degenerate[m]) v = std::max(v, kkt_violation(s.alpha[m], s.margins[m], epsilon, C));
  return v;
}

void fill_objectives(DualSolution& s, double epsilon, double C) {
  const std::size_t M = s.alpha.size();
  s.slacks.assign(M, 0.0);
  double alpha_sum = 0.0;
  double slack_active = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    s.slacks[m] = std::max(0.0, epsilon - s.margins[m]);
    if (s.degenerate[m]) continue;
    alpha_sum += s.alpha[m];
    slack_active += s.slacks[m];
  }
  s.dual_objective = epsilon * alpha_sum - 0.5 * s.update_norm_sq;
  s.primal_objective = 0.5 * s.update_norm_sq + C * slack_active;
}

void check_options(const SolverOptions& opt) {
  if (!(opt.epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
  if (!(opt.C > 0.0)) throw std::invalid_argument("C must be positive");
  if (!(opt.tol > 0.0)) throw std::invalid_argument("tol must be positive");
}

bool finished(const DualSolution& s, const SolverOptions& opt) {
  return max_kkt(s, opt.epsilon, opt.C) <= opt.tol && s.primal_objective - s.dual_objective <= 10.0 * opt.tol;
}

}  // namespace

std::vector<int> random_negatives(int num_classes, int true_class, int q, std::mt19937_64& rng) {
  std::vector<int> neg;
  neg.reserve(static_cast<std::size_t>(std::max(0, num_classes - 1)));
  for (int j = 1; j <= num_classes; ++j)
    if (j != true_class) neg.push_back(j);
  if (q >= static_cast<int>(neg.size())) return neg;
  const std::size_t n = neg.size();
  for (std::size_t t = 0; t < static_cast<std::size_t>(q); ++t) {
    const std::size_t pick = t + static_cast<std::size_t>(rng() % (n - t));
    std::swap(neg[t], neg[pick]);
  }
  neg.resize(static_cast<std::size_t>(q));
  std::sort(neg.begin(), neg.end());
  return neg;
}

std::vector<GradientRecord> build_gradient_set(const NetworkSpec& spec, const ParamVector& params,
                                               std::span<const Sample* const> minibatch,
                                               const NegativePolicy& policy, kernels::Exec exec) {
  if (minibatch.empty()) throw std::invalid_argument("build_gradient_set: empty minibatch");
  const int K = spec.num_classes();

  std::vector<std::vector<int>> chosen(minibatch.size());
  if (policy.kind == NegativePolicy::Kind::random_subset) {
    std::mt19937_64 rng(policy.seed);
    for (std::size_t i = 0; i < minibatch.size(); ++i)
      chosen[i] = random_negatives(K, minibatch[i]->label, policy.subset_size, rng);
  }

  std::vector<std::vector<GradientRecord>> per_sample(minibatch.size());
  kernels::for_each_index(
      minibatch.size(),
      [&](std::size_t i) {
        const Sample& s = *minibatch[i];
        const ForwardTrace t = forward_trace(spec, params, s.input);
        std::vector<int> nodes;
        for (int j = 1; j <= K; ++j) {
          if (j == s.label) {
            nodes.push_back(j);
            continue;
          }
          switch (policy.kind) {
            case NegativePolicy::Kind::all:
              nodes.push_back(j);
              break;
            case NegativePolicy::Kind::active:
              if (1.0 + t.output()[static_cast<std::size_t>(j - 1)] > 0.0) nodes.push_back(j);
              break;
            case NegativePolicy::Kind::random_subset:
              if (std::binary_search(chosen[i].begin(), chosen[i].end(), j)) nodes.push_back(j);
              break;
          }
        }
        std::vector<double> seed(static_cast<std::size_t>(K));
        for (int j : nodes) {
          std::fill(seed.begin(), seed.end(), 0.0);
          seed[static_cast<std::size_t>(j - 1)] = 1.0;
          GradientRecord r;
          r.grad = ParamVector(spec.param_count());
          backward(spec, params, t, seed, r.grad.span());
          r.label = j == s.label ? 1 : -1;
          r.sample_id = i;
          r.node_id = j;
          per_sample[i].push_back(std::move(r));
        }
      },
      exec);

  std::vector<GradientRecord> records;
  for (auto& v : per_sample)
    for (auto& r : v) records.push_back(std::move(r));
  return records;
}

double GramMatrix::trace() const {
  double t = 0.0;
  for (std::size_t i = 0; i < n_; ++i) t += (*this)(i, i);
  return t;
}

GramMatrix gram_matrix(std::span<const std::span<const double>> rows, kernels::Exec exec) {
  GramMatrix K(rows.size());
  if (exec == kernels::Exec::serial)
    kernels::gram_serial(rows, K.entries());
  else
    kernels::gram_parallel(rows, K.entries());
  return K;
}

GramMatrix gram_matrix(std::span<const GradientRecord> records, kernels::Exec exec) {
  std::vector<std::span<const double>> rows;
  rows.reserve(records.size());
  for (const auto& r : records) {
    if (r.grad.size() != records.front().grad.size())
      throw std::invalid_argument("gram_matrix: records have different parameter lengths");
    rows.push_back(r.grad.span());
  }
  return gram_matrix(std::span<const std::span<const double>>(rows), exec);
}

double DualSolution::slack_sum() const { return std::accumulate(slacks.begin(), slacks.end(), 0.0); }

DualSolution evaluate_dual(const GramMatrix& K, std::span<const int> labels, std::span<const double> alpha,
                           double epsilon, double C) {
  const std::size_t M = K.size();
  check_labels(M, labels);
  if (alpha.size() != M) throw std::invalid_argument("alpha must have one entry per record");
  DualSolution s;
  s.alpha.assign(alpha.begin(), alpha.end());
  s.labels.assign(labels.begin(), labels.end());
  s.degenerate.resize(M);
  s.margins.assign(M, 0.0);
  std::vector<double> ya(M);
  for (std::size_t n = 0; n < M; ++n) ya[n] = alpha[n] * labels[n];
  double norm_sq = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    s.degenerate[m] = K(m, m) <= kDegenerateDiagonal;
    const auto row = K.row(m);
    double v = 0.0;
    for (std::size_t n = 0; n < M; ++n) v += row[n] * ya[n];
    s.margins[m] = labels[m] * v;
    norm_sq += ya[m] * v;
  }
  s.update_norm_sq = std::max(0.0, norm_sq);
  fill_objectives(s, epsilon, C);
  return s;
}

DualSolution solve_dual(const GramMatrix& K, std::span<const int> labels, const SolverOptions& opt) {
  check_options(opt);
  const std::size_t M = K.size();
  check_labels(M, labels);
  if (opt.check_psd) screen_psd(K);

  std::vector<double> alpha(M, 0.0);
  std::vector<double> score(M, 0.0);  // sum_n alpha_n y_n K_mn
  std::vector<bool> degenerate(M);
  for (std::size_t m = 0; m < M; ++m) degenerate[m] = K(m, m) <= kDegenerateDiagonal;

  DualSolution s = evaluate_dual(K, labels, alpha, opt.epsilon, opt.C);
  int sweeps = 0;
  std::vector<double> history;
  bool done = finished(s, opt);
  while (!done && sweeps < opt.max_sweeps) {
    for (std::size_t m = 0; m < M; ++m) {
      if (degenerate[m]) continue;
      const double y = labels[m];
      const double grad = opt.epsilon - y * score[m];
      const double next = std::clamp(alpha[m] + grad / K(m, m), 0.0, opt.C);
      const double d = next - alpha[m];
      if (d == 0.0) continue;
      alpha[m] = next;
      const double step = d * y;
      const auto col = K.row(m);
      for (std::size_t n = 0; n < M; ++n) score[n] += step * col[n];
    }
    ++sweeps;
    s = evaluate_dual(K, labels, alpha, opt.epsilon, opt.C);
    // Re-anchor the running scores to the exact values to stop drift.
    for (std::size_t n = 0; n < M; ++n) score[n] = labels[n] * s.margins[n];
    history.push_back(s.dual_objective);
    done = finished(s, opt);
  }
  s.converged = done;
  s.sweeps = sweeps;
  s.sweep_objectives = std::move(history);
  return s;
}

DualSolution solve_dual_linear(std::span<const GradientRecord> records, const SolverOptions& opt) {
  check_options(opt);
  const std::size_t M = records.size();
  const std::size_t P = M ? records.front().grad.size() : 0;
  std::vector<int> labels(M);
  std::vector<double> diag(M);
  for (std::size_t m = 0; m < M; ++m) {
    if (records[m].grad.size() != P) throw std::invalid_argument("records have different parameter lengths");
    labels[m] = records[m].label;
    diag[m] = dot(records[m].grad.span(), records[m].grad.span());
  }
  check_labels(M, labels);

  std::vector<double> alpha(M, 0.0);
  ParamVector w(P);
  DualSolution s;

  auto evaluate = [&] {
    s.alpha = alpha;
    s.labels = labels;
    s.degenerate.resize(M);
    s.margins.resize(M);
    for (std::size_t m = 0; m < M; ++m) {
      s.degenerate[m] = diag[m] <= kDegenerateDiagonal;
      s.margins[m] = labels[m] * dot(w.span(), records[m].grad.span());
    }
    s.update_norm_sq = dot(w.span(), w.span());
    fill_objectives(s, opt.epsilon, opt.C);
  };

  evaluate();
  int sweeps = 0;
  std::vector<double> history;
  bool done = finished(s, opt);
  while (!done && sweeps < opt.max_sweeps) {
    double sweep_violation = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      if (diag[m] <= kDegenerateDiagonal) continue;
      const double y = labels[m];
      const auto g = records[m].grad.span();
      const double margin = y * dot(w.span(), g);
      sweep_violation = std::max(sweep_violation, kkt_violation(alpha[m], margin, opt.epsilon, opt.C));
      const double next = std::clamp(alpha[m] + (opt.epsilon - margin) / diag[m], 0.0, opt.C);
      const double d = next - alpha[m];
      if (d == 0.0) continue;
      alpha[m] = next;
      const double step = d * y;
      for (std::size_t k = 0; k < P; ++k) w[k] += step * g[k];
    }
    ++sweeps;
    // Exact margins are only recomputed once the in-sweep estimate says we are close.
    if (sweep_violation <= opt.tol * 10.0 || sweeps == opt.max_sweeps) {
      w = recover_update(records, alpha, labels);
      evaluate();
      history.push_back(s.dual_objective);
      done = finished(s, opt);
    } else {
      history.push_back(opt.epsilon * std::accumulate(alpha.begin(), alpha.end(), 0.0) -
                        0.5 * dot(w.span(), w.span()));
    }
  }
  if (!done && sweeps == 0) evaluate();
  s.delta_w = std::move(w);
  s.converged = done;
  s.sweeps = sweeps;
  s.sweep_objectives = std::move(history);
  return s;
}

ParamVector recover_update(std::span<const GradientRecord> records, std::span<const double> alpha,
                           std::span<const int> labels) {
  if (alpha.size() != records.size() || labels.size() != records.size())
    throw std::invalid_argument("recover_update: size mismatch");
  ParamVector w(records.empty() ? 0 : records.front().grad.size());
  for (std::size_t m = 0; m < records.size(); ++m) {
    if (alpha[m] == 0.0) continue;
    const double c = alpha[m] * labels[m];
    const auto g = records[m].grad.span();
    for (std::size_t k = 0; k < w.size(); ++k) w[k] += c * g[k];
  }
  return w;
}

double KktReport::max_violation() const { return std::max({lower, interior, upper}); }

KktReport kkt_check(const DualSolution& sol, double epsilon, double C) {
  KktReport r;
  for (std::size_t m = 0; m < sol.alpha.size(); ++m) {
    if (!sol.degenerate.empty() && sol.degenerate[m]) {
      ++r.degenerate_skipped;
      continue;
    }
    const double a = sol.alpha[m];
    const double v = kkt_violation(a, sol.margins[m], epsilon, C);
    if (a <= 0.0) r.lower = std::max(r.lower, v);
    else if (a >= C) r.upper = std::max(r.upper, v);
    else r.interior = std::max(r.interior, v);
  }
  return r;
}

BoundReport bound_report(double update_norm, double trace_K, std::size_t batch_m, double slack_sum, double epsilon,
                         double confidence_delta) {
  if (!(confidence_delta > 0.0 && confidence_delta < 1.0))
    throw std::invalid_argument("confidence_delta must lie in (0,1)");
  if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
  if (batch_m == 0) throw std::invalid_argument("bound_report: no records");
  BoundReport b;
  b.B = update_norm;
  b.gamma = epsilon;
  b.trace_K = std::max(0.0, trace_K);
  b.batch_m = batch_m;
  b.slack_sum = slack_sum;
  b.confidence_delta = confidence_delta;
  const auto m = static_cast<double>(batch_m);
  const double root_tr = std::sqrt(b.trace_K);
  b.schedule_term = b.B * root_tr / m;
  b.full_rhs = slack_sum / (m * b.gamma) + 4.0 * b.B * root_tr / (m * b.gamma) +
               3.0 * std::sqrt(std::log(2.0 / confidence_delta) / (2.0 * m));
  return b;
}

BoundReport bound_report(const DualSolution& sol, const GramMatrix& K, double epsilon, double confidence_delta) {
  const double norm = sol.delta_w.empty() ? std::sqrt(sol.update_norm_sq) : sol.delta_w.norm();
  return bound_report(norm, K.trace(), sol.alpha.size(), sol.slack_sum(), epsilon, confidence_delta);
}

}  // namespace svmu
