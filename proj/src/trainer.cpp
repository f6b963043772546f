#include "svmu/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <queue>
#include <stdexcept>

namespace svmu {

namespace {

double minibatch_hinge(const NetworkSpec& spec, const ParamVector& params, std::span<const Sample* const> batch,
                       kernels::Exec exec) {
  const auto outs = kernels::batch_forward(spec, params, batch, exec);
  double s = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) s += hinge_loss(outs[i], batch[i]->label).sample_avg;
  return batch.empty() ? 0.0 : s / static_cast<double>(batch.size());
}

std::vector<const Sample*> gather(const Dataset& ds, std::span<const std::size_t> idx) {
  std::vector<const Sample*> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(&ds.samples[i]);
  return out;
}

class Clock {
 public:
  explicit Clock(bool enabled) : enabled_(enabled), start_(std::chrono::steady_clock::now()) {}
  [[nodiscard]] double seconds() const {
    if (!enabled_) return 0.0;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  bool enabled_;
  std::chrono::steady_clock::time_point start_;
};

// Fills the evaluation columns of a metrics row and keeps the full results.
void evaluate_row(MetricsRow& row, TrainResult& res, const NetworkSpec& spec, const ParamVector& params,
                  const Dataset& train_set, const Dataset* test_set, kernels::Exec exec) {
  const EvalResult tr = evaluate(spec, params, train_set, exec);
  row.train_hinge = tr.hinge;
  row.train_acc = tr.accuracy;
  res.train_evals.push_back(tr);
  if (test_set && !test_set->empty()) {
    const EvalResult te = evaluate(spec, params, *test_set, exec);
    row.test_hinge = te.hinge;
    row.test_acc = te.accuracy;
    res.test_evals.push_back(te);
  }
}

}  // namespace

void TrainerConfig::validate() const {
  if (!(step_size > 0.0)) throw std::invalid_argument("step_size must be positive");
  if (!(r_init > 0.0)) throw std::invalid_argument("r_init must be positive");
  if (!(r_decay > 0.0 && r_decay < 1.0)) throw std::invalid_argument("r_decay must lie in (0,1)");
  if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
  if (batch_size_init < 1) throw std::invalid_argument("batch_size_init must be at least 1");
  if (!(confidence_delta > 0.0 && confidence_delta < 1.0))
    throw std::invalid_argument("confidence_delta must lie in (0,1)");
  if (num_iter < 0) throw std::invalid_argument("num_iter must be nonnegative");
  if (max_epochs < 0.0) throw std::invalid_argument("max_epochs must be nonnegative");
  if (eval_every < 1) throw std::invalid_argument("eval_every must be positive");
}

std::string to_string(TrainStatus s) {
  return s == TrainStatus::completed ? "completed" : "bound never satisfied";
}

MinibatchStep train_minibatch(const NetworkSpec& spec, const ParamVector& params,
                              std::span<const Sample* const> minibatch, const StepSettings& settings) {
  if (minibatch.empty()) throw std::invalid_argument("train_minibatch: empty minibatch");
  const auto records =
      build_gradient_set(spec, params, minibatch, settings.negative_policy, settings.exec);
  SolverOptions opt;
  opt.epsilon = settings.epsilon;
  opt.C = settings.C;
  opt.tol = settings.tol;
  opt.max_sweeps = settings.max_sweeps;

  MinibatchStep step;
  step.records = records.size();
  if (records.size() <= settings.dense_gram_limit) {
    const GramMatrix K = gram_matrix(records, settings.exec);
    std::vector<int> labels(records.size());
    for (std::size_t m = 0; m < records.size(); ++m) labels[m] = records[m].label;
    step.sol = solve_dual(K, labels, opt);
    step.sol.delta_w = recover_update(records, step.sol.alpha, labels);
    step.bound = bound_report(step.sol, K, settings.epsilon, settings.confidence_delta);
    step.used_gram = true;
  } else {
    step.sol = solve_dual_linear(records, opt);
    double trace = 0.0;
    for (const auto& r : records) trace += dot(r.grad.span(), r.grad.span());
    step.bound = bound_report(step.sol.delta_w.norm(), trace, records.size(), step.sol.slack_sum(),
                              settings.epsilon, settings.confidence_delta);
    step.used_gram = false;
  }
  step.delta_w = step.sol.delta_w;
  return step;
}

ParamVector apply_update(const ParamVector& params, const ParamVector& delta_w, double step_size) {
  if (params.size() != delta_w.size()) throw ShapeError("apply_update: length mismatch");
  ParamVector out = params;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += step_size * delta_w[i];
  return out;
}

EvalResult evaluate(const NetworkSpec& spec, const ParamVector& params, const Dataset& ds, kernels::Exec exec) {
  EvalResult r;
  if (ds.empty()) return r;
  const auto ptrs = ds.pointers();
  const auto outs = kernels::batch_forward(spec, params, ptrs, exec);
  double hinge = 0.0;
  double summed = 0.0;
  int correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const HingeLoss h = hinge_loss(outs[i], ds.samples[i].label);
    hinge += h.sample_avg;
    const double sum = h.sum();
    summed += sum;
    if (predict(outs[i]) == ds.samples[i].label) {
      ++correct;
    } else {
      ++r.misclassified;
      if (sum < 2.0) ++r.corollary_violations;
    }
  }
  const auto n = static_cast<double>(ds.size());
  r.hinge = hinge / n;
  r.accuracy = correct / n;
  r.mean_summed_hinge = summed / n;
  r.corollary_ok = r.corollary_violations == 0 && (1.0 - r.accuracy) <= 0.5 * r.mean_summed_hinge;
  return r;
}

std::vector<int> active_node_counts(const NetworkSpec& spec, const ParamVector& params,
                                    std::span<const Sample* const> samples, kernels::Exec exec) {
  const auto outs = kernels::batch_forward(spec, params, samples, exec);
  std::vector<int> n(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) n[i] = hinge_loss(outs[i], samples[i]->label).active_nodes();
  return n;
}

std::vector<std::size_t> sample_uniform(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  k = std::min(k, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t t = 0; t < k; ++t) {
    std::uniform_int_distribution<std::size_t> pick(t, n - 1);
    std::swap(idx[t], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

std::vector<std::size_t> sample_proportional(std::span<const double> weights, std::size_t k, std::mt19937_64& rng) {
  // Efraimidis-Spirakis: the k largest keys log(u)/w are a successive-sampling draw.
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::pair<double, std::size_t>> keyed;
  std::vector<std::size_t> zero;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] > 0.0) {
      double u = unif(rng);
      while (u <= 0.0) u = unif(rng);
      keyed.emplace_back(std::log(u) / weights[i], i);
    } else {
      zero.push_back(i);
    }
  }
  k = std::min(k, weights.size());
  const std::size_t take = std::min(k, keyed.size());
  std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(take), keyed.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t t = 0; t < take; ++t) out.push_back(keyed[t].second);
  if (out.size() < k) {
    for (std::size_t z : sample_uniform(zero.size(), k - out.size(), rng)) out.push_back(zero[z]);
  }
  return out;
}

std::vector<std::size_t> weighted_minibatch_sampler(const Dataset& ds, const ParamVector& params,
                                                    const NetworkSpec& spec, std::size_t batch_size,
                                                    std::uint64_t seed, std::size_t probe_factor) {
  std::mt19937_64 rng(seed);
  const std::size_t N = ds.size();
  const std::size_t probe_n = probe_factor == 0 ? N : std::min(N, probe_factor * batch_size);
  std::vector<std::size_t> probe = probe_n == N ? [&] {
    std::vector<std::size_t> all(N);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }()
                                                : sample_uniform(N, probe_n, rng);
  const auto ptrs = gather(ds, probe);
  const auto counts = active_node_counts(spec, params, ptrs);
  std::vector<double> w(counts.begin(), counts.end());
  std::vector<std::size_t> local = sample_proportional(w, batch_size, rng);
  std::vector<std::size_t> out;
  out.reserve(local.size());
  for (std::size_t l : local) out.push_back(probe[l]);
  return out;
}

TrainResult train(const Dataset& train_set, const Dataset* test_set, const NetworkSpec& spec,
                  const TrainerConfig& config, std::optional<ParamVector> initial) {
  config.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty dataset");
  const Clock clock(config.record_wall_time);
  const std::size_t N = train_set.size();
  const double s = config.step_size;

  TrainResult res;
  res.params = initial ? std::move(*initial) : init_params(spec, config.seed);
  if (res.params.size() != spec.param_count()) throw ShapeError("initial parameters do not match the network");

  std::mt19937_64 rng(config.seed ^ 0x5851f42d4c957f2dULL);
  std::size_t batch_size = std::min(config.batch_size_init, N);
  double r = config.r_init;
  long updates = 0;
  std::size_t consumed = 0;
  int gated_at_cap = 0;
  const auto all_ptrs = train_set.pointers();

  auto train_hinge = [&](const ParamVector& p) { return minibatch_hinge(spec, p, all_ptrs, config.exec); };
  double cached_train = config.track_train_loss ? train_hinge(res.params) : 0.0;

  MetricsRow last;
  last.batch_size = static_cast<double>(batch_size);
  last.r = r;
  auto emit = [&] {
    MetricsRow row = last;
    row.epoch = static_cast<double>(consumed) / static_cast<double>(N);
    row.updates = updates;
    evaluate_row(row, res, spec, res.params, train_set, test_set, config.exec);
    row.wall_seconds = clock.seconds();
    res.metrics.push_back(row);
  };
  emit();

  for (int it = 0; it < config.num_iter; ++it) {
    std::vector<std::size_t> idx;
    if (config.sampler == SamplerKind::loss_weighted)
      idx = weighted_minibatch_sampler(train_set, res.params, spec, batch_size, rng(), config.probe_factor);
    else
      idx = sample_uniform(N, batch_size, rng);
    const auto batch = gather(train_set, idx);
    const std::size_t epoch_before = consumed / N;
    consumed += batch.size();

    StepSettings st;
    st.epsilon = config.epsilon;
    st.C = r;
    st.tol = config.solver_tol;
    st.max_sweeps = config.max_sweeps;
    st.confidence_delta = config.confidence_delta;
    st.negative_policy = config.negative_policy;
    st.dense_gram_limit = config.dense_gram_limit;
    st.exec = config.exec;
    const MinibatchStep step = train_minibatch(spec, res.params, batch, st);

    DescentRecord d;
    d.iteration = it;
    d.epoch = static_cast<double>(consumed) / static_cast<double>(N);
    d.batch_size = batch.size();
    d.r = r;
    d.schedule_term = step.bound.schedule_term;
    d.epsilon_bound = step.bound.full_rhs;
    d.delta_w_norm = step.bound.B;
    d.gated = step.bound.schedule_term > config.bound_threshold;

    last.schedule_term = step.bound.schedule_term;
    last.full_rhs = step.bound.full_rhs;
    last.delta_w_norm = step.bound.B;
    last.gated = d.gated ? 1 : 0;
    last.h_residual = 0.0;

    bool stop = false;
    if (d.gated) {
      if (batch_size == N && ++gated_at_cap >= config.max_gated_at_cap) stop = true;
      batch_size = std::min(2 * batch_size, N);
      r *= config.r_decay;
    }
    if (!d.gated || config.apply_gated_updates) {
      d.minibatch_before = minibatch_hinge(spec, res.params, batch, config.exec);
      const ParamVector grad = kernels::mean_hinge_gradient(spec, res.params, batch, config.exec);
      const double slope = dot(grad.span(), step.delta_w.span());
      d.delta_step = -s * slope;
      ParamVector next = apply_update(res.params, step.delta_w, s);
      d.minibatch_after = minibatch_hinge(spec, next, batch, config.exec);
      d.h_residual = d.minibatch_after - (d.minibatch_before - d.delta_step);
      const ParamVector half = apply_update(res.params, step.delta_w, 0.5 * s);
      d.h_residual_half =
          minibatch_hinge(spec, half, batch, config.exec) - (d.minibatch_before - 0.5 * d.delta_step);
      if (config.track_train_loss) {
        d.train_before = cached_train;
        cached_train = train_hinge(next);
        d.train_after = cached_train;
      }
      res.params = std::move(next);
      ++updates;
      last.h_residual = d.h_residual;
    }
    last.batch_size = static_cast<double>(batch_size);
    last.r = r;
    res.diagnostics.push_back(d);

    const bool epoch_boundary = consumed / N > epoch_before;
    if (stop) {
      res.status = TrainStatus::bound_never_satisfied;
      emit();
      break;
    }
    const bool out_of_epochs =
        config.max_epochs > 0.0 && static_cast<double>(consumed) >= config.max_epochs * static_cast<double>(N);
    if (out_of_epochs) {
      emit();
      break;
    }
    if ((it + 1) % config.eval_every == 0 || epoch_boundary || it + 1 == config.num_iter) emit();
  }
  return res;
}

TrainResult sgd_train(const Dataset& train_set, const Dataset* test_set, const NetworkSpec& spec,
                      const SgdConfig& config, std::optional<ParamVector> initial) {
  if (train_set.empty()) throw std::invalid_argument("sgd_train: empty dataset");
  if (config.batch_size < 1) throw std::invalid_argument("sgd batch_size must be at least 1");
  if (config.eval_every < 1) throw std::invalid_argument("eval_every must be positive");
  const Clock clock(config.record_wall_time);
  const std::size_t N = train_set.size();
  TrainResult res;
  res.params = initial ? std::move(*initial) : init_params(spec, config.seed);
  if (res.params.size() != spec.param_count()) throw ShapeError("initial parameters do not match the network");

  std::mt19937_64 rng(config.seed ^ 0x2545f4914f6cdd1dULL);
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = N;  // forces a shuffle on the first step
  std::size_t consumed = 0;
  long updates = 0;

  MetricsRow last;
  last.batch_size = static_cast<double>(config.batch_size);
  auto emit = [&] {
    MetricsRow row = last;
    row.epoch = static_cast<double>(consumed) / static_cast<double>(N);
    row.updates = updates;
    evaluate_row(row, res, spec, res.params, train_set, test_set, config.exec);
    row.wall_seconds = clock.seconds();
    res.metrics.push_back(row);
  };
  emit();

  for (int it = 0; it < config.num_iter; ++it) {
    if (cursor >= N) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const std::size_t end = std::min(N, cursor + config.batch_size);
    const auto batch = gather(train_set, std::span<const std::size_t>(order).subspan(cursor, end - cursor));
    cursor = end;
    const std::size_t epoch_before = consumed / N;
    consumed += batch.size();
    const ParamVector grad = kernels::mean_hinge_gradient(spec, res.params, batch, config.exec);
    res.params = apply_update(res.params, grad, -config.learning_rate);
    ++updates;
    last.delta_w_norm = grad.norm();
    const bool epoch_boundary = consumed / N > epoch_before;
    if ((it + 1) % config.eval_every == 0 || epoch_boundary || it + 1 == config.num_iter) emit();
  }
  return res;
}

}  // namespace svmu
