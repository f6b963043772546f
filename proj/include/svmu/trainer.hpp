#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "svmu/dataset.hpp"
#include "svmu/kernels.hpp"
#include "svmu/network.hpp"
#include "svmu/svm_step.hpp"

namespace svmu {

enum class SamplerKind { uniform, loss_weighted };

struct TrainerConfig {
  double step_size = 0.1;
  double r_init = 1.0;   // initial C of the update SVM
  double r_decay = 0.1;  // C multiplier applied on every gated iteration
  double epsilon = 1.0;  // target margin of every gradient record
  std::size_t batch_size_init = 32;
  double bound_threshold = 1.0;  // gate on schedule_term
  double confidence_delta = 0.1;
  NegativePolicy negative_policy;
  SamplerKind sampler = SamplerKind::uniform;
  std::size_t probe_factor = 4;  // loss-weighted sampler probes probe_factor * batch_size samples
  int num_iter = 100;
  double max_epochs = 0.0;  // also stop once this many epochs of samples were drawn (0: no limit)
  std::uint64_t seed = 1;

  double solver_tol = 1e-6;
  int max_sweeps = 1000;
  std::size_t dense_gram_limit = 4096;  // above this many records the solver skips the Gram matrix
  bool apply_gated_updates = false;     // apply gated updates anyway (literal pseudocode)
  int max_gated_at_cap = 3;             // gated iterations tolerated once batch_size == N

  int eval_every = 10;  // iterations between metric rows (plus every epoch boundary)
  bool track_train_loss = true;
  bool record_wall_time = true;
  kernels::Exec exec = kernels::Exec::parallel;

  void validate() const;
};

struct SgdConfig {
  double learning_rate = 0.1;
  std::size_t batch_size = 32;
  int num_iter = 100;
  std::uint64_t seed = 1;
  int eval_every = 10;
  bool record_wall_time = true;
  kernels::Exec exec = kernels::Exec::parallel;
};

/// Settings for one update-direction solve.
struct StepSettings {
  double epsilon = 1.0;
  double C = 1.0;
  double tol = 1e-6;
  int max_sweeps = 1000;
  double confidence_delta = 0.1;
  NegativePolicy negative_policy;
  std::size_t dense_gram_limit = 4096;
  kernels::Exec exec = kernels::Exec::parallel;
};

struct MinibatchStep {
  ParamVector delta_w;
  BoundReport bound;
  DualSolution sol;
  std::size_t records = 0;
  bool used_gram = true;
};

/// Gradient set -> Gram matrix -> dual solve -> bound. Does not modify params.
MinibatchStep train_minibatch(const NetworkSpec& spec, const ParamVector& params,
                              std::span<const Sample* const> minibatch, const StepSettings& settings);

/// params + step_size * delta_w.
ParamVector apply_update(const ParamVector& params, const ParamVector& delta_w, double step_size);

struct EvalResult {
  double hinge = 0.0;              // mean of the per-sample average hinge
  double accuracy = 0.0;
  double mean_summed_hinge = 0.0;  // mean of the per-sample summed hinge
  int misclassified = 0;
  int corollary_violations = 0;  // misclassified samples whose summed hinge is below 2
  bool corollary_ok = true;      // no violations and error <= mean_summed_hinge / 2
};

EvalResult evaluate(const NetworkSpec& spec, const ParamVector& params, const Dataset& ds,
                    kernels::Exec exec = kernels::Exec::parallel);

/// Number of output nodes with positive hinge loss for each sample.
std::vector<int> active_node_counts(const NetworkSpec& spec, const ParamVector& params,
                                    std::span<const Sample* const> samples,
                                    kernels::Exec exec = kernels::Exec::parallel);

/// k distinct indices drawn by successive sampling with probability
/// proportional to `weights`. Zero-weight items are only used, uniformly, once
/// every positive-weight item has been taken.
std::vector<std::size_t> sample_proportional(std::span<const double> weights, std::size_t k, std::mt19937_64& rng);

/// k distinct indices from [0, n), uniformly.
std::vector<std::size_t> sample_uniform(std::size_t n, std::size_t k, std::mt19937_64& rng);

/// Minibatch drawn without replacement with probability proportional to the
/// number of active hinge nodes n_i. n_i is evaluated on a uniform probe of
/// probe_factor * batch_size samples (the whole set when probe_factor is 0);
/// falls back to uniform when every probed n_i is zero. Returns dataset indices.
std::vector<std::size_t> weighted_minibatch_sampler(const Dataset& ds, const ParamVector& params,
                                                    const NetworkSpec& spec, std::size_t batch_size,
                                                    std::uint64_t seed, std::size_t probe_factor = 4);

struct MetricsRow {
  double epoch = 0.0;
  long updates = 0;
  double train_hinge = 0.0;
  double train_acc = 0.0;
  double test_hinge = 0.0;
  double test_acc = 0.0;
  double schedule_term = 0.0;
  double full_rhs = 0.0;
  double batch_size = 0.0;
  double r = 0.0;
  double delta_w_norm = 0.0;
  double h_residual = 0.0;
  int gated = 0;
  double wall_seconds = 0.0;
};

/// One entry per iteration of the update loop.
struct DescentRecord {
  int iteration = 0;
  double epoch = 0.0;  // samples drawn so far / N, including this minibatch
  bool gated = false;
  std::size_t batch_size = 0;
  double r = 0.0;
  double schedule_term = 0.0;
  double epsilon_bound = 0.0;  // full right-hand side of the margin bound
  double delta_w_norm = 0.0;
  // Minibatch mean hinge before/after w += s*delta_w; delta_step is the
  // first-order predicted decrease and h_residual is defined so that
  // after == before - delta_step + h_residual.
  double minibatch_before = 0.0;
  double minibatch_after = 0.0;
  double delta_step = 0.0;
  double h_residual = 0.0;
  double h_residual_half = 0.0;  // same residual for the step s/2
  double train_before = std::numeric_limits<double>::quiet_NaN();
  double train_after = std::numeric_limits<double>::quiet_NaN();
};

enum class TrainStatus { completed, bound_never_satisfied };

std::string to_string(TrainStatus s);

struct TrainResult {
  ParamVector params;
  std::vector<MetricsRow> metrics;
  std::vector<DescentRecord> diagnostics;
  std::vector<EvalResult> train_evals;
  std::vector<EvalResult> test_evals;
  TrainStatus status = TrainStatus::completed;
};

/// Generalised-update training loop. `test` may be null.
TrainResult train(const Dataset& train_set, const Dataset* test_set, const NetworkSpec& spec,
                  const TrainerConfig& config, std::optional<ParamVector> initial = std::nullopt);

/// Plain minibatch SGD on the mean per-sample average hinge loss.
TrainResult sgd_train(const Dataset& train_set, const Dataset* test_set, const NetworkSpec& spec,
                      const SgdConfig& config, std::optional<ParamVector> initial = std::nullopt);

}  // namespace svmu
