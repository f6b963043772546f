#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "svmu/adversarial.hpp"
#include "svmu/config.hpp"
#include "svmu/dataset.hpp"
#include "svmu/stats.hpp"
#include "svmu/trainer.hpp"

namespace svmu {

enum class ExperimentKind { convergence, adversarial, random_labels, gradcheck };

ExperimentKind parse_experiment_kind(const std::string& name);

struct GradcheckOptions {
  int pairs = 100;
  double step = 1e-6;       // central difference step
  double tolerance = 1e-5;  // max relative error
  double richardson_min_ratio = 3.5;
  std::uint64_t seed = 1;
  std::string network;      // empty: a built-in family covering every layer type
  Shape input{6, 6, 2};
  int num_classes = 4;
};

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::convergence;
  std::string dataset = "blobs:K=4,n=200,test_n=100,dim=16,sep=3,seed=1";
  std::string network = "dense:16,relu";  // the K-way output layer is appended when missing
  std::size_t train_subset = 0;            // 0: whole split
  std::size_t test_subset = 0;
  double validation_fraction = 0.1;
  std::filesystem::path output_dir = "out";

  TrainerConfig trainer;
  SgdConfig sgd;
  std::vector<double> sgd_grid{0.3, 0.1, 0.03, 0.01};
  double sgd_epochs = 10.0;
  std::vector<double> targets{0.1};  // train hinge levels for the epochs-to-target summary

  std::size_t adversarial_samples = 200;
  std::vector<NormKind> adversarial_norms{NormKind::frobenius};
  AttackOptions attack;

  GradcheckOptions gradcheck;

  /// Applies one seed to every random stream (trainer, sgd, gradcheck).
  void override_seed(std::uint64_t seed);
};

/// Reads an ExperimentConfig; unknown keys are an error.
ExperimentConfig experiment_config_from(const Config& cfg);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct PreparedData {
  Dataset train;
  Dataset validation;
  Dataset test;
  NetworkSpec spec;
};

/// Loads the dataset, applies the subset caps and carves the validation set.
/// Validation samples come from training samples beyond train_subset when there
/// are enough of them, otherwise from a seeded split of the subset.
PreparedData prepare_data(const ExperimentConfig& cfg);

// ---- CSV ----

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
};

inline constexpr const char* kSchemaLine = "# schema=1";

std::string format_double(double v);  // %.17g
/// Writes `# schema=1`, the header and the rows to a temporary file, then renames it over `path`.
void write_csv(const std::filesystem::path& path, const CsvTable& table);
/// Strict reader: schema line, header, and exactly one value per column in every row.
CsvTable read_csv(const std::filesystem::path& path);

CsvTable metrics_table(const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> metrics_from_table(const CsvTable& table);

// ---- parameters ----

void save_params(const std::filesystem::path& path, const NetworkSpec& spec, const ParamVector& params);
/// Throws std::runtime_error when the file is malformed or was written for another spec.
ParamVector load_params(const std::filesystem::path& path, const NetworkSpec& spec);

// ---- convergence ----

/// First evaluated epoch whose train hinge is <= target, or nullopt.
std::optional<double> epochs_to_target(const std::vector<MetricsRow>& rows, double target);

struct SgdRun {
  double learning_rate = 0.0;
  TrainResult result;
  double validation_hinge = 0.0;
};

struct ConvergenceResult {
  PreparedData data;
  TrainResult svm;
  std::vector<SgdRun> sgd_runs;
  std::size_t sgd_best = 0;  // index into sgd_runs chosen on the validation hinge
  CsvTable summary;
};

/// Trains the generalised update and every SGD learning rate in the grid on the
/// same data, seeds and initial parameters. Writes svm_metrics.csv,
/// sgd_metrics.csv (chosen rate), sgd_lr_<rate>.csv, summary.csv, svm.params
/// and sgd.params into cfg.output_dir.
ConvergenceResult run_convergence(const ExperimentConfig& cfg);

// ---- adversarial ----

struct AdversarialSample {
  std::size_t test_index = 0;
  std::string method;
  NormKind norm = NormKind::frobenius;
  AdversarialResult result;
};

struct AdversarialSummary {
  std::vector<AdversarialSample> samples;
  CsvTable table;  // one row per method: mean minimal norm for each attacked norm
  std::size_t evaluated = 0;  // test samples classified correctly by both networks
  stats::TTest frobenius_test;  // method a minus method b
};

/// Minimal-noise attack on the first cfg.adversarial_samples test samples that
/// both parameter sets classify correctly. Writes adversarial.csv and
/// adversarial_samples.csv.
AdversarialSummary run_adversarial(const ExperimentConfig& cfg, const NetworkSpec& spec, const Dataset& test,
                                   const ParamVector& params_a, const ParamVector& params_b,
                                   const std::string& name_a = "svm", const std::string& name_b = "sgd");

// ---- random labels ----

struct TrajectoryPoint {
  std::string run;  // "true" or "shuffled"
  DescentRecord record;
  double train_decrease = 0.0;
  double minibatch_decrease = 0.0;
  double ratio = 0.0;  // NaN for gated updates or a zero minibatch decrease
};

struct RandomLabelResult {
  TrainResult true_run;
  TrainResult shuffled_run;
  std::vector<TrajectoryPoint> trajectory;
  double median_schedule_true = 0.0;  // over iterations after the first epoch
  double median_schedule_shuffled = 0.0;
  stats::Correlation ratio_vs_bound;  // over applied updates of both runs
  std::size_t applied_updates = 0;
  std::size_t shuffled_max_batch = 0;
};

/// Paired runs of the generalised update on true and shuffled labels. Writes
/// random_labels_true.csv, random_labels_shuffled.csv, bound_trajectory.csv and
/// random_labels_summary.csv.
RandomLabelResult run_random_labels(const ExperimentConfig& cfg);

// ---- gradient check ----

using GradientFn = std::function<ParamVector(const NetworkSpec&, const ParamVector&, const Sample&, int)>;

struct GradcheckReport {
  int pairs = 0;
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t excluded = 0;  // coordinates whose +-step crossed a ReLU or pooling switch
  double richardson_median_ratio = 0.0;
  int richardson_samples = 0;
  bool passed = true;
  std::vector<std::string> failures;
};

/// Central finite differences of random (network, sample, output node)
/// triples against `grad`, plus a second-order residual test.
GradcheckReport gradient_check(const GradcheckOptions& opt, const GradientFn& grad = output_gradient);

/// gradient_check driven by the config; writes gradcheck.csv.
GradcheckReport run_gradcheck(const ExperimentConfig& cfg);

}  // namespace svmu
