#pragma once

// Update-direction SVM: every (sample, output node) gradient is one training
// example labelled +1 for the true class and -1 otherwise. The box-constrained
// dual with the threshold fixed at zero is solved by exact coordinate ascent;
// the update is delta_w = sum_m alpha_m y_m g_m.

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "svmu/kernels.hpp"
#include "svmu/network.hpp"

namespace svmu {

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradientRecord {
  ParamVector grad;
  int label = 1;  // +1 iff node_id is the sample's true class
  std::size_t sample_id = 0;
  int node_id = 1;  // 1-based output node

  friend bool operator==(const GradientRecord&, const GradientRecord&) = default;
};

struct NegativePolicy {
  enum class Kind { all, active, random_subset };
  Kind kind = Kind::all;
  int subset_size = 0;  // q, for random_subset
  std::uint64_t seed = 0;

  static NegativePolicy all() { return {}; }
  static NegativePolicy active_only() { return {Kind::active, 0, 0}; }
  static NegativePolicy random(int q, std::uint64_t seed) { return {Kind::random_subset, q, seed}; }
};

/// Negative nodes kept for one sample under the random-subset policy: a partial
/// Fisher-Yates shuffle of the K-1 negative node ids driven by `rng`, returned
/// in ascending order.
std::vector<int> random_negatives(int num_classes, int true_class, int q, std::mt19937_64& rng);

std::vector<GradientRecord> build_gradient_set(const NetworkSpec& spec, const ParamVector& params,
                                               std::span<const Sample* const> minibatch,
                                               const NegativePolicy& policy,
                                               kernels::Exec exec = kernels::Exec::parallel);

class GramMatrix {
 public:
  GramMatrix() = default;
  explicit GramMatrix(std::size_t n) : n_(n), entries_(n * n, 0.0) {}

  [[nodiscard]] std::size_t size() const { return n_; }
  double& operator()(std::size_t i, std::size_t j) { return entries_[i * n_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return entries_[i * n_ + j]; }
  [[nodiscard]] std::span<const double> row(std::size_t i) const { return {entries_.data() + i * n_, n_}; }
  [[nodiscard]] std::span<double> entries() { return entries_; }
  [[nodiscard]] std::span<const double> entries() const { return entries_; }
  [[nodiscard]] double trace() const;

 private:
  std::size_t n_ = 0;
  std::vector<double> entries_;
};

GramMatrix gram_matrix(std::span<const GradientRecord> records, kernels::Exec exec = kernels::Exec::parallel);

/// Builds a Gram matrix directly from raw vectors (used where no labels exist).
GramMatrix gram_matrix(std::span<const std::span<const double>> rows, kernels::Exec exec = kernels::Exec::parallel);

struct SolverOptions {
  double epsilon = 1.0;  // target margin
  double C = 1.0;        // box bound on alpha
  double tol = 1e-6;     // max KKT violation at exit
  int max_sweeps = 1000;
  bool check_psd = true;
};

/// Coordinates whose Gram diagonal is at most this value are never updated.
inline constexpr double kDegenerateDiagonal = 1e-12;

struct DualSolution {
  std::vector<double> alpha;
  std::vector<int> labels;
  ParamVector delta_w;  // filled by recover_update (empty when solved from a bare Gram matrix)
  std::vector<double> slacks;   // max(0, epsilon - margin)
  std::vector<double> margins;  // y_m <delta_w, g_m>
  std::vector<bool> degenerate;  // K_mm <= kDegenerateDiagonal
  double dual_objective = 0.0;
  double primal_objective = 0.0;
  double update_norm_sq = 0.0;  // ||delta_w||^2 = alpha' Y K Y alpha
  bool converged = false;
  int sweeps = 0;
  std::vector<double> sweep_objectives;  // dual objective after each sweep

  [[nodiscard]] double slack_sum() const;
};

/// Margins, slacks and both objectives implied by `alpha`. Degenerate
/// coordinates keep their slack (epsilon) but are excluded from both objectives.
DualSolution evaluate_dual(const GramMatrix& K, std::span<const int> labels, std::span<const double> alpha,
                           double epsilon, double C);

DualSolution solve_dual(const GramMatrix& K, std::span<const int> labels, const SolverOptions& opt);

/// Same optimisation over raw gradient records without forming the Gram
/// matrix: delta_w is maintained explicitly so each coordinate step costs one
/// inner product. Agrees with solve_dual up to the stopping tolerance.
DualSolution solve_dual_linear(std::span<const GradientRecord> records, const SolverOptions& opt);

/// delta_w = sum_m alpha_m y_m g_m.
ParamVector recover_update(std::span<const GradientRecord> records, std::span<const double> alpha,
                           std::span<const int> labels);

struct KktReport {
  double lower = 0.0;     // alpha = 0 with margin < epsilon
  double interior = 0.0;  // 0 < alpha < C with margin != epsilon
  double upper = 0.0;     // alpha = C with margin > epsilon
  int degenerate_skipped = 0;
  [[nodiscard]] double max_violation() const;
};

KktReport kkt_check(const DualSolution& sol, double epsilon, double C);

struct BoundReport {
  double B = 0.0;      // ||delta_w||
  double gamma = 0.0;  // target margin (epsilon)
  double trace_K = 0.0;
  std::size_t batch_m = 0;  // number of SVM examples
  double slack_sum = 0.0;
  double confidence_delta = 0.1;
  double schedule_term = 0.0;  // B sqrt(trace_K) / batch_m
  double full_rhs = 0.0;
};

/// Margin bound for the linear function delta_w on the m gradient records:
/// slack_sum/(m gamma) + 4 B sqrt(tr K)/(m gamma) + 3 sqrt(ln(2/delta)/(2m)).
BoundReport bound_report(double update_norm, double trace_K, std::size_t batch_m, double slack_sum, double epsilon,
                         double confidence_delta);
BoundReport bound_report(const DualSolution& sol, const GramMatrix& K, double epsilon, double confidence_delta);

}  // namespace svmu
