#pragma once

#include <span>
#include <string>
#include <vector>

#include "svmu/network.hpp"

namespace svmu {

enum class NormKind { frobenius, infinity, nuclear, one };

NormKind parse_norm_kind(const std::string& name);
std::string to_string(NormKind k);

/// The four perturbation norms. The tensor is read in HWC order; the nuclear
/// norm sums the singular values of every H x W channel slice.
struct PerturbationNorms {
  double frobenius = 0.0;
  double infinity = 0.0;
  double nuclear = 0.0;
  double one = 0.0;
  [[nodiscard]] double get(NormKind k) const;
};

PerturbationNorms perturbation_norms(std::span<const double> delta, const Shape& shape);
double perturbation_norm(std::span<const double> delta, const Shape& shape, NormKind k);

/// Euclidean projection of `delta` onto {d : ||d||_k <= radius}, in place.
void project_to_ball(std::span<double> delta, const Shape& shape, NormKind k, double radius);

struct AttackOptions {
  NormKind norm = NormKind::frobenius;
  int pgd_steps = 40;          // ascent steps per budget
  double step_factor = 2.5;    // each step moves step_factor * budget / pgd_steps
  double initial_budget = 1.0;
  double max_budget = 1e3;
  double rel_tol = 1e-3;       // bisection stops when (hi - lo) <= rel_tol * hi
  bool clip_to_unit = false;   // keep x + delta inside [0, 1]
};

struct AdversarialResult {
  std::vector<double> perturbation;  // smallest flipping perturbation found
  PerturbationNorms norms;
  bool success = false;
  int iterations = 0;         // gradient steps over the whole search
  double budget = 0.0;        // smallest budget at which the attack flipped the label
  double lower_budget = 0.0;  // largest budget at which it did not
  int original_label = 0;
  int adversarial_label = 0;
};

/// Smallest additive perturbation (under opt.norm) that changes the predicted
/// class of a correctly classified sample. Projected gradient ascent on
/// max_{j != y} f_j - f_y inside a norm ball, with doubling then bisection on
/// the ball radius. A sample that is already misclassified returns a zero
/// perturbation with success set.
AdversarialResult minimal_adversarial_noise(const NetworkSpec& spec, const ParamVector& params, const Sample& x,
                                            const AttackOptions& opt = {});

}  // namespace svmu
