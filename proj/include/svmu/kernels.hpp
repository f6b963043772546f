#pragma once

// Data-parallel inner loops. Every kernel has a serial version used by the
// tests and the benchmark; the OpenMP versions partition work so that each
// output element is computed by exactly one thread with the same summation
// order, so both variants return bit-identical results.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "svmu/network.hpp"

namespace svmu::kernels {

enum class Exec { serial, parallel };

/// Number of OpenMP threads that a parallel kernel will use (1 without OpenMP).
int max_threads();

/// Runs fn(i) for i in [0, n). Parallel execution uses dynamic scheduling.
void for_each_index(std::size_t n, const std::function<void(std::size_t)>& fn, Exec exec = Exec::parallel);

/// Dense symmetric Gram matrix of `rows` (row-major M x M into `out`).
void gram_serial(std::span<const std::span<const double>> rows, std::span<double> out);
void gram_parallel(std::span<const std::span<const double>> rows, std::span<double> out);

/// Raw outputs for every sample.
std::vector<OutputVector> batch_forward(const NetworkSpec& spec, const ParamVector& params,
                                        std::span<const Sample* const> samples, Exec exec = Exec::parallel);

/// All K output gradients of every sample: result[i][j] = grad f^{j+1}(w, x_i).
std::vector<std::vector<ParamVector>> batch_jacobians(const NetworkSpec& spec, const ParamVector& params,
                                                      std::span<const Sample* const> samples,
                                                      Exec exec = Exec::parallel);

/// Mean over samples of the gradient of the per-sample average hinge loss.
ParamVector mean_hinge_gradient(const NetworkSpec& spec, const ParamVector& params,
                                std::span<const Sample* const> samples, Exec exec = Exec::parallel);

}  // namespace svmu::kernels
