#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace svmu::stats {

double mean(std::span<const double> x);
/// Sample standard deviation (n - 1 denominator).
double stddev(std::span<const double> x);
double median(std::span<const double> x);

/// Average ranks (1-based, ties share the mean rank).
std::vector<double> ranks(std::span<const double> x);

struct Correlation {
  double rho = 0.0;
  double p_value = 1.0;  // two-sided, t approximation with n - 2 degrees of freedom
  std::size_t n = 0;
};

/// Spearman rank correlation. Fewer than 3 points or a constant input gives rho 0, p 1.
Correlation spearman(std::span<const double> x, std::span<const double> y);

struct TTest {
  double t = 0.0;
  double df = 0.0;
  double p_value = 1.0;
  double mean_diff = 0.0;
};

/// Paired one-sided t test of H1: mean(a - b) > 0.
TTest paired_t_greater(std::span<const double> a, std::span<const double> b);

}  // namespace svmu::stats
