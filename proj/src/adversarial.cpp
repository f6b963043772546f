#include "svmu/adversarial.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace svmu {

namespace {

// Projection of a nonnegative vector onto {v >= 0, sum v <= radius}.
void project_simplex_ball(std::vector<double>& v, double radius) {
  double total = 0.0;
  for (double x : v) total += x;
  if (total <= radius) return;
  std::vector<double> sorted = v;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double cum = 0.0;
  double theta = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    cum += sorted[i];
    const double t = (cum - radius) / static_cast<double>(i + 1);
    if (sorted[i] - t > 0.0) theta = t;
  }
  for (double& x : v) x = std::max(0.0, x - theta);
}

using Mat = Eigen::MatrixXd;

Mat channel_slice(std::span<const double> d, const Shape& s, int ch) {
  Mat m(s.h, s.w);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) m(y, x) = d[(static_cast<std::size_t>(y) * s.w + x) * s.c + ch];
  return m;
}

void store_slice(std::span<double> d, const Shape& s, int ch, const Mat& m) {
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) d[(static_cast<std::size_t>(y) * s.w + x) * s.c + ch] = m(y, x);
}

// Steepest ascent direction for gradient g: argmax <g, d> over ||d||_k <= 1.
std::vector<double> ascent_direction(const std::vector<double>& g, const Shape& shape, NormKind k) {
  std::vector<double> d(g.size(), 0.0);
  switch (k) {
    case NormKind::infinity:
      for (std::size_t i = 0; i < g.size(); ++i) d[i] = (g[i] > 0) - (g[i] < 0);
      break;
    case NormKind::one: {
      const auto top = static_cast<std::size_t>(
          std::max_element(g.begin(), g.end(), [](double a, double b) { return std::abs(a) < std::abs(b); }) - g.begin());
      if (!g.empty()) d[top] = (g[top] > 0) - (g[top] < 0);
      break;
    }
    case NormKind::nuclear: {
      // Rank one: the leading singular pair of the channel slice with the largest one.
      double best = 0.0;
      for (int ch = 0; ch < shape.c; ++ch) {
        Eigen::JacobiSVD<Mat> svd(channel_slice(g, shape, ch), Eigen::ComputeThinU | Eigen::ComputeThinV);
        if (svd.singularValues().size() == 0 || svd.singularValues()(0) <= best) continue;
        best = svd.singularValues()(0);
        std::fill(d.begin(), d.end(), 0.0);
        store_slice(d, shape, ch, svd.matrixU().col(0) * svd.matrixV().col(0).transpose());
      }
      break;
    }
    case NormKind::frobenius: {
      const double n = perturbation_norm(g, shape, k);
      if (n == 0.0) break;
      for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] / n;
      break;
    }
  }
  return d;
}

struct Attempt {
  bool flipped = false;
  std::vector<double> delta;
  int steps = 0;
  int label = 0;
};

Attempt attack_at(const NetworkSpec& spec, const ParamVector& params, const Sample& x, double budget,
                  const AttackOptions& opt) {
  const Shape& shape = spec.input_shape();
  const std::size_t n = x.input.size();
  const int K = spec.num_classes();
  Attempt a;
  a.delta.assign(n, 0.0);
  std::vector<double> xp(n);
  const double step = opt.step_factor * budget / std::max(1, opt.pgd_steps);
  for (int s = 0; s <= opt.pgd_steps; ++s) {
    for (std::size_t i = 0; i < n; ++i) xp[i] = x.input[i] + a.delta[i];
    const OutputVector out = forward(spec, params, xp);
    const int pred = predict(out);
    if (pred != x.label) {
      a.flipped = true;
      a.label = pred;
      return a;
    }
    if (s == opt.pgd_steps) break;
    int worst = 0;
    double best = -INFINITY;
    for (int j = 0; j < K; ++j)
      if (j + 1 != x.label && out[static_cast<std::size_t>(j)] > best) {
        best = out[static_cast<std::size_t>(j)];
        worst = j;
      }
    std::vector<double> seed(static_cast<std::size_t>(K), 0.0);
    seed[static_cast<std::size_t>(worst)] = 1.0;
    seed[static_cast<std::size_t>(x.label - 1)] = -1.0;
    const std::vector<double> g = input_gradient(spec, params, xp, seed);
    const std::vector<double> d = ascent_direction(g, shape, opt.norm);
    for (std::size_t i = 0; i < n; ++i) a.delta[i] += step * d[i];
    project_to_ball(a.delta, shape, opt.norm, budget);
    if (opt.clip_to_unit)
      for (std::size_t i = 0; i < n; ++i) a.delta[i] = std::clamp(x.input[i] + a.delta[i], 0.0, 1.0) - x.input[i];
    ++a.steps;
  }
  return a;
}

}  // namespace

NormKind parse_norm_kind(const std::string& name) {
  if (name == "frobenius" || name == "fro" || name == "l2") return NormKind::frobenius;
  if (name == "infinity" || name == "inf" || name == "linf") return NormKind::infinity;
  if (name == "nuclear") return NormKind::nuclear;
  if (name == "one" || name == "l1") return NormKind::one;
  throw std::invalid_argument("unknown norm: " + name);
}

std::string to_string(NormKind k) {
  switch (k) {
    case NormKind::frobenius: return "frobenius";
    case NormKind::infinity: return "infinity";
    case NormKind::nuclear: return "nuclear";
    case NormKind::one: return "one";
  }
  return "?";
}

double PerturbationNorms::get(NormKind k) const {
  switch (k) {
    case NormKind::frobenius: return frobenius;
    case NormKind::infinity: return infinity;
    case NormKind::nuclear: return nuclear;
    case NormKind::one: return one;
  }
  return 0.0;
}

double perturbation_norm(std::span<const double> delta, const Shape& shape, NormKind k) {
  if (delta.size() != shape.size()) throw ShapeError("perturbation does not match the input shape");
  switch (k) {
    case NormKind::frobenius: {
      double s = 0.0;
      for (double v : delta) s += v * v;
      return std::sqrt(s);
    }
    case NormKind::infinity: {
      double m = 0.0;
      for (double v : delta) m = std::max(m, std::abs(v));
      return m;
    }
    case NormKind::one: {
      double s = 0.0;
      for (double v : delta) s += std::abs(v);
      return s;
    }
    case NormKind::nuclear: {
      double s = 0.0;
      for (int ch = 0; ch < shape.c; ++ch) {
        Eigen::JacobiSVD<Mat> svd(channel_slice(delta, shape, ch));
        s += svd.singularValues().sum();
      }
      return s;
    }
  }
  return 0.0;
}

PerturbationNorms perturbation_norms(std::span<const double> delta, const Shape& shape) {
  PerturbationNorms n;
  n.frobenius = perturbation_norm(delta, shape, NormKind::frobenius);
  n.infinity = perturbation_norm(delta, shape, NormKind::infinity);
  n.nuclear = perturbation_norm(delta, shape, NormKind::nuclear);
  n.one = perturbation_norm(delta, shape, NormKind::one);
  return n;
}

void project_to_ball(std::span<double> delta, const Shape& shape, NormKind k, double radius) {
  if (radius < 0.0) throw std::invalid_argument("negative radius");
  switch (k) {
    case NormKind::frobenius: {
      const double n = perturbation_norm(delta, shape, k);
      if (n > radius)
        for (double& v : delta) v *= radius / n;
      return;
    }
    case NormKind::infinity:
      for (double& v : delta) v = std::clamp(v, -radius, radius);
      return;
    case NormKind::one: {
      std::vector<double> mag(delta.size());
      for (std::size_t i = 0; i < delta.size(); ++i) mag[i] = std::abs(delta[i]);
      project_simplex_ball(mag, radius);
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = std::copysign(mag[i], delta[i]);
      return;
    }
    case NormKind::nuclear: {
      // Singular values of all channels are projected jointly since the norm sums them.
      std::vector<Eigen::JacobiSVD<Mat>> svds;
      std::vector<double> sv;
      for (int ch = 0; ch < shape.c; ++ch) {
        svds.emplace_back(channel_slice(delta, shape, ch), Eigen::ComputeThinU | Eigen::ComputeThinV);
        for (Eigen::Index i = 0; i < svds.back().singularValues().size(); ++i)
          sv.push_back(svds.back().singularValues()(i));
      }
      double total = std::accumulate(sv.begin(), sv.end(), 0.0);
      if (total <= radius) return;
      project_simplex_ball(sv, radius);
      std::size_t pos = 0;
      for (int ch = 0; ch < shape.c; ++ch) {
        const auto& svd = svds[static_cast<std::size_t>(ch)];
        Eigen::VectorXd s(svd.singularValues().size());
        for (Eigen::Index i = 0; i < s.size(); ++i) s(i) = sv[pos++];
        store_slice(delta, shape, ch, svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose());
      }
      return;
    }
  }
}

AdversarialResult minimal_adversarial_noise(const NetworkSpec& spec, const ParamVector& params, const Sample& x,
                                            const AttackOptions& opt) {
  if (!(opt.initial_budget > 0.0) || !(opt.max_budget >= opt.initial_budget) || !(opt.rel_tol > 0.0))
    throw std::invalid_argument("minimal_adversarial_noise: bad budget options");
  AdversarialResult r;
  r.original_label = x.label;
  r.perturbation.assign(x.input.size(), 0.0);
  const int pred = predict(forward(spec, params, x));
  if (pred != x.label) {
    r.success = true;
    r.adversarial_label = pred;
    return r;
  }
  r.adversarial_label = x.label;

  Attempt best;
  double lo = 0.0;
  double hi = opt.initial_budget;
  Attempt a = attack_at(spec, params, x, hi, opt);
  r.iterations += a.steps;
  if (a.flipped) {
    best = a;
    // Shrink until the attack fails to get a lower bracket.
    for (int t = 0; t < 60; ++t) {
      const double b = 0.5 * hi;
      Attempt c = attack_at(spec, params, x, b, opt);
      r.iterations += c.steps;
      if (!c.flipped) {
        lo = b;
        break;
      }
      hi = b;
      best = std::move(c);
    }
  } else {
    lo = hi;
    while (true) {
      hi = 2.0 * lo;
      if (hi > opt.max_budget) {
        r.lower_budget = lo;
        return r;
      }
      Attempt c = attack_at(spec, params, x, hi, opt);
      r.iterations += c.steps;
      if (c.flipped) {
        best = std::move(c);
        break;
      }
      lo = hi;
    }
  }
  while (hi - lo > opt.rel_tol * hi) {
    const double mid = 0.5 * (lo + hi);
    Attempt c = attack_at(spec, params, x, mid, opt);
    r.iterations += c.steps;
    if (c.flipped) {
      hi = mid;
      best = std::move(c);
    } else {
      lo = mid;
    }
  }
  r.success = true;
  r.budget = hi;
  r.lower_budget = lo;
  r.perturbation = std::move(best.delta);
  r.adversarial_label = best.label;
  r.norms = perturbation_norms(r.perturbation, spec.input_shape());
  return r;
}

}  // namespace svmu
