#include <doctest.h>

#include <random>

#include "svmu/kernels.hpp"

using namespace svmu;
using kernels::Exec;

namespace {

std::vector<Sample> random_samples(const Shape& shape, int K, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<Sample> out(static_cast<std::size_t>(n));
  for (auto& s : out) {
    s.input.resize(shape.size());
    for (double& v : s.input) v = u(rng);
    s.label = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(K));
  }
  return out;
}

std::vector<const Sample*> ptrs(const std::vector<Sample>& v) {
  std::vector<const Sample*> p;
  for (const auto& s : v) p.push_back(&s);
  return p;
}

}  // namespace

TEST_CASE("gram kernels agree with a naive double loop and with each other") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 1);
  for (std::size_t M : {1u, 7u, 64u, 65u, 150u}) {
    const std::size_t P = 37;
    std::vector<std::vector<double>> data(M, std::vector<double>(P));
    for (auto& r : data)
      for (double& v : r) v = n(rng);
    std::vector<std::span<const double>> rows(data.begin(), data.end());
    std::vector<double> s(M * M), p(M * M);
    kernels::gram_serial(rows, s);
    kernels::gram_parallel(rows, p);
    CHECK(s == p);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < M; ++j) {
        double ref = 0.0;
        for (std::size_t k = 0; k < P; ++k) ref += data[i][k] * data[j][k];
        CHECK(s[i * M + j] == doctest::Approx(ref).epsilon(1e-12));
        CHECK(s[i * M + j] == s[j * M + i]);
      }
  }
}

TEST_CASE("gram rejects ragged rows and a wrong buffer") {
  std::vector<double> a(3), b(4);
  std::vector<std::span<const double>> rows{a, b};
  std::vector<double> out(4);
  CHECK_THROWS_AS(kernels::gram_serial(rows, out), ShapeError);
  std::vector<std::span<const double>> ok{a, a};
  std::vector<double> small(3);
  CHECK_THROWS_AS(kernels::gram_parallel(ok, small), ShapeError);
}

TEST_CASE("batched forward, jacobians and hinge gradient match serial execution") {
  const NetworkSpec spec = parse_network("conv:3:3,relu,pool,dense:6,relu,dense:4", {7, 7, 2}, 4);
  const ParamVector w = init_params(spec, 2);
  const auto samples = random_samples(spec.input_shape(), 4, 29, 8);
  const auto p = ptrs(samples);

  const auto fs = kernels::batch_forward(spec, w, p, Exec::serial);
  const auto fp = kernels::batch_forward(spec, w, p, Exec::parallel);
  CHECK(fs == fp);
  CHECK(fs[3] == forward(spec, w, samples[3]));

  const auto js = kernels::batch_jacobians(spec, w, p, Exec::serial);
  const auto jp = kernels::batch_jacobians(spec, w, p, Exec::parallel);
  CHECK(js == jp);

  const ParamVector gs = kernels::mean_hinge_gradient(spec, w, p, Exec::serial);
  const ParamVector gp = kernels::mean_hinge_gradient(spec, w, p, Exec::parallel);
  CHECK(gs == gp);

  // Oracle: the mean over samples of sum_j seed_j * grad f_j.
  std::vector<double> ref(w.size(), 0.0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto seed = hinge_seed(fs[i], samples[i].label);
    for (int j = 0; j < 4; ++j)
      for (std::size_t k = 0; k < w.size(); ++k) ref[k] += seed[static_cast<std::size_t>(j)] * js[i][static_cast<std::size_t>(j)][k];
  }
  for (std::size_t k = 0; k < w.size(); ++k) CHECK(gs[k] == doctest::Approx(ref[k] / 29.0).epsilon(1e-10));
}

TEST_CASE("for_each_index visits every index once") {
  std::vector<int> hits(1000, 0);
  kernels::for_each_index(hits.size(), [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) CHECK(h == 1);
  CHECK(kernels::max_threads() >= 1);
}
