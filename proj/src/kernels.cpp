#include "svmu/kernels.hpp"

#include <Eigen/Dense>
#include <algorithm>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace svmu::kernels {

namespace {

constexpr std::size_t kTile = 64;
// Gradient sums are reduced over fixed-size chunks so the result does not
// depend on the thread count.
constexpr std::size_t kChunk = 8;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

RowMatrix pack(std::span<const std::span<const double>> rows) {
  const auto M = static_cast<Eigen::Index>(rows.size());
  const auto P = static_cast<Eigen::Index>(rows.empty() ? 0 : rows.front().size());
  RowMatrix G(M, P);
  for (Eigen::Index m = 0; m < M; ++m)
    std::copy(rows[static_cast<std::size_t>(m)].begin(), rows[static_cast<std::size_t>(m)].end(), G.row(m).data());
  return G;
}

// Lower-triangular tile pairs (a >= b).
std::vector<std::pair<std::size_t, std::size_t>> tile_pairs(std::size_t M) {
  const std::size_t T = (M + kTile - 1) / kTile;
  std::vector<std::pair<std::size_t, std::size_t>> tiles;
  tiles.reserve(T * (T + 1) / 2);
  for (std::size_t a = 0; a < T; ++a)
    for (std::size_t b = 0; b <= a; ++b) tiles.emplace_back(a, b);
  return tiles;
}

// Every entry below the diagonal is computed once and mirrored, so the
// result is exactly symmetric and independent of which thread ran the tile.
void gram_tile(const RowMatrix& G, std::size_t a, std::size_t b, std::span<double> out) {
  const std::size_t M = static_cast<std::size_t>(G.rows());
  const std::size_t r0 = a * kTile, c0 = b * kTile;
  const std::size_t nr = std::min(kTile, M - r0), nc = std::min(kTile, M - c0);
  const Eigen::MatrixXd block = G.middleRows(static_cast<Eigen::Index>(r0), static_cast<Eigen::Index>(nr)) *
                                G.middleRows(static_cast<Eigen::Index>(c0), static_cast<Eigen::Index>(nc)).transpose();
  for (std::size_t i = 0; i < nr; ++i) {
    const std::size_t jmax = a == b ? i + 1 : nc;
    for (std::size_t j = 0; j < jmax; ++j) {
      const double v = block(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      out[(r0 + i) * M + (c0 + j)] = v;
      out[(c0 + j) * M + (r0 + i)] = v;
    }
  }
}

void check_rows(std::span<const std::span<const double>> rows, std::span<double> out) {
  const std::size_t M = rows.size();
  if (out.size() != M * M) throw ShapeError("gram: output buffer must be M*M");
  for (const auto& r : rows)
    if (r.size() != rows.front().size()) throw ShapeError("gram: rows have different lengths");
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void for_each_index(std::size_t n, const std::function<void(std::size_t)>& fn, Exec exec) {
  if (exec == Exec::serial || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(dynamic, 1)
  for (long long i = 0; i < count; ++i) fn(static_cast<std::size_t>(i));
}

void gram_serial(std::span<const std::span<const double>> rows, std::span<double> out) {
  check_rows(rows, out);
  const RowMatrix G = pack(rows);
  const auto tiles = tile_pairs(rows.size());
  for (const auto& [a, b] : tiles) gram_tile(G, a, b, out);
}

void gram_parallel(std::span<const std::span<const double>> rows, std::span<double> out) {
  check_rows(rows, out);
  const RowMatrix G = pack(rows);
  const auto tiles = tile_pairs(rows.size());
  const auto count = static_cast<long long>(tiles.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (long long t = 0; t < count; ++t) {
    const auto [a, b] = tiles[static_cast<std::size_t>(t)];
    gram_tile(G, a, b, out);
  }
}

std::vector<OutputVector> batch_forward(const NetworkSpec& spec, const ParamVector& params,
                                        std::span<const Sample* const> samples, Exec exec) {
  std::vector<OutputVector> out(samples.size());
  for_each_index(
      samples.size(), [&](std::size_t i) { out[i] = forward(spec, params, samples[i]->input); }, exec);
  return out;
}

std::vector<std::vector<ParamVector>> batch_jacobians(const NetworkSpec& spec, const ParamVector& params,
                                                      std::span<const Sample* const> samples, Exec exec) {
  std::vector<std::vector<ParamVector>> out(samples.size());
  for_each_index(
      samples.size(), [&](std::size_t i) { out[i] = output_jacobian(spec, params, *samples[i]); }, exec);
  return out;
}

ParamVector mean_hinge_gradient(const NetworkSpec& spec, const ParamVector& params,
                                std::span<const Sample* const> samples, Exec exec) {
  const std::size_t n = samples.size();
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  std::vector<ParamVector> partial(chunks, ParamVector(spec.param_count()));
  for_each_index(
      chunks,
      [&](std::size_t c) {
        const std::size_t end = std::min(n, (c + 1) * kChunk);
        for (std::size_t i = c * kChunk; i < end; ++i) {
          const ForwardTrace t = forward_trace(spec, params, samples[i]->input);
          const auto seed = hinge_seed(t.output(), samples[i]->label);
          backward(spec, params, t, seed, partial[c].span());
        }
      },
      exec);
  ParamVector g(spec.param_count());
  for (const auto& p : partial)
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += p[k];
  if (n > 0)
    for (auto& v : g) v /= static_cast<double>(n);
  return g;
}

}  // namespace svmu::kernels
