#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "svmu/network.hpp"

namespace svmu {

using Bytes = std::vector<std::uint8_t>;

/// Malformed binary input. `offset()` is the byte position where parsing stopped.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  [[nodiscard]] std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

enum class Split { train, test };

/// Immutable collection of equally shaped samples with labels in [1..K].
struct Dataset {
  std::string name;
  Split split = Split::train;
  Shape shape;
  int num_classes = 10;
  std::vector<Sample> samples;

  [[nodiscard]] std::size_t size() const { return samples.size(); }
  [[nodiscard]] bool empty() const { return samples.empty(); }
  /// Stable pointers for the span-based kernels.
  [[nodiscard]] std::vector<const Sample*> pointers() const;
};

struct TrainTest {
  Dataset train;
  Dataset test;
};

struct IdxOptions {
  int num_classes = 10;
  bool binarize = false;  // threshold at 0.5 instead of keeping 8-bit grey levels
};

/// MNIST IDX pair: images (magic 0x00000803, count, rows, cols, u8 pixels) and
/// labels (magic 0x00000801, count, u8 labels). Pixels are scaled by 1/255 and
/// wire label b becomes class b+1.
Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                  const IdxOptions& opt = {});
std::pair<Bytes, Bytes> serialize_idx(const Dataset& ds);

/// CIFAR-10 binary batch: records of 1 label byte then 3 colour planes of 32x32.
Dataset parse_cifar10(std::span<const std::uint8_t> batch);
Bytes serialize_cifar10(const Dataset& ds);

/// Reads a whole file, inflating it first when it carries a gzip header.
Bytes read_file(const std::filesystem::path& path);
Bytes gunzip(std::span<const std::uint8_t> data);
bool is_gzip(std::span<const std::uint8_t> data);

/// K isotropic unit-variance Gaussian clusters whose centres are the vertices
/// of a regular simplex of circumradius `separation` (a regular polygon in the
/// first two coordinates when dim < K).
Dataset synth_gaussian_blobs(int num_classes, int n_per_class, int dim, double separation, std::uint64_t seed);

/// Procedurally drawn 28x28 grey-level digits 0-9 (class b+1 for digit b):
/// fixed stroke templates under random affine distortion, jitter and pen width.
Dataset synth_stroke_digits(int count, std::uint64_t seed);

/// Replaces every label with an independent uniform draw from [1..K].
Dataset shuffle_labels(const Dataset& ds, std::uint64_t seed);

/// First `n` samples (all when n is 0 or exceeds the size).
Dataset head(const Dataset& ds, std::size_t n);

/// Deterministic (train, validation) partition holding out `fraction` of `ds`.
std::pair<Dataset, Dataset> split_validation(const Dataset& ds, double fraction, std::uint64_t seed);

/// Resolves a dataset string, e.g.
///   "blobs:K=4,n=200,dim=16,sep=3.0,seed=1"
///   "digits:n=2000,test_n=1000,seed=1"
///   "mnist:dir=data/mnist"            (train-/t10k- IDX files, optionally .gz)
///   "cifar10:dir=data/cifar-10-batches-bin"
///   "idx:train_images=..,train_labels=..,test_images=..,test_labels=.."
TrainTest load_dataset(const std::string& description);

/// True when the four MNIST IDX files exist in `dir` (plain or .gz).
bool mnist_available(const std::filesystem::path& dir);

}  // namespace svmu
