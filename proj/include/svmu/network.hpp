#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace svmu {

/// Thrown when an input tensor, parameter vector or layer stack has the wrong shape.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Channel-last tensor shape (rows x cols x channels). Flat vectors are 1x1xN.
struct Shape {
  int h = 1;
  int w = 1;
  int c = 1;

  [[nodiscard]] std::size_t size() const {
    return static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(c);
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

struct Dense {
  int in_units = 0;
  int out_units = 0;
};

/// Unit-stride convolution with symmetric zero padding (pad 0 is "valid").
struct Conv2d {
  int filters = 0;
  int kernel_h = 5;
  int kernel_w = 5;
  int in_channels = 0;
  int pad = 0;
};

struct Relu {};

struct MaxPool {
  int window_h = 2;
  int window_w = 2;
  int stride_h = 2;
  int stride_w = 2;
};

struct Flatten {};

using Layer = std::variant<Dense, Conv2d, Relu, MaxPool, Flatten>;

std::string to_string(const Layer& layer);

/// Output shape of `layer` applied to `in`; throws ShapeError when they are incompatible.
Shape output_shape(const Layer& layer, const Shape& in);

/// A validated layer stack. Construction computes every intermediate shape
/// and the flat parameter layout; an inconsistent stack throws ShapeError.
class NetworkSpec {
 public:
  struct LayerInfo {
    Shape in;
    Shape out;
    std::size_t param_offset = 0;  // first weight of this layer in the flat vector
    std::size_t weight_count = 0;  // weights, stored before the biases
    std::size_t bias_count = 0;
  };

  NetworkSpec(Shape input, std::vector<Layer> layers, int num_classes);

  [[nodiscard]] const Shape& input_shape() const { return input_; }
  [[nodiscard]] const std::vector<Layer>& layers() const { return layers_; }
  [[nodiscard]] const std::vector<LayerInfo>& layout() const { return info_; }
  [[nodiscard]] int num_classes() const { return num_classes_; }
  [[nodiscard]] std::size_t param_count() const { return param_count_; }

  /// Canonical one-line description, e.g. "28x28x1|conv5x5x8|relu|...|K=10".
  [[nodiscard]] std::string describe() const;
  /// 64-bit FNV-1a hash of describe(); used to tag serialized parameters.
  [[nodiscard]] std::uint64_t digest() const;

 private:
  Shape input_;
  std::vector<Layer> layers_;
  std::vector<LayerInfo> info_;
  int num_classes_ = 0;
  std::size_t param_count_ = 0;
};

/// Builds a spec from a comma separated layer list such as
/// "conv:8,relu,pool,conv:8,relu,pool,flatten,dense:30,relu,dense:10".
/// Dense and conv input sizes are inferred from the preceding layer.
NetworkSpec parse_network(const std::string& text, Shape input, int num_classes);

/// Flat vector of every trainable weight and bias in NetworkSpec layout order.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t n, double fill = 0.0) : values_(n, fill) {}
  explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {}

  [[nodiscard]] std::size_t size() const { return values_.size(); }
  [[nodiscard]] bool empty() const { return values_.empty(); }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  [[nodiscard]] double* data() { return values_.data(); }
  [[nodiscard]] const double* data() const { return values_.data(); }
  [[nodiscard]] std::span<double> span() { return values_; }
  [[nodiscard]] std::span<const double> span() const { return values_; }
  [[nodiscard]] const std::vector<double>& values() const { return values_; }
  auto begin() { return values_.begin(); }
  auto end() { return values_.end(); }
  [[nodiscard]] auto begin() const { return values_.begin(); }
  [[nodiscard]] auto end() const { return values_.end(); }

  [[nodiscard]] double norm() const;
  [[nodiscard]] bool all_finite() const;

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  std::vector<double> values_;
};

double dot(std::span<const double> a, std::span<const double> b);

/// Raw network scores f^1..f^K (no softmax).
using OutputVector = std::vector<double>;

/// One example. `label` is a 1-based class index in [1..K].
struct Sample {
  std::vector<double> input;
  int label = 1;
};

/// +1 at the true class, -1 elsewhere.
std::vector<int> label_vector(int label, int num_classes);

/// Scaled-uniform initialisation: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0.
ParamVector init_params(const NetworkSpec& spec, std::uint64_t seed);

OutputVector forward(const NetworkSpec& spec, const ParamVector& params, std::span<const double> x);
inline OutputVector forward(const NetworkSpec& spec, const ParamVector& params, const Sample& x) {
  return forward(spec, params, x.input);
}

/// Activations recorded by a forward pass; reused by every backward pass of
/// the same sample.
struct ForwardTrace {
  std::vector<std::vector<double>> activations;  // activations[n] is the input of layer n
  std::vector<std::vector<std::uint32_t>> pool_argmax;  // per MaxPool layer, flat index of the max
  [[nodiscard]] const std::vector<double>& output() const { return activations.back(); }
};

ForwardTrace forward_trace(const NetworkSpec& spec, const ParamVector& params, std::span<const double> x);

/// Pulls `output_seed` (dL/df, length K) back through the network. Fills the
/// parameter gradient and, if requested, the gradient with respect to the input.
void backward(const NetworkSpec& spec, const ParamVector& params, const ForwardTrace& trace,
              std::span<const double> output_seed, std::span<double> param_grad,
              std::vector<double>* input_grad = nullptr);

/// Gradient of the raw output f^j (1-based j) with respect to all parameters.
ParamVector output_gradient(const NetworkSpec& spec, const ParamVector& params, const Sample& x, int j);

/// All K output gradients of one sample from a single forward pass.
std::vector<ParamVector> output_jacobian(const NetworkSpec& spec, const ParamVector& params,
                                         const Sample& x);

/// Gradient of a scalar function of the outputs with respect to the input tensor.
std::vector<double> input_gradient(const NetworkSpec& spec, const ParamVector& params,
                                   std::span<const double> x, std::span<const double> output_seed);

/// Bit pattern of every ReLU and max-pool decision taken on `x`. Two parameter
/// vectors with equal patterns lie in the same smooth region for this sample.
std::vector<std::uint8_t> activation_pattern(const NetworkSpec& spec, const ParamVector& params,
                                             std::span<const double> x);

/// Smallest |pre-activation| over every ReLU unit for this sample.
double min_relu_margin(const NetworkSpec& spec, const ParamVector& params, std::span<const double> x);

struct HingeLoss {
  std::vector<double> per_node;  // max(0, 1 - y_j f_j)
  double sample_avg = 0.0;
  [[nodiscard]] double sum() const;
  [[nodiscard]] int active_nodes() const;
};

HingeLoss hinge_loss(std::span<const double> out, std::span<const int> labels);
HingeLoss hinge_loss(std::span<const double> out, int label);

/// d(sample_avg hinge)/d f, i.e. -y_j/K on active nodes.
std::vector<double> hinge_seed(std::span<const double> out, int label);

/// Argmax with lowest-index tie-break, 1-based.
int predict(std::span<const double> out);

}  // namespace svmu
