#include "svmu/network.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

namespace svmu {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

int conv_extent(int in, int pad, int k) { return in + 2 * pad - k + 1; }

// Each layer's forward/backward kernel works on flat channel-last buffers.

void dense_forward(const Dense& d, const double* w, const double* x, double* y) {
  const double* b = w + static_cast<std::size_t>(d.in_units) * d.out_units;
  for (int o = 0; o < d.out_units; ++o) {
    const double* row = w + static_cast<std::size_t>(o) * d.in_units;
    double acc = b[o];
    for (int i = 0; i < d.in_units; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
}

void dense_backward(const Dense& d, const double* w, const double* x, const double* dy, double* dw, double* dx) {
  double* db = dw + static_cast<std::size_t>(d.in_units) * d.out_units;
  if (dx) std::fill(dx, dx + d.in_units, 0.0);
  for (int o = 0; o < d.out_units; ++o) {
    const double g = dy[o];
    if (g == 0.0) continue;
    db[o] += g;
    double* drow = dw + static_cast<std::size_t>(o) * d.in_units;
    for (int i = 0; i < d.in_units; ++i) drow[i] += g * x[i];
    if (dx) {
      const double* row = w + static_cast<std::size_t>(o) * d.in_units;
      for (int i = 0; i < d.in_units; ++i) dx[i] += g * row[i];
    }
  }
}

// Weights are laid out [filter][kh][kw][in_channel]; for a fixed filter and
// kernel row, the kw*C weights line up with kw*C contiguous input values.
void conv_forward(const Conv2d& c, const Shape& in, const Shape& out, const double* w, const double* x, double* y) {
  const std::size_t per_filter = static_cast<std::size_t>(c.kernel_h) * c.kernel_w * c.in_channels;
  const double* b = w + per_filter * c.filters;
  const int C = in.c;
  for (int i = 0; i < out.h; ++i) {
    for (int j = 0; j < out.w; ++j) {
      double* yo = y + (static_cast<std::size_t>(i) * out.w + j) * c.filters;
      for (int f = 0; f < c.filters; ++f) yo[f] = b[f];
      const int v0 = std::max(0, c.pad - j);
      const int v1 = std::min(c.kernel_w, in.w + c.pad - j);
      if (v1 <= v0) continue;
      const int seg = (v1 - v0) * C;
      for (int u = 0; u < c.kernel_h; ++u) {
        const int r = i + u - c.pad;
        if (r < 0 || r >= in.h) continue;
        const double* xs = x + (static_cast<std::size_t>(r) * in.w + (j + v0 - c.pad)) * C;
        for (int f = 0; f < c.filters; ++f) {
          const double* ws = w + f * per_filter + (static_cast<std::size_t>(u) * c.kernel_w + v0) * C;
          double acc = 0.0;
          for (int t = 0; t < seg; ++t) acc += ws[t] * xs[t];
          yo[f] += acc;
        }
      }
    }
  }
}

void conv_backward(const Conv2d& c, const Shape& in, const Shape& out, const double* w, const double* x,
                   const double* dy, double* dw, double* dx) {
  const std::size_t per_filter = static_cast<std::size_t>(c.kernel_h) * c.kernel_w * c.in_channels;
  double* db = dw + per_filter * c.filters;
  const int C = in.c;
  if (dx) std::fill(dx, dx + in.size(), 0.0);
  for (int i = 0; i < out.h; ++i) {
    for (int j = 0; j < out.w; ++j) {
      const double* go = dy + (static_cast<std::size_t>(i) * out.w + j) * c.filters;
      const int v0 = std::max(0, c.pad - j);
      const int v1 = std::min(c.kernel_w, in.w + c.pad - j);
      for (int f = 0; f < c.filters; ++f) db[f] += go[f];
      if (v1 <= v0) continue;
      const int seg = (v1 - v0) * C;
      for (int u = 0; u < c.kernel_h; ++u) {
        const int r = i + u - c.pad;
        if (r < 0 || r >= in.h) continue;
        const std::size_t xoff = (static_cast<std::size_t>(r) * in.w + (j + v0 - c.pad)) * C;
        const double* xs = x + xoff;
        for (int f = 0; f < c.filters; ++f) {
          const double g = go[f];
          if (g == 0.0) continue;
          const std::size_t woff = f * per_filter + (static_cast<std::size_t>(u) * c.kernel_w + v0) * C;
          double* dws = dw + woff;
          for (int t = 0; t < seg; ++t) dws[t] += g * xs[t];
          if (dx) {
            const double* ws = w + woff;
            double* dxs = dx + xoff;
            for (int t = 0; t < seg; ++t) dxs[t] += g * ws[t];
          }
        }
      }
    }
  }
}

void pool_forward(const MaxPool& p, const Shape& in, const Shape& out, const double* x, double* y,
                  std::uint32_t* arg) {
  for (int i = 0; i < out.h; ++i) {
    for (int j = 0; j < out.w; ++j) {
      for (int ch = 0; ch < in.c; ++ch) {
        double best = -std::numeric_limits<double>::infinity();
        std::uint32_t best_idx = 0;
        for (int u = 0; u < p.window_h; ++u) {
          for (int v = 0; v < p.window_w; ++v) {
            const std::size_t idx =
                (static_cast<std::size_t>(i * p.stride_h + u) * in.w + (j * p.stride_w + v)) * in.c + ch;
            if (x[idx] > best) {
              best = x[idx];
              best_idx = static_cast<std::uint32_t>(idx);
            }
          }
        }
        const std::size_t o = (static_cast<std::size_t>(i) * out.w + j) * in.c + ch;
        y[o] = best;
        arg[o] = best_idx;
      }
    }
  }
}

void check_lengths(const NetworkSpec& spec, const ParamVector& params, std::span<const double> x) {
  if (params.size() != spec.param_count())
    throw ShapeError("parameter vector has " + std::to_string(params.size()) + " entries, network needs " +
                     std::to_string(spec.param_count()));
  if (x.size() != spec.input_shape().size())
    throw ShapeError("input has " + std::to_string(x.size()) + " values, network expects " +
                     to_string(spec.input_shape()));
}

}  // namespace

std::string to_string(const Shape& s) {
  return std::to_string(s.h) + "x" + std::to_string(s.w) + "x" + std::to_string(s.c);
}

std::string to_string(const Layer& layer) {
  return std::visit(
      overloaded{
          [](const Dense& d) { return "dense" + std::to_string(d.in_units) + "x" + std::to_string(d.out_units); },
          [](const Conv2d& c) {
            std::string s = "conv" + std::to_string(c.kernel_h) + "x" + std::to_string(c.kernel_w) + "x" +
                            std::to_string(c.in_channels) + "x" + std::to_string(c.filters);
            if (c.pad > 0) s += "p" + std::to_string(c.pad);
            return s;
          },
          [](const Relu&) { return std::string("relu"); },
          [](const MaxPool& p) {
            return "pool" + std::to_string(p.window_h) + "x" + std::to_string(p.window_w) + "s" +
                   std::to_string(p.stride_h) + "x" + std::to_string(p.stride_w);
          },
          [](const Flatten&) { return std::string("flatten"); },
      },
      layer);
}

Shape output_shape(const Layer& layer, const Shape& cur) {
  const std::string where = to_string(layer) + ": ";
  return std::visit(
      overloaded{
          [&](const Dense& d) {
            if (d.in_units <= 0 || d.out_units <= 0) throw ShapeError(where + "units must be positive");
            if (cur.h != 1 || cur.w != 1 || cur.c != d.in_units)
              throw ShapeError(where + "expects flat input of " + std::to_string(d.in_units) + ", got " +
                               to_string(cur));
            return Shape{1, 1, d.out_units};
          },
          [&](const Conv2d& c) {
            if (c.filters <= 0 || c.kernel_h <= 0 || c.kernel_w <= 0 || c.in_channels <= 0 || c.pad < 0)
              throw ShapeError(where + "filters, kernel and channels must be positive");
            if (cur.c != c.in_channels)
              throw ShapeError(where + "expects " + std::to_string(c.in_channels) + " channels, got " +
                               to_string(cur));
            const int oh = conv_extent(cur.h, c.pad, c.kernel_h);
            const int ow = conv_extent(cur.w, c.pad, c.kernel_w);
            if (oh <= 0 || ow <= 0) throw ShapeError(where + "kernel larger than input " + to_string(cur));
            return Shape{oh, ow, c.filters};
          },
          [&](const Relu&) { return cur; },
          [&](const MaxPool& p) {
            if (p.window_h <= 0 || p.window_w <= 0 || p.stride_h <= 0 || p.stride_w <= 0)
              throw ShapeError(where + "window and stride must be positive");
            if (cur.h < p.window_h || cur.w < p.window_w)
              throw ShapeError(where + "window larger than input " + to_string(cur));
            return Shape{(cur.h - p.window_h) / p.stride_h + 1, (cur.w - p.window_w) / p.stride_w + 1, cur.c};
          },
          [&](const Flatten&) { return Shape{1, 1, static_cast<int>(cur.size())}; },
      },
      layer);
}

NetworkSpec::NetworkSpec(Shape input, std::vector<Layer> layers, int num_classes)
    : input_(input), layers_(std::move(layers)), num_classes_(num_classes) {
  if (input_.h <= 0 || input_.w <= 0 || input_.c <= 0) throw ShapeError("input shape must be positive");
  if (num_classes_ <= 0) throw ShapeError("num_classes must be positive");
  Shape cur = input_;
  std::size_t offset = 0;
  info_.reserve(layers_.size());
  for (const auto& layer : layers_) {
    LayerInfo li;
    li.in = cur;
    li.param_offset = offset;
    li.out = output_shape(layer, cur);
    if (const auto* d = std::get_if<Dense>(&layer)) {
      li.weight_count = static_cast<std::size_t>(d->in_units) * d->out_units;
      li.bias_count = static_cast<std::size_t>(d->out_units);
    } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
      li.weight_count = static_cast<std::size_t>(c->filters) * c->kernel_h * c->kernel_w * c->in_channels;
      li.bias_count = static_cast<std::size_t>(c->filters);
    }
    cur = li.out;
    offset += li.weight_count + li.bias_count;
    info_.push_back(li);
  }
  if (cur.h != 1 || cur.w != 1 || cur.c != num_classes_)
    throw ShapeError("final layer produces " + to_string(cur) + ", expected " + std::to_string(num_classes_) +
                     " outputs");
  param_count_ = offset;
}

std::string NetworkSpec::describe() const {
  std::string s = to_string(input_);
  for (const auto& l : layers_) s += "|" + to_string(l);
  s += "|K=" + std::to_string(num_classes_);
  return s;
}

std::uint64_t NetworkSpec::digest() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : describe()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

NetworkSpec parse_network(const std::string& text, Shape input, int num_classes) {
  const std::string k = std::to_string(num_classes);
  std::string body = text;
  if (text == "mnist") body = "conv:64,relu,pool,conv:32,relu,pool,flatten,dense:30,relu,dense:" + k;
  else if (text == "mnist-small") body = "conv:8,relu,pool,conv:8,relu,pool,flatten,dense:30,relu,dense:" + k;
  else if (text == "cifar")
    body = "conv:120:same,relu,pool,conv:60:same,relu,pool,conv:30:same,relu,pool,flatten,dense:30,relu,dense:" + k;
  else if (text == "linear") body = "flatten,dense:" + k;

  std::vector<Layer> layers;
  Shape cur = input;
  std::stringstream ss(body);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok.erase(std::remove_if(tok.begin(), tok.end(), [](unsigned char c) { return std::isspace(c); }), tok.end());
    if (tok.empty()) continue;
    std::vector<std::string> parts;
    std::stringstream ts(tok);
    std::string p;
    while (std::getline(ts, p, ':')) parts.push_back(p);
    auto num = [&](std::size_t i, int def) {
      if (i >= parts.size()) return def;
      try {
        return std::stoi(parts[i]);
      } catch (const std::exception&) {
        throw ShapeError("bad number in layer token '" + tok + "'");
      }
    };
    const std::string& name = parts[0];
    Layer layer;
    if (name == "dense") {
      if (cur.h != 1 || cur.w != 1) {
        layers.emplace_back(Flatten{});
        cur = output_shape(layers.back(), cur);
      }
      layer = Dense{static_cast<int>(cur.size()), num(1, 0)};
    } else if (name == "conv") {
      Conv2d c;
      c.filters = num(1, 0);
      c.in_channels = cur.c;
      std::size_t next = 2;
      if (parts.size() > 2 && parts[2] != "same" && parts[2] != "valid") {
        c.kernel_h = c.kernel_w = num(2, 5);
        next = 3;
      }
      if (parts.size() > next && parts[next] == "same") c.pad = c.kernel_h / 2;
      layer = c;
    } else if (name == "relu") {
      layer = Relu{};
    } else if (name == "pool") {
      MaxPool mp;
      mp.window_h = mp.window_w = num(1, 2);
      mp.stride_h = mp.stride_w = num(2, mp.window_h);
      layer = mp;
    } else if (name == "flatten") {
      layer = Flatten{};
    } else {
      throw ShapeError("unknown layer token '" + tok + "'");
    }
    cur = output_shape(layer, cur);
    layers.push_back(layer);
  }
  return NetworkSpec(input, std::move(layers), num_classes);
}

double ParamVector::norm() const { return std::sqrt(dot(values_, values_)); }

bool ParamVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

std::vector<int> label_vector(int label, int num_classes) {
  std::vector<int> y(static_cast<std::size_t>(num_classes), -1);
  if (label >= 1 && label <= num_classes) y[static_cast<std::size_t>(label - 1)] = 1;
  return y;
}

ParamVector init_params(const NetworkSpec& spec, std::uint64_t seed) {
  ParamVector p(spec.param_count());
  std::mt19937_64 rng(seed);
  for (std::size_t n = 0; n < spec.layers().size(); ++n) {
    const auto& li = spec.layout()[n];
    if (li.weight_count == 0) continue;
    const auto fan_in = static_cast<double>(li.weight_count / li.bias_count);
    std::uniform_real_distribution<double> dist(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
    for (std::size_t i = 0; i < li.weight_count; ++i) p[li.param_offset + i] = dist(rng);
  }
  return p;
}

ForwardTrace forward_trace(const NetworkSpec& spec, const ParamVector& params, std::span<const double> x) {
  check_lengths(spec, params, x);
  ForwardTrace t;
  t.activations.reserve(spec.layers().size() + 1);
  t.activations.emplace_back(x.begin(), x.end());
  for (std::size_t n = 0; n < spec.layers().size(); ++n) {
    const auto& li = spec.layout()[n];
    const double* w = params.data() + li.param_offset;
    std::vector<double> y(li.out.size());
    const std::vector<double>& in = t.activations.back();
    std::visit(overloaded{
                   [&](const Dense& d) { dense_forward(d, w, in.data(), y.data()); },
                   [&](const Conv2d& c) { conv_forward(c, li.in, li.out, w, in.data(), y.data()); },
                   [&](const Relu&) {
                     for (std::size_t i = 0; i < y.size(); ++i) y[i] = in[i] > 0.0 ? in[i] : 0.0;
                   },
                   [&](const MaxPool& p) {
                     std::vector<std::uint32_t> arg(li.out.size());
                     pool_forward(p, li.in, li.out, in.data(), y.data(), arg.data());
                     t.pool_argmax.push_back(std::move(arg));
                   },
                   [&](const Flatten&) { y = in; },
               },
               spec.layers()[n]);
    t.activations.push_back(std::move(y));
  }
  return t;
}

OutputVector forward(const NetworkSpec& spec, const ParamVector& params, std::span<const double> x) {
  ForwardTrace t = forward_trace(spec, params, x);
  return std::move(t.activations.back());
}

void backward(const NetworkSpec& spec, const ParamVector& params, const ForwardTrace& trace,
              std::span<const double> output_seed, std::span<double> param_grad, std::vector<double>* input_grad) {
  if (output_seed.size() != static_cast<std::size_t>(spec.num_classes()))
    throw ShapeError("output seed must have K entries");
  if (param_grad.size() != spec.param_count()) throw ShapeError("gradient buffer has wrong length");
  const std::size_t L = spec.layers().size();
  std::vector<double> grad(output_seed.begin(), output_seed.end());
  std::vector<double> next;
  std::size_t pool_idx = trace.pool_argmax.size();
  for (std::size_t n = L; n-- > 0;) {
    const auto& li = spec.layout()[n];
    const bool need_dx = n > 0 || input_grad != nullptr;
    const double* w = params.data() + li.param_offset;
    double* dw = param_grad.data() + li.param_offset;
    const std::vector<double>& in = trace.activations[n];
    next.assign(need_dx ? li.in.size() : 0, 0.0);
    std::visit(overloaded{
                   [&](const Dense& d) { dense_backward(d, w, in.data(), grad.data(), dw, need_dx ? next.data() : nullptr); },
                   [&](const Conv2d& c) {
                     conv_backward(c, li.in, li.out, w, in.data(), grad.data(), dw, need_dx ? next.data() : nullptr);
                   },
                   [&](const Relu&) {
                     // The derivative at exactly zero is taken as 0.
                     if (need_dx)
                       for (std::size_t i = 0; i < next.size(); ++i) next[i] = in[i] > 0.0 ? grad[i] : 0.0;
                   },
                   [&](const MaxPool&) {
                     const auto& arg = trace.pool_argmax[--pool_idx];
                     if (need_dx)
                       for (std::size_t o = 0; o < arg.size(); ++o) next[arg[o]] += grad[o];
                   },
                   [&](const Flatten&) {
                     if (need_dx) next = grad;
                   },
               },
               spec.layers()[n]);
    grad.swap(next);
  }
  if (input_grad) *input_grad = std::move(grad);
}

ParamVector output_gradient(const NetworkSpec& spec, const ParamVector& params, const Sample& x, int j) {
  if (j < 1 || j > spec.num_classes()) throw ShapeError("output index out of range");
  const ForwardTrace t = forward_trace(spec, params, x.input);
  std::vector<double> seed(static_cast<std::size_t>(spec.num_classes()), 0.0);
  seed[static_cast<std::size_t>(j - 1)] = 1.0;
  ParamVector g(spec.param_count());
  backward(spec, params, t, seed, g.span());
  return g;
}

std::vector<ParamVector> output_jacobian(const NetworkSpec& spec, const ParamVector& params, const Sample& x) {
  const ForwardTrace t = forward_trace(spec, params, x.input);
  const auto K = static_cast<std::size_t>(spec.num_classes());
  std::vector<ParamVector> rows;
  rows.reserve(K);
  std::vector<double> seed(K, 0.0);
  for (std::size_t j = 0; j < K; ++j) {
    seed.assign(K, 0.0);
    seed[j] = 1.0;
    ParamVector g(spec.param_count());
    backward(spec, params, t, seed, g.span());
    rows.push_back(std::move(g));
  }
  return rows;
}

std::vector<double> input_gradient(const NetworkSpec& spec, const ParamVector& params, std::span<const double> x,
                                   std::span<const double> output_seed) {
  const ForwardTrace t = forward_trace(spec, params, x);
  std::vector<double> scratch(spec.param_count());
  std::vector<double> gx;
  backward(spec, params, t, output_seed, scratch, &gx);
  return gx;
}

std::vector<std::uint8_t> activation_pattern(const NetworkSpec& spec, const ParamVector& params,
                                             std::span<const double> x) {
  const ForwardTrace t = forward_trace(spec, params, x);
  std::vector<std::uint8_t> bits;
  std::size_t pool_idx = 0;
  for (std::size_t n = 0; n < spec.layers().size(); ++n) {
    if (std::holds_alternative<Relu>(spec.layers()[n])) {
      for (double v : t.activations[n]) bits.push_back(v > 0.0 ? 1 : 0);
    } else if (std::holds_alternative<MaxPool>(spec.layers()[n])) {
      for (std::uint32_t a : t.pool_argmax[pool_idx]) {
        for (int b = 0; b < 4; ++b) bits.push_back(static_cast<std::uint8_t>(a >> (8 * b)));
      }
      ++pool_idx;
    }
  }
  return bits;
}

double min_relu_margin(const NetworkSpec& spec, const ParamVector& params, std::span<const double> x) {
  const ForwardTrace t = forward_trace(spec, params, x);
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < spec.layers().size(); ++n) {
    if (!std::holds_alternative<Relu>(spec.layers()[n])) continue;
    for (double v : t.activations[n]) m = std::min(m, std::abs(v));
  }
  return m;
}

double HingeLoss::sum() const {
  double s = 0.0;
  for (double v : per_node) s += v;
  return s;
}

int HingeLoss::active_nodes() const {
  return static_cast<int>(std::count_if(per_node.begin(), per_node.end(), [](double v) { return v > 0.0; }));
}

HingeLoss hinge_loss(std::span<const double> out, std::span<const int> labels) {
  if (out.size() != labels.size()) throw ShapeError("hinge_loss: output/label length mismatch");
  HingeLoss h;
  h.per_node.resize(out.size());
  for (std::size_t j = 0; j < out.size(); ++j) h.per_node[j] = std::max(0.0, 1.0 - labels[j] * out[j]);
  h.sample_avg = out.empty() ? 0.0 : h.sum() / static_cast<double>(out.size());
  return h;
}

HingeLoss hinge_loss(std::span<const double> out, int label) {
  const auto y = label_vector(label, static_cast<int>(out.size()));
  return hinge_loss(out, y);
}

std::vector<double> hinge_seed(std::span<const double> out, int label) {
  const auto K = out.size();
  std::vector<double> seed(K, 0.0);
  for (std::size_t j = 0; j < K; ++j) {
    const double y = (static_cast<int>(j) + 1 == label) ? 1.0 : -1.0;
    if (1.0 - y * out[j] > 0.0) seed[j] = -y / static_cast<double>(K);
  }
  return seed;
}

int predict(std::span<const double> out) {
  if (out.empty()) throw ShapeError("predict: empty output");
  std::size_t best = 0;
  for (std::size_t j = 1; j < out.size(); ++j)
    if (out[j] > out[best]) best = j;
  return static_cast<int>(best) + 1;
}

}  // namespace svmu
