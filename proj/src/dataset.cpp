#include "svmu/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace svmu {

namespace {

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

std::uint32_t read_be32(std::span<const std::uint8_t> s, std::size_t off, const char* what) {
  if (s.size() < off + 4) throw ParseError(std::string("truncated ") + what + " header", s.size());
  return (std::uint32_t{s[off]} << 24) | (std::uint32_t{s[off + 1]} << 16) | (std::uint32_t{s[off + 2]} << 8) |
         std::uint32_t{s[off + 3]};
}

void write_be32(Bytes& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

std::map<std::string, std::string> parse_kv(const std::string& s) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("dataset option '" + item + "' is not key=value");
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return kv;
}

// Stroke templates in a unit box (x to the right, y downwards).
using Polyline = std::vector<std::array<double, 2>>;

Polyline arc(double cx, double cy, double rx, double ry, double a0, double a1, int steps) {
  Polyline p;
  for (int i = 0; i <= steps; ++i) {
    const double a = a0 + (a1 - a0) * i / steps;
    p.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
  }
  return p;
}

Polyline join(Polyline a, const Polyline& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::vector<Polyline> digit_strokes(int d) {
  constexpr double pi = std::numbers::pi;
  switch (d) {
    case 0:
      return {arc(0.5, 0.5, 0.28, 0.4, 0.0, 2 * pi, 24)};
    case 1:
      return {{{0.36, 0.24}, {0.52, 0.1}, {0.52, 0.9}}};
    case 2:
      return {join(arc(0.5, 0.32, 0.24, 0.2, pi, 2.25 * pi, 12), Polyline{{0.24, 0.9}, {0.8, 0.9}})};
    case 3:
      return {arc(0.48, 0.3, 0.24, 0.2, -0.8 * pi, 0.5 * pi, 12), arc(0.48, 0.7, 0.26, 0.2, -0.5 * pi, 0.8 * pi, 12)};
    case 4:
      return {{{0.62, 0.9}, {0.62, 0.1}, {0.2, 0.64}, {0.82, 0.64}}};
    case 5:
      return {join(Polyline{{0.76, 0.1}, {0.32, 0.1}, {0.29, 0.46}}, arc(0.48, 0.66, 0.26, 0.23, -0.75 * pi, 0.8 * pi, 12))};
    case 6:
      return {join(Polyline{{0.7, 0.1}, {0.42, 0.34}}, arc(0.5, 0.66, 0.24, 0.23, -0.85 * pi, 1.15 * pi, 18))};
    case 7:
      return {{{0.22, 0.12}, {0.78, 0.12}, {0.44, 0.9}}};
    case 8:
      return {arc(0.5, 0.29, 0.2, 0.19, 0.0, 2 * pi, 18), arc(0.5, 0.7, 0.25, 0.21, 0.0, 2 * pi, 18)};
    default:
      return {join(arc(0.48, 0.32, 0.23, 0.21, 0.0, 2 * pi, 18), Polyline{{0.71, 0.32}, {0.66, 0.9}})};
  }
}

double segment_distance(double px, double py, const std::array<double, 2>& a, const std::array<double, 2>& b) {
  const double dx = b[0] - a[0];
  const double dy = b[1] - a[1];
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - a[0]) * dx + (py - a[1]) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a[0] + t * dx - px;
  const double ey = a[1] + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

Dataset make_dataset(std::string name, Split split, Shape shape, int k) {
  Dataset ds;
  ds.name = std::move(name);
  ds.split = split;
  ds.shape = shape;
  ds.num_classes = k;
  return ds;
}

std::filesystem::path find_variant(const std::filesystem::path& dir, const std::vector<std::string>& names) {
  for (const auto& n : names) {
    for (const char* suffix : {"", ".gz"}) {
      const auto p = dir / (n + suffix);
      if (std::filesystem::exists(p)) return p;
    }
  }
  return {};
}

}  // namespace

std::vector<const Sample*> Dataset::pointers() const {
  std::vector<const Sample*> p;
  p.reserve(samples.size());
  for (const auto& s : samples) p.push_back(&s);
  return p;
}

Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels, const IdxOptions& opt) {
  if (read_be32(images, 0, "image") != kIdxImageMagic) throw ParseError("bad IDX image magic", 0);
  const std::uint32_t count = read_be32(images, 4, "image");
  const std::uint32_t rows = read_be32(images, 8, "image");
  const std::uint32_t cols = read_be32(images, 12, "image");
  if (read_be32(labels, 0, "label") != kIdxLabelMagic) throw ParseError("bad IDX label magic", 0);
  const std::uint32_t label_count = read_be32(labels, 4, "label");
  if (label_count != count)
    throw ParseError("label count " + std::to_string(label_count) + " does not match image count " +
                         std::to_string(count),
                     4);
  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  const std::size_t need = 16 + static_cast<std::size_t>(count) * pixels;
  if (images.size() < need) throw ParseError("image stream truncated, expected " + std::to_string(need) + " bytes", images.size());
  if (images.size() > need) throw ParseError("trailing bytes after last image", need);
  if (labels.size() < 8 + static_cast<std::size_t>(count))
    throw ParseError("label stream truncated", labels.size());
  if (labels.size() > 8 + static_cast<std::size_t>(count)) throw ParseError("trailing bytes after last label", 8 + count);

  Dataset ds = make_dataset("idx", Split::train, Shape{static_cast<int>(rows), static_cast<int>(cols), 1},
                            opt.num_classes);
  ds.samples.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t lab = labels[8 + i];
    if (lab >= opt.num_classes) throw ParseError("label " + std::to_string(lab) + " out of range", 8 + i);
    Sample& s = ds.samples[i];
    s.label = lab + 1;
    s.input.resize(pixels);
    const std::uint8_t* px = images.data() + 16 + i * pixels;
    for (std::size_t k = 0; k < pixels; ++k)
      s.input[k] = opt.binarize ? (px[k] >= 128 ? 1.0 : 0.0) : px[k] / 255.0;
  }
  return ds;
}

std::pair<Bytes, Bytes> serialize_idx(const Dataset& ds) {
  if (ds.shape.c != 1) throw std::invalid_argument("IDX images must have one channel");
  Bytes img;
  Bytes lab;
  const auto n = static_cast<std::uint32_t>(ds.size());
  write_be32(img, kIdxImageMagic);
  write_be32(img, n);
  write_be32(img, static_cast<std::uint32_t>(ds.shape.h));
  write_be32(img, static_cast<std::uint32_t>(ds.shape.w));
  write_be32(lab, kIdxLabelMagic);
  write_be32(lab, n);
  img.reserve(img.size() + ds.size() * ds.shape.size());
  for (const auto& s : ds.samples) {
    for (double v : s.input) img.push_back(to_byte(v));
    lab.push_back(static_cast<std::uint8_t>(s.label - 1));
  }
  return {std::move(img), std::move(lab)};
}

Dataset parse_cifar10(std::span<const std::uint8_t> batch) {
  if (batch.size() % kCifarRecord != 0)
    throw ParseError("CIFAR-10 stream length " + std::to_string(batch.size()) + " is not a multiple of 3073",
                     batch.size() - batch.size() % kCifarRecord);
  const std::size_t n = batch.size() / kCifarRecord;
  constexpr std::size_t plane = kCifarSide * kCifarSide;
  Dataset ds = make_dataset("cifar10", Split::train, Shape{32, 32, 3}, 10);
  ds.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = batch.data() + i * kCifarRecord;
    if (rec[0] >= 10) throw ParseError("label " + std::to_string(rec[0]) + " out of range", i * kCifarRecord);
    Sample& s = ds.samples[i];
    s.label = rec[0] + 1;
    s.input.resize(3 * plane);
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t p = 0; p < plane; ++p) s.input[p * 3 + ch] = rec[1 + ch * plane + p] / 255.0;
  }
  return ds;
}

Bytes serialize_cifar10(const Dataset& ds) {
  if (!(ds.shape == Shape{32, 32, 3})) throw std::invalid_argument("CIFAR-10 records are 32x32x3");
  constexpr std::size_t plane = kCifarSide * kCifarSide;
  Bytes out;
  out.reserve(ds.size() * kCifarRecord);
  for (const auto& s : ds.samples) {
    out.push_back(static_cast<std::uint8_t>(s.label - 1));
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t p = 0; p < plane; ++p) out.push_back(to_byte(s.input[p * 3 + ch]));
  }
  return out;
}

bool is_gzip(std::span<const std::uint8_t> data) { return data.size() >= 2 && data[0] == 0x1f && data[1] == 0x8b; }

Bytes gunzip(std::span<const std::uint8_t> data) {
  z_stream zs{};
  if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) throw std::runtime_error("inflateInit2 failed");
  zs.next_in = const_cast<Bytef*>(data.data());
  zs.avail_in = static_cast<uInt>(data.size());
  Bytes out;
  std::array<std::uint8_t, 1 << 16> buf{};
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = buf.data();
    zs.avail_out = static_cast<uInt>(buf.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      const std::size_t at = zs.total_in;
      inflateEnd(&zs);
      throw ParseError("corrupt gzip stream", at);
    }
    out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
    if (rc != Z_STREAM_END && zs.avail_in == 0) {
      inflateEnd(&zs);
      throw ParseError("truncated gzip stream", data.size());
    }
  }
  inflateEnd(&zs);
  return out;
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return is_gzip(data) ? gunzip(data) : data;
}

Dataset synth_gaussian_blobs(int num_classes, int n_per_class, int dim, double separation, std::uint64_t seed) {
  if (num_classes < 1 || n_per_class < 0 || dim < 1) throw std::invalid_argument("blobs: bad size");
  if (separation < 0) throw std::invalid_argument("blobs: separation must be nonnegative");
  const auto K = static_cast<std::size_t>(num_classes);
  const auto D = static_cast<std::size_t>(dim);
  std::vector<std::vector<double>> centres(K, std::vector<double>(D, 0.0));
  if (D >= K) {
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t d = 0; d < K; ++d) centres[k][d] = (d == k ? 1.0 : 0.0) - 1.0 / static_cast<double>(K);
      double n2 = 0.0;
      for (double v : centres[k]) n2 += v * v;
      const double scale = n2 > 0 ? separation / std::sqrt(n2) : 0.0;
      for (double& v : centres[k]) v *= scale;
    }
  } else if (D >= 2) {
    for (std::size_t k = 0; k < K; ++k) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(K);
      centres[k][0] = separation * std::cos(a);
      centres[k][1] = separation * std::sin(a);
    }
  } else {
    for (std::size_t k = 0; k < K; ++k) centres[k][0] = separation * (static_cast<double>(k) - (K - 1) / 2.0);
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset ds = make_dataset("blobs", Split::train, Shape{1, 1, dim}, num_classes);
  ds.samples.reserve(K * static_cast<std::size_t>(n_per_class));
  for (int i = 0; i < n_per_class; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      Sample s;
      s.label = static_cast<int>(k) + 1;
      s.input.resize(D);
      for (std::size_t d = 0; d < D; ++d) s.input[d] = centres[k][d] + noise(rng);
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

Dataset synth_stroke_digits(int count, std::uint64_t seed) {
  if (count < 0) throw std::invalid_argument("digits: negative count");
  constexpr int side = 28;
  constexpr double box = 20.0;  // glyph box in pixels, centred like MNIST
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<int> pick(0, 9);
  Dataset ds = make_dataset("digits", Split::train, Shape{side, side, 1}, 10);
  ds.samples.reserve(static_cast<std::size_t>(count));
  for (int n = 0; n < count; ++n) {
    const int digit = pick(rng);
    const double rot = 0.21 * u(rng);
    const double sx = 1.0 + 0.12 * u(rng);
    const double sy = 1.0 + 0.10 * u(rng);
    const double shear = 0.22 * u(rng);
    const double tx = 0.07 * u(rng);
    const double ty = 0.06 * u(rng);
    const double pen = 0.055 + 0.025 * (u(rng) + 1.0);
    const double jitter = 0.025;
    auto strokes = digit_strokes(digit);
    const double cr = std::cos(rot);
    const double sr = std::sin(rot);
    for (auto& line : strokes) {
      for (auto& pt : line) {
        const double x = (pt[0] - 0.5 + jitter * u(rng)) * sx;
        const double y = (pt[1] - 0.5 + jitter * u(rng)) * sy;
        const double xs = x + shear * y;
        pt = {0.5 + tx + cr * xs - sr * y, 0.5 + ty + sr * xs + cr * y};
      }
    }
    Sample s;
    s.label = digit + 1;
    s.input.assign(side * side, 0.0);
    const double px_unit = 1.0 / box;
    for (int r = 0; r < side; ++r) {
      for (int c = 0; c < side; ++c) {
        const double px = (c + 0.5 - (side - box) / 2.0) / box;
        const double py = (r + 0.5 - (side - box) / 2.0) / box;
        double d = 1e9;
        for (const auto& line : strokes)
          for (std::size_t k = 0; k + 1 < line.size(); ++k) d = std::min(d, segment_distance(px, py, line[k], line[k + 1]));
        const double v = std::clamp((pen / 2.0 - d) / px_unit + 0.5, 0.0, 1.0);
        s.input[static_cast<std::size_t>(r * side + c)] = std::round(v * 255.0) / 255.0;
      }
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Dataset shuffle_labels(const Dataset& ds, std::uint64_t seed) {
  Dataset out = ds;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(1, std::max(1, ds.num_classes));
  for (auto& s : out.samples) s.label = ds.num_classes <= 1 ? s.label : pick(rng);
  out.name = ds.name + "-shuffled";
  return out;
}

Dataset head(const Dataset& ds, std::size_t n) {
  if (n == 0 || n >= ds.size()) return ds;
  Dataset out = ds;
  out.samples.resize(n);
  return out;
}

std::pair<Dataset, Dataset> split_validation(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (fraction < 0.0 || fraction >= 1.0) throw std::invalid_argument("validation fraction must lie in [0,1)");
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(ds.size())));
  std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::sort(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  Dataset train = ds;
  Dataset val = ds;
  train.samples.clear();
  val.samples.clear();
  val.name = ds.name + "-validation";
  for (std::size_t i = 0; i < idx.size(); ++i) (i < n_val ? val : train).samples.push_back(ds.samples[idx[i]]);
  return {std::move(train), std::move(val)};
}

bool mnist_available(const std::filesystem::path& dir) {
  return !find_variant(dir, {"train-images-idx3-ubyte", "train-images.idx3-ubyte"}).empty() &&
         !find_variant(dir, {"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"}).empty() &&
         !find_variant(dir, {"t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"}).empty() &&
         !find_variant(dir, {"t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"}).empty();
}

TrainTest load_dataset(const std::string& description) {
  const auto colon = description.find(':');
  const std::string kind = description.substr(0, colon);
  const auto kv = colon == std::string::npos ? std::map<std::string, std::string>{}
                                             : parse_kv(description.substr(colon + 1));
  auto get = [&](const std::string& k, const std::string& def) {
    const auto it = kv.find(k);
    return it == kv.end() ? def : it->second;
  };
  auto need = [&](const std::string& k) {
    const auto it = kv.find(k);
    if (it == kv.end()) throw std::invalid_argument("dataset '" + kind + "' needs option " + k);
    return it->second;
  };

  TrainTest tt;
  if (kind == "blobs") {
    const int K = std::stoi(get("K", "4"));
    const int n = std::stoi(get("n", "200"));
    const int test_n = std::stoi(get("test_n", std::to_string(std::max(1, n / 4))));
    const int dim = std::stoi(get("dim", "16"));
    const double sep = std::stod(get("sep", "3.0"));
    const auto seed = std::stoull(get("seed", "1"));
    tt.train = synth_gaussian_blobs(K, n, dim, sep, seed);
    tt.test = synth_gaussian_blobs(K, test_n, dim, sep, seed + 0x9e3779b97f4a7c15ULL);
  } else if (kind == "digits") {
    const int n = std::stoi(get("n", "2000"));
    const int test_n = std::stoi(get("test_n", "1000"));
    const auto seed = std::stoull(get("seed", "1"));
    tt.train = synth_stroke_digits(n, seed);
    tt.test = synth_stroke_digits(test_n, seed + 0x9e3779b97f4a7c15ULL);
  } else if (kind == "mnist") {
    const std::filesystem::path dir = need("dir");
    IdxOptions opt;
    opt.binarize = get("binarize", "0") == "1";
    auto file = [&](const std::string& a, const std::string& b) {
      auto p = find_variant(dir, {a, b});
      if (p.empty()) throw std::runtime_error("missing MNIST file " + a + " in " + dir.string());
      return read_file(p);
    };
    tt.train = parse_idx(file("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
                         file("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"), opt);
    tt.test = parse_idx(file("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
                        file("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"), opt);
    tt.train.name = tt.test.name = "mnist";
  } else if (kind == "idx") {
    IdxOptions opt;
    opt.binarize = get("binarize", "0") == "1";
    tt.train = parse_idx(read_file(need("train_images")), read_file(need("train_labels")), opt);
    tt.test = parse_idx(read_file(need("test_images")), read_file(need("test_labels")), opt);
  } else if (kind == "cifar10") {
    const std::filesystem::path dir = need("dir");
    tt.train = make_dataset("cifar10", Split::train, Shape{32, 32, 3}, 10);
    for (int b = 1; b <= 5; ++b) {
      const auto p = dir / ("data_batch_" + std::to_string(b) + ".bin");
      if (!std::filesystem::exists(p)) continue;
      auto part = parse_cifar10(read_file(p));
      for (auto& s : part.samples) tt.train.samples.push_back(std::move(s));
    }
    tt.test = parse_cifar10(read_file(dir / "test_batch.bin"));
  } else {
    throw std::invalid_argument("unknown dataset kind '" + kind + "'");
  }
  tt.train.split = Split::train;
  tt.test.split = Split::test;
  return tt;
}

}  // namespace svmu
