#include <doctest.h>
#include <zlib.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <unistd.h>

#include "svmu/dataset.hpp"

using namespace svmu;

namespace {

void be32(Bytes& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

// Two 2x3 images labelled 7 and 0, written byte by byte.
std::pair<Bytes, Bytes> tiny_idx() {
  Bytes img, lab;
  be32(img, 0x803);
  be32(img, 2);
  be32(img, 2);
  be32(img, 3);
  for (std::uint8_t v : {0, 51, 102, 153, 204, 255, 255, 0, 128, 127, 1, 2}) img.push_back(v);
  be32(lab, 0x801);
  be32(lab, 2);
  lab.push_back(7);
  lab.push_back(0);
  return {img, lab};
}

Bytes gzip(const Bytes& in) {
  z_stream z{};
  REQUIRE(deflateInit2(&z, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) == Z_OK);
  Bytes out(compressBound(static_cast<uLong>(in.size())) + 64);
  z.next_in = const_cast<Bytef*>(in.data());
  z.avail_in = static_cast<uInt>(in.size());
  z.next_out = out.data();
  z.avail_out = static_cast<uInt>(out.size());
  REQUIRE(deflate(&z, Z_FINISH) == Z_STREAM_END);
  out.resize(z.total_out);
  deflateEnd(&z);
  return out;
}

std::filesystem::path temp_dir() {
  auto p = std::filesystem::temp_directory_path() / ("svmu_data_io_" + std::to_string(::getpid()));
  std::filesystem::create_directories(p);
  return p;
}

void write_bytes(const std::filesystem::path& p, const Bytes& b) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST_CASE("IDX fixture parses to the hand-computed values") {
  const auto [img, lab] = tiny_idx();
  const Dataset ds = parse_idx(img, lab);
  REQUIRE(ds.size() == 2);
  CHECK(ds.shape == Shape{2, 3, 1});
  CHECK(ds.samples[0].label == 8);
  CHECK(ds.samples[1].label == 1);
  CHECK(ds.samples[0].input[1] == doctest::Approx(0.2));
  CHECK(ds.samples[0].input[5] == 1.0);
  CHECK(ds.samples[1].input[2] == doctest::Approx(128.0 / 255.0));

  IdxOptions bin;
  bin.binarize = true;
  const Dataset b = parse_idx(img, lab, bin);
  CHECK(b.samples[1].input[2] == 1.0);  // 128
  CHECK(b.samples[1].input[3] == 0.0);  // 127
}

TEST_CASE("IDX round trip is byte exact") {
  const auto [img, lab] = tiny_idx();
  const auto [img2, lab2] = serialize_idx(parse_idx(img, lab));
  CHECK(img2 == img);
  CHECK(lab2 == lab);
}

TEST_CASE("IDX rejects malformed streams with the failing offset") {
  auto [img, lab] = tiny_idx();
  SUBCASE("bad magic") {
    img[3] = 0x01;
    CHECK_THROWS_AS(parse_idx(img, lab), ParseError);
  }
  SUBCASE("count mismatch") {
    lab[7] = 3;
    try {
      parse_idx(img, lab);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.offset() == 4);
    }
  }
  SUBCASE("trailing bytes") {
    img.push_back(0);
    CHECK_THROWS_AS(parse_idx(img, lab), ParseError);
  }
  SUBCASE("label out of range") {
    lab[8] = 10;
    CHECK_THROWS_AS(parse_idx(img, lab), ParseError);
  }
}

TEST_CASE("every truncation of an IDX stream is rejected") {
  const auto [img, lab] = tiny_idx();
  for (std::size_t n = 0; n < img.size(); ++n)
    CHECK_THROWS_AS(parse_idx(std::span(img.data(), n), lab), ParseError);
  for (std::size_t n = 0; n < lab.size(); ++n)
    CHECK_THROWS_AS(parse_idx(img, std::span(lab.data(), n)), ParseError);
}

TEST_CASE("random byte corruption never crashes the parsers") {
  const auto [img, lab] = tiny_idx();
  std::mt19937_64 rng(1);
  for (int t = 0; t < 2000; ++t) {
    Bytes a = img, b = lab;
    a[rng() % a.size()] = static_cast<std::uint8_t>(rng());
    b[rng() % b.size()] = static_cast<std::uint8_t>(rng());
    try {
      const Dataset d = parse_idx(a, b);
      CHECK(d.size() == 2);
    } catch (const ParseError&) {
    }
  }
}

TEST_CASE("CIFAR-10 fixture converts planes to interleaved channels") {
  Bytes rec(3073, 0);
  rec[0] = 3;
  rec[1 + 0] = 10;            // R at pixel 0
  rec[1 + 1024 + 0] = 20;     // G at pixel 0
  rec[1 + 2048 + 0] = 30;     // B at pixel 0
  rec[1 + 2048 + 33] = 255;   // B at row 1, column 1
  Bytes two = rec;
  two.insert(two.end(), rec.begin(), rec.end());
  two[3073] = 9;
  const Dataset ds = parse_cifar10(two);
  REQUIRE(ds.size() == 2);
  CHECK(ds.shape == Shape{32, 32, 3});
  CHECK(ds.samples[0].label == 4);
  CHECK(ds.samples[1].label == 10);
  CHECK(ds.samples[0].input[0] == doctest::Approx(10 / 255.0));
  CHECK(ds.samples[0].input[1] == doctest::Approx(20 / 255.0));
  CHECK(ds.samples[0].input[2] == doctest::Approx(30 / 255.0));
  CHECK(ds.samples[0].input[33 * 3 + 2] == 1.0);
  CHECK(serialize_cifar10(ds) == two);
}

TEST_CASE("CIFAR-10 rejects partial records and bad labels") {
  Bytes rec(3073, 0);
  CHECK_THROWS_AS(parse_cifar10(std::span(rec.data(), 3072)), ParseError);
  rec.push_back(0);
  CHECK_THROWS_AS(parse_cifar10(rec), ParseError);
  rec.pop_back();
  rec[0] = 10;
  CHECK_THROWS_AS(parse_cifar10(rec), ParseError);
  CHECK(parse_cifar10(Bytes{}).empty());
}

TEST_CASE("gzip files are inflated transparently") {
  const auto [img, lab] = tiny_idx();
  const Bytes z = gzip(img);
  CHECK(is_gzip(z));
  CHECK(!is_gzip(img));
  CHECK(gunzip(z) == img);
  const auto dir = temp_dir();
  write_bytes(dir / "a.gz", z);
  write_bytes(dir / "b", img);
  CHECK(read_file(dir / "a.gz") == img);
  CHECK(read_file(dir / "b") == img);
  Bytes broken = z;
  broken.resize(broken.size() / 2);
  CHECK_THROWS(gunzip(broken));
  CHECK_THROWS(read_file(dir / "missing"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("MNIST directory loading and file detection") {
  const auto dir = temp_dir() / "mnist";
  std::filesystem::create_directories(dir);
  CHECK(!mnist_available(dir));
  const auto [img, lab] = tiny_idx();
  write_bytes(dir / "train-images-idx3-ubyte", img);
  write_bytes(dir / "train-labels-idx1-ubyte", lab);
  write_bytes(dir / "t10k-images-idx3-ubyte.gz", gzip(img));
  write_bytes(dir / "t10k-labels-idx1-ubyte.gz", gzip(lab));
  CHECK(mnist_available(dir));
  const TrainTest tt = load_dataset("mnist:dir=" + dir.string());
  CHECK(tt.train.size() == 2);
  CHECK(tt.test.size() == 2);
  CHECK(tt.test.split == Split::test);
  std::filesystem::remove_all(dir.parent_path());
}

TEST_CASE("blobs are seeded, balanced and centred on the simplex") {
  const Dataset a = synth_gaussian_blobs(4, 500, 8, 3.0, 11);
  const Dataset b = synth_gaussian_blobs(4, 500, 8, 3.0, 11);
  REQUIRE(a.size() == 2000);
  CHECK(a.samples[17].input == b.samples[17].input);
  std::map<int, std::vector<double>> mean;
  std::map<int, int> count;
  for (const auto& s : a.samples) {
    auto& m = mean[s.label];
    m.resize(8, 0.0);
    for (int d = 0; d < 8; ++d) m[static_cast<std::size_t>(d)] += s.input[static_cast<std::size_t>(d)];
    ++count[s.label];
  }
  for (auto& [k, m] : mean) {
    CHECK(count[k] == 500);
    double r2 = 0.0;
    for (double& v : m) {
      v /= 500.0;
      r2 += v * v;
    }
    // Sample mean within a few standard errors (1/sqrt(500) per coordinate) of radius 3.
    CHECK(std::sqrt(r2) == doctest::Approx(3.0).epsilon(0.1));
  }
  // Regular simplex: every pair of centres at the same distance.
  auto dist = [&](int i, int j) {
    double d2 = 0.0;
    for (int d = 0; d < 8; ++d) d2 += std::pow(mean[i][static_cast<std::size_t>(d)] - mean[j][static_cast<std::size_t>(d)], 2);
    return std::sqrt(d2);
  };
  CHECK(dist(1, 2) == doctest::Approx(dist(3, 4)).epsilon(0.1));
  CHECK(dist(1, 2) == doctest::Approx(3.0 * std::sqrt(2.0 * 4 / 3)).epsilon(0.1));
}

TEST_CASE("stroke digits look like 28x28 grey images") {
  const Dataset d = synth_stroke_digits(200, 3);
  REQUIRE(d.size() == 200);
  CHECK(d.shape == Shape{28, 28, 1});
  std::map<int, int> count;
  for (const auto& s : d.samples) {
    ++count[s.label];
    double ink = 0.0;
    for (double v : s.input) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      CHECK(std::round(v * 255.0) == doctest::Approx(v * 255.0));
      ink += v;
    }
    CHECK(ink > 10.0);
  }
  CHECK(count.size() == 10);
  CHECK(synth_stroke_digits(5, 3).samples[4].input == synth_stroke_digits(5, 3).samples[4].input);
}

TEST_CASE("shuffled labels are uniform and independent of the originals") {
  const Dataset d = synth_gaussian_blobs(5, 2000, 3, 2.0, 1);
  const Dataset s = shuffle_labels(d, 7);
  std::map<int, int> count;
  int same = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    ++count[s.samples[i].label];
    same += s.samples[i].label == d.samples[i].label;
  }
  // Chi-square goodness of fit, 4 degrees of freedom, 0.1% critical value 18.47.
  double chi2 = 0.0;
  for (int k = 1; k <= 5; ++k) chi2 += std::pow(count[k] - 2000.0, 2) / 2000.0;
  CHECK(chi2 < 18.47);
  // Agreement with the true label ~ Binomial(10000, 0.2): sd = 40.
  CHECK(std::abs(same - 2000) < 200);
  CHECK(shuffle_labels(d, 7).samples[99].label == s.samples[99].label);

  Dataset one = d;
  one.num_classes = 1;
  for (auto& x : one.samples) x.label = 1;
  const Dataset one_s = shuffle_labels(one, 3);
  for (const auto& x : one_s.samples) CHECK(x.label == 1);
}

TEST_CASE("validation split is disjoint, sized and reproducible") {
  const Dataset d = synth_gaussian_blobs(3, 100, 2, 2.0, 5);
  const auto [tr, va] = split_validation(d, 0.1, 9);
  CHECK(va.size() == 30);
  CHECK(tr.size() == 270);
  const auto [tr2, va2] = split_validation(d, 0.1, 9);
  CHECK(va2.samples[5].input == va.samples[5].input);
  for (const auto& v : va.samples)
    for (const auto& t : tr.samples) CHECK(v.input != t.input);
  CHECK(head(d, 10).size() == 10);
  CHECK(head(d, 0).size() == 300);
}

TEST_CASE("dataset descriptions") {
  const TrainTest tt = load_dataset("blobs:K=3,n=10,test_n=4,dim=5,sep=2,seed=1");
  CHECK(tt.train.size() == 30);
  CHECK(tt.test.size() == 12);
  CHECK(tt.train.num_classes == 3);
  CHECK_THROWS(load_dataset("nonsense:x=1"));
  CHECK_THROWS(load_dataset("mnist:dir=/nonexistent/path"));
}
