#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "fseb/data.hpp"
#include "fseb/rng.hpp"

using namespace fseb;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("fseb_test_data_" + name);
}

void write_text(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

void put_u32_be(std::ofstream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

struct SampleStats {
  double mean = 0.0;
  double sd = 0.0;
};

SampleStats stats(const std::vector<double>& v) {
  SampleStats s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.sd += (x - s.mean) * (x - s.mean);
  s.sd = std::sqrt(s.sd / static_cast<double>(v.size() - 1));
  return s;
}

std::vector<std::vector<double>> rows(const Tensor& t) {
  std::vector<std::vector<double>> out(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) out[i].push_back(t(i, j));
  return out;
}

}  // namespace

TEST_CASE("noise-free two moons lie on their semicircles") {
  const Dataset d = gen_two_moons(200, 0.0, 1);
  CHECK(d.size() == 200);
  CHECK(std::count(d.labels.begin(), d.labels.end(), 0u) == 100);
  CHECK(std::count(d.labels.begin(), d.labels.end(), 1u) == 100);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double x = d.inputs(i, 0), y = d.inputs(i, 1);
    if (d.labels[i] == 0) {
      CHECK(std::abs(std::hypot(x, y) - 1.0) < 1e-12);
      CHECK(y >= -1e-12);
    } else {
      CHECK(std::abs(std::hypot(x - 1.0, y - 0.5) - 1.0) < 1e-12);
      CHECK(y <= 0.5 + 1e-12);
    }
  }
}

TEST_CASE("two moons noise has the requested spread") {
  const Dataset d = gen_two_moons(10000, 0.1, 2);
  std::vector<double> radial;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double cx = d.labels[i] == 0 ? 0.0 : 1.0, cy = d.labels[i] == 0 ? 0.0 : 0.5;
    radial.push_back(std::hypot(d.inputs(i, 0) - cx, d.inputs(i, 1) - cy) - 1.0);
  }
  // The radial residual of isotropic noise has the same sd to first order.
  const SampleStats s = stats(radial);
  CHECK(std::abs(s.sd - 0.1) < 3.0 * 0.1 / std::sqrt(2.0 * 10000.0));
}

TEST_CASE("two moons validation and determinism") {
  CHECK_THROWS_AS(gen_two_moons(5, 0.1, 0), ConfigError);
  CHECK_THROWS_AS(gen_two_moons(0, 0.1, 0), ConfigError);
  CHECK(gen_two_moons(20, 0.1, 3).inputs == gen_two_moons(20, 0.1, 3).inputs);
  CHECK_FALSE(gen_two_moons(20, 0.1, 3).inputs == gen_two_moons(20, 0.1, 4).inputs);
}

TEST_CASE("blob examples") {
  const Dataset one = gen_gaussian_blobs(10, {{1.0, 2.0}}, 0.5, 0);
  for (auto y : one.labels) CHECK(y == 0);
  const Dataset exact = gen_gaussian_blobs(10, {{1.0, 2.0}, {-3.0, 4.0}}, 0.0, 0);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(exact.inputs(i, 0) == (exact.labels[i] == 0 ? 1.0 : -3.0));
    CHECK(exact.inputs(i, 1) == (exact.labels[i] == 0 ? 2.0 : 4.0));
  }
}

TEST_CASE("blob sample means sit on the centers") {
  const std::vector<std::vector<double>> centers{{1.0, -1.0}, {-2.0, 3.0}};
  const double sd = 0.7;
  const Dataset d = gen_gaussian_blobs(10000, centers, sd, 5);
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t j = 0; j < 2; ++j) {
      std::vector<double> v;
      for (std::size_t i = 0; i < d.size(); ++i)
        if (d.labels[i] == k) v.push_back(d.inputs(i, j));
      CHECK(std::abs(stats(v).mean - centers[k][j]) < 3.0 * sd / std::sqrt(static_cast<double>(v.size())));
    }
  }
}

TEST_CASE("csv round trip") {
  Dataset d;
  d.inputs = Tensor::matrix({{0.1, -2.5, 1e-17}, {3.0, 0.3333333333333333, -7.0}});
  d.labels = {1, 0};
  d.num_classes = 2;
  const auto p = temp_path("roundtrip.csv");
  save_csv(p, d);
  const Dataset back = load_tabular(p, TabularFormat::kCsvLabeled);
  CHECK(back.inputs == d.inputs);
  CHECK(back.labels == d.labels);
  CHECK(back.num_classes == 2);
  std::filesystem::remove(p);
}

TEST_CASE("malformed csv files are rejected with a location") {
  const auto p = temp_path("bad.csv");
  write_text(p, "");
  CHECK_THROWS_AS(load_tabular(p, TabularFormat::kCsvLabeled), DataError);
  write_text(p, "a,b,label\n1,2,0\n");
  CHECK_THROWS_AS(load_tabular(p, TabularFormat::kCsvLabeled), DataError);
  write_text(p, "x0,x1,label\n1,2,0\n1,2\n");
  try {
    load_tabular(p, TabularFormat::kCsvLabeled);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);
  }
  write_text(p, "x0,x1,label\n1,2,-1\n");
  CHECK_THROWS_AS(load_tabular(p, TabularFormat::kCsvLabeled), DataError);
  write_text(p, "x0,x1,label\n1,2,5\n");
  CHECK_THROWS_AS(load_tabular(p, TabularFormat::kCsvLabeled, {}, 3), DataError);
  write_text(p, "x0,x1,label\n1,abc,0\n");
  CHECK_THROWS_AS(load_tabular(p, TabularFormat::kCsvLabeled), DataError);
  std::filesystem::remove(p);
  CHECK_THROWS_AS(load_tabular(temp_path("missing.csv"), TabularFormat::kCsvLabeled), DataError);
}

TEST_CASE("idx pair built byte by byte") {
  const auto img = temp_path("images.idx"), lab = temp_path("labels.idx");
  const std::vector<unsigned char> pixels{0, 255, 51, 102, 0, 0, 255, 255, 1, 2, 3, 4,
                                          10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120};
  {
    std::ofstream os(img, std::ios::binary);
    put_u32_be(os, 0x00000803);
    put_u32_be(os, 4);
    put_u32_be(os, 2);
    put_u32_be(os, 3);
    os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  }
  {
    std::ofstream os(lab, std::ios::binary);
    put_u32_be(os, 0x00000801);
    put_u32_be(os, 4);
    const unsigned char l[4] = {3, 0, 1, 3};
    os.write(reinterpret_cast<const char*>(l), 4);
  }
  const Dataset d = load_tabular(img, TabularFormat::kIdxPair, lab);
  CHECK(d.inputs.shape() == Shape{4, 6});
  for (std::size_t i = 0; i < pixels.size(); ++i) CHECK(d.inputs[i] == pixels[i] / 255.0);
  CHECK(d.labels == std::vector<std::size_t>{3, 0, 1, 3});
  CHECK(d.num_classes == 4);

  {
    std::ofstream os(img, std::ios::binary);
    put_u32_be(os, 0x00000801);
  }
  CHECK_THROWS_AS(load_tabular(img, TabularFormat::kIdxPair, lab), DataError);
  std::filesystem::remove(img);
  std::filesystem::remove(lab);
}

TEST_CASE("corruption examples") {
  const Tensor x = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  CorruptionSpec noop{CorruptionKind::kGaussianNoise, 1, {0.0, 0.1, 0.2, 0.3, 0.4}};
  CHECK(corrupt(x, noop, 1) == x);
  CorruptionSpec wipe{CorruptionKind::kRandomErasure, 5, {0.1, 0.2, 0.3, 0.4, 1.0}};
  CHECK(corrupt(x, wipe, 1) == Tensor::zeros({2, 3}));
  const CorruptionSpec n3 = CorruptionSpec::standard(CorruptionKind::kGaussianNoise, 3);
  CHECK(corrupt(x, n3, 4) == corrupt(x, n3, 4));
  CHECK_FALSE(corrupt(x, n3, 4) == corrupt(x, n3, 5));
}

TEST_CASE("gaussian corruption residual matches the table") {
  const CorruptionSpec spec = CorruptionSpec::standard(CorruptionKind::kGaussianNoise, 3);
  const Tensor x = Tensor::zeros({5000, 2});
  const Tensor y = corrupt(x, spec, 9);
  const SampleStats s = stats(y.values());
  CHECK(std::abs(s.sd - spec.magnitude()) < 3.0 * spec.magnitude() / std::sqrt(2.0 * 10000.0));
}

TEST_CASE("corruption tables increase with level") {
  for (auto kind : {CorruptionKind::kGaussianNoise, CorruptionKind::kRandomErasure}) {
    for (int level = 2; level <= 5; ++level)
      CHECK(CorruptionSpec::standard(kind, level).magnitude() > CorruptionSpec::standard(kind, level - 1).magnitude());
    CHECK_THROWS_AS(CorruptionSpec::standard(kind, 0), ConfigError);
    CHECK_THROWS_AS(CorruptionSpec::standard(kind, 6), ConfigError);
  }
  CorruptionSpec flat{CorruptionKind::kGaussianNoise, 1, {0.1, 0.1, 0.2, 0.3, 0.4}};
  CHECK_THROWS_AS(flat.validate(), ConfigError);
}

TEST_CASE("train-inputs context of full size is a permutation") {
  auto src = std::make_shared<Dataset>(gen_two_moons(40, 0.1, 3));
  const Tensor c = sample_context(ContextDistribution::train_inputs(src), 40, 7);
  auto a = rows(c), b = rows(src->inputs);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);
}

TEST_CASE("train-inputs context draws are members of the source") {
  auto src = std::make_shared<Dataset>(gen_two_moons(30, 0.1, 4));
  const auto all = rows(src->inputs);
  const std::set<std::vector<double>> members(all.begin(), all.end());
  for (std::uint64_t s = 0; s < 20; ++s) {
    for (std::size_t m : {5u, 30u, 45u}) {
      const auto drawn = rows(sample_context(ContextDistribution::train_inputs(src), m, s));
      for (const auto& r : drawn) CHECK(members.count(r) == 1);
      if (m <= 30) CHECK(std::set<std::vector<double>>(drawn.begin(), drawn.end()).size() == m);
    }
  }
}

TEST_CASE("uniform box draws stay inside and centre on the midpoint") {
  const auto box = ContextDistribution::uniform_box({-1.0, 2.0}, {3.0, 2.5});
  const Tensor c = sample_context(box, 100000, 11);
  std::vector<double> d0, d1;
  bool inside = true;
  for (std::size_t i = 0; i < c.rows(); ++i) {
    inside = inside && c(i, 0) >= -1.0 && c(i, 0) < 3.0 && c(i, 1) >= 2.0 && c(i, 1) < 2.5;
    d0.push_back(c(i, 0));
    d1.push_back(c(i, 1));
  }
  CHECK(inside);
  const double n = 100000.0;
  CHECK(std::abs(stats(d0).mean - 1.0) < 3.0 * (4.0 / std::sqrt(12.0)) / std::sqrt(n));
  CHECK(std::abs(stats(d1).mean - 2.25) < 3.0 * (0.5 / std::sqrt(12.0)) / std::sqrt(n));
}

TEST_CASE("context distribution validation") {
  CHECK_THROWS_AS(sample_context(ContextDistribution::uniform_box({0.0}, {0.0}), 3, 0), ConfigError);
  CHECK_THROWS_AS(sample_context(ContextDistribution::uniform_box({0.0, 0.0}, {1.0}), 3, 0), ConfigError);
  CHECK_THROWS_AS(sample_context(ContextDistribution::train_inputs(std::make_shared<Dataset>()), 3, 0), ConfigError);
  CHECK_THROWS_AS(sample_context(ContextDistribution::uniform_box({0.0}, {1.0}), 0, 0), ConfigError);
  auto src = std::make_shared<Dataset>(gen_two_moons(10, 0.1, 0));
  ContextDistribution corrupted = ContextDistribution::train_inputs(src);
  corrupted.kind = ContextKind::kTrainCorrupted;
  CHECK_THROWS_AS(sample_context(corrupted, 3, 0), ConfigError);
  corrupted.corruption = CorruptionSpec::standard(CorruptionKind::kGaussianNoise, 2);
  CHECK(sample_context(corrupted, 3, 0).shape() == Shape{3, 2});
}

TEST_CASE("minibatch layout") {
  const auto single = minibatches(50, 50, 1);
  CHECK(single.size() == 1);
  CHECK(single[0].size() == 50);
  const auto parts = minibatches(50, 16, 2);
  CHECK(parts.size() == 4);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) CHECK(parts[i].size() == 16);
  CHECK(parts.back().size() == 2);
  std::vector<std::size_t> all;
  for (const auto& b : parts) all.insert(all.end(), b.begin(), b.end());
  std::vector<std::size_t> sorted = all;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) CHECK(sorted[i] == i);
  CHECK(minibatches(50, 16, 2) == parts);
  CHECK_FALSE(minibatches(50, 16, 3) == parts);
}

TEST_CASE("label noise and subsampling") {
  const Dataset d = gen_two_moons(1000, 0.1, 0);
  const Dataset flipped = flip_labels(d, 0.2, 3);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < d.size(); ++i) changed += flipped.labels[i] != d.labels[i];
  CHECK(std::abs(static_cast<double>(changed) / 1000.0 - 0.2) < 3.0 * std::sqrt(0.2 * 0.8 / 1000.0));
  CHECK(flip_labels(d, 0.0, 3).labels == d.labels);
  const Dataset half = subsample(d, 0.5, 4);
  CHECK(half.size() == 500);
  CHECK(subsample(d, 1e-6, 4).size() == 1);
  CHECK_THROWS_AS(subsample(d, 0.0, 4), ConfigError);
}

TEST_CASE("seed derivation separates streams") {
  CHECK(derive_seed(1, Stream::kInit) == derive_seed(1, Stream::kInit));
  CHECK(derive_seed(1, Stream::kInit) != derive_seed(1, Stream::kMinibatch));
  CHECK(derive_seed(1, Stream::kInit, 0) != derive_seed(1, Stream::kInit, 1));
  CHECK(derive_seed(1, Stream::kInit) != derive_seed(2, Stream::kInit));
}
