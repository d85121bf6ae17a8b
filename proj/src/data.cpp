#include "fseb/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "fseb/rng.hpp"

namespace fseb {

void Dataset::validate() const {
  if (inputs.rank() != 2) throw DataError("dataset '" + name + "': inputs must be N x D");
  if (inputs.shape()[0] != labels.size()) {
    throw DataError("dataset '" + name + "': " + std::to_string(inputs.shape()[0]) + " inputs but " +
                    std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw DataError("dataset '" + name + "': label " + std::to_string(labels[i]) + " at row " +
                      std::to_string(i) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Batch b = gather(*this, indices);
  Dataset out;
  out.inputs = std::move(b.inputs);
  out.labels = std::move(b.labels);
  out.num_classes = num_classes;
  out.name = name;
  out.split = split;
  return out;
}

Batch gather(const Dataset& data, const std::vector<std::size_t>& indices) {
  const std::size_t d = data.dim();
  Batch b;
  b.inputs = Tensor({indices.size(), d});
  b.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t src = indices[r];
    if (src >= data.size()) throw std::out_of_range("gather: index " + std::to_string(src) + " out of range");
    for (std::size_t j = 0; j < d; ++j) b.inputs(r, j) = data.inputs(src, j);
    b.labels.push_back(data.labels[src]);
  }
  return b;
}

Batch full_batch(const Dataset& data) { return Batch{data.inputs, data.labels}; }

namespace {

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  return idx;
}

}  // namespace

Dataset gen_two_moons(std::size_t n, double noise_sd, std::uint64_t seed) {
  if (n < 2 || n % 2 != 0) throw ConfigError("two moons: n must be even and >= 2, got " + std::to_string(n));
  if (!(noise_sd >= 0.0)) throw ConfigError("two moons: noise_sd must be >= 0");
  const std::size_t half = n / 2;
  Rng rng(seed);
  Tensor x({n, 2});
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < half; ++i) {
    const double t = half == 1 ? 0.0 : std::numbers::pi * static_cast<double>(i) / static_cast<double>(half - 1);
    x(i, 0) = std::cos(t);
    x(i, 1) = std::sin(t);
    y[i] = 0;
    x(half + i, 0) = 1.0 - std::cos(t);
    x(half + i, 1) = 0.5 - std::sin(t);
    y[half + i] = 1;
  }
  if (noise_sd > 0.0) {
    for (auto& v : x.data()) v += noise_sd * rng.normal();
  }
  Dataset ordered{x, y, 2, "two-moons", Split::kTrain};
  return ordered.subset(permutation(n, rng));
}

Dataset gen_gaussian_blobs(std::size_t n, const std::vector<std::vector<double>>& centers, double sd,
                           std::uint64_t seed) {
  if (centers.empty()) throw ConfigError("blobs: at least one center required");
  if (!(sd >= 0.0)) throw ConfigError("blobs: sd must be >= 0");
  const std::size_t d = centers.front().size();
  for (const auto& c : centers) {
    if (c.size() != d || d == 0) throw ConfigError("blobs: centers must share a nonzero dimension");
  }
  Rng rng(seed);
  Tensor x({n, d});
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % centers.size();
    y[i] = k;
    for (std::size_t j = 0; j < d; ++j) x(i, j) = centers[k][j] + (sd > 0.0 ? sd * rng.normal() : 0.0);
  }
  Dataset ordered{x, y, centers.size(), "blobs", Split::kTrain};
  return ordered.subset(permutation(n, rng));
}

Dataset flip_labels(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("flip_labels: fraction must be in [0, 1]");
  Dataset out = data;
  if (data.num_classes < 2) return out;
  Rng rng(seed);
  for (auto& y : out.labels) {
    if (rng.uniform() < fraction) {
      const std::size_t shift = 1 + rng.index(data.num_classes - 1);
      y = (y + shift) % data.num_classes;
    }
  }
  return out;
}

Dataset subsample(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("subsample: fraction must be in (0, 1]");
  if (fraction == 1.0) return data;
  const auto keep = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(data.size()))));
  Rng rng(seed);
  auto idx = permutation(data.size(), rng);
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return data.subset(idx);
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

Dataset load_csv(const std::filesystem::path& path, std::size_t num_classes) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || trim(line).empty()) throw DataError(path.string() + ": empty file, missing header");
  const auto header = split_csv(trim(line));
  if (header.size() < 2 || trim(header.back()) != "label") {
    throw DataError(path.string() + ":1: header must be x0,...,x{D-1},label");
  }
  const std::size_t d = header.size() - 1;
  for (std::size_t j = 0; j < d; ++j) {
    if (trim(header[j]) != "x" + std::to_string(j)) {
      throw DataError(path.string() + ":1: header column " + std::to_string(j) + " should be x" + std::to_string(j));
    }
  }
  std::vector<double> values;
  std::vector<std::size_t> labels;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != d + 1) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(d + 1) +
                      " fields, found " + std::to_string(cells.size()));
    }
    for (std::size_t j = 0; j <= d; ++j) {
      const std::string cell = trim(cells[j]);
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty()) {
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": field " + std::to_string(j) +
                        " is not a number: '" + cell + "'");
      }
      if (j < d) {
        values.push_back(v);
      } else {
        if (v < 0.0 || v != std::floor(v) || (num_classes && v >= static_cast<double>(num_classes))) {
          throw DataError(path.string() + ":" + std::to_string(line_no) + ": label out of range: '" + cell + "'");
        }
        labels.push_back(static_cast<std::size_t>(v));
      }
    }
  }
  if (labels.empty()) throw DataError(path.string() + ": no data rows");
  Dataset out;
  out.inputs = Tensor({labels.size(), d}, std::move(values));
  out.labels = std::move(labels);
  out.num_classes = num_classes ? num_classes : *std::max_element(out.labels.begin(), out.labels.end()) + 1;
  out.name = path.stem().string();
  return out;
}

std::uint32_t read_be32(std::istream& is, const std::filesystem::path& path, std::size_t offset) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (is.gcount() != 4) throw DataError(path.string() + ": truncated header at byte offset " + std::to_string(offset));
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

std::vector<unsigned char> read_payload(std::istream& is, std::size_t n, const std::filesystem::path& path,
                                        std::size_t offset) {
  std::vector<unsigned char> buf(n);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw DataError(path.string() + ": payload truncated, expected " + std::to_string(n) + " bytes from offset " +
                    std::to_string(offset) + ", got " + std::to_string(is.gcount()));
  }
  return buf;
}

Dataset load_idx_pair(const std::filesystem::path& images, const std::filesystem::path& labels_path,
                      std::size_t num_classes) {
  std::ifstream ii(images, std::ios::binary);
  if (!ii) throw DataError("cannot open " + images.string());
  const auto magic = read_be32(ii, images, 0);
  if (magic != 0x00000803) {
    std::ostringstream os;
    os << images.string() << ": bad image magic 0x" << std::hex << magic << " at offset 0 (expected 0x00000803)";
    throw DataError(os.str());
  }
  const std::size_t n = read_be32(ii, images, 4);
  const std::size_t rows = read_be32(ii, images, 8);
  const std::size_t cols = read_be32(ii, images, 12);
  const std::size_t d = rows * cols;
  const auto pixels = read_payload(ii, n * d, images, 16);

  std::ifstream il(labels_path, std::ios::binary);
  if (!il) throw DataError("cannot open " + labels_path.string());
  const auto lmagic = read_be32(il, labels_path, 0);
  if (lmagic != 0x00000801) {
    std::ostringstream os;
    os << labels_path.string() << ": bad label magic 0x" << std::hex << lmagic << " at offset 0 (expected 0x00000801)";
    throw DataError(os.str());
  }
  const std::size_t nl = read_be32(il, labels_path, 4);
  if (nl != n) {
    throw DataError(labels_path.string() + ": " + std::to_string(nl) + " labels for " + std::to_string(n) + " images");
  }
  const auto raw_labels = read_payload(il, n, labels_path, 8);

  Dataset out;
  out.inputs = Tensor({n, d});
  for (std::size_t i = 0; i < n * d; ++i) out.inputs[i] = static_cast<double>(pixels[i]) / 255.0;
  out.labels.assign(raw_labels.begin(), raw_labels.end());
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (num_classes && out.labels[i] >= num_classes) {
      throw DataError(labels_path.string() + ": label " + std::to_string(out.labels[i]) + " at byte offset " +
                      std::to_string(8 + i) + " out of range");
    }
    max_label = std::max(max_label, out.labels[i]);
  }
  out.num_classes = num_classes ? num_classes : max_label + 1;
  out.name = images.stem().string();
  return out;
}

}  // namespace

Dataset load_tabular(const std::filesystem::path& path, TabularFormat format, const std::filesystem::path& labels_path,
                     std::size_t num_classes) {
  Dataset d = format == TabularFormat::kCsvLabeled ? load_csv(path, num_classes)
                                                   : load_idx_pair(path, labels_path, num_classes);
  d.validate();
  return d;
}

void save_csv(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  const std::size_t d = data.dim();
  for (std::size_t j = 0; j < d; ++j) os << 'x' << j << ',';
  os << "label\n";
  char buf[32];
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, data.inputs(i, j));
      os.write(buf, ptr - buf);
      os << ',';
    }
    os << data.labels[i] << '\n';
  }
}

const char* to_string(CorruptionKind k) {
  return k == CorruptionKind::kGaussianNoise ? "gaussian-noise" : "random-erasure";
}

CorruptionKind parse_corruption_kind(const std::string& s) {
  if (s == "gaussian-noise") return CorruptionKind::kGaussianNoise;
  if (s == "random-erasure") return CorruptionKind::kRandomErasure;
  throw ConfigError("unknown corruption kind '" + s + "'");
}

CorruptionSpec CorruptionSpec::standard(CorruptionKind kind, int level) {
  CorruptionSpec spec;
  spec.kind = kind;
  spec.level = level;
  if (kind == CorruptionKind::kGaussianNoise) {
    spec.magnitudes = {0.1, 0.2, 0.35, 0.5, 0.75};
  } else {
    spec.magnitudes = {0.1, 0.2, 0.3, 0.45, 0.6};
  }
  spec.validate();
  return spec;
}

void CorruptionSpec::validate() const {
  if (level < 1 || level > 5) throw ConfigError("corruption: level must be in 1..5, got " + std::to_string(level));
  for (std::size_t i = 0; i < magnitudes.size(); ++i) {
    if (!(magnitudes[i] >= 0.0)) throw ConfigError("corruption: magnitudes must be >= 0");
    if (i && !(magnitudes[i] > magnitudes[i - 1])) throw ConfigError("corruption: magnitudes must increase with level");
  }
  if (kind == CorruptionKind::kRandomErasure && magnitudes.back() > 1.0) {
    throw ConfigError("corruption: erasure fractions must be <= 1");
  }
}

Tensor corrupt(const Tensor& x, const CorruptionSpec& spec, std::uint64_t seed) {
  spec.validate();
  const double m = spec.magnitude();
  Tensor out = x;
  if (m == 0.0) return out;
  Rng rng(seed);
  if (spec.kind == CorruptionKind::kGaussianNoise) {
    for (auto& v : out.data()) v += m * rng.normal();
  } else {
    for (auto& v : out.data()) {
      if (rng.uniform() < m) v = 0.0;
    }
  }
  return out;
}

const char* to_string(ContextKind k) {
  switch (k) {
    case ContextKind::kTrainInputs: return "train-inputs";
    case ContextKind::kTrainCorrupted: return "train-corrupted";
    case ContextKind::kExternalDataset: return "external-dataset";
    case ContextKind::kUniformBox: return "uniform-box";
  }
  return "unknown";
}

ContextKind parse_context_kind(const std::string& s) {
  if (s == "train-inputs") return ContextKind::kTrainInputs;
  if (s == "train-corrupted") return ContextKind::kTrainCorrupted;
  if (s == "external-dataset") return ContextKind::kExternalDataset;
  if (s == "uniform-box") return ContextKind::kUniformBox;
  throw ConfigError("unknown context kind '" + s + "'");
}

void ContextDistribution::validate() const {
  if (kind == ContextKind::kUniformBox) {
    if (low.empty() || low.size() != high.size()) throw ConfigError("uniform-box: low/high must be non-empty and equal length");
    for (std::size_t j = 0; j < low.size(); ++j) {
      if (!std::isfinite(low[j]) || !std::isfinite(high[j]) || !(low[j] < high[j])) {
        throw ConfigError("uniform-box: need finite low < high in dimension " + std::to_string(j));
      }
    }
  } else {
    if (!source || source->size() == 0) {
      throw ConfigError(std::string("context distribution '") + to_string(kind) + "' has an empty source");
    }
  }
  if (kind == ContextKind::kTrainCorrupted && !corruption) {
    throw ConfigError("train-corrupted context requires a corruption spec");
  }
  if (corruption) corruption->validate();
}

std::size_t ContextDistribution::dim() const {
  return kind == ContextKind::kUniformBox ? low.size() : source->dim();
}

ContextDistribution ContextDistribution::train_inputs(std::shared_ptr<const Dataset> source) {
  ContextDistribution d;
  d.kind = ContextKind::kTrainInputs;
  d.source = std::move(source);
  return d;
}

ContextDistribution ContextDistribution::uniform_box(std::vector<double> low, std::vector<double> high) {
  ContextDistribution d;
  d.kind = ContextKind::kUniformBox;
  d.low = std::move(low);
  d.high = std::move(high);
  return d;
}

Tensor sample_context(const ContextDistribution& dist, std::size_t m, std::uint64_t seed) {
  if (m == 0) throw ConfigError("sample_context: m must be >= 1");
  dist.validate();
  Rng rng(seed);
  Tensor out;
  if (dist.kind == ContextKind::kUniformBox) {
    const std::size_t d = dist.low.size();
    out = Tensor({m, d});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) out(i, j) = rng.uniform(dist.low[j], dist.high[j]);
  } else {
    const Dataset& src = *dist.source;
    const std::size_t n = src.size();
    std::vector<std::size_t> idx;
    if (m <= n) {
      // Partial Fisher-Yates: the first m slots are a uniform draw without replacement.
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      for (std::size_t i = 0; i < m; ++i) std::swap(perm[i], perm[i + rng.index(n - i)]);
      idx.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m));
    } else {
      idx.resize(m);
      for (auto& k : idx) k = rng.index(n);
    }
    out = gather(src, idx).inputs;
  }
  if (dist.corruption) out = corrupt(out, *dist.corruption, derive_seed(seed, Stream::kCorruption));
  return out;
}

std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw ConfigError("minibatches: batch_size must be >= 1");
  Rng rng(seed);
  const auto perm = permutation(n, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start), perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

}  // namespace fseb
