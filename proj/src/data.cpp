#include "drarmor/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "drarmor/errors.hpp"
#include "drarmor/rng.hpp"
#include "drarmor/serialize.hpp"

namespace drarmor {

namespace {

std::uint32_t read_be32(const std::string& bytes, std::size_t at) {
  if (at + 4 > bytes.size()) throw IngestionError("truncated IDX header", at);
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[at + i]);
  return v;
}

void put_be32(std::string& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

Split synth_split(SynthKind kind, std::size_t n, std::size_t side, std::size_t classes, std::uint64_t seed,
                  double noise) {
  if (classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (n < classes) throw ConfigError("synthetic data needs n >= classes");
  if (side < 2) throw ConfigError("synthetic image side must be >= 2");
  const std::size_t pixels = side * side;
  Split out{Tensor(Shape{n, 1, side, side}), std::vector<int>(n)};

  std::vector<std::vector<double>> means;
  if (kind == SynthKind::blobs) {
    Rng rng(derive_seed(seed, 0xB10B));
    for (std::size_t c = 0; c < classes; ++c) {
      std::vector<double> mu(pixels);
      for (double& m : mu) m = rng.uniform(0.2, 0.8);
      means.push_back(std::move(mu));
    }
  }
  for (std::size_t s = 0; s < n; ++s) {
    Rng rng(derive_seed(seed, s, 0x5A));
    const std::size_t c = s % classes;
    out.labels[s] = static_cast<int>(c);
    auto row = out.images.row(s);
    if (kind == SynthKind::blobs) {
      for (std::size_t p = 0; p < pixels; ++p) row[p] = std::clamp(means[c][p] + rng.normal(0.0, noise), 0.0, 1.0);
      continue;
    }
    const double theta = std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
    const double cycles = 2.0 + static_cast<double>(c % 2);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        const double u = (static_cast<double>(x) * ct + static_cast<double>(y) * st) / static_cast<double>(side);
        const double v = 0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * cycles * u + phase);
        row[y * side + x] = std::clamp(v + rng.normal(0.0, noise), 0.0, 1.0);
      }
  }
  // Interleaved labels would make every shard perfectly balanced; shuffle.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle(derive_seed(seed, 0x5B0F));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);
  Split shuffled{gather_rows(out.images, order), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) shuffled.labels[i] = out.labels[order[i]];
  return shuffled;
}

Split subset(const Split& split, std::size_t begin, std::size_t count) {
  if (begin + count > split.size()) throw InputError("subset beyond the end of the split");
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), begin);
  return {gather_rows(split.images, idx),
          std::vector<int>(split.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                           split.labels.begin() + static_cast<std::ptrdiff_t>(begin + count))};
}

DatasetBundle split_dataset(const Split& all, std::size_t classes, std::uint64_t seed,
                            const std::vector<double>& fractions) {
  if (fractions.size() != 3) throw ConfigError("split needs three fractions");
  const double sum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(sum - 1.0) > 1e-9 || *std::min_element(fractions.begin(), fractions.end()) < 0.0) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  for (int y : all.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw InputError("label outside the class range");
  const std::size_t n = all.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x5711));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  const auto n_train = static_cast<std::size_t>(std::floor(fractions[0] * static_cast<double>(n)));
  const auto n_test = static_cast<std::size_t>(std::floor(fractions[1] * static_cast<double>(n)));
  auto take = [&](std::size_t begin, std::size_t end) {
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
    Split s{gather_rows(all.images, idx), {}};
    for (std::size_t i : idx) s.labels.push_back(all.labels[i]);
    return s;
  };
  DatasetBundle b;
  b.train = take(0, n_train);
  b.test = take(n_train, n_train + n_test);
  b.validation = take(n_train + n_test, n);
  b.classes = classes;
  b.sample_shape = Shape(all.images.shape().begin() + 1, all.images.shape().end());
  return b;
}

DatasetBundle synth_dataset(SynthKind kind, std::size_t n, std::size_t side, std::size_t classes,
                            std::uint64_t seed) {
  return split_dataset(synth_split(kind, n, side, classes, seed), classes, seed);
}

Split parse_idx(const std::string& image_bytes, const std::string& label_bytes) {
  if (read_be32(image_bytes, 0) != 0x00000803) throw IngestionError("bad IDX image magic", 0);
  if (read_be32(label_bytes, 0) != 0x00000801) throw IngestionError("bad IDX label magic", 0);
  const std::size_t n = read_be32(image_bytes, 4), rows = read_be32(image_bytes, 8), cols = read_be32(image_bytes, 12);
  const std::size_t n_labels = read_be32(label_bytes, 4);
  if (n_labels != n) throw IngestionError("label file holds " + std::to_string(n_labels) + " labels for " +
                                              std::to_string(n) + " images", 4);
  const std::size_t pixels = rows * cols;
  if (image_bytes.size() != 16 + n * pixels) {
    throw IngestionError("image payload should hold " + std::to_string(n * pixels) + " bytes",
                         std::min(image_bytes.size(), 16 + n * pixels));
  }
  if (label_bytes.size() != 8 + n) {
    throw IngestionError("label payload should hold " + std::to_string(n) + " bytes", std::min(label_bytes.size(), 8 + n));
  }
  Split out{Tensor(Shape{n, 1, rows, cols}), std::vector<int>(n)};
  for (std::size_t i = 0; i < n * pixels; ++i) out.images[i] = static_cast<unsigned char>(image_bytes[16 + i]) / 255.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<unsigned char>(label_bytes[8 + i]);
    if (y > 9) throw IngestionError("label " + std::to_string(y) + " outside 0..9", 8 + i);
    out.labels[i] = y;
  }
  return out;
}

Split load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  return parse_idx(read_file(images), read_file(labels));
}

std::string encode_idx_images(const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != 1) throw InputError("IDX images must be (n, 1, H, W)");
  std::string out;
  put_be32(out, 0x00000803);
  put_be32(out, static_cast<std::uint32_t>(images.dim(0)));
  put_be32(out, static_cast<std::uint32_t>(images.dim(2)));
  put_be32(out, static_cast<std::uint32_t>(images.dim(3)));
  for (double v : images.values()) out.push_back(static_cast<char>(to_byte(v)));
  return out;
}

std::string encode_idx_labels(const std::vector<int>& labels) {
  std::string out;
  put_be32(out, 0x00000801);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int y : labels) out.push_back(static_cast<char>(static_cast<std::uint8_t>(y)));
  return out;
}

std::uint64_t dataset_hash(const Split& split) {
  std::uint64_t h = content_hash(split.images);
  for (int y : split.labels) h = mix64(h ^ static_cast<std::uint64_t>(y));
  return h;
}

}  // namespace drarmor
