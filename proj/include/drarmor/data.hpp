#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "drarmor/tensor.hpp"

namespace drarmor {

struct Split {
  Tensor images;  // (n, C, H, W), values in [0, 1]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

struct DatasetBundle {
  Split train;
  Split test;
  Split validation;
  std::size_t classes = 0;
  Shape sample_shape;
  double pixel_min = 0.0;  // raw range mapped onto [0, 1]
  double pixel_max = 1.0;
};

enum class SynthKind { blobs, stripes };

// Deterministic separable data. `side` is the image edge; samples are
// (1, side, side). Stripes are oriented bar patterns with a random phase;
// blobs are class means plus isotropic Gaussian noise of std `noise`.
Split synth_split(SynthKind kind, std::size_t n, std::size_t side, std::size_t classes, std::uint64_t seed,
                  double noise = 0.08);

// Shuffles (seeded) and cuts into train/test/validation by `fractions`.
DatasetBundle split_dataset(const Split& all, std::size_t classes, std::uint64_t seed,
                            const std::vector<double>& fractions = {0.6, 0.3, 0.1});

DatasetBundle synth_dataset(SynthKind kind, std::size_t n, std::size_t side, std::size_t classes,
                            std::uint64_t seed);

// IDX images (magic 0x00000803) and labels (0x00000801). Pixels are scaled
// by 1/255. Throws IngestionError with the failing byte offset.
Split parse_idx(const std::string& image_bytes, const std::string& label_bytes);
Split load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

// Writes 8-bit IDX files; pixel values are rounded from [0, 1].
std::string encode_idx_images(const Tensor& images);
std::string encode_idx_labels(const std::vector<int>& labels);

std::uint64_t dataset_hash(const Split& split);

Split subset(const Split& split, std::size_t begin, std::size_t count);

}  // namespace drarmor
