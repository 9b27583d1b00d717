#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace drarmor {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array of doubles with an explicit shape.
///
/// A default-constructed tensor is "absent": rank 0 and no data. Any tensor
/// built from a shape holds exactly numel(shape) elements.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Row `index` along axis 0, i.e. one sample of a batch.
  std::span<double> row(std::size_t index);
  std::span<const double> row(std::size_t index) const;
  std::size_t row_size() const;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const;
  double l2_norm() const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Stacks equally shaped samples into a batch with a leading dimension.
Tensor stack(std::span<const Tensor> samples);

// Copies the rows listed in `indices` out of a batch tensor.
Tensor gather_rows(const Tensor& batch, std::span<const std::size_t> indices);

// FNV-1a over the raw bytes of shape and data. Used for determinism checks.
std::uint64_t content_hash(const Tensor& tensor, std::uint64_t seed = 1469598103934665603ULL);

double mean_squared_error(std::span<const double> a, std::span<const double> b);

}  // namespace drarmor
