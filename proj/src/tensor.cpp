#include "drarmor/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "drarmor/errors.hpp"

namespace drarmor {

std::size_t numel(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ')';
  return out.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != numel(shape_)) {
    throw InputError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + to_string(shape_));
  }
}

std::size_t Tensor::row_size() const { return shape_.empty() ? 0 : data_.size() / shape_[0]; }

std::span<double> Tensor::row(std::size_t index) {
  const std::size_t n = row_size();
  return std::span<double>(data_).subspan(index * n, n);
}

std::span<const double> Tensor::row(std::size_t index) const {
  const std::size_t n = row_size();
  return std::span<const double>(data_).subspan(index * n, n);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) {
    throw InputError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Tensor::l2_norm() const {
  double sum = 0.0;
  for (double v : data_) sum += v * v;
  return std::sqrt(sum);
}

Tensor stack(std::span<const Tensor> samples) {
  if (samples.empty()) throw InputError("cannot stack an empty sample list");
  Shape shape{samples.size()};
  const Shape& sample_shape = samples.front().shape();
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  std::vector<double> values;
  values.reserve(numel(shape));
  for (const Tensor& s : samples) {
    if (s.shape() != sample_shape) throw InputError("stack: samples differ in shape");
    values.insert(values.end(), s.values().begin(), s.values().end());
  }
  return Tensor(std::move(shape), std::move(values));
}

Tensor gather_rows(const Tensor& batch, std::span<const std::size_t> indices) {
  Shape shape = batch.shape();
  shape[0] = indices.size();
  Tensor out(shape);
  const std::size_t n = batch.row_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= batch.dim(0)) throw InputError("gather_rows: index out of range");
    auto src = batch.row(indices[i]);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return out;
}

std::uint64_t content_hash(const Tensor& tensor, std::uint64_t seed) {
  std::uint64_t h = seed;
  auto mix = [&h](const void* bytes, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (std::size_t d : tensor.shape()) {
    const std::uint64_t d64 = d;
    mix(&d64, sizeof d64);
  }
  mix(tensor.values().data(), tensor.size() * sizeof(double));
  return h;
}

double mean_squared_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw InputError("mse: size mismatch or empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sum += d * d;
  }
  return sum / static_cast<double>(a.size());
}

}  // namespace drarmor
