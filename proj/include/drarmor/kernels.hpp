#pragma once

// Dense and convolution kernels in two flavours.
//
// `serial` is the straightforward reference. `parallel` distributes work over
// OpenMP threads by output element groups (samples, channels); every output
// element is still accumulated by one thread in the same order as the
// reference, so both flavours agree bit for bit. Nothing here reduces across
// threads.

#include <cstddef>
#include <span>

namespace drarmor::kernels {

struct DenseDims {
  std::size_t batch;
  std::size_t in;
  std::size_t out;
};

struct ConvDims {
  std::size_t batch;
  std::size_t in_ch;
  std::size_t in_h;
  std::size_t in_w;
  std::size_t out_ch;
  std::size_t kernel;
  std::size_t stride;
  std::size_t pad;

  std::size_t out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
};

// An empty `bias` span means "no bias". Output buffers are overwritten.
namespace serial {
void dense_forward(const DenseDims& d, std::span<const double> in, std::span<const double> weight,
                   std::span<const double> bias, std::span<double> out);
void dense_backward_input(const DenseDims& d, std::span<const double> grad_out,
                          std::span<const double> weight, std::span<double> grad_in);
void dense_backward_params(const DenseDims& d, std::span<const double> grad_out,
                           std::span<const double> in, std::span<double> grad_weight,
                           std::span<double> grad_bias);

void conv2d_forward(const ConvDims& d, std::span<const double> in, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> out);
void conv2d_backward_input(const ConvDims& d, std::span<const double> grad_out,
                           std::span<const double> weight, std::span<double> grad_in);
void conv2d_backward_params(const ConvDims& d, std::span<const double> grad_out,
                            std::span<const double> in, std::span<double> grad_weight,
                            std::span<double> grad_bias);
}  // namespace serial

namespace parallel {
void dense_forward(const DenseDims& d, std::span<const double> in, std::span<const double> weight,
                   std::span<const double> bias, std::span<double> out);
void dense_backward_input(const DenseDims& d, std::span<const double> grad_out,
                          std::span<const double> weight, std::span<double> grad_in);
void dense_backward_params(const DenseDims& d, std::span<const double> grad_out,
                           std::span<const double> in, std::span<double> grad_weight,
                           std::span<double> grad_bias);

void conv2d_forward(const ConvDims& d, std::span<const double> in, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> out);
void conv2d_backward_input(const ConvDims& d, std::span<const double> grad_out,
                           std::span<const double> weight, std::span<double> grad_in);
void conv2d_backward_params(const ConvDims& d, std::span<const double> grad_out,
                            std::span<const double> in, std::span<double> grad_weight,
                            std::span<double> grad_bias);
}  // namespace parallel

// Worker count for parallel kernels and client fan-out. Reads DRARMOR_THREADS
// (0 or unset = OpenMP default).
int worker_threads();

}  // namespace drarmor::kernels
