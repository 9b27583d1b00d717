#include <algorithm>
#include <cstdlib>
#include <string>

#include "drarmor/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace drarmor::kernels {

int worker_threads() {
  if (const char* env = std::getenv("DRARMOR_THREADS")) {
    const int requested = std::atoi(env);
    if (requested > 0) return requested;
  }
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace parallel {

namespace {
long as_long(std::size_t v) { return static_cast<long>(v); }

struct Span {
  std::size_t begin;
  std::size_t end;
};

// Output columns x whose tap x * stride + kx - pad lands inside [0, in_w).
Span valid_range(std::size_t ow, std::size_t kx, std::size_t stride, std::size_t pad, std::size_t in_w) {
  std::size_t begin = 0;
  if (kx < pad) begin = (pad - kx + stride - 1) / stride;
  std::size_t end = 0;
  if (in_w + pad > kx) end = std::min(ow, (in_w + pad - kx - 1) / stride + 1);
  return {std::min(begin, end), end};
}
}  // namespace

void dense_forward(const DenseDims& d, std::span<const double> in, std::span<const double> weight,
                   std::span<const double> bias, std::span<double> out) {
#pragma omp parallel for schedule(static) num_threads(worker_threads())
  for (long n = 0; n < as_long(d.batch); ++n) {
    const double* x = in.data() + n * d.in;
    double* y = out.data() + n * d.out;
    for (std::size_t o = 0; o < d.out; ++o) {
      const double* w = weight.data() + o * d.in;
      double acc = bias.empty() ? 0.0 : bias[o];
      for (std::size_t i = 0; i < d.in; ++i) acc += x[i] * w[i];
      y[o] = acc;
    }
  }
}

void dense_backward_input(const DenseDims& d, std::span<const double> grad_out,
                          std::span<const double> weight, std::span<double> grad_in) {
#pragma omp parallel for schedule(static) num_threads(worker_threads())
  for (long n = 0; n < as_long(d.batch); ++n) {
    double* gi = grad_in.data() + n * d.in;
    std::fill(gi, gi + d.in, 0.0);
    for (std::size_t o = 0; o < d.out; ++o) {
      const double g = grad_out[n * d.out + o];
      const double* w = weight.data() + o * d.in;
      for (std::size_t i = 0; i < d.in; ++i) gi[i] += g * w[i];
    }
  }
}

void dense_backward_params(const DenseDims& d, std::span<const double> grad_out,
                           std::span<const double> in, std::span<double> grad_weight,
                           std::span<double> grad_bias) {
#pragma omp parallel for schedule(static) num_threads(worker_threads())
  for (long o = 0; o < as_long(d.out); ++o) {
    double* gw = grad_weight.data() + o * d.in;
    std::fill(gw, gw + d.in, 0.0);
    double gb = 0.0;
    for (std::size_t n = 0; n < d.batch; ++n) {
      const double g = grad_out[n * d.out + o];
      const double* x = in.data() + n * d.in;
      for (std::size_t i = 0; i < d.in; ++i) gw[i] += g * x[i];
      gb += g;
    }
    if (!grad_bias.empty()) grad_bias[o] = gb;
  }
}

// Each (sample, output channel) plane is owned by one thread and accumulated
// tap by tap, which visits the terms of every output element in the same
// (channel, ky, kx) order as the reference loop.
void conv2d_forward(const ConvDims& d, std::span<const double> in, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> out) {
  const std::size_t oh = d.out_h(), ow = d.out_w(), k = d.kernel;
  const long planes = as_long(d.batch * d.out_ch);
#pragma omp parallel for schedule(static) num_threads(worker_threads())
  for (long p = 0; p < planes; ++p) {
    const std::size_t n = static_cast<std::size_t>(p) / d.out_ch;
    const std::size_t o = static_cast<std::size_t>(p) % d.out_ch;
    double* plane = out.data() + static_cast<std::size_t>(p) * oh * ow;
    std::fill(plane, plane + oh * ow, bias.empty() ? 0.0 : bias[o]);
    for (std::size_t c = 0; c < d.in_ch; ++c) {
      const double* src = in.data() + (n * d.in_ch + c) * d.in_h * d.in_w;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double w = weight[((o * d.in_ch + c) * k + ky) * k + kx];
          const Span xs = valid_range(ow, kx, d.stride, d.pad, d.in_w);
          for (std::size_t y = 0; y < oh; ++y) {
            const long iy = as_long(y * d.stride + ky) - as_long(d.pad);
            if (iy < 0 || iy >= as_long(d.in_h)) continue;
            const long base = iy * as_long(d.in_w) - as_long(d.pad) + as_long(kx);
            for (std::size_t x = xs.begin; x < xs.end; ++x) plane[y * ow + x] += src[base + as_long(x * d.stride)] * w;
          }
        }
      }
    }
  }
}

// Scatter form. For fixed (o, ky, kx) every input element receives at most one
// term, so per-element accumulation order matches the gather reference.
void conv2d_backward_input(const ConvDims& d, std::span<const double> grad_out,
                           std::span<const double> weight, std::span<double> grad_in) {
  const std::size_t oh = d.out_h(), ow = d.out_w(), k = d.kernel;
  const long planes = as_long(d.batch * d.in_ch);
#pragma omp parallel for schedule(static) num_threads(worker_threads())
  for (long p = 0; p < planes; ++p) {
    const std::size_t n = static_cast<std::size_t>(p) / d.in_ch;
    const std::size_t c = static_cast<std::size_t>(p) % d.in_ch;
    double* dst = grad_in.data() + static_cast<std::size_t>(p) * d.in_h * d.in_w;
    std::fill(dst, dst + d.in_h * d.in_w, 0.0);
    for (std::size_t o = 0; o < d.out_ch; ++o) {
      const double* g = grad_out.data() + (n * d.out_ch + o) * oh * ow;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double w = weight[((o * d.in_ch + c) * k + ky) * k + kx];
          const Span xs = valid_range(ow, kx, d.stride, d.pad, d.in_w);
          for (std::size_t y = 0; y < oh; ++y) {
            const long iy = as_long(y * d.stride + ky) - as_long(d.pad);
            if (iy < 0 || iy >= as_long(d.in_h)) continue;
            const long base = iy * as_long(d.in_w) - as_long(d.pad) + as_long(kx);
            for (std::size_t x = xs.begin; x < xs.end; ++x) dst[base + as_long(x * d.stride)] += g[y * ow + x] * w;
          }
        }
      }
    }
  }
}

void conv2d_backward_params(const ConvDims& d, std::span<const double> grad_out,
                            std::span<const double> in, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
  const std::size_t oh = d.out_h(), ow = d.out_w(), k = d.kernel;
#pragma omp parallel for schedule(static) num_threads(worker_threads())
  for (long o = 0; o < as_long(d.out_ch); ++o) {
    for (std::size_t c = 0; c < d.in_ch; ++c) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const Span xs = valid_range(ow, kx, d.stride, d.pad, d.in_w);
          double acc = 0.0;
          for (std::size_t n = 0; n < d.batch; ++n) {
            const double* g = grad_out.data() + (n * d.out_ch + o) * oh * ow;
            const double* src = in.data() + (n * d.in_ch + c) * d.in_h * d.in_w;
            for (std::size_t y = 0; y < oh; ++y) {
              const long iy = as_long(y * d.stride + ky) - as_long(d.pad);
              if (iy < 0 || iy >= as_long(d.in_h)) continue;
              const long base = iy * as_long(d.in_w) - as_long(d.pad) + as_long(kx);
              for (std::size_t x = xs.begin; x < xs.end; ++x) acc += g[y * ow + x] * src[base + as_long(x * d.stride)];
            }
          }
          grad_weight[((o * d.in_ch + c) * k + ky) * k + kx] = acc;
        }
      }
    }
    if (!grad_bias.empty()) {
      double acc = 0.0;
      for (std::size_t n = 0; n < d.batch; ++n) {
        const double* g = grad_out.data() + (n * d.out_ch + o) * oh * ow;
        for (std::size_t q = 0; q < oh * ow; ++q) acc += g[q];
      }
      grad_bias[o] = acc;
    }
  }
}

}  // namespace parallel
}  // namespace drarmor::kernels
