#include "drarmor/kernels.hpp"

namespace drarmor::kernels::serial {

void dense_forward(const DenseDims& d, std::span<const double> in, std::span<const double> weight,
                   std::span<const double> bias, std::span<double> out) {
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t o = 0; o < d.out; ++o) {
      double acc = bias.empty() ? 0.0 : bias[o];
      for (std::size_t i = 0; i < d.in; ++i) acc += in[n * d.in + i] * weight[o * d.in + i];
      out[n * d.out + o] = acc;
    }
  }
}

void dense_backward_input(const DenseDims& d, std::span<const double> grad_out,
                          std::span<const double> weight, std::span<double> grad_in) {
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t i = 0; i < d.in; ++i) {
      double acc = 0.0;
      for (std::size_t o = 0; o < d.out; ++o) acc += grad_out[n * d.out + o] * weight[o * d.in + i];
      grad_in[n * d.in + i] = acc;
    }
  }
}

void dense_backward_params(const DenseDims& d, std::span<const double> grad_out,
                           std::span<const double> in, std::span<double> grad_weight,
                           std::span<double> grad_bias) {
  for (std::size_t o = 0; o < d.out; ++o) {
    for (std::size_t i = 0; i < d.in; ++i) {
      double acc = 0.0;
      for (std::size_t n = 0; n < d.batch; ++n) acc += grad_out[n * d.out + o] * in[n * d.in + i];
      grad_weight[o * d.in + i] = acc;
    }
    if (!grad_bias.empty()) {
      double acc = 0.0;
      for (std::size_t n = 0; n < d.batch; ++n) acc += grad_out[n * d.out + o];
      grad_bias[o] = acc;
    }
  }
}

void conv2d_forward(const ConvDims& d, std::span<const double> in, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> out) {
  const std::size_t oh = d.out_h(), ow = d.out_w(), k = d.kernel;
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t o = 0; o < d.out_ch; ++o) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (std::size_t c = 0; c < d.in_ch; ++c) {
            for (std::size_t ky = 0; ky < k; ++ky) {
              const long iy = static_cast<long>(y * d.stride + ky) - static_cast<long>(d.pad);
              if (iy < 0 || iy >= static_cast<long>(d.in_h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long ix = static_cast<long>(x * d.stride + kx) - static_cast<long>(d.pad);
                if (ix < 0 || ix >= static_cast<long>(d.in_w)) continue;
                acc += in[((n * d.in_ch + c) * d.in_h + iy) * d.in_w + ix] *
                       weight[((o * d.in_ch + c) * k + ky) * k + kx];
              }
            }
          }
          out[((n * d.out_ch + o) * oh + y) * ow + x] = acc;
        }
      }
    }
  }
}

void conv2d_backward_input(const ConvDims& d, std::span<const double> grad_out,
                           std::span<const double> weight, std::span<double> grad_in) {
  const std::size_t oh = d.out_h(), ow = d.out_w(), k = d.kernel;
  for (std::size_t n = 0; n < d.batch; ++n) {
    for (std::size_t c = 0; c < d.in_ch; ++c) {
      for (std::size_t iy = 0; iy < d.in_h; ++iy) {
        for (std::size_t ix = 0; ix < d.in_w; ++ix) {
          double acc = 0.0;
          for (std::size_t o = 0; o < d.out_ch; ++o) {
            for (std::size_t ky = 0; ky < k; ++ky) {
              const long ty = static_cast<long>(iy + d.pad) - static_cast<long>(ky);
              if (ty < 0 || ty % static_cast<long>(d.stride) != 0) continue;
              const std::size_t y = static_cast<std::size_t>(ty) / d.stride;
              if (y >= oh) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long tx = static_cast<long>(ix + d.pad) - static_cast<long>(kx);
                if (tx < 0 || tx % static_cast<long>(d.stride) != 0) continue;
                const std::size_t x = static_cast<std::size_t>(tx) / d.stride;
                if (x >= ow) continue;
                acc += grad_out[((n * d.out_ch + o) * oh + y) * ow + x] *
                       weight[((o * d.in_ch + c) * k + ky) * k + kx];
              }
            }
          }
          grad_in[((n * d.in_ch + c) * d.in_h + iy) * d.in_w + ix] = acc;
        }
      }
    }
  }
}

void conv2d_backward_params(const ConvDims& d, std::span<const double> grad_out,
                            std::span<const double> in, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
  const std::size_t oh = d.out_h(), ow = d.out_w(), k = d.kernel;
  for (std::size_t o = 0; o < d.out_ch; ++o) {
    for (std::size_t c = 0; c < d.in_ch; ++c) {
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          double acc = 0.0;
          for (std::size_t n = 0; n < d.batch; ++n) {
            for (std::size_t y = 0; y < oh; ++y) {
              const long iy = static_cast<long>(y * d.stride + ky) - static_cast<long>(d.pad);
              if (iy < 0 || iy >= static_cast<long>(d.in_h)) continue;
              for (std::size_t x = 0; x < ow; ++x) {
                const long ix = static_cast<long>(x * d.stride + kx) - static_cast<long>(d.pad);
                if (ix < 0 || ix >= static_cast<long>(d.in_w)) continue;
                acc += grad_out[((n * d.out_ch + o) * oh + y) * ow + x] *
                       in[((n * d.in_ch + c) * d.in_h + iy) * d.in_w + ix];
              }
            }
          }
          grad_weight[((o * d.in_ch + c) * k + ky) * k + kx] = acc;
        }
      }
    }
    if (!grad_bias.empty()) {
      double acc = 0.0;
      for (std::size_t n = 0; n < d.batch; ++n) {
        for (std::size_t p = 0; p < oh * ow; ++p) acc += grad_out[(n * d.out_ch + o) * oh * ow + p];
      }
      grad_bias[o] = acc;
    }
  }
}

}  // namespace drarmor::kernels::serial
