#include "drarmor/image.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "drarmor/errors.hpp"
#include "drarmor/serialize.hpp"

namespace drarmor {

namespace {

struct Planes {
  std::size_t channels, height, width;
};

Planes planes_of(const Tensor& t) {
  if (t.rank() == 2) return {1, t.dim(0), t.dim(1)};
  if (t.rank() == 3) return {t.dim(0), t.dim(1), t.dim(2)};
  throw InputError("image tensors must be (H, W) or (C, H, W), got " + to_string(t.shape()));
}

double ssim_plane(const double* a, const double* b, std::size_t h, std::size_t w, double c1, double c2) {
  const std::size_t wh = std::min<std::size_t>(8, h), ww = std::min<std::size_t>(8, w);
  const double count = static_cast<double>(wh * ww);
  double total = 0.0;
  std::size_t windows = 0;
  for (std::size_t y0 = 0; y0 + wh <= h; ++y0) {
    for (std::size_t x0 = 0; x0 + ww <= w; ++x0) {
      double ma = 0.0, mb = 0.0;
      for (std::size_t y = y0; y < y0 + wh; ++y)
        for (std::size_t x = x0; x < x0 + ww; ++x) {
          ma += a[y * w + x];
          mb += b[y * w + x];
        }
      ma /= count;
      mb /= count;
      double va = 0.0, vb = 0.0, cov = 0.0;
      for (std::size_t y = y0; y < y0 + wh; ++y)
        for (std::size_t x = x0; x < x0 + ww; ++x) {
          const double da = a[y * w + x] - ma, db = b[y * w + x] - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      va /= count;
      vb /= count;
      cov /= count;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++windows;
    }
  }
  return total / static_cast<double>(windows);
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b, double dynamic_range) {
  if (a.shape() != b.shape()) throw InputError("ssim needs equally shaped images");
  const Planes p = planes_of(a);
  const double c1 = std::pow(0.01 * dynamic_range, 2), c2 = std::pow(0.03 * dynamic_range, 2);
  double sum = 0.0;
  const std::size_t plane = p.height * p.width;
  for (std::size_t c = 0; c < p.channels; ++c) {
    sum += ssim_plane(a.data().data() + c * plane, b.data().data() + c * plane, p.height, p.width, c1, c2);
  }
  return sum / static_cast<double>(p.channels);
}

std::string encode_pgm(const Tensor& image) {
  const Planes p = planes_of(image);
  const auto [lo_it, hi_it] = std::minmax_element(image.values().begin(), image.values().end());
  const double lo = *lo_it, span = *hi_it - *lo_it;
  const std::size_t width = p.width * p.channels;
  std::ostringstream out;
  out << "P5\n" << width << ' ' << p.height << "\n255\n";
  std::string pixels(width * p.height, '\0');
  for (std::size_t c = 0; c < p.channels; ++c)
    for (std::size_t y = 0; y < p.height; ++y)
      for (std::size_t x = 0; x < p.width; ++x) {
        const double v = image[(c * p.height + y) * p.width + x];
        const double unit = span > 0.0 ? (v - lo) / span : 0.0;
        pixels[y * width + c * p.width + x] = static_cast<char>(static_cast<unsigned char>(std::lround(unit * 255.0)));
      }
  return out.str() + pixels;
}

void write_pgm(const std::filesystem::path& path, const Tensor& image) { write_file(path, encode_pgm(image)); }

Tensor decode_pgm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P5" || !in || maxval != 255) throw IngestionError("not an 8-bit P5 image", 0);
  in.get();
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() != offset + width * height) throw IngestionError("P5 pixel data has the wrong length", offset);
  Tensor t(Shape{height, width});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<unsigned char>(bytes[offset + i]) / 255.0;
  return t;
}

}  // namespace drarmor
