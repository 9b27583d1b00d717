// Times the serial and OpenMP kernels on the same inputs and checks that
// they agree bit for bit.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <vector>

#include "drarmor/kernels.hpp"
#include "drarmor/rng.hpp"

using namespace drarmor;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

bool same(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

void report(const char* name, double serial_ms, double parallel_ms, bool identical) {
  std::printf("%-24s serial %8.3f ms  parallel %8.3f ms  speedup %5.2fx  %s\n", name, serial_ms, parallel_ms,
              serial_ms / parallel_ms, identical ? "identical" : "MISMATCH");
}

}  // namespace

int main() {
  Rng rng(42);
  int failures = 0;
  std::printf("threads: %d\n", kernels::worker_threads());

  {
    const kernels::DenseDims d{256, 512, 256};
    const auto in = random_vec(d.batch * d.in, rng), w = random_vec(d.out * d.in, rng), b = random_vec(d.out, rng);
    std::vector<double> s(d.batch * d.out), p(d.batch * d.out);
    const double ts = time_ms([&] { kernels::serial::dense_forward(d, in, w, b, s); }, 5);
    const double tp = time_ms([&] { kernels::parallel::dense_forward(d, in, w, b, p); }, 5);
    report("dense_forward", ts, tp, same(s, p));
    failures += !same(s, p);

    const auto go = random_vec(d.batch * d.out, rng);
    std::vector<double> gs(d.batch * d.in), gp(d.batch * d.in);
    const double bs = time_ms([&] { kernels::serial::dense_backward_input(d, go, w, gs); }, 5);
    const double bp = time_ms([&] { kernels::parallel::dense_backward_input(d, go, w, gp); }, 5);
    report("dense_backward_input", bs, bp, same(gs, gp));
    failures += !same(gs, gp);

    std::vector<double> ws(w.size()), wp(w.size()), bbs(d.out), bbp(d.out);
    const double ps = time_ms([&] { kernels::serial::dense_backward_params(d, go, in, ws, bbs); }, 5);
    const double pp = time_ms([&] { kernels::parallel::dense_backward_params(d, go, in, wp, bbp); }, 5);
    report("dense_backward_params", ps, pp, same(ws, wp) && same(bbs, bbp));
    failures += !(same(ws, wp) && same(bbs, bbp));
  }

  {
    const kernels::ConvDims d{64, 4, 28, 28, 8, 3, 1, 1};
    const std::size_t out_n = d.batch * d.out_ch * d.out_h() * d.out_w();
    const auto in = random_vec(d.batch * d.in_ch * d.in_h * d.in_w, rng);
    const auto w = random_vec(d.out_ch * d.in_ch * d.kernel * d.kernel, rng), b = random_vec(d.out_ch, rng);
    std::vector<double> s(out_n), p(out_n);
    const double ts = time_ms([&] { kernels::serial::conv2d_forward(d, in, w, b, s); }, 3);
    const double tp = time_ms([&] { kernels::parallel::conv2d_forward(d, in, w, b, p); }, 3);
    report("conv2d_forward", ts, tp, same(s, p));
    failures += !same(s, p);

    const auto go = random_vec(out_n, rng);
    std::vector<double> gs(in.size()), gp(in.size());
    const double bs = time_ms([&] { kernels::serial::conv2d_backward_input(d, go, w, gs); }, 3);
    const double bp = time_ms([&] { kernels::parallel::conv2d_backward_input(d, go, w, gp); }, 3);
    report("conv2d_backward_input", bs, bp, same(gs, gp));
    failures += !same(gs, gp);

    std::vector<double> ws(w.size()), wp(w.size()), bbs(d.out_ch), bbp(d.out_ch);
    const double ps = time_ms([&] { kernels::serial::conv2d_backward_params(d, go, in, ws, bbs); }, 3);
    const double pp = time_ms([&] { kernels::parallel::conv2d_backward_params(d, go, in, wp, bbp); }, 3);
    report("conv2d_backward_params", ps, pp, same(ws, wp) && same(bbs, bbp));
    failures += !(same(ws, wp) && same(bbs, bbp));
  }
  return failures == 0 ? 0 : 1;
}
