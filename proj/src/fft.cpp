#include "turbuforge/fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <tuple>
#include <stdexcept>
#include <utility>

namespace turbuforge::fft {
namespace {

// FFTW planning is not thread-safe; execution with new-array functions is.
// Plans are created once per (rows, cols, direction) with FFTW_ESTIMATE so the
// chosen algorithm, and hence the output bits, never depend on timing.
class PlanCache {
 public:
  static PlanCache& instance() {
    static PlanCache cache;
    return cache;
  }

  fftw_plan get(int rows, int cols, int sign) {
    std::lock_guard lock(mutex_);
    const auto key = std::make_tuple(rows, cols, sign);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    std::vector<Complex> a(static_cast<std::size_t>(rows) * cols), b(a.size());
    fftw_plan p = fftw_plan_dft_2d(rows, cols, reinterpret_cast<fftw_complex*>(a.data()),
                                   reinterpret_cast<fftw_complex*>(b.data()), sign,
                                   FFTW_ESTIMATE | FFTW_UNALIGNED);
    if (p == nullptr) throw std::runtime_error("fftw: planning failed");
    plans_.emplace(key, p);
    return p;
  }

  ~PlanCache() {
    for (auto& [k, p] : plans_) fftw_destroy_plan(p);
  }

 private:
  std::mutex mutex_;
  std::map<std::tuple<int, int, int>, fftw_plan> plans_;
};

std::vector<Complex> execute(std::span<const Complex> in, int rows, int cols, int sign) {
  if (in.size() != static_cast<std::size_t>(rows) * cols) {
    throw std::invalid_argument("fft: buffer size does not match dimensions");
  }
  fftw_plan p = PlanCache::instance().get(rows, cols, sign);
  std::vector<Complex> src(in.begin(), in.end());
  std::vector<Complex> out(src.size());
  fftw_execute_dft(p, reinterpret_cast<fftw_complex*>(src.data()),
                   reinterpret_cast<fftw_complex*>(out.data()));
  return out;
}

}  // namespace

std::vector<Complex> forward(std::span<const Complex> in, int rows, int cols) {
  return execute(in, rows, cols, FFTW_FORWARD);
}

std::vector<Complex> inverse(std::span<const Complex> in, int rows, int cols) {
  auto out = execute(in, rows, cols, FFTW_BACKWARD);
  const double scale = 1.0 / (static_cast<double>(rows) * cols);
  for (auto& v : out) v *= scale;
  return out;
}

std::vector<Complex> forward_real(std::span<const double> in, int rows, int cols) {
  std::vector<Complex> c(in.begin(), in.end());
  return forward(c, rows, cols);
}

std::vector<double> inverse_real(std::span<const Complex> in, int rows, int cols) {
  const auto c = inverse(in, rows, cols);
  std::vector<double> out(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) out[i] = c[i].real();
  return out;
}

std::vector<double> convolve_full(std::span<const double> a, int ra, int ca,
                                  std::span<const double> kernel, int rk, int ck) {
  const int ro = ra + rk - 1;
  const int co = ca + ck - 1;
  std::vector<Complex> pa(static_cast<std::size_t>(ro) * co), pk(pa.size());
  for (int r = 0; r < ra; ++r)
    for (int c = 0; c < ca; ++c) pa[r * co + c] = a[r * ca + c];
  for (int r = 0; r < rk; ++r)
    for (int c = 0; c < ck; ++c) pk[r * co + c] = kernel[r * ck + c];
  auto fa = forward(pa, ro, co);
  const auto fk = forward(pk, ro, co);
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] *= fk[i];
  return inverse_real(fa, ro, co);
}

std::vector<Complex> transfer_function(const Image& kernel, int rows, int cols) {
  if (kernel.rows > rows || kernel.cols > cols) {
    throw std::invalid_argument("transfer_function: kernel larger than grid");
  }
  std::vector<Complex> buf(static_cast<std::size_t>(rows) * cols);
  const int hr = kernel.rows / 2;
  const int hc = kernel.cols / 2;
  for (int r = 0; r < kernel.rows; ++r)
    for (int c = 0; c < kernel.cols; ++c)
      buf[wrap_index(r - hr, rows) * cols + wrap_index(c - hc, cols)] += kernel(r, c);
  return forward(buf, rows, cols);
}

Image circular_convolve(const Image& x, const Image& kernel) {
  const auto kf = transfer_function(kernel, x.rows, x.cols);
  Image out(x.rows, x.cols, x.channels);
  for (int ch = 0; ch < x.channels; ++ch) {
    auto xf = forward_real(x.plane(ch), x.rows, x.cols);
    for (std::size_t i = 0; i < xf.size(); ++i) xf[i] *= kf[i];
    const auto y = inverse_real(xf, x.rows, x.cols);
    std::copy(y.begin(), y.end(), out.plane(ch).begin());
  }
  return out;
}

}  // namespace turbuforge::fft
