#pragma once

// Independent reference implementations used only by tests. Nothing here calls
// into the library's FFT, convolution or loss code.

#include <cmath>
#include <complex>
#include <functional>
#include <numbers>
#include <vector>

#include "turbuforge/image.hpp"

namespace oracle {

using Complex = std::complex<double>;

/// O(n^4) DFT of one channel, DC at (0, 0).
inline std::vector<Complex> dft2(const turbuforge::Image& x, int ch = 0) {
  const int r = x.rows, c = x.cols;
  std::vector<Complex> out(static_cast<std::size_t>(r) * c);
  for (int u = 0; u < r; ++u)
    for (int v = 0; v < c; ++v) {
      Complex acc = 0.0;
      for (int a = 0; a < r; ++a)
        for (int b = 0; b < c; ++b) {
          const double ph = -2.0 * std::numbers::pi * (static_cast<double>(u) * a / r + static_cast<double>(v) * b / c);
          acc += x(a, b, ch) * Complex(std::cos(ph), std::sin(ph));
        }
      out[static_cast<std::size_t>(u) * c + v] = acc;
    }
  return out;
}

/// Circular convolution of an n x n image with a centred odd kernel, by
/// explicit double sum.
inline turbuforge::Image circular_conv(const turbuforge::Image& x, const turbuforge::Image& h) {
  turbuforge::Image y(x.rows, x.cols, x.channels);
  const int rr = h.rows / 2, rc = h.cols / 2;
  for (int ch = 0; ch < x.channels; ++ch)
    for (int u = 0; u < x.rows; ++u)
      for (int v = 0; v < x.cols; ++v) {
        double acc = 0.0;
        for (int a = 0; a < h.rows; ++a)
          for (int b = 0; b < h.cols; ++b)
            acc += h(a, b) * x(((u - (a - rr)) % x.rows + x.rows) % x.rows, ((v - (b - rc)) % x.cols + x.cols) % x.cols, ch);
        y(u, v, ch) = acc;
      }
  return y;
}

/// Central difference of f along direction index i of x.
inline double central_difference(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                                 std::size_t i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double fp = f(x);
  x[i] = x0 - h;
  const double fm = f(x);
  return (fp - fm) / (2.0 * h);
}

/// Scalar WGAN-GP discriminator objective.
struct ScalarDLoss {
  double real, fake, mix, total;
};

inline ScalarDLoss scalar_d_loss(const std::vector<double>& dr, const std::vector<double>& df,
                                 const std::vector<double>& norms, double pd, double pr) {
  const double k = static_cast<double>(dr.size());
  double sq = 0.0, lin = 0.0, fk = 0.0, mx = 0.0;
  for (std::size_t i = 0; i < dr.size(); ++i) {
    sq += dr[i] * dr[i];
    lin += dr[i];
    fk += df[i];
    mx += (norms[i] - 1.0) * (norms[i] - 1.0);
  }
  ScalarDLoss l;
  l.real = pd * sq / k - lin / k;
  l.fake = fk / k;
  l.mix = pr * mx / k;
  l.total = l.real + l.fake + l.mix;
  return l;
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-8) {
  double scale = floor;
  for (double v : b) scale = std::max(scale, std::abs(v));
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  return worst;
}

}  // namespace oracle
