#pragma once

#include <complex>
#include <span>
#include <vector>

#include "turbuforge/image.hpp"

namespace turbuforge::fft {

using Complex = std::complex<double>;

/// Unnormalized forward 2-D DFT (FFTW sign convention, exp(-2 pi i k n / N)).
std::vector<Complex> forward(std::span<const Complex> in, int rows, int cols);
/// Inverse 2-D DFT including the 1/(rows*cols) factor.
std::vector<Complex> inverse(std::span<const Complex> in, int rows, int cols);

std::vector<Complex> forward_real(std::span<const double> in, int rows, int cols);
/// Real part of the normalized inverse transform.
std::vector<double> inverse_real(std::span<const Complex> in, int rows, int cols);

/// Linear 2-D convolution of a (ra x ca) with kernel (rk x ck), result sized "full"
/// (ra + rk - 1) x (ca + ck - 1), computed with zero-padded FFTs.
std::vector<double> convolve_full(std::span<const double> a, int ra, int ca,
                                  std::span<const double> kernel, int rk, int ck);

/// Circular convolution on an (n x n) grid with a kernel whose centre sits at
/// (k/2, k/2); the kernel is wrapped so its centre lands on index (0, 0).
Image circular_convolve(const Image& x, const Image& kernel);

/// Transfer function of a centred odd-sized kernel on an (rows x cols) periodic grid.
std::vector<Complex> transfer_function(const Image& kernel, int rows, int cols);

}  // namespace turbuforge::fft
