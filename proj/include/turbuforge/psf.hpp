#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "turbuforge/image.hpp"
#include "turbuforge/turbulence.hpp"

namespace turbuforge {

/// Pupil phase in radians; zero outside the aperture.
struct PhaseScreen {
  Image values;
};

struct Psf {
  Image kernel;
  bool normalized = true;
};

/// phi = sum_i alpha_i Z_{i+2}; alpha covers modes 2..M.
PhaseScreen phase_from_coeffs(std::span<const double> alpha, const ZernikeBasis& basis);

/// |F(A exp(-j phi))|^2 on a 2x zero-padded grid, centre-cropped to the basis side,
/// normalised to unit sum.
Psf psf_from_phase(const PhaseScreen& phase, const ZernikeBasis& basis);

inline Psf exact_psf(std::span<const double> alpha, const ZernikeBasis& basis) {
  return psf_from_phase(phase_from_coeffs(alpha, basis), basis);
}

/// Zero-phase (diffraction-limited) pattern.
Psf diffraction_psf(const ZernikeBasis& basis);

/// Image-plane translation (pixels) caused by the tip/tilt part of alpha.
/// Column shift is -4 alpha_2 / pi, row shift +4 alpha_3 / pi (pupil y axis up).
struct PixelShift {
  double row = 0.0;
  double col = 0.0;
};
PixelShift tilt_shift(std::span<const double> alpha);

/// Intensity-weighted centroid (row, col) relative to the kernel centre.
PixelShift centroid_offset(const Image& kernel);

/// Low-rank surrogate of the exact PSF map.
///
/// Tip/tilt is modelled as a sub-pixel translation; the remaining modes 4..M feed
/// quadratic features through a ridge map onto principal components of
/// tilt-free PSFs.
struct PsfBasis {
  int num_modes = 0;    // M
  int kernel_size = 0;  // K
  int rank = 0;         // R
  int num_samples = 0;
  double d_min = 0.0;
  double d_max = 0.0;
  Eigen::VectorXd mean_psf;    // K*K
  Eigen::MatrixXd components;  // R x K*K, orthonormal rows
  Eigen::MatrixXd coeff_map;   // (F + 1) x R, last row is the bias
  // Relative L2 error of the fitted map on its own training set.
  double residual_mean = 0.0;
  double residual_median = 0.0;
  double residual_max = 0.0;

  int dim() const { return num_modes - 1; }
  int shape_modes() const { return num_modes - 3; }
  int num_features() const { return shape_modes() + shape_modes() * (shape_modes() + 1) / 2; }
};

struct PsfFitOptions {
  /// D/r0 range of training draws; both zero means [0.5, 2] x params.d_over_r0().
  double d_min = 0.0;
  double d_max = 0.0;
  /// Ridge strength relative to the mean feature energy.
  double ridge = 1e-6;
  /// Permits num_samples < 50 * rank (tiny exactness checks only).
  bool allow_undersampled = false;
};

/// Coefficient draws used for fitting: modes 2..M at uniformly drawn strengths,
/// with the tilt entries zeroed.
std::vector<std::vector<double>> psf_training_coeffs(const TurbulenceParams& params, int num_samples,
                                                     std::uint64_t seed, double d_min, double d_max);

PsfBasis fit_psf_basis(const TurbulenceParams& params, int rank, int num_samples, std::uint64_t seed,
                       const PsfFitOptions& options = {});

/// How the two non-negativity clamps propagate gradients.
enum class ClampGradient { kStraightThrough, kExact };

/// Evaluates the surrogate for a batch of coefficient vectors ([n][dim] row-major).
/// Returns n kernels ([n][K*K] row-major), each non-negative with unit sum.
std::vector<double> surrogate_psf_batch(std::span<const double> alphas, int n, const PsfBasis& basis);

Psf surrogate_psf(std::span<const double> alpha, const PsfBasis& basis);

/// Vector-Jacobian product of surrogate_psf_batch: given upstream gradients
/// ([n][K*K]) returns d loss / d alpha ([n][dim]).
std::vector<double> surrogate_psf_vjp(std::span<const double> alphas, int n, const PsfBasis& basis,
                                      std::span<const double> upstream,
                                      ClampGradient clamp = ClampGradient::kStraightThrough);

/// PSB1 cache; parameters are stored as 32-bit floats.
void save_psf_basis(const PsfBasis& basis, const std::filesystem::path& path);
PsfBasis load_psf_basis(const std::filesystem::path& path);

/// Content hash of the parameters that determine a fitted basis.
std::string psf_basis_cache_key(const TurbulenceParams& params, int rank, int num_samples, std::uint64_t seed,
                                const PsfFitOptions& options);

/// Loads a cached basis under `dir` or fits and stores one.
PsfBasis cached_psf_basis(const std::filesystem::path& dir, const TurbulenceParams& params, int rank,
                          int num_samples, std::uint64_t seed, const PsfFitOptions& options = {});

enum class PsfFieldMode { kExactPerPixel, kPerAnchor, kSurrogate };

/// Spatially varying kernels: one per pixel, or one per anchor blended bilinearly.
struct PsfField {
  PsfFieldMode mode = PsfFieldMode::kPerAnchor;
  int image_size = 0;
  int kernel_size = 0;
  int anchor_stride = 1;
  int anchor_rows = 0;
  int anchor_cols = 0;
  std::vector<Image> kernels;  // [anchor_row][anchor_col] or [row][col]

  bool per_pixel() const { return mode == PsfFieldMode::kExactPerPixel; }
  const Image& anchor_kernel(int ar, int ac) const {
    return kernels.at(static_cast<std::size_t>(ar) * anchor_cols + ac);
  }
  const Image& pixel_kernel(int r, int c) const {
    return kernels.at(static_cast<std::size_t>(r) * image_size + c);
  }
};

PsfField exact_anchor_field(const CoefficientField& coeffs, const ZernikeBasis& basis);
PsfField exact_pixel_field(const CoefficientField& coeffs, const ZernikeBasis& basis);
PsfField surrogate_anchor_field(const CoefficientField& coeffs, const PsfBasis& basis);
/// Every anchor carries the same kernel.
PsfField uniform_field(const Image& kernel, int image_size, int anchor_stride);

}  // namespace turbuforge
