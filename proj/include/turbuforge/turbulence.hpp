#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "turbuforge/image.hpp"

namespace turbuforge {

/// Physical and sampling configuration of one turbulence scenario.
///
/// D/r0 is derived from the aperture and Fried parameter, so the ratio can never
/// drift from its constituents; set_d_over_r0 adjusts r0 with D held fixed.
struct TurbulenceParams {
  double aperture_diameter_m = 0.1;
  double fried_param_m = 0.05;
  double wavelength_m = 525e-9;
  double target_distance_m = 1000.0;
  int image_size_px = 128;
  int kernel_size_px = 33;
  int num_zernike = 15;
  double corr_length_px = 32.0;
  int anchor_stride_px = 16;
  std::uint64_t seed = 0;

  double d_over_r0() const { return aperture_diameter_m / fried_param_m; }
  void set_d_over_r0(double ratio);

  /// Throws std::invalid_argument naming the first violated constraint.
  void validate() const;

  /// Defaults for an N x N grid: N=128 uses the reference values; smaller grids
  /// scale correlation length, anchor stride and kernel support proportionally.
  static TurbulenceParams defaults_for(int image_size_px);
};

/// Noll index j (1-based) -> radial order n and signed azimuthal frequency m.
struct ZernikeIndex {
  int n = 0;
  int m = 0;  // signed: m > 0 cosine term, m < 0 sine term
};
ZernikeIndex noll_to_nm(int j);

inline constexpr int kMaxZernikeModes = 36;

/// Noll-normalised Zernike modes sampled on a square pupil grid.
struct ZernikeBasis {
  int num_modes = 0;
  int side = 0;
  std::vector<Image> modes;  // modes[j-1] holds Z_j
  Image aperture_mask;

  const Image& mode(int noll_j) const { return modes.at(noll_j - 1); }
  /// Number of pixels inside the aperture.
  int aperture_pixels() const;
};

ZernikeBasis build_zernike_basis(int num_modes, int side_px);

/// Kolmogorov covariance of Zernike coefficients over modes 2..M (piston dropped).
struct NollCovariance {
  int num_modes = 0;  // M; matrix side is M - 1
  double d_over_r0 = 1.0;
  Eigen::MatrixXd matrix;
  Eigen::MatrixXd cholesky_factor;  // lower triangular

  int dim() const { return num_modes - 1; }
};

NollCovariance noll_covariance(int num_modes, double d_over_r0);

/// Per-anchor Zernike coefficient vectors (modes 2..M) on a regular lattice.
struct CoefficientField {
  int image_size_px = 0;
  int anchor_stride_px = 0;
  int anchor_rows = 0;
  int anchor_cols = 0;
  int dim = 0;  // M - 1
  double corr_length_px = 0.0;
  std::uint64_t noise_seed = 0;
  std::vector<double> values;  // [anchor_row][anchor_col][mode]

  int num_anchors() const { return anchor_rows * anchor_cols; }
  std::span<const double> anchor(int ar, int ac) const {
    return {values.data() + (static_cast<std::size_t>(ar) * anchor_cols + ac) * dim,
            static_cast<std::size_t>(dim)};
  }
  std::span<double> anchor(int ar, int ac) {
    return {values.data() + (static_cast<std::size_t>(ar) * anchor_cols + ac) * dim,
            static_cast<std::size_t>(dim)};
  }
  /// Bilinear interpolation at a (possibly fractional) pixel position.
  std::vector<double> interpolate(double row, double col) const;
};

/// Number of anchors along one axis so that the lattice covers [0, N-1].
int anchors_per_axis(int image_size_px, int stride_px);

/// Spatially-correlated standard-normal field (unit marginal variance per mode,
/// Gaussian correlation exp(-d^2 / (2 l^2)) between anchors). Counter-based in
/// (seed, frame, anchor, mode), so frames can be generated in any order.
CoefficientField sample_unit_field(const TurbulenceParams& params, int dim, std::uint64_t seed,
                                   std::uint64_t frame = 0);

/// Coefficient field with marginal N(0, cov.matrix) at every anchor.
CoefficientField sample_coefficient_field(const NollCovariance& cov, const TurbulenceParams& params,
                                          std::uint64_t seed, std::uint64_t frame = 0);

/// alpha = d^(5/6) * chol(Sigma(1)) * xi, applied anchor-wise.
CoefficientField reparameterized_coeffs(const CoefficientField& xi, double d_over_r0,
                                        const NollCovariance& cov_at_unit);
/// d alpha / d (D/r0) = (5/6) d^(-1/6) * chol(Sigma(1)) * xi.
CoefficientField reparameterized_coeffs_derivative(const CoefficientField& xi, double d_over_r0,
                                                   const NollCovariance& cov_at_unit);

}  // namespace turbuforge
