#include "turbuforge/turbulence.hpp"
#include "turbuforge/random.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace turbuforge {

void TurbulenceParams::set_d_over_r0(double ratio) {
  if (!(ratio > 0.0)) throw std::domain_error("D/r0 must be positive");
  fried_param_m = aperture_diameter_m / ratio;
}

void TurbulenceParams::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("TurbulenceParams: " + what); };
  if (!(aperture_diameter_m > 0.0)) fail("aperture_diameter_m must be positive");
  if (!(fried_param_m > 0.0)) fail("fried_param_m must be positive");
  if (!(wavelength_m > 0.0)) fail("wavelength_m must be positive");
  if (!(target_distance_m > 0.0)) fail("target_distance_m must be positive");
  if (image_size_px <= 0) fail("image_size_px must be positive");
  if (kernel_size_px <= 0 || kernel_size_px % 2 == 0) fail("kernel_size_px must be positive and odd");
  if (kernel_size_px > image_size_px) fail("kernel_size_px must not exceed image_size_px");
  if (num_zernike < 3) fail("num_zernike must be at least 3");
  if (num_zernike > kMaxZernikeModes) fail("num_zernike must be at most 36");
  if (!(corr_length_px > 0.0)) fail("corr_length_px must be positive");
  if (anchor_stride_px <= 0) fail("anchor_stride_px must be positive");
}

TurbulenceParams TurbulenceParams::defaults_for(int image_size_px) {
  TurbulenceParams p;
  p.image_size_px = image_size_px;
  const double scale = image_size_px / 128.0;
  p.corr_length_px = 32.0 * scale;
  p.anchor_stride_px = std::max(4, static_cast<int>(std::lround(16.0 * scale)));
  int k = static_cast<int>(std::lround(33.0 * scale));
  if (k % 2 == 0) ++k;
  p.kernel_size_px = std::clamp(k, 7, 33);
  if (p.kernel_size_px > image_size_px) p.kernel_size_px = image_size_px % 2 ? image_size_px : image_size_px - 1;
  return p;
}

ZernikeIndex noll_to_nm(int j) {
  if (j < 1) throw std::invalid_argument("noll_to_nm: index must be >= 1");
  int n = 0;
  while ((n + 1) * (n + 2) / 2 < j) ++n;
  // Position within radial order n; |m| runs over n%2, n%2+2, ..., n with
  // each non-zero |m| occupying two consecutive indices.
  const int first = n * (n + 1) / 2 + 1;
  const int offset = j - first;
  int abs_m = 0;
  if (n % 2 == 0) {
    abs_m = 2 * ((offset + 1) / 2);
  } else {
    abs_m = 2 * (offset / 2) + 1;
  }
  const int m = (abs_m == 0) ? 0 : (j % 2 == 0 ? abs_m : -abs_m);
  return {n, m};
}

namespace {

double radial_polynomial(int n, int abs_m, double rho) {
  double sum = 0.0;
  for (int s = 0; s <= (n - abs_m) / 2; ++s) {
    const double num = ((s % 2) ? -1.0 : 1.0) * std::tgamma(n - s + 1.0);
    const double den = std::tgamma(s + 1.0) * std::tgamma((n + abs_m) / 2.0 - s + 1.0) *
                       std::tgamma((n - abs_m) / 2.0 - s + 1.0);
    sum += num / den * std::pow(rho, n - 2 * s);
  }
  return sum;
}

double zernike_value(int j, double rho, double theta) {
  const auto [n, m] = noll_to_nm(j);
  const int abs_m = std::abs(m);
  const double radial = radial_polynomial(n, abs_m, rho);
  if (m == 0) return std::sqrt(n + 1.0) * radial;
  const double norm = std::sqrt(2.0 * (n + 1.0));
  return norm * radial * (m > 0 ? std::cos(abs_m * theta) : std::sin(abs_m * theta));
}

}  // namespace

int ZernikeBasis::aperture_pixels() const {
  int count = 0;
  for (double v : aperture_mask.data) count += v > 0.5 ? 1 : 0;
  return count;
}

ZernikeBasis build_zernike_basis(int num_modes, int side_px) {
  if (num_modes < 1) throw std::invalid_argument("build_zernike_basis: num_modes must be >= 1");
  if (num_modes > kMaxZernikeModes) {
    throw std::invalid_argument("build_zernike_basis: num_modes exceeds 36 (radial order 7)");
  }
  if (side_px < 7 || side_px % 2 == 0) {
    throw std::invalid_argument("build_zernike_basis: side_px must be odd and >= 7");
  }
  ZernikeBasis basis;
  basis.num_modes = num_modes;
  basis.side = side_px;
  basis.aperture_mask = Image::square(side_px);
  const double centre = (side_px - 1) / 2.0;
  const double radius = side_px / 2.0;
  for (int r = 0; r < side_px; ++r) {
    for (int c = 0; c < side_px; ++c) {
      const double x = (c - centre) / radius;
      const double y = (centre - r) / radius;
      basis.aperture_mask(r, c) = (x * x + y * y <= 1.0) ? 1.0 : 0.0;
    }
  }
  basis.modes.reserve(num_modes);
  for (int j = 1; j <= num_modes; ++j) {
    Image z = Image::square(side_px);
    for (int r = 0; r < side_px; ++r) {
      for (int c = 0; c < side_px; ++c) {
        if (basis.aperture_mask(r, c) == 0.0) continue;
        const double x = (c - centre) / radius;
        const double y = (centre - r) / radius;
        z(r, c) = zernike_value(j, std::hypot(x, y), std::atan2(y, x));
      }
    }
    basis.modes.push_back(std::move(z));
  }
  return basis;
}

NollCovariance noll_covariance(int num_modes, double d_over_r0) {
  if (num_modes < 2) throw std::invalid_argument("noll_covariance: num_modes must be >= 2");
  if (num_modes > kMaxZernikeModes) throw std::invalid_argument("noll_covariance: num_modes exceeds 36");
  if (!(d_over_r0 > 0.0)) throw std::domain_error("noll_covariance: D/r0 must be positive");

  const double pi = std::numbers::pi;
  const double kzz = std::tgamma(14.0 / 3.0) * std::pow(24.0 / 5.0 * std::tgamma(6.0 / 5.0), 5.0 / 6.0) *
                     std::pow(std::tgamma(11.0 / 6.0), 2) / (2.0 * pi * pi);
  const int dim = num_modes - 1;
  Eigen::MatrixXd unit = Eigen::MatrixXd::Zero(dim, dim);
  for (int a = 0; a < dim; ++a) {
    const int ja = a + 2;
    const auto za = noll_to_nm(ja);
    for (int b = 0; b < dim; ++b) {
      const int jb = b + 2;
      const auto zb = noll_to_nm(jb);
      const int ma = std::abs(za.m);
      if (ma != std::abs(zb.m)) continue;
      if (ma != 0 && (ja - jb) % 2 != 0) continue;
      const double ni = za.n;
      const double nj = zb.n;
      const double sign = (((za.n + zb.n - 2 * ma) / 2) % 2) ? -1.0 : 1.0;
      unit(a, b) = kzz * sign * std::sqrt((ni + 1.0) * (nj + 1.0)) *
                   std::tgamma((ni + nj - 5.0 / 3.0) / 2.0) /
                   (std::tgamma((ni - nj + 17.0 / 3.0) / 2.0) * std::tgamma((nj - ni + 17.0 / 3.0) / 2.0) *
                    std::tgamma((ni + nj + 23.0 / 3.0) / 2.0));
    }
  }
  unit = 0.5 * (unit + unit.transpose());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(unit);
  if (eig.eigenvalues().minCoeff() < -1e-10) {
    std::ostringstream msg;
    msg << "noll_covariance: matrix not PSD (min eigenvalue " << eig.eigenvalues().minCoeff() << ")";
    throw std::logic_error(msg.str());
  }
  Eigen::LLT<Eigen::MatrixXd> llt(unit);
  if (llt.info() != Eigen::Success) throw std::logic_error("noll_covariance: Cholesky factorisation failed");

  NollCovariance cov;
  cov.num_modes = num_modes;
  cov.d_over_r0 = d_over_r0;
  cov.matrix = unit * std::pow(d_over_r0, 5.0 / 3.0);
  cov.cholesky_factor = Eigen::MatrixXd(llt.matrixL()) * std::pow(d_over_r0, 5.0 / 6.0);
  return cov;
}

int anchors_per_axis(int image_size_px, int stride_px) {
  if (image_size_px <= 1) return 1;
  return (image_size_px - 1 + stride_px - 1) / stride_px + 1;
}

std::vector<double> CoefficientField::interpolate(double row, double col) const {
  const double fr = std::clamp(row / anchor_stride_px, 0.0, static_cast<double>(anchor_rows - 1));
  const double fc = std::clamp(col / anchor_stride_px, 0.0, static_cast<double>(anchor_cols - 1));
  const int r0 = std::min(static_cast<int>(fr), anchor_rows - 1);
  const int c0 = std::min(static_cast<int>(fc), anchor_cols - 1);
  const int r1 = std::min(r0 + 1, anchor_rows - 1);
  const int c1 = std::min(c0 + 1, anchor_cols - 1);
  const double tr = fr - r0;
  const double tc = fc - c0;
  std::vector<double> out(dim);
  const auto a00 = anchor(r0, c0), a01 = anchor(r0, c1), a10 = anchor(r1, c0), a11 = anchor(r1, c1);
  for (int k = 0; k < dim; ++k) {
    if (tr == 0.0 && tc == 0.0) {
      out[k] = a00[k];
    } else {
      out[k] = (1 - tr) * ((1 - tc) * a00[k] + tc * a01[k]) + tr * ((1 - tc) * a10[k] + tc * a11[k]);
    }
  }
  return out;
}

namespace {

// Symmetric square root S (S S^T = C) of the 1-D Gaussian correlation matrix.
// Eigen-decomposition tolerates the rank-deficient limit of very long
// correlation lengths where Cholesky would fail.
Eigen::MatrixXd correlation_sqrt(int count, double stride, double corr_length) {
  Eigen::MatrixXd c(count, count);
  for (int i = 0; i < count; ++i)
    for (int j = 0; j < count; ++j) {
      const double d = stride * (i - j);
      c(i, j) = std::exp(-d * d / (2.0 * corr_length * corr_length));
    }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(c);
  Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

CoefficientField sample_unit_field(const TurbulenceParams& params, int dim, std::uint64_t seed,
                                   std::uint64_t frame) {
  CoefficientField field;
  field.image_size_px = params.image_size_px;
  field.anchor_stride_px = params.anchor_stride_px;
  field.anchor_rows = anchors_per_axis(params.image_size_px, params.anchor_stride_px);
  field.anchor_cols = field.anchor_rows;
  field.dim = dim;
  field.corr_length_px = params.corr_length_px;
  field.noise_seed = seed;
  const int na = field.anchor_rows;
  const Eigen::MatrixXd root = correlation_sqrt(na, params.anchor_stride_px, params.corr_length_px);

  const std::uint64_t key = derive_key(seed, frame);
  field.values.assign(static_cast<std::size_t>(na) * na * dim, 0.0);
  Eigen::MatrixXd white(na, na);
  for (int k = 0; k < dim; ++k) {
    for (int i = 0; i < na; ++i)
      for (int j = 0; j < na; ++j)
        white(i, j) = CounterRng::normal(key, (static_cast<std::uint64_t>(i) * na + j) * dim + k);
    const Eigen::MatrixXd correlated = root * white * root.transpose();
    for (int i = 0; i < na; ++i)
      for (int j = 0; j < na; ++j) field.anchor(i, j)[k] = correlated(i, j);
  }
  return field;
}

CoefficientField sample_coefficient_field(const NollCovariance& cov, const TurbulenceParams& params,
                                          std::uint64_t seed, std::uint64_t frame) {
  CoefficientField field = sample_unit_field(params, cov.dim(), seed, frame);
  Eigen::VectorXd v(cov.dim());
  for (int i = 0; i < field.anchor_rows; ++i) {
    for (int j = 0; j < field.anchor_cols; ++j) {
      auto a = field.anchor(i, j);
      for (int k = 0; k < cov.dim(); ++k) v(k) = a[k];
      const Eigen::VectorXd out = cov.cholesky_factor * v;
      for (int k = 0; k < cov.dim(); ++k) a[k] = out(k);
    }
  }
  return field;
}

namespace {

CoefficientField scale_by_factor(const CoefficientField& xi, double factor, const NollCovariance& unit) {
  if (xi.dim != unit.dim()) throw std::invalid_argument("reparameterized_coeffs: dimension mismatch");
  CoefficientField out = xi;
  Eigen::VectorXd v(xi.dim);
  for (int i = 0; i < xi.anchor_rows; ++i) {
    for (int j = 0; j < xi.anchor_cols; ++j) {
      const auto src = xi.anchor(i, j);
      for (int k = 0; k < xi.dim; ++k) v(k) = src[k];
      const Eigen::VectorXd res = (unit.cholesky_factor * v) * factor;
      auto dst = out.anchor(i, j);
      for (int k = 0; k < xi.dim; ++k) dst[k] = res(k);
    }
  }
  return out;
}

void require_unit(const NollCovariance& unit) {
  if (unit.d_over_r0 != 1.0) {
    throw std::invalid_argument("reparameterized_coeffs: covariance must be evaluated at D/r0 = 1");
  }
}

}  // namespace

CoefficientField reparameterized_coeffs(const CoefficientField& xi, double d_over_r0,
                                        const NollCovariance& cov_at_unit) {
  if (!(d_over_r0 > 0.0)) throw std::domain_error("reparameterized_coeffs: D/r0 must be positive");
  require_unit(cov_at_unit);
  return scale_by_factor(xi, std::pow(d_over_r0, 5.0 / 6.0), cov_at_unit);
}

CoefficientField reparameterized_coeffs_derivative(const CoefficientField& xi, double d_over_r0,
                                                   const NollCovariance& cov_at_unit) {
  if (!(d_over_r0 > 0.0)) throw std::domain_error("reparameterized_coeffs: D/r0 must be positive");
  require_unit(cov_at_unit);
  return scale_by_factor(xi, (5.0 / 6.0) * std::pow(d_over_r0, -1.0 / 6.0), cov_at_unit);
}

}  // namespace turbuforge
