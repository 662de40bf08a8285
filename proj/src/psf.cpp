#include "turbuforge/psf.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "turbuforge/binary_io.hpp"
#include "turbuforge/fft.hpp"
#include "turbuforge/hash.hpp"
#include "turbuforge/random.hpp"

namespace turbuforge {

namespace {
constexpr double kPi = std::numbers::pi;
constexpr double kTiltGain = 4.0 / kPi;  // pixels per radian of Noll tilt on the 2x grid
constexpr int kLanczosA = 3;
}  // namespace

PhaseScreen phase_from_coeffs(std::span<const double> alpha, const ZernikeBasis& basis) {
  if (static_cast<int>(alpha.size()) != basis.num_modes - 1) {
    throw std::invalid_argument("phase_from_coeffs: expected " + std::to_string(basis.num_modes - 1) +
                                " coefficients, got " + std::to_string(alpha.size()));
  }
  PhaseScreen phase{Image::square(basis.side)};
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    const double a = alpha[i];
    if (a == 0.0) continue;
    const auto& z = basis.modes[i + 1].data;
    for (std::size_t p = 0; p < z.size(); ++p) phase.values.data[p] += a * z[p];
  }
  return phase;
}

Psf psf_from_phase(const PhaseScreen& phase, const ZernikeBasis& basis) {
  const int k = basis.side;
  const int n = 2 * k;
  std::vector<fft::Complex> pupil(static_cast<std::size_t>(n) * n);
  for (int r = 0; r < k; ++r)
    for (int c = 0; c < k; ++c)
      if (basis.aperture_mask(r, c) != 0.0) pupil[r * n + c] = std::polar(1.0, -phase.values(r, c));
  const auto field = fft::forward(pupil, n, n);
  const int h = (k - 1) / 2;
  Psf psf{Image::square(k), true};
  double total = 0.0;
  for (int r = 0; r < k; ++r)
    for (int c = 0; c < k; ++c) {
      const double v = std::norm(field[wrap_index(r - h, n) * n + wrap_index(c - h, n)]);
      psf.kernel(r, c) = v;
      total += v;
    }
  for (double& v : psf.kernel.data) v /= total;
  return psf;
}

Psf diffraction_psf(const ZernikeBasis& basis) {
  return psf_from_phase(PhaseScreen{Image::square(basis.side)}, basis);
}

PixelShift tilt_shift(std::span<const double> alpha) {
  if (alpha.size() < 2) return {};
  return {kTiltGain * alpha[1], -kTiltGain * alpha[0]};
}

PixelShift centroid_offset(const Image& kernel) {
  double total = 0.0, sr = 0.0, sc = 0.0;
  for (int r = 0; r < kernel.rows; ++r)
    for (int c = 0; c < kernel.cols; ++c) {
      total += kernel(r, c);
      sr += r * kernel(r, c);
      sc += c * kernel(r, c);
    }
  return {sr / total - (kernel.rows - 1) / 2.0, sc / total - (kernel.cols - 1) / 2.0};
}

// ---- surrogate ------------------------------------------------------------

namespace {

// Banded 1-D shift filter: out[o] = sum_j w[j] in[o - lo - j], with
// w[j] = L(lo + j - shift); dw holds L' at the same arguments.
struct ShiftFilter {
  int lo = 0;
  int count = 0;
  double w[2 * kLanczosA] = {};
  double dw[2 * kLanczosA] = {};
};

// Lanczos-3 taps L(t) = sinc(t) sinc(t/3) at t = lo + j - shift. The arguments
// differ by integers, so sin(pi t) and sin(pi t / 3) follow from one angle each.
constexpr double kHalfRoot3 = 0.86602540378443864676;
constexpr double kStepCos[2 * kLanczosA] = {1.0, 0.5, -0.5, -1.0, -0.5, 0.5};  // cos(j pi / 3)
constexpr double kStepSin[2 * kLanczosA] = {0.0, kHalfRoot3, kHalfRoot3, 0.0, -kHalfRoot3, -kHalfRoot3};

ShiftFilter shift_filter(double shift) {
  ShiftFilter f;
  f.lo = static_cast<int>(std::floor(shift - kLanczosA)) + 1;
  const int hi = static_cast<int>(std::ceil(shift + kLanczosA)) - 1;
  f.count = std::min(hi - f.lo + 1, 2 * kLanczosA);
  const double t0 = f.lo - shift;
  const double s1 = std::sin(kPi * t0), c1 = std::cos(kPi * t0);
  const double s3 = std::sin(kPi * t0 / kLanczosA), c3 = std::cos(kPi * t0 / kLanczosA);
  for (int j = 0; j < f.count; ++j) {
    const double t = t0 + j;
    if (std::abs(t) >= kLanczosA) continue;
    if (t == 0.0) {
      f.w[j] = 1.0;
      f.dw[j] = 0.0;
      continue;
    }
    const double sign = (j % 2) ? -1.0 : 1.0;
    const double sin1 = sign * s1, cos1 = sign * c1;
    const double sin3 = s3 * kStepCos[j] + c3 * kStepSin[j];
    const double cos3 = c3 * kStepCos[j] - s3 * kStepSin[j];
    const double sinc1 = sin1 / (kPi * t);
    const double sinc3 = sin3 / (kPi * t / kLanczosA);
    f.w[j] = sinc1 * sinc3;
    f.dw[j] = ((cos1 - sinc1) * sinc3 + sinc1 * (cos3 - sinc3)) / t;
  }
  return f;
}

// Applies a filter (or its transpose) along rows (axis 0) or columns (axis 1)
// of a k x k row-major block.
void apply_filter(const double* in, double* out, int k, const ShiftFilter& f, const double* taps, int axis,
                  bool transpose) {
  std::fill(out, out + k * k, 0.0);
  for (int j = 0; j < f.count; ++j) {
    // forward: out[o] += w in[o - d]; transpose: out[i] += w in[i + d]
    const int d = transpose ? -(f.lo + j) : f.lo + j;
    const double w = taps[j];
    const int o_begin = std::max(0, d);
    const int o_end = std::min(k, k + d);
    if (axis == 0) {
      for (int o = o_begin; o < o_end; ++o) {
        const double* src = in + (o - d) * k;
        double* dst = out + o * k;
        for (int c = 0; c < k; ++c) dst[c] += w * src[c];
      }
    } else {
      for (int r = 0; r < k; ++r) {
        const double* src = in + r * k - d;
        double* dst = out + r * k;
        for (int o = o_begin; o < o_end; ++o) dst[o] += w * src[o];
      }
    }
  }
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void shape_features(std::span<const double> alpha, int shape_modes, double* out) {
  const double* s = alpha.data() + 2;
  int q = 0;
  for (int i = 0; i < shape_modes; ++i) out[q++] = s[i];
  for (int i = 0; i < shape_modes; ++i)
    for (int j = i; j < shape_modes; ++j) out[q++] = s[i] * s[j];
}

void check_batch(std::span<const double> alphas, int n, const PsfBasis& basis) {
  if (n < 0 || alphas.size() != static_cast<std::size_t>(n) * basis.dim()) {
    throw std::invalid_argument("surrogate_psf: coefficient buffer does not match batch size");
  }
}

// Tilt-free base kernels h0 = mean + w C, one row per sample.
RowMat base_kernels(std::span<const double> alphas, int n, const PsfBasis& basis) {
  const int f = basis.num_features();
  RowMat feats(n, f + 1);
  for (int b = 0; b < n; ++b) {
    shape_features(alphas.subspan(static_cast<std::size_t>(b) * basis.dim(), basis.dim()), basis.shape_modes(),
                   feats.row(b).data());
    feats(b, f) = 1.0;
  }
  RowMat h = (feats * basis.coeff_map) * basis.components;
  h.rowwise() += basis.mean_psf.transpose();
  return h;
}

}  // namespace

std::vector<std::vector<double>> psf_training_coeffs(const TurbulenceParams& params, int num_samples,
                                                     std::uint64_t seed, double d_min, double d_max) {
  const auto unit = noll_covariance(params.num_zernike, 1.0);
  Rng rng(derive_key(seed, 0x505342));
  std::vector<std::vector<double>> out;
  out.reserve(num_samples);
  Eigen::VectorXd xi(unit.dim());
  for (int s = 0; s < num_samples; ++s) {
    const double d = rng.uniform(d_min, d_max);
    for (int k = 0; k < unit.dim(); ++k) xi(k) = rng.normal();
    const Eigen::VectorXd a = unit.cholesky_factor * xi * std::pow(d, 5.0 / 6.0);
    std::vector<double> alpha(a.data(), a.data() + a.size());
    alpha[0] = alpha[1] = 0.0;
    out.push_back(std::move(alpha));
  }
  return out;
}

PsfBasis fit_psf_basis(const TurbulenceParams& params, int rank, int num_samples, std::uint64_t seed,
                       const PsfFitOptions& options) {
  params.validate();
  if (rank < 1) throw std::invalid_argument("fit_psf_basis: rank must be >= 1");
  if (rank >= num_samples) throw std::invalid_argument("fit_psf_basis: rank must be below num_samples");
  if (!options.allow_undersampled && num_samples < 50 * rank) {
    throw std::invalid_argument("fit_psf_basis: num_samples must be >= 50 * rank");
  }
  const int k = params.kernel_size_px;
  const int kk = k * k;
  if (rank > kk) throw std::invalid_argument("fit_psf_basis: rank exceeds kernel pixel count");

  PsfBasis basis;
  basis.num_modes = params.num_zernike;
  basis.kernel_size = k;
  basis.rank = rank;
  basis.num_samples = num_samples;
  basis.d_min = options.d_min;
  basis.d_max = options.d_max;
  if (basis.d_min == 0.0 && basis.d_max == 0.0) {
    basis.d_min = 0.5 * params.d_over_r0();
    basis.d_max = 2.0 * params.d_over_r0();
  }
  if (!(basis.d_min > 0.0) || basis.d_max < basis.d_min) {
    throw std::invalid_argument("fit_psf_basis: invalid D/r0 range");
  }

  const auto zb = build_zernike_basis(params.num_zernike, k);
  const auto coeffs = psf_training_coeffs(params, num_samples, seed, basis.d_min, basis.d_max);
  RowMat h(num_samples, kk);
  for (int s = 0; s < num_samples; ++s) {
    const auto psf = exact_psf(coeffs[s], zb);
    std::copy(psf.kernel.data.begin(), psf.kernel.data.end(), h.row(s).data());
  }

  basis.mean_psf = h.colwise().mean().transpose();
  RowMat centered = h.rowwise() - basis.mean_psf.transpose();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  basis.components = svd.matrixV().leftCols(rank).transpose();
  // Sign convention: the largest-magnitude entry of each component is positive.
  for (int r = 0; r < rank; ++r) {
    Eigen::Index idx = 0;
    basis.components.row(r).cwiseAbs().maxCoeff(&idx);
    if (basis.components(r, idx) < 0) basis.components.row(r) *= -1.0;
  }
  const Eigen::MatrixXd weights = centered * basis.components.transpose();

  const int f = basis.num_features();
  Eigen::MatrixXd feats(num_samples, f + 1);
  std::vector<double> row(f);
  for (int s = 0; s < num_samples; ++s) {
    shape_features(coeffs[s], basis.shape_modes(), row.data());
    for (int j = 0; j < f; ++j) feats(s, j) = row[j];
    feats(s, f) = 1.0;
  }
  if (options.ridge > 0.0 && num_samples > f + 1) {
    Eigen::MatrixXd gram = feats.transpose() * feats;
    const double lambda = options.ridge * gram.trace() / gram.rows();
    gram.diagonal().array() += lambda;
    basis.coeff_map = gram.ldlt().solve(feats.transpose() * weights);
  } else {
    // Minimum-norm least squares; interpolates when samples are fewer than features.
    basis.coeff_map = feats.completeOrthogonalDecomposition().solve(weights);
  }

  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(num_samples) * basis.dim());
  for (const auto& a : coeffs) flat.insert(flat.end(), a.begin(), a.end());
  const auto fitted = surrogate_psf_batch(flat, num_samples, basis);
  std::vector<double> errs(num_samples);
  for (int s = 0; s < num_samples; ++s) {
    double num = 0.0, den = 0.0;
    for (int p = 0; p < kk; ++p) {
      const double d = fitted[static_cast<std::size_t>(s) * kk + p] - h(s, p);
      num += d * d;
      den += h(s, p) * h(s, p);
    }
    errs[s] = std::sqrt(num / den);
  }
  double sum = 0.0;
  for (double e : errs) sum += e;
  basis.residual_mean = sum / num_samples;
  basis.residual_max = *std::max_element(errs.begin(), errs.end());
  std::nth_element(errs.begin(), errs.begin() + num_samples / 2, errs.end());
  basis.residual_median = errs[num_samples / 2];
  return basis;
}

std::vector<double> surrogate_psf_batch(std::span<const double> alphas, int n, const PsfBasis& basis) {
  check_batch(alphas, n, basis);
  const int k = basis.kernel_size;
  const int kk = k * k;
  const int dim = basis.dim();
  constexpr int kChunk = 64;  // keeps the base block cache-resident
  std::vector<double> out(static_cast<std::size_t>(n) * kk);
  std::vector<double> tmp(kk), s(kk);
  for (int start = 0; start < n; start += kChunk) {
    const int m = std::min(kChunk, n - start);
    RowMat base = base_kernels(alphas.subspan(static_cast<std::size_t>(start) * dim, static_cast<std::size_t>(m) * dim),
                               m, basis);
    for (int b = 0; b < m; ++b) {
      const auto alpha = alphas.subspan(static_cast<std::size_t>(start + b) * dim, dim);
      double* p = base.row(b).data();
      for (int i = 0; i < kk; ++i) p[i] = std::max(p[i], 0.0);
      const auto shift = tilt_shift(alpha);
      const double* src = p;
      if (shift.row != 0.0 || shift.col != 0.0) {
        const auto fr = shift_filter(shift.row);
        const auto fc = shift_filter(shift.col);
        apply_filter(p, tmp.data(), k, fc, fc.w, 1, false);
        apply_filter(tmp.data(), s.data(), k, fr, fr.w, 0, false);
        src = s.data();
      }
      double total = 0.0;
      for (int i = 0; i < kk; ++i) total += std::max(src[i], 0.0);
      if (!(total > 0.0)) {
        // Shift pushed all mass off the support: fall back to the unshifted kernel.
        src = p;
        total = 0.0;
        for (int i = 0; i < kk; ++i) total += p[i];
      }
      double* dst = out.data() + static_cast<std::size_t>(start + b) * kk;
      const double inv = 1.0 / total;
      for (int i = 0; i < kk; ++i) dst[i] = std::max(src[i], 0.0) * inv;
    }
  }
  return out;
}

Psf surrogate_psf(std::span<const double> alpha, const PsfBasis& basis) {
  const auto flat = surrogate_psf_batch(alpha, 1, basis);
  Psf psf{Image::square(basis.kernel_size), true};
  std::copy(flat.begin(), flat.end(), psf.kernel.data.begin());
  return psf;
}

std::vector<double> surrogate_psf_vjp(std::span<const double> alphas, int n, const PsfBasis& basis,
                                      std::span<const double> upstream, ClampGradient clamp) {
  check_batch(alphas, n, basis);
  const int k = basis.kernel_size;
  const int kk = k * k;
  if (upstream.size() != static_cast<std::size_t>(n) * kk) {
    throw std::invalid_argument("surrogate_psf_vjp: upstream gradient has wrong size");
  }
  const bool exact = clamp == ClampGradient::kExact;
  const RowMat base = base_kernels(alphas, n, basis);
  const int dim = basis.dim();
  const int sm = basis.shape_modes();
  std::vector<double> grad(static_cast<std::size_t>(n) * dim, 0.0);
  RowMat g_base(n, kk);
  std::vector<double> p(kk), g(kk), tmp(kk), s(kk), work(kk), g_s(kk), g_p(kk);
  auto dot = [kk](const std::vector<double>& x, const std::vector<double>& y) {
    double acc = 0.0;
    for (int i = 0; i < kk; ++i) acc += x[i] * y[i];
    return acc;
  };

  for (int b = 0; b < n; ++b) {
    const auto alpha = alphas.subspan(static_cast<std::size_t>(b) * dim, dim);
    for (int i = 0; i < kk; ++i) {
      p[i] = std::max(base(b, i), 0.0);
      g[i] = upstream[static_cast<std::size_t>(b) * kk + i];
    }
    const auto shift = tilt_shift(alpha);
    const bool shifted = shift.row != 0.0 || shift.col != 0.0;
    ShiftFilter fr, fc;
    s = p;
    if (shifted) {
      fr = shift_filter(shift.row);
      fc = shift_filter(shift.col);
      apply_filter(p.data(), tmp.data(), k, fc, fc.w, 1, false);
      apply_filter(tmp.data(), s.data(), k, fr, fr.w, 0, false);
    }
    double total = 0.0;
    for (double v : s) total += std::max(v, 0.0);
    const bool fallback = !(total > 0.0);
    if (fallback) {
      total = 0.0;
      for (double v : p) total += v;
    }
    // out = q / total with q = max(s, 0), or q = p on fallback.
    double gq_dot = 0.0;
    for (int i = 0; i < kk; ++i) gq_dot += g[i] * (fallback ? p[i] : std::max(s[i], 0.0));
    gq_dot /= total;
    for (int i = 0; i < kk; ++i) {
      g_s[i] = (g[i] - gq_dot) / total;
      if (exact && !fallback && !(s[i] > 0.0)) g_s[i] = 0.0;
    }
    if (fallback || !shifted) {
      g_p = g_s;
    } else {
      apply_filter(g_s.data(), work.data(), k, fr, fr.w, 0, true);
      apply_filter(work.data(), g_p.data(), k, fc, fc.w, 1, true);
      // Taps are L(lo + j - shift), so d/dshift contributes -L'.
      apply_filter(tmp.data(), work.data(), k, fr, fr.dw, 0, false);
      const double g_row = -dot(g_s, work);
      std::vector<double> dcol(kk);
      apply_filter(p.data(), dcol.data(), k, fc, fc.dw, 1, false);
      apply_filter(dcol.data(), work.data(), k, fr, fr.w, 0, false);
      const double g_col = -dot(g_s, work);
      grad[static_cast<std::size_t>(b) * dim + 0] += -kTiltGain * g_col;
      grad[static_cast<std::size_t>(b) * dim + 1] += kTiltGain * g_row;
    }
    for (int i = 0; i < kk; ++i) {
      const bool pass = !exact || base(b, i) > 0.0;
      g_base(b, i) = pass ? g_p[i] : 0.0;
    }
  }

  // Back through h0 = [features, 1] B C + mean.
  const RowMat g_feat = (g_base * basis.components.transpose()) * basis.coeff_map.transpose();
  for (int b = 0; b < n; ++b) {
    const double* s = alphas.data() + static_cast<std::size_t>(b) * dim + 2;
    double* ga = grad.data() + static_cast<std::size_t>(b) * dim + 2;
    int q = 0;
    for (int i = 0; i < sm; ++i) ga[i] += g_feat(b, q++);
    for (int i = 0; i < sm; ++i)
      for (int j = i; j < sm; ++j) {
        const double gq = g_feat(b, q++);
        ga[i] += gq * s[j];
        ga[j] += gq * s[i];
      }
  }
  return grad;
}

// ---- PSB1 -----------------------------------------------------------------

void save_psf_basis(const PsfBasis& basis, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_psf_basis: cannot open " + path.string());
  bin::put_magic(os, "PSB1");
  bin::put<std::uint32_t>(os, basis.num_modes);
  bin::put<std::uint32_t>(os, basis.kernel_size);
  bin::put<std::uint32_t>(os, basis.rank);
  bin::put<std::uint32_t>(os, basis.num_samples);
  const Eigen::VectorXd& mean = basis.mean_psf;
  bin::put_f32(os, std::span<const double>(mean.data(), mean.size()));
  const RowMat comps = basis.components;
  bin::put_f32(os, std::span<const double>(comps.data(), comps.size()));
  const RowMat map = basis.coeff_map;
  bin::put_f32(os, std::span<const double>(map.data(), map.size()));
  const double stats[] = {basis.residual_mean, basis.residual_median, basis.residual_max, basis.d_min, basis.d_max};
  bin::put_f32(os, stats);
  if (!os) throw std::runtime_error("save_psf_basis: write failed for " + path.string());
}

PsfBasis load_psf_basis(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_psf_basis: cannot open " + path.string());
  bin::expect_magic(is, "PSB1");
  PsfBasis basis;
  basis.num_modes = static_cast<int>(bin::get<std::uint32_t>(is));
  basis.kernel_size = static_cast<int>(bin::get<std::uint32_t>(is));
  basis.rank = static_cast<int>(bin::get<std::uint32_t>(is));
  basis.num_samples = static_cast<int>(bin::get<std::uint32_t>(is));
  if (basis.num_modes < 3 || basis.num_modes > kMaxZernikeModes || basis.kernel_size < 1 || basis.rank < 1) {
    throw std::runtime_error("load_psf_basis: corrupt header in " + path.string());
  }
  const int kk = basis.kernel_size * basis.kernel_size;
  const int f = basis.num_features();
  const auto mean = bin::get_f32(is, kk);
  const auto comps = bin::get_f32(is, static_cast<std::size_t>(basis.rank) * kk);
  const auto map = bin::get_f32(is, static_cast<std::size_t>(f + 1) * basis.rank);
  const auto stats = bin::get_f32(is, 5);
  basis.mean_psf = Eigen::Map<const Eigen::VectorXd>(mean.data(), kk);
  basis.components = Eigen::Map<const RowMat>(comps.data(), basis.rank, kk);
  basis.coeff_map = Eigen::Map<const RowMat>(map.data(), f + 1, basis.rank);
  basis.residual_mean = stats[0];
  basis.residual_median = stats[1];
  basis.residual_max = stats[2];
  basis.d_min = stats[3];
  basis.d_max = stats[4];
  return basis;
}

std::string psf_basis_cache_key(const TurbulenceParams& params, int rank, int num_samples, std::uint64_t seed,
                                const PsfFitOptions& options) {
  std::ostringstream os;
  os.precision(17);
  os << "M=" << params.num_zernike << ";K=" << params.kernel_size_px << ";d=" << params.d_over_r0()
     << ";R=" << rank << ";S=" << num_samples << ";seed=" << seed << ";dmin=" << options.d_min
     << ";dmax=" << options.d_max << ";ridge=" << options.ridge << ";u=" << options.allow_undersampled;
  return hex64(fnv1a64(os.str()));
}

PsfBasis cached_psf_basis(const std::filesystem::path& dir, const TurbulenceParams& params, int rank,
                          int num_samples, std::uint64_t seed, const PsfFitOptions& options) {
  const auto path = dir / ("psf_basis_" + psf_basis_cache_key(params, rank, num_samples, seed, options) + ".psb");
  if (std::filesystem::exists(path)) return load_psf_basis(path);
  std::filesystem::create_directories(dir);
  const auto fitted = fit_psf_basis(params, rank, num_samples, seed, options);
  // Write to a private name then rename, so concurrent readers never see a partial file.
  const auto tmp = path.string() + ".tmp" + std::to_string(fnv1a64(path.string()) ^ seed);
  save_psf_basis(fitted, tmp);
  std::filesystem::rename(tmp, path);
  // Reload so cache hits and misses hand out identical (float-rounded) parameters.
  return load_psf_basis(path);
}

// ---- PSF fields -------------------------------------------------------------

namespace {
PsfField anchor_layout(const CoefficientField& coeffs, int kernel_size, PsfFieldMode mode) {
  PsfField field;
  field.mode = mode;
  field.image_size = coeffs.image_size_px;
  field.kernel_size = kernel_size;
  field.anchor_stride = coeffs.anchor_stride_px;
  field.anchor_rows = coeffs.anchor_rows;
  field.anchor_cols = coeffs.anchor_cols;
  return field;
}
}  // namespace

PsfField exact_anchor_field(const CoefficientField& coeffs, const ZernikeBasis& basis) {
  PsfField field = anchor_layout(coeffs, basis.side, PsfFieldMode::kPerAnchor);
  field.kernels.reserve(coeffs.num_anchors());
  for (int ar = 0; ar < coeffs.anchor_rows; ++ar)
    for (int ac = 0; ac < coeffs.anchor_cols; ++ac) field.kernels.push_back(exact_psf(coeffs.anchor(ar, ac), basis).kernel);
  return field;
}

PsfField exact_pixel_field(const CoefficientField& coeffs, const ZernikeBasis& basis) {
  PsfField field = anchor_layout(coeffs, basis.side, PsfFieldMode::kExactPerPixel);
  const int n = coeffs.image_size_px;
  field.kernels.reserve(static_cast<std::size_t>(n) * n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) field.kernels.push_back(exact_psf(coeffs.interpolate(r, c), basis).kernel);
  return field;
}

PsfField surrogate_anchor_field(const CoefficientField& coeffs, const PsfBasis& basis) {
  if (coeffs.dim != basis.dim()) throw std::invalid_argument("surrogate_anchor_field: mode count mismatch");
  PsfField field = anchor_layout(coeffs, basis.kernel_size, PsfFieldMode::kSurrogate);
  const auto flat = surrogate_psf_batch(coeffs.values, coeffs.num_anchors(), basis);
  const std::size_t kk = static_cast<std::size_t>(basis.kernel_size) * basis.kernel_size;
  for (int a = 0; a < coeffs.num_anchors(); ++a) {
    Image k = Image::square(basis.kernel_size);
    std::copy_n(flat.begin() + a * kk, kk, k.data.begin());
    field.kernels.push_back(std::move(k));
  }
  return field;
}

PsfField uniform_field(const Image& kernel, int image_size, int anchor_stride) {
  if (kernel.rows != kernel.cols || kernel.rows % 2 == 0) {
    throw std::invalid_argument("uniform_field: kernel must be square with odd side");
  }
  PsfField field;
  field.mode = PsfFieldMode::kPerAnchor;
  field.image_size = image_size;
  field.kernel_size = kernel.rows;
  field.anchor_stride = anchor_stride;
  field.anchor_rows = field.anchor_cols = anchors_per_axis(image_size, anchor_stride);
  field.kernels.assign(static_cast<std::size_t>(field.anchor_rows) * field.anchor_cols, kernel);
  return field;
}

}  // namespace turbuforge
