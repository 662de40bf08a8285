#include "turbuforge/theory.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "json.hpp"

#include "turbuforge/fft.hpp"
#include "turbuforge/psf.hpp"
#include "turbuforge/random.hpp"

namespace turbuforge::theory {

namespace {

Image centred_delta(int k) {
  Image d = Image::square(k);
  d(k / 2, k / 2) = 1.0;
  return d;
}

Image box_kernel(int k) { return Image::square(k, 1.0 / (k * k)); }

Image gaussian_kernel(double sigma, int k) {
  Image g = Image::square(k);
  const int r = k / 2;
  double s = 0.0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) s += g(i, j) = std::exp(-((i - r) * (i - r) + (j - r) * (j - r)) / (2.0 * sigma * sigma));
  for (double& v : g.data) v /= s;
  return g;
}

std::vector<double> power_of(const std::vector<Complex>& f) {
  std::vector<double> p(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) p[i] = std::norm(f[i]);
  return p;
}

// Composite Simpson average of f(sigma) over [a, b]; f returns a spectrum.
template <typename V, typename F>
std::vector<V> average_over_sigma(double a, double b, F&& f) {
  constexpr int kIntervals = 128;
  std::vector<V> acc;
  for (int i = 0; i <= kIntervals; ++i) {
    const double w = (i == 0 || i == kIntervals) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    const auto v = f(a + (b - a) * i / kIntervals);
    if (acc.empty()) acc.assign(v.size(), V(0));
    for (std::size_t j = 0; j < v.size(); ++j) acc[j] += w * v[j];
  }
  for (auto& v : acc) v /= 3.0 * kIntervals;
  return acc;
}

void require_grid(const KernelFamily& family, int n) {
  if (family.kernel_size > n) {
    throw std::invalid_argument("kernel family '" + family.name + "' does not fit on a " + std::to_string(n) + " grid");
  }
}

SpectralMask mask_from_psd(std::vector<double> psd, int n, double tau, int samples) {
  SpectralMask m;
  m.size = n;
  m.tau = tau;
  m.num_kernel_samples = samples;
  const double peak = *std::max_element(psd.begin(), psd.end());
  m.mask.resize(psd.size());
  for (std::size_t i = 0; i < psd.size(); ++i) m.mask[i] = psd[i] > tau * peak ? 1 : 0;
  m.psd = std::move(psd);
  return m;
}

std::vector<double> monte_carlo_power(const KernelFamily& family, int n, int samples, std::uint64_t seed) {
  std::vector<double> acc(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < samples; ++i) {
    const auto p = power_of(fft::transfer_function(family.sample(seed, i), n, n));
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += p[j];
  }
  for (double& v : acc) v /= samples;
  return acc;
}

std::vector<Complex> monte_carlo_transfer(const KernelFamily& family, int n, int samples, std::uint64_t seed) {
  std::vector<Complex> acc(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < samples; ++i) {
    const auto t = fft::transfer_function(family.sample(seed, i), n, n);
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += t[j];
  }
  for (auto& v : acc) v /= static_cast<double>(samples);
  return acc;
}

void require_single_square(const Image& x, const char* who) {
  if (x.channels != 1 || x.rows != x.cols) throw std::invalid_argument(std::string(who) + ": expects a square single-channel image");
}

}  // namespace

// ---- families ----------------------------------------------------------------

KernelFamily delta_family() {
  KernelFamily f;
  f.name = "delta";
  f.kernel_size = 1;
  f.sample = [](std::uint64_t, int) { return centred_delta(1); };
  f.mean_transfer = [](int n) { return std::vector<Complex>(static_cast<std::size_t>(n) * n, 1.0); };
  f.mean_power = [](int n) { return std::vector<double>(static_cast<std::size_t>(n) * n, 1.0); };
  return f;
}

KernelFamily two_kernel_family() {
  KernelFamily f;
  f.name = "delta_or_box3";
  f.kernel_size = 3;
  f.sample = [](std::uint64_t key, int i) {
    return CounterRng::uniform(key, static_cast<std::uint64_t>(i)) < 0.5 ? centred_delta(3) : box_kernel(3);
  };
  f.mean_transfer = [](int n) {
    auto b = fft::transfer_function(box_kernel(3), n, n);
    for (auto& v : b) v = 0.5 * (1.0 + v);
    return b;
  };
  f.mean_power = [](int n) {
    auto p = power_of(fft::transfer_function(box_kernel(3), n, n));
    for (auto& v : p) v = 0.5 * (1.0 + v);
    return p;
  };
  return f;
}

KernelFamily gaussian_family(double sigma_min, double sigma_max, int kernel_size) {
  if (!(sigma_min > 0.0) || sigma_max < sigma_min || kernel_size < 1 || kernel_size % 2 == 0) {
    throw std::invalid_argument("gaussian_family: need 0 < sigma_min <= sigma_max and an odd kernel size");
  }
  KernelFamily f;
  f.name = "gaussian";
  f.kernel_size = kernel_size;
  f.sample = [=](std::uint64_t key, int i) {
    const double u = CounterRng::uniform(key, static_cast<std::uint64_t>(i));
    return gaussian_kernel(sigma_min + (sigma_max - sigma_min) * u, kernel_size);
  };
  f.mean_transfer = [=](int n) {
    return average_over_sigma<Complex>(sigma_min, sigma_max, [&](double s) {
      return fft::transfer_function(gaussian_kernel(s, kernel_size), n, n);
    });
  };
  f.mean_power = [=](int n) {
    return average_over_sigma<double>(sigma_min, sigma_max, [&](double s) {
      return power_of(fft::transfer_function(gaussian_kernel(s, kernel_size), n, n));
    });
  };
  return f;
}

KernelFamily fixed_family(const Image& kernel, std::string name) {
  if (kernel.rows != kernel.cols || kernel.rows % 2 == 0 || kernel.channels != 1) {
    throw std::invalid_argument("fixed_family: kernel must be square, odd-sized and single-channel");
  }
  KernelFamily f;
  f.name = std::move(name);
  f.kernel_size = kernel.rows;
  f.non_negative = kernel.min() >= 0.0;
  f.sample = [kernel](std::uint64_t, int) { return kernel; };
  f.mean_transfer = [kernel](int n) { return fft::transfer_function(kernel, n, n); };
  f.mean_power = [kernel](int n) { return power_of(fft::transfer_function(kernel, n, n)); };
  return f;
}

Image ideal_lowpass_kernel(int n, double cutoff) {
  if (n < 3 || n % 2 == 0) throw std::invalid_argument("ideal_lowpass_kernel: n must be odd and >= 3");
  std::vector<Complex> spec(static_cast<std::size_t>(n) * n, 0.0);
  for (int u = 0; u < n; ++u)
    for (int v = 0; v < n; ++v) {
      const double fu = static_cast<double>(u <= n / 2 ? u : u - n) / n;
      const double fv = static_cast<double>(v <= n / 2 ? v : v - n) / n;
      if (std::hypot(fu, fv) <= cutoff) spec[static_cast<std::size_t>(u) * n + v] = 1.0;
    }
  const auto h0 = fft::inverse_real(spec, n, n);
  // Move the (0, 0) origin to the kernel centre.
  Image k = Image::square(n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) k(wrap_index(r + n / 2, n), wrap_index(c + n / 2, n)) = h0[static_cast<std::size_t>(r) * n + c];
  return k;
}

KernelFamily zernike_family(const TurbulenceParams& params) {
  params.validate();
  auto basis = std::make_shared<ZernikeBasis>(build_zernike_basis(params.num_zernike, params.kernel_size_px));
  const auto cov = noll_covariance(params.num_zernike, params.d_over_r0());
  const Eigen::MatrixXd chol = cov.cholesky_factor;
  KernelFamily f;
  f.name = "zernike";
  f.kernel_size = params.kernel_size_px;
  f.sample = [basis, chol](std::uint64_t key, int i) {
    const std::uint64_t k = derive_key(key, static_cast<std::uint64_t>(i));
    Eigen::VectorXd z(chol.rows());
    for (int j = 0; j < z.size(); ++j) z(j) = CounterRng::normal(k, static_cast<std::uint64_t>(j));
    const Eigen::VectorXd a = chol * z;
    return exact_psf(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())), *basis).kernel;
  };
  return f;
}

KernelFamily convolved_family(const KernelFamily& base, const Image& correction) {
  if (correction.rows != correction.cols || correction.rows % 2 == 0) {
    throw std::invalid_argument("convolved_family: correction kernel must be square and odd-sized");
  }
  KernelFamily f;
  f.name = base.name + "*correction";
  f.kernel_size = base.kernel_size + correction.rows - 1;
  f.non_negative = base.non_negative && correction.min() >= 0.0;
  const int kb = base.kernel_size, kc = correction.rows, ks = f.kernel_size;
  auto sampler = base.sample;
  f.sample = [=](std::uint64_t key, int i) {
    const Image h = sampler(key, i);
    const auto full = fft::convolve_full(h.data, kb, kb, correction.data, kc, kc);
    Image out = Image::square(ks);
    std::copy(full.begin(), full.end(), out.data.begin());
    return out;
  };
  if (base.mean_transfer) {
    auto mt = base.mean_transfer;
    f.mean_transfer = [mt, correction](int n) {
      auto t = mt(n);
      const auto c = fft::transfer_function(correction, n, n);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] *= c[i];
      return t;
    };
  }
  if (base.mean_power) {
    auto mp = base.mean_power;
    f.mean_power = [mp, correction](int n) {
      auto p = mp(n);
      const auto c = power_of(fft::transfer_function(correction, n, n));
      for (std::size_t i = 0; i < p.size(); ++i) p[i] *= c[i];
      return p;
    };
  }
  return f;
}

// ---- masks -------------------------------------------------------------------

double SpectralMask::coverage() const {
  if (mask.empty()) return 0.0;
  return static_cast<double>(std::count(mask.begin(), mask.end(), 1)) / static_cast<double>(mask.size());
}

SpectralMask estimate_spectral_mask(const KernelFamily& family, int grid, int num_samples, double tau,
                                    std::uint64_t seed) {
  if (num_samples < 100) throw std::invalid_argument("estimate_spectral_mask: need at least 100 kernel draws");
  require_grid(family, grid);
  return mask_from_psd(monte_carlo_power(family, grid, num_samples, seed), grid, tau, num_samples);
}

SpectralMask analytic_spectral_mask(const KernelFamily& family, int grid, double tau) {
  if (!family.mean_power) throw std::invalid_argument("family '" + family.name + "' has no closed-form power spectrum");
  require_grid(family, grid);
  return mask_from_psd(family.mean_power(grid), grid, tau, 0);
}

std::vector<double> radial_profile(const SpectralMask& mask) {
  const int n = mask.size;
  std::vector<double> sum(n, 0.0), count(n, 0.0);
  for (int u = 0; u < n; ++u)
    for (int v = 0; v < n; ++v) {
      const double fu = u <= n / 2 ? u : u - n, fv = v <= n / 2 ? v : v - n;
      const int bin = static_cast<int>(std::lround(std::hypot(fu, fv)));
      if (bin >= n) continue;
      sum[bin] += mask.mask[static_cast<std::size_t>(u) * n + v];
      count[bin] += 1.0;
    }
  std::vector<double> out;
  for (int b = 0; b < n && count[b] > 0; ++b) out.push_back(sum[b] / count[b]);
  return out;
}

double masked_magnitude_error(const Image& x, const Image& x_tilde, const SpectralMask& mask) {
  if (!x.same_shape(x_tilde) || x.rows != mask.size || x.cols != mask.size) {
    throw std::invalid_argument("masked_magnitude_error: image and mask shapes differ");
  }
  double num = 0.0, den = 0.0;
  for (int ch = 0; ch < x.channels; ++ch) {
    const auto fx = fft::forward_real(x.plane(ch), x.rows, x.cols);
    const auto ft = fft::forward_real(x_tilde.plane(ch), x.rows, x.cols);
    for (std::size_t i = 0; i < fx.size(); ++i) {
      if (!mask.mask[i]) continue;
      const double d = std::abs(fx[i]) - std::abs(ft[i]);
      num += d * d;
      den += std::norm(fx[i]);
    }
  }
  if (den == 0.0) throw std::domain_error("masked_magnitude_error: masked reference spectrum is zero");
  return std::sqrt(num / den);
}

double masked_relative_l2(const Image& a, const Image& b, const SpectralMask& mask) {
  if (!a.same_shape(b) || a.rows != mask.size || a.cols != mask.size) {
    throw std::invalid_argument("masked_relative_l2: image and mask shapes differ");
  }
  double num = 0.0, den = 0.0;
  for (int ch = 0; ch < a.channels; ++ch) {
    const auto fa = fft::forward_real(a.plane(ch), a.rows, a.cols);
    const auto fb = fft::forward_real(b.plane(ch), b.rows, b.cols);
    for (std::size_t i = 0; i < fa.size(); ++i) {
      if (!mask.mask[i]) continue;
      num += std::norm(fa[i] - fb[i]);
      den += std::norm(fb[i]);
    }
  }
  if (den == 0.0) throw std::domain_error("masked_relative_l2: masked reference spectrum is zero");
  return std::sqrt(num / den);
}

// ---- oracle ------------------------------------------------------------------

std::vector<Image> isoplanatic_observations(const Image& x, const KernelFamily& family, int num_frames,
                                            std::uint64_t seed) {
  require_single_square(x, "isoplanatic_observations");
  require_grid(family, x.rows);
  if (num_frames < 1) throw std::invalid_argument("isoplanatic_observations: need at least one frame");
  std::vector<Image> out;
  out.reserve(static_cast<std::size_t>(num_frames));
  for (int i = 0; i < num_frames; ++i) out.push_back(fft::circular_convolve(x, family.sample(seed, i)));
  return out;
}

OracleResult isoplanatic_oracle(const std::vector<Image>& observations, const KernelFamily& family,
                                const OracleOptions& options) {
  if (observations.empty()) throw std::invalid_argument("isoplanatic_oracle: no observations");
  const Image& first = observations[0];
  require_single_square(first, "isoplanatic_oracle");
  const int n = first.rows;
  require_grid(family, n);
  const std::size_t bins = static_cast<std::size_t>(n) * n;
  const double inv_l = 1.0 / static_cast<double>(observations.size());

  Image mean = Image::square(n);
  std::vector<Complex> mean_f(bins, 0.0);
  std::vector<double> mean_p(bins, 0.0);
  for (const auto& y : observations) {
    if (!y.same_shape(first)) throw std::invalid_argument("isoplanatic_oracle: observation shape mismatch");
    const auto fy = fft::forward_real(y.data, n, n);
    for (std::size_t i = 0; i < bins; ++i) {
      mean.data[i] += y.data[i] * inv_l;
      mean_f[i] += fy[i] * inv_l;
      mean_p[i] += std::norm(fy[i]) * inv_l;
    }
  }

  OracleResult result;
  if (options.moment == OracleMoment::kFirst) {
    const auto eh = family.mean_transfer ? family.mean_transfer(n)
                                         : monte_carlo_transfer(family, n, options.mc_samples, options.mc_seed);
    result.mask = mask_from_psd(power_of(eh), n, options.tau, family.mean_transfer ? 0 : options.mc_samples);
    auto fx = fft::forward_real(mean.data, n, n);
    for (std::size_t i = 0; i < bins; ++i)
      if (result.mask.mask[i]) fx[i] = mean_f[i] / eh[i];
    result.estimate = Image::square(n);
    result.estimate.data = fft::inverse_real(fx, n, n);
  } else {
    const auto eh2 = family.mean_power ? family.mean_power(n)
                                       : monte_carlo_power(family, n, options.mc_samples, options.mc_seed);
    result.mask = mask_from_psd(eh2, n, options.tau, family.mean_power ? 0 : options.mc_samples);
    std::vector<double> magnitude(bins, 0.0);
    for (std::size_t i = 0; i < bins; ++i)
      if (result.mask.mask[i]) magnitude[i] = std::sqrt(std::max(mean_p[i] / eh2[i], 0.0));
    auto project = [&](std::vector<Complex>& f) {
      for (std::size_t i = 0; i < bins; ++i) {
        if (!result.mask.mask[i]) continue;
        const double a = std::abs(f[i]);
        f[i] = a > 0.0 ? f[i] * (magnitude[i] / a) : Complex(magnitude[i], 0.0);
      }
    };
    std::vector<double> x = mean.data;
    for (int it = 0; it < options.projection_iters; ++it) {
      auto f = fft::forward_real(x, n, n);
      project(f);
      x = fft::inverse_real(f, n, n);
      for (double& v : x) v = std::clamp(v, 0.0, 1.0);
    }
    // Final magnitude projection without the range constraint: the masked
    // magnitudes of the estimate equal the moment estimate.
    auto f = fft::forward_real(x, n, n);
    project(f);
    result.estimate = Image::square(n);
    result.estimate.data = fft::inverse_real(f, n, n);
  }
  result.underdetermined = result.mask.coverage() < 0.1;
  return result;
}

OracleResult isoplanatic_oracle(const Image& x_true, const KernelFamily& family, int num_frames, std::uint64_t seed,
                                const OracleOptions& options) {
  return isoplanatic_oracle(isoplanatic_observations(x_true, family, num_frames, seed), family, options);
}

MisspecificationReport misspecification_check(const Image& x_true, const Image& h_correction, const Image& recon,
                                  const SpectralMask& mask) {
  const Image corrected = fft::circular_convolve(x_true, h_correction);
  MisspecificationReport r;
  r.rel_l2_to_corrected = relative_l2(recon, corrected);
  r.rel_l2_to_truth = relative_l2(recon, x_true);
  r.masked_to_corrected = masked_relative_l2(recon, corrected, mask);
  r.masked_to_truth = masked_relative_l2(recon, x_true, mask);
  return r;
}

void write_jsonl(std::ostream& os, const CheckRecord& record) {
  nlohmann::json j;
  j["name"] = record.name;
  j["inputs_hash"] = record.inputs_hash;
  j["metric"] = record.metric;
  j["threshold"] = record.threshold;
  j["pass"] = record.pass;
  os << j.dump() << '\n';
}

}  // namespace turbuforge::theory
