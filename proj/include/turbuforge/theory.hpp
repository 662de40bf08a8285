#pragma once

#include <complex>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "turbuforge/image.hpp"
#include "turbuforge/turbulence.hpp"

namespace turbuforge::theory {

using Complex = std::complex<double>;

/// Seeded distribution over isoplanatic blur kernels (odd, square, centred).
/// Draw i of stream `key` is a pure function of (key, i).
struct KernelFamily {
  std::string name;
  int kernel_size = 1;
  bool non_negative = true;  // false only for deliberately signed test kernels
  std::function<Image(std::uint64_t key, int index)> sample;
  /// E[F h] on an n x n periodic grid, when known without sampling.
  std::function<std::vector<Complex>(int n)> mean_transfer;
  /// E[|F h|^2] on an n x n periodic grid, when known without sampling.
  std::function<std::vector<double>(int n)> mean_power;
};

KernelFamily delta_family();
/// {centred delta, 3 x 3 box}, each with probability 1/2.
KernelFamily two_kernel_family();
/// Isotropic Gaussians with sigma ~ U[sigma_min, sigma_max], renormalised on
/// the support; E[F h] > 0 on the whole grid for sigma_max below n / 4.
KernelFamily gaussian_family(double sigma_min, double sigma_max, int kernel_size);
/// One fixed kernel, drawn every time.
KernelFamily fixed_family(const Image& kernel, std::string name);
/// Real, signed kernel whose n x n spectrum is 1 for |f| <= cutoff (cycles per
/// pixel, radial) and 0 elsewhere.
Image ideal_lowpass_kernel(int n, double cutoff);
/// Exact Zernike PSFs with coefficients ~ N(0, Sigma(D/r0)) over modes 2..M.
KernelFamily zernike_family(const TurbulenceParams& params);
/// Draws h from `base` and returns correction * h (full linear convolution,
/// size base + correction - 1).
KernelFamily convolved_family(const KernelFamily& base, const Image& correction);

struct SpectralMask {
  int size = 0;
  double tau = 0.0;
  int num_kernel_samples = 0;
  std::vector<double> psd;      // E[|F h|^2], n x n, DC at (0, 0)
  std::vector<std::uint8_t> mask;  // psd > tau * max(psd)

  double coverage() const;
};

/// Monte Carlo E[|F h|^2] over `num_samples` draws (num_samples >= 100).
SpectralMask estimate_spectral_mask(const KernelFamily& family, int grid, int num_samples, double tau,
                                    std::uint64_t seed);
/// Mask from the family's mean_power (num_kernel_samples = 0).
SpectralMask analytic_spectral_mask(const KernelFamily& family, int grid, double tau);
/// Radially averaged mask occupancy, bin r = round(|f| * n).
std::vector<double> radial_profile(const SpectralMask& mask);

/// ||S (|Fx| - |Fx~|)|| / ||S |Fx| ||, summed over channels.
double masked_magnitude_error(const Image& x, const Image& x_tilde, const SpectralMask& mask);
/// ||S (F a - F b)|| / ||S F b||: masked complex-spectrum relative L2.
double masked_relative_l2(const Image& a, const Image& b, const SpectralMask& mask);

/// L noiseless circular-blur observations y_i = h_i (*) x.
std::vector<Image> isoplanatic_observations(const Image& x, const KernelFamily& family, int num_frames,
                                            std::uint64_t seed);

enum class OracleMoment { kSecond, kFirst };

struct OracleOptions {
  OracleMoment moment = OracleMoment::kSecond;
  double tau = 1e-3;
  int projection_iters = 200;
  int mc_samples = 20000;  // used only when the family lacks closed forms
  std::uint64_t mc_seed = 0x5eed;
};

struct OracleResult {
  Image estimate;
  SpectralMask mask;
  bool underdetermined = false;  // mask covers < 10% of frequencies
};

/// Second moment: |Fx|^2 = mean |Fy|^2 / E|Fh|^2 on the mask, then phases by
/// alternating masked-magnitude and real-image projections from the frame mean.
/// First moment: Fx = mean Fy / E[Fh] on the mask.
OracleResult isoplanatic_oracle(const std::vector<Image>& observations, const KernelFamily& family,
                                const OracleOptions& options = {});
OracleResult isoplanatic_oracle(const Image& x_true, const KernelFamily& family, int num_frames, std::uint64_t seed,
                                const OracleOptions& options = {});

struct MisspecificationReport {
  double rel_l2_to_corrected = 0.0;  // ||recon - h_c (*) x|| / ||h_c (*) x||
  double rel_l2_to_truth = 0.0;
  double masked_to_corrected = 0.0;
  double masked_to_truth = 0.0;
  bool closer_to_corrected() const { return masked_to_corrected < masked_to_truth; }
};

MisspecificationReport misspecification_check(const Image& x_true, const Image& h_correction, const Image& recon,
                                  const SpectralMask& mask);

/// One JSON-lines record: {"name", "inputs_hash", "metric", "threshold", "pass"}.
struct CheckRecord {
  std::string name;
  std::string inputs_hash;
  double metric = 0.0;
  double threshold = 0.0;
  bool pass = false;
};
void write_jsonl(std::ostream& os, const CheckRecord& record);

}  // namespace turbuforge::theory
