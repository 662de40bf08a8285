#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "turbuforge/nn.hpp"
#include "turbuforge/psf.hpp"
#include "turbuforge/render.hpp"
#include "turbuforge/turbulence.hpp"

namespace turbuforge::recon {

using ad::Tensor;

// ---- losses on plain scores --------------------------------------------------

struct DiscriminatorLoss {
  double real = 0.0;
  double fake = 0.0;
  double mix = 0.0;
  double total = 0.0;
};

/// grad_norms[i] = ||grad_b D(b_i)||. All three lists share one length K.
DiscriminatorLoss discriminator_loss(const std::vector<double>& real_scores, const std::vector<double>& fake_scores,
                                     const std::vector<double>& grad_norms, double p_d, double p_r);
double generator_loss(const std::vector<double>& fake_scores);

// ---- graph losses ------------------------------------------------------------

template <typename T>
struct DiscriminatorLossTerms {
  Tensor<T> real, fake, mix, total;
};

/// Builds L_D with the gradient penalty evaluated by double backward through
/// the discriminator at b = alpha * fake + (1 - alpha) * real, alpha[i] per frame.
template <typename T>
DiscriminatorLossTerms<T> discriminator_loss_graph(const nn::Discriminator<T>& disc, const Tensor<T>& real,
                                                   const Tensor<T>& fake, const std::vector<double>& alpha, double p_d,
                                                   double p_r);

// ---- fake-frame renderers ----------------------------------------------------

/// Renders `batch` fake observations of a scene [C, N, N] -> [B, C, N, N].
/// log_d is a scalar tensor holding log(D/r0); renderers that do not depend on
/// turbulence strength ignore it. Frame b of call `key` is a pure function of (key, b).
template <typename T>
class FrameRenderer {
 public:
  virtual ~FrameRenderer() = default;
  virtual Tensor<T> render(const Tensor<T>& scene, const Tensor<T>& log_d, int batch, std::uint64_t key) const = 0;
};

/// Spatially varying turbulence: per-tile coefficients alpha = d^(5/6) chol(Sigma(1)) xi
/// with a fresh correlated xi per frame, surrogate kernels, tiled blur.
template <typename T>
class TurbulenceRenderer final : public FrameRenderer<T> {
 public:
  TurbulenceRenderer(const TurbulenceParams& params, std::shared_ptr<const PsfBasis> basis, int tile_px = 0,
                     int overlap_px = -1, ClampGradient clamp = ClampGradient::kStraightThrough);
  Tensor<T> render(const Tensor<T>& scene, const Tensor<T>& log_d, int batch, std::uint64_t key) const override;

  /// Unit-strength coefficients [batch * tiles, M - 1] for call `key`.
  std::vector<double> unit_coefficients(int batch, std::uint64_t key) const;
  const TilePlan& plan() const { return *plan_; }

 private:
  TurbulenceParams params_;
  std::shared_ptr<const PsfBasis> basis_;
  std::shared_ptr<const TilePlan> plan_;
  Eigen::MatrixXd chol_unit_;
  ClampGradient clamp_;
};

/// Spatially invariant blur with kernels drawn from a sampler; circular boundary.
template <typename T>
class IsoplanaticRenderer final : public FrameRenderer<T> {
 public:
  using Sampler = std::function<Image(std::uint64_t key, int frame)>;
  explicit IsoplanaticRenderer(Sampler sampler) : sampler_(std::move(sampler)) {}
  Tensor<T> render(const Tensor<T>& scene, const Tensor<T>& log_d, int batch, std::uint64_t key) const override;

 private:
  Sampler sampler_;
};

// ---- training ----------------------------------------------------------------

struct ReconConfig {
  int batch = 32;
  double p_d = 0.001;
  double p_r = 10.0;
  long warmup_iters = 5000;
  int d_steps_per_g = 6;
  long total_iters = 100000;  // optimizer steps of either network, warmup included
  nn::AdamOptions adam_gen{1e-4, 0.5, 0.9, 1e-8};
  nn::AdamOptions adam_disc{1e-4, 0.5, 0.9, 1e-8};
  double lr_log_d = 1e-3;
  bool learn_d_over_r0 = false;
  double d_over_r0_init = 1.0;
  long log_every = 50;
  long checkpoint_every = 0;  // 0 disables
  std::filesystem::path checkpoint_dir;

  /// Throws std::invalid_argument naming the first violated constraint.
  void validate() const;
  /// Reference schedule scaled by (N / 128)^2.
  static ReconConfig desk_scaled(int image_size);
};

struct LogRow {
  long iter = 0;
  DiscriminatorLoss d;
  double g = 0.0;
  double d_over_r0 = 0.0;
  double psnr = 0.0;  // NaN without a reference
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Pixelwise mean of the stack clamped to [0, 1].
Image init_scene(const FrameStack& stack);

template <typename T>
class Trainer {
 public:
  Trainer(const FrameStack& stack, const nn::GeneratorSpec& gen, const nn::DiscriminatorSpec& disc,
          const ReconConfig& cfg, std::shared_ptr<const FrameRenderer<T>> renderer, std::uint64_t seed,
          std::optional<Image> reference = std::nullopt);

  /// Runs optimizer steps until `iteration() == until` (capped at total_iters).
  void run(long until);
  void run() { run(config_.total_iters); }
  /// One optimizer step: a discriminator step during warmup and in d_steps_per_g
  /// of every d_steps_per_g + 1 later steps, otherwise a generator step.
  void step();

  Image scene() const;
  long iteration() const { return iter_; }
  double d_over_r0() const;
  const std::vector<LogRow>& history() const { return history_; }
  const nn::Generator<T>& generator() const { return gen_; }
  const nn::Discriminator<T>& discriminator() const { return disc_; }
  const ReconConfig& config() const { return config_; }
  bool is_generator_step(long iter) const;

  void write_csv(const std::filesystem::path& path) const;
  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

 private:
  LogRow discriminator_step();
  LogRow generator_step();
  void record(LogRow row);

  const FrameStack& stack_;
  ReconConfig config_;
  std::shared_ptr<const FrameRenderer<T>> renderer_;
  std::uint64_t seed_;
  std::optional<Image> reference_;
  nn::Generator<T> gen_;
  nn::Discriminator<T> disc_;
  Tensor<T> log_d_;
  nn::Adam<T> adam_gen_;
  nn::Adam<T> adam_disc_;
  nn::Adam<T> adam_log_d_;
  long iter_ = 0;
  DiscriminatorLoss last_d_;
  double last_g_ = 0.0;
  std::vector<LogRow> history_;
};

/// Formats a real with 6 significant digits ("nan"/"inf" for non-finite values).
std::string csv_real(double v);

}  // namespace turbuforge::recon
