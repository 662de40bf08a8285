#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "turbuforge/autodiff.hpp"
#include "turbuforge/image.hpp"

namespace turbuforge::nn {

using ad::Tensor;

/// Strided conv stack: 4x4 kernels, stride 2, pad 1, leaky ReLU, final linear to
/// one score per frame. No normalization layers; empty widths give a linear
/// discriminator.
struct DiscriminatorSpec {
  int channels = 1;
  int image_size = 32;  // divisible by 2^widths.size()
  std::vector<int> widths{32, 64, 128, 256};
  double slope = 0.2;
};

template <typename T>
class Discriminator {
 public:
  Discriminator(const DiscriminatorSpec& spec, std::uint64_t seed);

  /// frames [B, C, N, N] -> scores [B].
  Tensor<T> forward(const Tensor<T>& frames) const;
  std::vector<Tensor<T>> parameters() const;
  std::vector<std::string> parameter_names() const;
  const DiscriminatorSpec& spec() const { return spec_; }

 private:
  DiscriminatorSpec spec_;
  std::vector<Tensor<T>> weights_;
  std::vector<Tensor<T>> biases_;
  Tensor<T> linear_w_;  // [features, 1]
  Tensor<T> linear_b_;  // [1]
};

enum class GeneratorKind { kPixelGrid, kUntrainedConv };

struct GeneratorSpec {
  GeneratorKind kind = GeneratorKind::kPixelGrid;
  int channels = 1;
  int image_size = 32;
  int latent_channels = 8;       // untrained-conv only
  std::vector<int> widths{16, 32, 64, 128};  // one per encoder level
  double slope = 0.2;
};

/// x = G(z) in [0, 1]^(C x N x N). z is frozen.
template <typename T>
class Generator {
 public:
  Generator(const GeneratorSpec& spec, std::uint64_t seed);

  /// Sets the pixel grid so that G(z) == init (clamped into the open unit
  /// interval). Untrained-conv generators ignore it.
  void initialize_from(const Image& init);

  /// [C, N, N]
  Tensor<T> forward() const;
  std::vector<Tensor<T>> parameters() const;
  std::vector<std::string> parameter_names() const;
  const GeneratorSpec& spec() const { return spec_; }
  std::size_t num_parameters() const;

 private:
  GeneratorSpec spec_;
  Tensor<T> z_;
  std::vector<Tensor<T>> params_;
  std::vector<std::string> names_;
};

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamOptions options);

  void step(const ad::GradientMap<T>& grads);
  void step(const std::vector<Tensor<T>>& grads);
  long steps() const { return t_; }
  const AdamOptions& options() const { return options_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long t_ = 0;
};

/// Image [C][N][N] <-> tensor [C, N, N].
template <typename T>
Tensor<T> image_to_tensor(const Image& img);
template <typename T>
Image tensor_to_image(const Tensor<T>& t);
/// Stacks frames into [B, C, N, N].
template <typename T>
Tensor<T> frames_to_tensor(const std::vector<Image>& frames, const std::vector<int>& indices);

}  // namespace turbuforge::nn
