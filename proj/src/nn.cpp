#include "turbuforge/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "turbuforge/random.hpp"

namespace turbuforge::nn {

namespace {

template <typename T>
Tensor<T> uniform_param(const ad::Shape& shape, double bound, Rng& rng) {
  std::vector<T> v(ad::numel_of(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::parameter(shape, std::move(v));
}

// Conv weights and bias drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> conv_param(int co, int ci, int k, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(ci * k * k));
  auto w = uniform_param<T>({co, ci, k, k}, bound, rng);
  auto b = uniform_param<T>({co}, bound, rng);
  return {w, b};
}

template <typename T>
Tensor<T> conv_layer(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, ad::ConvGeometry g) {
  return ad::add_bias(ad::conv2d(x, w, g), b, 1);
}

}  // namespace

// ---- discriminator ---------------------------------------------------------

template <typename T>
Discriminator<T>::Discriminator(const DiscriminatorSpec& spec, std::uint64_t seed) : spec_(spec) {
  const int levels = static_cast<int>(spec.widths.size());
  if (spec.channels < 1 || spec.image_size % (1 << levels) != 0) {
    throw std::invalid_argument("Discriminator: image size must be divisible by 2^levels");
  }
  Rng rng(derive_key(seed, 0x4449534352));
  int ci = spec.channels;
  for (int co : spec.widths) {
    if (co < 1) throw std::invalid_argument("Discriminator: widths must be positive");
    auto [w, b] = conv_param<T>(co, ci, 4, rng);
    weights_.push_back(w);
    biases_.push_back(b);
    ci = co;
  }
  const int side = spec.image_size >> levels;
  const int features = ci * side * side;
  const double bound = 1.0 / std::sqrt(static_cast<double>(features));
  linear_w_ = uniform_param<T>({features, 1}, bound, rng);
  linear_b_ = uniform_param<T>({1}, bound, rng);
}

template <typename T>
Tensor<T> Discriminator<T>::forward(const Tensor<T>& frames) const {
  if (frames.rank() != 4 || frames.dim(1) != spec_.channels || frames.dim(2) != spec_.image_size ||
      frames.dim(3) != spec_.image_size) {
    throw std::invalid_argument("Discriminator: expected [B, " + std::to_string(spec_.channels) + ", " +
                                std::to_string(spec_.image_size) + ", " + std::to_string(spec_.image_size) +
                                "], got " + ad::shape_string(frames.shape()));
  }
  Tensor<T> h = frames;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    h = ad::leaky_relu(conv_layer(h, weights_[l], biases_[l], {2, 1}), static_cast<T>(spec_.slope));
  }
  const int batch = frames.dim(0);
  const int features = linear_w_.dim(0);
  auto flat = ad::reshape(h, {batch, features});
  auto scores = ad::add_bias(ad::matmul(flat, linear_w_), linear_b_, 1);
  return ad::reshape(scores, {batch});
}

template <typename T>
std::vector<Tensor<T>> Discriminator<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(weights_[l]);
    out.push_back(biases_[l]);
  }
  out.push_back(linear_w_);
  out.push_back(linear_b_);
  return out;
}

template <typename T>
std::vector<std::string> Discriminator<T>::parameter_names() const {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back("disc.conv" + std::to_string(l) + ".weight");
    out.push_back("disc.conv" + std::to_string(l) + ".bias");
  }
  out.push_back("disc.linear.weight");
  out.push_back("disc.linear.bias");
  return out;
}

// ---- generator -------------------------------------------------------------

// Parameter layout for the untrained-conv generator, per level l (0 = finest):
//   down_l (3x3 stride 2), enc_l (3x3), dec_l (3x3 after upsample + skip concat);
// then a 1x1 output conv. Weights and biases interleave in that order.
template <typename T>
Generator<T>::Generator(const GeneratorSpec& spec, std::uint64_t seed) : spec_(spec) {
  if (spec.channels < 1 || spec.image_size < 1) throw std::invalid_argument("Generator: bad shape");
  Rng rng(derive_key(seed, 0x47454e));
  const int n = spec.image_size;
  if (spec.kind == GeneratorKind::kPixelGrid) {
    params_.push_back(Tensor<T>::parameter({spec.channels, n, n}, std::vector<T>(ad::numel_of({spec.channels, n, n}), T(0))));
    names_.push_back("gen.pixels");
    return;
  }
  const int levels = static_cast<int>(spec.widths.size());
  if (levels < 1 || n % (1 << levels) != 0 || spec.latent_channels < 1) {
    throw std::invalid_argument("Generator: image size must be divisible by 2^levels");
  }
  std::vector<T> z(ad::numel_of({1, spec.latent_channels, n, n}));
  for (auto& v : z) v = static_cast<T>(0.1 * rng.uniform());
  z_ = Tensor<T>::constant({1, spec.latent_channels, n, n}, std::move(z));

  auto add = [&](const std::string& name, int co, int ci, int k) {
    auto [w, b] = conv_param<T>(co, ci, k, rng);
    params_.push_back(w);
    params_.push_back(b);
    names_.push_back("gen." + name + ".weight");
    names_.push_back("gen." + name + ".bias");
  };
  int ci = spec.latent_channels;
  std::vector<int> skip_channels;
  for (int l = 0; l < levels; ++l) {
    skip_channels.push_back(ci);
    add("down" + std::to_string(l), spec.widths[l], ci, 3);
    add("enc" + std::to_string(l), spec.widths[l], spec.widths[l], 3);
    ci = spec.widths[l];
  }
  for (int l = levels - 1; l >= 0; --l) {
    const int co = spec.widths[std::max(l - 1, 0)];
    add("dec" + std::to_string(l), co, ci + skip_channels[l], 3);
    ci = co;
  }
  add("out", spec.channels, ci, 1);
}

template <typename T>
void Generator<T>::initialize_from(const Image& init) {
  if (spec_.kind != GeneratorKind::kPixelGrid) return;
  if (init.rows != spec_.image_size || init.cols != spec_.image_size || init.channels != spec_.channels) {
    throw std::invalid_argument("Generator::initialize_from: shape mismatch");
  }
  std::vector<T> logits(init.size());
  for (std::size_t i = 0; i < init.size(); ++i) {
    const double p = std::clamp(init.data[i], 1e-3, 1.0 - 1e-3);
    logits[i] = static_cast<T>(std::log(p / (1.0 - p)));
  }
  params_[0].assign(std::move(logits));
}

template <typename T>
Tensor<T> Generator<T>::forward() const {
  const int n = spec_.image_size;
  if (spec_.kind == GeneratorKind::kPixelGrid) return ad::sigmoid(params_[0]);

  const int levels = static_cast<int>(spec_.widths.size());
  const T slope = static_cast<T>(spec_.slope);
  std::size_t p = 0;
  auto layer = [&](const Tensor<T>& x, ad::ConvGeometry g) {
    auto y = conv_layer(x, params_[p], params_[p + 1], g);
    p += 2;
    return y;
  };
  std::vector<Tensor<T>> skips;
  Tensor<T> h = z_;
  for (int l = 0; l < levels; ++l) {
    skips.push_back(h);
    h = ad::leaky_relu(layer(h, {2, 1}), slope);
    h = ad::leaky_relu(layer(h, {1, 1}), slope);
  }
  for (int l = levels - 1; l >= 0; --l) {
    h = ad::concat_channels(ad::upsample2x(h), skips[l]);
    h = ad::leaky_relu(layer(h, {1, 1}), slope);
  }
  h = ad::sigmoid(layer(h, {1, 0}));
  return ad::reshape(h, {spec_.channels, n, n});
}

template <typename T>
std::vector<Tensor<T>> Generator<T>::parameters() const {
  return params_;
}

template <typename T>
std::vector<std::string> Generator<T>::parameter_names() const {
  return names_;
}

template <typename T>
std::size_t Generator<T>::num_parameters() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

// ---- Adam ------------------------------------------------------------------

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

template <typename T>
void Adam<T>::step(const ad::GradientMap<T>& grads) {
  std::vector<Tensor<T>> g;
  g.reserve(params_.size());
  for (const auto& p : params_) g.push_back(grads.of(p));
  step(g);
}

template <typename T>
void Adam<T>::step(const std::vector<Tensor<T>>& grads) {
  if (grads.size() != params_.size()) throw std::invalid_argument("Adam::step: gradient count mismatch");
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& g = grads[i].values();
    if (g.size() != params_[i].numel()) throw std::invalid_argument("Adam::step: gradient shape mismatch");
    std::vector<T> next = params_[i].values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < next.size(); ++j) {
      const double gj = g[j];
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      const double update = options_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + options_.eps);
      next[j] = static_cast<T>(static_cast<double>(next[j]) - update);
    }
    params_[i].assign(std::move(next));
  }
}

// ---- conversions -----------------------------------------------------------

template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
  if (img.rows != img.cols) throw std::invalid_argument("image_to_tensor: image must be square");
  return Tensor<T>::constant({img.channels, img.rows, img.cols}, std::vector<T>(img.data.begin(), img.data.end()));
}

template <typename T>
Image tensor_to_image(const Tensor<T>& t) {
  if (t.rank() != 3) throw std::invalid_argument("tensor_to_image: expected [C, N, N]");
  Image img(t.dim(1), t.dim(2), t.dim(0));
  std::copy(t.values().begin(), t.values().end(), img.data.begin());
  return img;
}

template <typename T>
Tensor<T> frames_to_tensor(const std::vector<Image>& frames, const std::vector<int>& indices) {
  if (indices.empty()) throw std::invalid_argument("frames_to_tensor: no frames selected");
  const Image& first = frames.at(static_cast<std::size_t>(indices[0]));
  std::vector<T> v;
  v.reserve(first.size() * indices.size());
  for (int i : indices) {
    const Image& f = frames.at(static_cast<std::size_t>(i));
    if (!f.same_shape(first)) throw std::invalid_argument("frames_to_tensor: frame shape mismatch");
    v.insert(v.end(), f.data.begin(), f.data.end());
  }
  return Tensor<T>::constant({static_cast<int>(indices.size()), first.channels, first.rows, first.cols}, std::move(v));
}

template class Discriminator<float>;
template class Discriminator<double>;
template class Generator<float>;
template class Generator<double>;
template class Adam<float>;
template class Adam<double>;
template Tensor<float> image_to_tensor<float>(const Image&);
template Tensor<double> image_to_tensor<double>(const Image&);
template Image tensor_to_image<float>(const Tensor<float>&);
template Image tensor_to_image<double>(const Tensor<double>&);
template Tensor<float> frames_to_tensor<float>(const std::vector<Image>&, const std::vector<int>&);
template Tensor<double> frames_to_tensor<double>(const std::vector<Image>&, const std::vector<int>&);

}  // namespace turbuforge::nn
