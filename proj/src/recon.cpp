#include "turbuforge/recon.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "turbuforge/binary_io.hpp"
#include "turbuforge/random.hpp"
#include "turbuforge/train_ops.hpp"

namespace turbuforge::recon {

// ---- scalar losses ---------------------------------------------------------

DiscriminatorLoss discriminator_loss(const std::vector<double>& real_scores, const std::vector<double>& fake_scores,
                                     const std::vector<double>& grad_norms, double p_d, double p_r) {
  const std::size_t k = real_scores.size();
  if (k == 0 || fake_scores.size() != k || grad_norms.size() != k) {
    throw std::invalid_argument("discriminator_loss: real, fake and penalty lists must share one non-zero length");
  }
  DiscriminatorLoss out;
  double sq = 0.0, lin = 0.0, fake = 0.0, pen = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    sq += real_scores[i] * real_scores[i];
    lin += real_scores[i];
    fake += fake_scores[i];
    pen += (grad_norms[i] - 1.0) * (grad_norms[i] - 1.0);
  }
  const double inv = 1.0 / static_cast<double>(k);
  out.real = p_d * sq * inv - lin * inv;
  out.fake = fake * inv;
  out.mix = p_r * pen * inv;
  out.total = out.real + out.fake + out.mix;
  return out;
}

double generator_loss(const std::vector<double>& fake_scores) {
  if (fake_scores.empty()) throw std::invalid_argument("generator_loss: no scores");
  double s = 0.0;
  for (double v : fake_scores) s += v;
  return -s / static_cast<double>(fake_scores.size());
}

template <typename T>
DiscriminatorLossTerms<T> discriminator_loss_graph(const nn::Discriminator<T>& disc, const Tensor<T>& real,
                                                   const Tensor<T>& fake, const std::vector<double>& alpha, double p_d,
                                                   double p_r) {
  if (real.shape() != fake.shape() || real.rank() != 4 || alpha.size() != static_cast<std::size_t>(real.dim(0))) {
    throw std::invalid_argument("discriminator_loss_graph: real, fake and alpha must agree on batch and shape");
  }
  const std::size_t per = real.numel() / alpha.size();
  std::vector<T> mixed(real.numel());
  for (std::size_t i = 0; i < mixed.size(); ++i) {
    const double a = alpha[i / per];
    mixed[i] = static_cast<T>(a * fake.values()[i] + (1.0 - a) * real.values()[i]);
  }
  auto b = Tensor<T>::parameter(real.shape(), std::move(mixed));

  DiscriminatorLossTerms<T> out;
  const auto real_scores = disc.forward(real);
  out.real = ad::sub(ad::scale(ad::mean(ad::square(real_scores)), static_cast<T>(p_d)), ad::mean(real_scores));
  out.fake = ad::mean(disc.forward(fake));
  const auto grad_b = ad::grad(ad::sum(disc.forward(b)), {b}, /*create_graph=*/true)[0];
  const auto norms = ad::frame_l2norm(grad_b);
  out.mix = ad::scale(ad::mean(ad::square(ad::add_scalar(norms, T(-1)))), static_cast<T>(p_r));
  out.total = ad::add(ad::add(out.real, out.fake), out.mix);
  return out;
}

// ---- renderers ---------------------------------------------------------------

template <typename T>
TurbulenceRenderer<T>::TurbulenceRenderer(const TurbulenceParams& params, std::shared_ptr<const PsfBasis> basis,
                                          int tile_px, int overlap_px, ClampGradient clamp)
    : params_(params), basis_(std::move(basis)), clamp_(clamp) {
  params_.validate();
  if (!basis_ || basis_->num_modes != params.num_zernike || basis_->kernel_size != params.kernel_size_px) {
    throw std::invalid_argument("TurbulenceRenderer: surrogate does not match modes / kernel size");
  }
  const int tile = tile_px > 0 ? tile_px : params.anchor_stride_px;
  plan_ = std::make_shared<TilePlan>(make_tile_plan(params.image_size_px, tile, overlap_px >= 0 ? overlap_px : tile / 2));
  chol_unit_ = noll_covariance(params.num_zernike, 1.0).cholesky_factor;
}

template <typename T>
std::vector<double> TurbulenceRenderer<T>::unit_coefficients(int batch, std::uint64_t key) const {
  const int dim = params_.num_zernike - 1;
  const int tiles = plan_->num_tiles();
  const int last = params_.image_size_px - 1;
  std::vector<double> out(static_cast<std::size_t>(batch) * tiles * dim);
  Eigen::VectorXd xi(dim);
  for (int b = 0; b < batch; ++b) {
    const auto field = sample_unit_field(params_, dim, key, static_cast<std::uint64_t>(b));
    for (int tr = 0; tr < plan_->tiles_per_axis; ++tr)
      for (int tc = 0; tc < plan_->tiles_per_axis; ++tc) {
        const auto v = field.interpolate(std::min(plan_->centre(tr), last), std::min(plan_->centre(tc), last));
        for (int k = 0; k < dim; ++k) xi(k) = v[k];
        const Eigen::VectorXd u = chol_unit_ * xi;
        double* dst = out.data() + ((static_cast<std::size_t>(b) * tiles) + tr * plan_->tiles_per_axis + tc) * dim;
        for (int k = 0; k < dim; ++k) dst[k] = u(k);
      }
  }
  return out;
}

template <typename T>
Tensor<T> TurbulenceRenderer<T>::render(const Tensor<T>& scene, const Tensor<T>& log_d, int batch,
                                        std::uint64_t key) const {
  if (!log_d.defined()) throw std::invalid_argument("TurbulenceRenderer: log(D/r0) is required");
  const int dim = params_.num_zernike - 1;
  const int tiles = plan_->num_tiles();
  const auto unit = unit_coefficients(batch, key);
  auto u = Tensor<T>::constant({batch * tiles, dim}, std::vector<T>(unit.begin(), unit.end()));
  auto strength = ad::exp(ad::scale(log_d, static_cast<T>(5.0 / 6.0)));
  auto kernels = ad::surrogate_psf(ad::mul_scalar(u, strength), basis_, clamp_);
  const int k = basis_->kernel_size;
  return ad::render_tiled(scene, ad::reshape(kernels, {batch, tiles, k, k}), plan_);
}

template <typename T>
Tensor<T> IsoplanaticRenderer<T>::render(const Tensor<T>& scene, const Tensor<T>&, int batch,
                                         std::uint64_t key) const {
  std::vector<T> flat;
  int k = 0;
  for (int b = 0; b < batch; ++b) {
    const Image h = sampler_(key, b);
    if (h.rows != h.cols || (k != 0 && h.rows != k)) throw std::invalid_argument("IsoplanaticRenderer: kernel size mismatch");
    k = h.rows;
    flat.insert(flat.end(), h.data.begin(), h.data.end());
  }
  return ad::render_circular(scene, Tensor<T>::constant({batch, k, k}, std::move(flat)));
}

// ---- config ------------------------------------------------------------------

void ReconConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("ReconConfig: " + what); };
  if (batch < 1) fail("batch must be positive");
  if (!(p_d > 0.0)) fail("p_d must be positive");
  if (!(p_r > 0.0)) fail("p_r must be positive");
  if (warmup_iters < 0) fail("warmup_iters must be non-negative");
  if (d_steps_per_g < 1) fail("d_steps_per_g must be at least 1");
  if (total_iters < 0) fail("total_iters must be non-negative");
  if (!(adam_gen.lr > 0.0) || !(adam_disc.lr > 0.0) || !(lr_log_d > 0.0)) fail("learning rates must be positive");
  for (const auto* a : {&adam_gen, &adam_disc}) {
    if (!(a->beta1 >= 0.0 && a->beta1 < 1.0) || !(a->beta2 >= 0.0 && a->beta2 < 1.0)) fail("Adam betas must lie in [0, 1)");
  }
  if (!(d_over_r0_init > 0.0)) fail("d_over_r0_init must be positive");
  if (log_every < 1) fail("log_every must be positive");
  if (checkpoint_every < 0) fail("checkpoint_every must be non-negative");
}

ReconConfig ReconConfig::desk_scaled(int image_size) {
  ReconConfig cfg;
  const double s = static_cast<double>(image_size) * image_size / (128.0 * 128.0);
  cfg.warmup_iters = std::max(1L, std::lround(5000.0 * s));
  cfg.total_iters = std::max(1L, std::lround(100000.0 * s));
  return cfg;
}

Image init_scene(const FrameStack& stack) {
  if (stack.frames.empty()) throw std::invalid_argument("init_scene: empty stack");
  Image mean = stack.frames[0];
  for (std::size_t i = 1; i < stack.frames.size(); ++i) {
    if (!stack.frames[i].same_shape(mean)) throw std::invalid_argument("init_scene: frame shape mismatch");
    for (std::size_t j = 0; j < mean.size(); ++j) mean.data[j] += stack.frames[i].data[j];
  }
  const double inv = 1.0 / static_cast<double>(stack.frames.size());
  for (double& v : mean.data) v *= inv;
  mean.clamp(0.0, 1.0);
  return mean;
}

std::string csv_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// ---- trainer -----------------------------------------------------------------

namespace {

constexpr std::uint64_t kRealTag = 0x5245414c;
constexpr std::uint64_t kFakeTag = 0x46414b45;

nn::GeneratorSpec checked_gen(const nn::GeneratorSpec& spec, const FrameStack& stack) {
  if (stack.frames.empty()) throw std::invalid_argument("Trainer: empty stack");
  const Image& f = stack.frames[0];
  if (f.rows != spec.image_size || f.cols != spec.image_size || f.channels != spec.channels) {
    throw std::invalid_argument("Trainer: generator shape does not match the stack frames");
  }
  return spec;
}

}  // namespace

template <typename T>
Trainer<T>::Trainer(const FrameStack& stack, const nn::GeneratorSpec& gen, const nn::DiscriminatorSpec& disc,
                    const ReconConfig& cfg, std::shared_ptr<const FrameRenderer<T>> renderer, std::uint64_t seed,
                    std::optional<Image> reference)
    : stack_(stack),
      config_(cfg),
      renderer_(std::move(renderer)),
      seed_(seed),
      reference_(std::move(reference)),
      gen_(checked_gen(gen, stack), derive_key(seed, 0x47)),
      disc_(disc, derive_key(seed, 0x44)),
      log_d_(Tensor<T>::parameter({1}, {static_cast<T>(std::log(cfg.d_over_r0_init))})),
      adam_gen_(gen_.parameters(), cfg.adam_gen),
      adam_disc_(disc_.parameters(), cfg.adam_disc),
      adam_log_d_({log_d_}, nn::AdamOptions{cfg.lr_log_d, cfg.adam_gen.beta1, cfg.adam_gen.beta2, cfg.adam_gen.eps}) {
  config_.validate();
  if (!renderer_) throw std::invalid_argument("Trainer: renderer is required");
  gen_.initialize_from(init_scene(stack));
}

template <typename T>
bool Trainer<T>::is_generator_step(long iter) const {
  if (iter < config_.warmup_iters) return false;
  return (iter - config_.warmup_iters) % (config_.d_steps_per_g + 1) == config_.d_steps_per_g;
}

template <typename T>
double Trainer<T>::d_over_r0() const {
  return std::exp(static_cast<double>(log_d_.values()[0]));
}

template <typename T>
Image Trainer<T>::scene() const {
  ad::GradModeGuard off(false);
  return nn::tensor_to_image(gen_.forward());
}

template <typename T>
LogRow Trainer<T>::discriminator_step() {
  const int k = config_.batch;
  Rng rng(derive_key(seed_, kRealTag, static_cast<std::uint64_t>(iter_)));
  std::vector<int> idx(k);
  for (auto& i : idx) i = rng.uniform_int(stack_.size());
  std::vector<double> alpha(k);
  for (auto& a : alpha) a = rng.uniform();
  const auto real = nn::frames_to_tensor<T>(stack_.frames, idx);
  Tensor<T> fake;
  {
    ad::GradModeGuard off(false);
    fake = renderer_->render(gen_.forward(), log_d_, k, derive_key(seed_, kFakeTag, static_cast<std::uint64_t>(iter_)));
  }
  const auto terms = discriminator_loss_graph(disc_, real, fake, alpha, config_.p_d, config_.p_r);
  LogRow row;
  row.d = {static_cast<double>(terms.real.item()), static_cast<double>(terms.fake.item()),
           static_cast<double>(terms.mix.item()), 0.0};
  row.d.total = row.d.real + row.d.fake + row.d.mix;
  row.g = -row.d.fake;
  if (!std::isfinite(row.d.total)) return row;
  adam_disc_.step(ad::backward(terms.total));
  return row;
}

template <typename T>
LogRow Trainer<T>::generator_step() {
  const int k = config_.batch;
  const auto fake =
      renderer_->render(gen_.forward(), log_d_, k, derive_key(seed_, kFakeTag, static_cast<std::uint64_t>(iter_)));
  const auto loss = ad::neg(ad::mean(disc_.forward(fake)));
  LogRow row;
  row.d = last_d_;
  row.g = static_cast<double>(loss.item());
  if (!std::isfinite(row.g)) return row;
  const auto grads = ad::backward(loss);
  adam_gen_.step(grads);
  if (config_.learn_d_over_r0) adam_log_d_.step(grads);
  return row;
}

template <typename T>
void Trainer<T>::record(LogRow row) {
  row.iter = iter_;
  row.d_over_r0 = d_over_r0();
  row.psnr = reference_ ? psnr(scene(), *reference_) : std::numeric_limits<double>::quiet_NaN();
  history_.push_back(row);
}

template <typename T>
void Trainer<T>::step() {
  const bool g_step = is_generator_step(iter_);
  LogRow row = g_step ? generator_step() : discriminator_step();
  if (!g_step) last_d_ = row.d;
  last_g_ = row.g;
  if (!std::isfinite(row.d.total) || !std::isfinite(row.g)) {
    if (!config_.checkpoint_dir.empty()) save_checkpoint(config_.checkpoint_dir / "diverged.tgc");
    throw DivergenceError("training diverged at iteration " + std::to_string(iter_) + ": non-finite loss");
  }
  ++iter_;
  if (iter_ % config_.log_every == 0 || iter_ == config_.total_iters) record(row);
  if (config_.checkpoint_every > 0 && iter_ % config_.checkpoint_every == 0 && !config_.checkpoint_dir.empty()) {
    save_checkpoint(config_.checkpoint_dir / "checkpoint.tgc");
  }
}

template <typename T>
void Trainer<T>::run(long until) {
  until = std::min(until, config_.total_iters);
  while (iter_ < until) step();
}

template <typename T>
void Trainer<T>::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "iter,L_real,L_fake,L_mix,L_D,L_G,d_over_r0,psnr\n";
  for (const auto& r : history_) {
    os << r.iter << ',' << csv_real(r.d.real) << ',' << csv_real(r.d.fake) << ',' << csv_real(r.d.mix) << ','
       << csv_real(r.d.total) << ',' << csv_real(r.g) << ',' << csv_real(r.d_over_r0) << ',' << csv_real(r.psnr)
       << '\n';
  }
}

// TGC1: magic, u64 iteration, u32 N, u32 M, f64 D/r0, u32 block count, then per
// block: u32 name length, name bytes, u32 rank, u32 dims, f32 values.
template <typename T>
void Trainer<T>::save_checkpoint(const std::filesystem::path& path) const {
  std::vector<std::pair<std::string, Tensor<T>>> blocks;
  const auto gp = gen_.parameters();
  const auto gn = gen_.parameter_names();
  for (std::size_t i = 0; i < gp.size(); ++i) blocks.emplace_back(gn[i], gp[i]);
  const auto dp = disc_.parameters();
  const auto dn = disc_.parameter_names();
  for (std::size_t i = 0; i < dp.size(); ++i) blocks.emplace_back(dn[i], dp[i]);
  blocks.emplace_back("log_d_over_r0", log_d_);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp);
    bin::put_magic(os, "TGC1");
    bin::put<std::uint64_t>(os, static_cast<std::uint64_t>(iter_));
    bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(gen_.spec().image_size));
    bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(stack_.params.num_zernike));
    bin::put<double>(os, d_over_r0());
    bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(blocks.size()));
    for (const auto& [name, t] : blocks) {
      bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
      for (int d : t.shape()) bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
      bin::put_f32(os, t.values());
    }
    if (!os) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
void Trainer<T>::load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  bin::expect_magic(is, "TGC1");
  const auto iter = bin::get<std::uint64_t>(is);
  const auto n = bin::get<std::uint32_t>(is);
  const auto m = bin::get<std::uint32_t>(is);
  bin::get<double>(is);
  if (static_cast<int>(n) != gen_.spec().image_size || static_cast<int>(m) != stack_.params.num_zernike) {
    throw std::runtime_error("checkpoint: grid size or mode count does not match");
  }
  std::vector<std::pair<std::string, Tensor<T>>> targets;
  const auto gp = gen_.parameters();
  const auto gn = gen_.parameter_names();
  for (std::size_t i = 0; i < gp.size(); ++i) targets.emplace_back(gn[i], gp[i]);
  const auto dp = disc_.parameters();
  const auto dn = disc_.parameter_names();
  for (std::size_t i = 0; i < dp.size(); ++i) targets.emplace_back(dn[i], dp[i]);
  targets.emplace_back("log_d_over_r0", log_d_);

  const auto count = bin::get<std::uint32_t>(is);
  for (std::uint32_t b = 0; b < count; ++b) {
    std::string name(bin::get<std::uint32_t>(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    ad::Shape shape(bin::get<std::uint32_t>(is));
    for (auto& d : shape) d = static_cast<int>(bin::get<std::uint32_t>(is));
    const auto values = bin::get_f32(is, ad::numel_of(shape));
    auto it = std::find_if(targets.begin(), targets.end(), [&](const auto& t) { return t.first == name; });
    if (it == targets.end()) throw std::runtime_error("checkpoint: unknown parameter block '" + name + "'");
    if (it->second.shape() != shape) throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    it->second.assign(std::vector<T>(values.begin(), values.end()));
  }
  iter_ = static_cast<long>(iter);
}

template struct DiscriminatorLossTerms<float>;
template struct DiscriminatorLossTerms<double>;
template DiscriminatorLossTerms<float> discriminator_loss_graph<float>(const nn::Discriminator<float>&, const Tensor<float>&,
                                                                       const Tensor<float>&, const std::vector<double>&,
                                                                       double, double);
template DiscriminatorLossTerms<double> discriminator_loss_graph<double>(const nn::Discriminator<double>&,
                                                                         const Tensor<double>&, const Tensor<double>&,
                                                                         const std::vector<double>&, double, double);
template class TurbulenceRenderer<float>;
template class TurbulenceRenderer<double>;
template class IsoplanaticRenderer<float>;
template class IsoplanaticRenderer<double>;
template class Trainer<float>;
template class Trainer<double>;

}  // namespace turbuforge::recon
