#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>

#include "doctest.h"
#include "oracles.hpp"

#include "turbuforge/charts.hpp"
#include "turbuforge/recon.hpp"
#include "turbuforge/random.hpp"

using namespace turbuforge;
using T64 = ad::Tensor<double>;

namespace {

std::vector<double> randn(std::size_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

struct Fixture {
  TurbulenceParams params;
  FrameStack stack;
  std::shared_ptr<const PsfBasis> basis;
  Image scene;

  explicit Fixture(int n = 16) {
    params = TurbulenceParams::defaults_for(n);
    params.set_d_over_r0(2.0);
    scene = make_chart(ChartKind::kFaceLike, n, 1, 0);
    stack = simulate_stack(scene, params, 8, 0.01, 3);
    basis = std::make_shared<const PsfBasis>(fit_psf_basis(params, 8, 400, 1));
  }

  recon::ReconConfig config(long total) const {
    recon::ReconConfig c;
    c.batch = 4;
    c.warmup_iters = 3;
    c.total_iters = total;
    c.log_every = 1;
    c.adam_gen.lr = 1e-2;
    c.d_over_r0_init = 2.0;
    return c;
  }

  template <typename T>
  recon::Trainer<T> trainer(const recon::ReconConfig& c, std::uint64_t seed = 5) const {
    nn::GeneratorSpec gs;
    gs.image_size = params.image_size_px;
    nn::DiscriminatorSpec ds;
    ds.image_size = params.image_size_px;
    ds.widths = {4, 8};
    auto r = std::make_shared<recon::TurbulenceRenderer<T>>(params, basis);
    return recon::Trainer<T>(stack, gs, ds, c, r, seed, scene);
  }
};

}  // namespace

TEST_CASE("discriminator loss of a zero critic is the penalty weight") {
  const std::vector<double> zeros(5, 0.0);
  const auto l = recon::discriminator_loss(zeros, zeros, zeros, 0.001, 10.0);
  CHECK(l.real == 0.0);
  CHECK(l.fake == 0.0);
  CHECK(l.mix == 10.0);
  CHECK(l.total == 10.0);
}

TEST_CASE("discriminator loss closed forms") {
  const double s = 1.7, pd = 0.001;
  const auto l = recon::discriminator_loss(std::vector<double>(4, s), std::vector<double>(4, 0.0),
                                           std::vector<double>(4, 1.0), pd, 10.0);
  CHECK(l.real == doctest::Approx(pd * s * s - s).epsilon(1e-15));
  CHECK(l.mix == 0.0);
  CHECK_THROWS_AS(recon::discriminator_loss({1.0}, {1.0, 2.0}, {1.0}, pd, 10.0), std::invalid_argument);
  CHECK_THROWS_AS(recon::discriminator_loss({}, {}, {}, pd, 10.0), std::invalid_argument);
}

TEST_CASE("generator loss closed forms") {
  CHECK(recon::generator_loss({2.5, 2.5, 2.5}) == -2.5);
  CHECK(recon::generator_loss({1.0, -1.0}) == 0.0);
}

TEST_CASE("losses agree with an independent scalar implementation") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 1 + rng.uniform_int(40);
    const auto dr = randn(k, rng, 3.0), df = randn(k, rng, 3.0);
    std::vector<double> norms(k);
    for (double& v : norms) v = 2.0 * rng.uniform();
    const double pd = rng.uniform(0.0, 0.01), pr = rng.uniform(1.0, 20.0);
    const auto got = recon::discriminator_loss(dr, df, norms, pd, pr);
    const auto ref = oracle::scalar_d_loss(dr, df, norms, pd, pr);
    CHECK(std::abs(got.real - ref.real) <= 1e-12 * std::max(1.0, std::abs(ref.real)));
    CHECK(std::abs(got.fake - ref.fake) <= 1e-12 * std::max(1.0, std::abs(ref.fake)));
    CHECK(std::abs(got.mix - ref.mix) <= 1e-12 * std::max(1.0, std::abs(ref.mix)));
    CHECK(std::abs(got.total - ref.total) <= 1e-12 * std::max(1.0, std::abs(ref.total)));
    double g = 0.0;
    for (double v : df) g -= v / k;
    CHECK(std::abs(recon::generator_loss(df) - g) <= 1e-12 * std::max(1.0, std::abs(g)));
  }
}

TEST_CASE("graph loss equals the scalar loss on the same critic outputs") {
  nn::DiscriminatorSpec spec;
  spec.image_size = 8;
  spec.widths = {4, 8};
  nn::Discriminator<double> disc(spec, 3);
  Rng rng(12);
  const int k = 5;
  const T64 real = T64::constant({k, 1, 8, 8}, randn(k * 64, rng, 0.5));
  const T64 fake = T64::constant({k, 1, 8, 8}, randn(k * 64, rng, 0.5));
  std::vector<double> alpha(k);
  for (double& a : alpha) a = rng.uniform();
  const auto terms = recon::discriminator_loss_graph(disc, real, fake, alpha, 0.001, 10.0);

  // Interpolates, scores and per-frame gradient norms computed separately.
  std::vector<double> bv(real.numel());
  for (int i = 0; i < k; ++i)
    for (int p = 0; p < 64; ++p)
      bv[i * 64 + p] = alpha[i] * fake.values()[i * 64 + p] + (1.0 - alpha[i]) * real.values()[i * 64 + p];
  const T64 b = T64::parameter({k, 1, 8, 8}, bv);
  const auto gb = ad::grad(ad::sum(disc.forward(b)), {b})[0];
  std::vector<double> norms(k, 0.0);
  for (int i = 0; i < k; ++i) {
    for (int p = 0; p < 64; ++p) norms[i] += gb.values()[i * 64 + p] * gb.values()[i * 64 + p];
    norms[i] = std::sqrt(norms[i]);
  }
  const auto ref = oracle::scalar_d_loss(disc.forward(real).values(), disc.forward(fake).values(), norms, 0.001, 10.0);
  CHECK(std::abs(terms.real.item() - ref.real) < 1e-12);
  CHECK(std::abs(terms.fake.item() - ref.fake) < 1e-12);
  CHECK(std::abs(terms.mix.item() - ref.mix) < 1e-12);
  CHECK(std::abs(terms.total.item() - ref.total) < 1e-12);
}

TEST_CASE("zeroed critic gives L_D = p_r through the graph") {
  nn::DiscriminatorSpec spec;
  spec.image_size = 8;
  spec.widths = {4};
  nn::Discriminator<double> disc(spec, 1);
  for (auto p : disc.parameters()) p.assign(std::vector<double>(p.numel(), 0.0));
  Rng rng(2);
  const T64 x = T64::constant({3, 1, 8, 8}, randn(192, rng));
  const auto terms = recon::discriminator_loss_graph(disc, x, x, {0.1, 0.5, 0.9}, 0.001, 10.0);
  CHECK(terms.total.item() == 10.0);
}

TEST_CASE("turbulence renderer is keyed and uses the requested strength") {
  Fixture fx;
  recon::TurbulenceRenderer<double> r(fx.params, fx.basis);
  const T64 scene = nn::image_to_tensor<double>(fx.scene);
  const T64 logd = T64::constant({1}, {std::log(2.0)});
  const auto a = r.render(scene, logd, 3, 42).values();
  const auto b = r.render(scene, logd, 3, 42).values();
  const auto c = r.render(scene, logd, 3, 43).values();
  CHECK(a == b);
  CHECK(a != c);
  // Frame b of a batch does not depend on the batch size.
  const auto d = r.render(scene, logd, 1, 42).values();
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(d[i] == a[i]);
  // Near-zero strength gives close to the mean-field blur, far from a strong one.
  const auto weak = r.render(scene, T64::constant({1}, {std::log(1e-6)}), 1, 42).values();
  const auto strong = r.render(scene, T64::constant({1}, {std::log(4.0)}), 1, 42).values();
  double diff = 0.0;
  for (std::size_t i = 0; i < weak.size(); ++i) diff += std::abs(weak[i] - strong[i]);
  CHECK(diff > 0.0);
}

TEST_CASE("renderer gradient with respect to log D/r0 matches central differences") {
  Fixture fx;
  auto r = std::make_shared<recon::TurbulenceRenderer<double>>(fx.params, fx.basis, 0, -1, ClampGradient::kExact);
  const T64 scene = nn::image_to_tensor<double>(fx.scene);
  Rng rng(3);
  const T64 w = T64::constant({2, 1, 16, 16}, randn(512, rng));
  auto f = [&](const std::vector<T64>& p) { return ad::sum(ad::mul(w, r->render(p[1], p[0], 2, 9))); };
  const T64 logd = T64::parameter({1}, {std::log(1.7)});
  const T64 sp = T64::parameter(scene.shape(), scene.values());
  CHECK(ad::grad_check<double>(f, {logd, sp}, {1e-6, 64, 1}) < 1e-5);
}

TEST_CASE("schedule warms up the critic then alternates six to one") {
  Fixture fx;
  auto c = fx.config(20);
  c.warmup_iters = 5;
  auto t = fx.trainer<double>(c);
  for (long i = 0; i < 5; ++i) CHECK_FALSE(t.is_generator_step(i));
  int g = 0;
  for (long i = 5; i < 5 + 70; ++i) g += t.is_generator_step(i) ? 1 : 0;
  CHECK(g == 10);
  CHECK(t.is_generator_step(11));
  CHECK_FALSE(t.is_generator_step(12));
}

TEST_CASE("zero iterations return the initial scene") {
  Fixture fx;
  auto t = fx.trainer<double>(fx.config(0));
  t.run();
  const Image init = recon::init_scene(fx.stack);
  CHECK(l2_distance(t.scene(), init) / std::sqrt(double(init.size())) < 1e-12);
  CHECK(t.history().empty());
}

TEST_CASE("init_scene is the clamped frame mean") {
  FrameStack s;
  Image a(2, 2), b(2, 2);
  a.data = {0.2, 0.4, 1.0, 0.0};
  b.data = {0.4, 0.0, 1.4, -0.6};
  s.frames = {a};
  CHECK(recon::init_scene(s).data == a.data);
  s.frames = {a, b};
  const Image m = recon::init_scene(s);
  CHECK(m.data[0] == doctest::Approx(0.3));
  CHECK(m.data[1] == doctest::Approx(0.2));
  CHECK(m.data[2] == 1.0);
  CHECK(m.data[3] == 0.0);
}

TEST_CASE("fp64 training is bit-reproducible") {
  Fixture fx;
  auto a = fx.trainer<double>(fx.config(12));
  auto b = fx.trainer<double>(fx.config(12));
  a.run();
  b.run();
  CHECK(a.scene().data == b.scene().data);
  REQUIRE(a.history().size() == 12u);
  CHECK(a.history().back().d.total == b.history().back().d.total);
}

TEST_CASE("learnable strength moves only when enabled") {
  Fixture fx;
  auto c = fx.config(12);
  auto fixed = fx.trainer<double>(c);
  fixed.run();
  CHECK(fixed.d_over_r0() == doctest::Approx(2.0).epsilon(1e-12));
  c.learn_d_over_r0 = true;
  auto learn = fx.trainer<double>(c);
  learn.run();
  CHECK(learn.d_over_r0() != 2.0);
}

TEST_CASE("csv log and checkpoint round trip") {
  Fixture fx;
  const auto dir = std::filesystem::temp_directory_path() / "tf_recon_ckpt";
  std::filesystem::remove_all(dir);
  auto c = fx.config(10);
  c.checkpoint_every = 5;
  c.checkpoint_dir = dir;
  auto t = fx.trainer<float>(c);
  t.run();
  CHECK(std::filesystem::exists(dir / "checkpoint.tgc"));
  t.write_csv(dir / "loss.csv");
  std::ifstream is(dir / "loss.csv");
  std::string header;
  std::getline(is, header);
  CHECK(header == "iter,L_real,L_fake,L_mix,L_D,L_G,d_over_r0,psnr");
  int rows = 0;
  for (std::string line; std::getline(is, line);) ++rows;
  CHECK(rows == 10);

  auto fresh = fx.trainer<float>(fx.config(10), 99);
  fresh.load_checkpoint(dir / "checkpoint.tgc");
  CHECK(fresh.iteration() == 10);
  CHECK(fresh.scene().data == t.scene().data);
  const auto pa = t.discriminator().parameters(), pb = fresh.discriminator().parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].values() == pb[i].values());
  std::filesystem::remove_all(dir);
}

TEST_CASE("non-finite losses raise a divergence error and dump state") {
  Fixture fx;
  const auto dir = std::filesystem::temp_directory_path() / "tf_recon_div";
  std::filesystem::remove_all(dir);
  auto c = fx.config(5);
  c.checkpoint_dir = dir;
  auto t = fx.trainer<double>(c);
  for (auto p : t.discriminator().parameters()) p.assign(std::vector<double>(p.numel(), std::nan("")));
  CHECK_THROWS_AS(t.step(), recon::DivergenceError);
  CHECK(std::filesystem::exists(dir / "diverged.tgc"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("config validation and desk scaling") {
  recon::ReconConfig c;
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  const auto d = recon::ReconConfig::desk_scaled(32);
  CHECK(d.warmup_iters == 313);
  CHECK(d.total_iters == 6250);
  CHECK(recon::ReconConfig::desk_scaled(128).total_iters == 100000);
  CHECK(recon::csv_real(1.0 / 3.0) == "0.333333");
  CHECK(recon::csv_real(std::nan("")) == "nan");
}
