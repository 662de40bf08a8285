#include <cmath>
#include <memory>

#include "doctest.h"
#include "oracles.hpp"

#include "turbuforge/random.hpp"
#include "turbuforge/render.hpp"
#include "turbuforge/train_ops.hpp"

using namespace turbuforge;
using T64 = ad::Tensor<double>;

namespace {

std::vector<double> uniform(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform();
  return v;
}

}  // namespace

TEST_CASE("render_tiled matches convolve_tiled with the same per-tile kernels") {
  const int n = 32, k = 7, tile = 4, overlap = 1;
  auto plan = std::make_shared<const TilePlan>(make_tile_plan(n, tile, overlap));
  const int tiles = plan->num_tiles();
  const auto kv = uniform(static_cast<std::size_t>(2) * tiles * k * k, 1);
  const auto sv = uniform(static_cast<std::size_t>(2) * n * n, 2);
  const T64 scene = T64::constant({2, n, n}, sv);
  const T64 kernels = T64::constant({2, tiles, k, k}, kv);
  const T64 out = ad::render_tiled(scene, kernels, plan);
  REQUIRE(out.shape() == ad::Shape{2, 2, n, n});

  Image x(n, n, 2);
  x.data = sv;
  for (int b = 0; b < 2; ++b) {
    PsfField field;
    field.mode = PsfFieldMode::kPerAnchor;
    field.image_size = n;
    field.kernel_size = k;
    field.anchor_stride = tile;
    field.anchor_rows = field.anchor_cols = plan->tiles_per_axis;
    for (int t = 0; t < tiles; ++t) {
      Image h(k, k);
      std::copy_n(kv.begin() + (static_cast<std::size_t>(b) * tiles + t) * k * k, k * k, h.data.begin());
      field.kernels.push_back(h);
    }
    const Image ref = convolve_tiled(x, field, tile, overlap);
    for (std::size_t i = 0; i < ref.size(); ++i)
      CHECK(std::abs(out.values()[b * ref.size() + i] - ref.data[i]) < 1e-12);
  }
}

TEST_CASE("render_tiled gradients agree with central differences") {
  const int n = 12, k = 5;
  auto plan = std::make_shared<const TilePlan>(make_tile_plan(n, 4, 1));
  const int tiles = plan->num_tiles();
  const T64 scene = T64::parameter({1, n, n}, uniform(n * n, 3));
  const T64 kernels = T64::parameter({2, tiles, k, k}, uniform(static_cast<std::size_t>(2) * tiles * k * k, 4));
  const T64 w = T64::constant({2, 1, n, n}, uniform(2 * n * n, 5));
  auto f = [&](const std::vector<T64>& p) { return ad::sum(ad::mul(w, ad::square(ad::render_tiled(p[0], p[1], plan)))); };
  CHECK(ad::grad_check<double>(f, {scene, kernels}, {1e-6, 256, 1}) < 1e-7);
}

TEST_CASE("render_circular matches an explicit wrap-around sum and its gradient") {
  const int n = 10, k = 3;
  const auto sv = uniform(n * n, 6);
  const auto kv = uniform(2 * k * k, 7);
  const T64 out = ad::render_circular(T64::constant({1, n, n}, sv), T64::constant({2, k, k}, kv));
  Image x(n, n);
  x.data = sv;
  for (int b = 0; b < 2; ++b) {
    Image h(k, k);
    std::copy_n(kv.begin() + b * k * k, k * k, h.data.begin());
    const Image ref = oracle::circular_conv(x, h);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(out.values()[b * ref.size() + i] - ref.data[i]) < 1e-12);
  }
  const T64 scene = T64::parameter({1, n, n}, sv);
  const T64 kernels = T64::parameter({2, k, k}, kv);
  auto f = [](const std::vector<T64>& p) { return ad::sum(ad::square(ad::render_circular(p[0], p[1]))); };
  CHECK(ad::grad_check<double>(f, {scene, kernels}, {1e-6, 128, 2}) < 1e-7);
}

TEST_CASE("surrogate_psf op matches the batch evaluator and its adjoint") {
  auto p = TurbulenceParams::defaults_for(32);
  p.set_d_over_r0(2.0);
  auto basis = std::make_shared<const PsfBasis>(fit_psf_basis(p, 16, 800, 3));
  const int n = 4, dim = basis->dim();
  Rng rng(8);
  const auto cov = noll_covariance(p.num_zernike, 2.0);
  std::vector<double> alpha;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd xi(dim);
    for (int j = 0; j < dim; ++j) xi(j) = rng.normal();
    const Eigen::VectorXd a = cov.cholesky_factor * xi;
    alpha.insert(alpha.end(), a.data(), a.data() + dim);
  }
  const T64 a = T64::parameter({n, dim}, alpha);
  const T64 h = ad::surrogate_psf(a, basis, ClampGradient::kExact);
  CHECK(h.values() == surrogate_psf_batch(alpha, n, *basis));
  const int kk = basis->kernel_size * basis->kernel_size;
  const T64 w = T64::constant({n, basis->kernel_size, basis->kernel_size}, uniform(static_cast<std::size_t>(n) * kk, 9));
  auto f = [&](const std::vector<T64>& q) { return ad::sum(ad::mul(w, ad::surrogate_psf(q[0], basis, ClampGradient::kExact))); };
  CHECK(ad::grad_check<double>(f, {a}, {1e-6, 0, 0}) < 1e-5);
}
