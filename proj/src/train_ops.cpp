#include "turbuforge/train_ops.hpp"

#include <stdexcept>

namespace turbuforge::ad {

template <typename T>
Tensor<T> surrogate_psf(const Tensor<T>& alpha, std::shared_ptr<const PsfBasis> basis, ClampGradient clamp) {
  if (alpha.rank() != 2 || alpha.dim(1) != basis->dim()) {
    throw std::invalid_argument("surrogate_psf: alpha must be [n, " + std::to_string(basis->dim()) + "], got " +
                                shape_string(alpha.shape()));
  }
  const int n = alpha.dim(0);
  const int k = basis->kernel_size;
  std::vector<double> a(alpha.values().begin(), alpha.values().end());
  const auto flat = surrogate_psf_batch(a, n, *basis);
  return make_op<T>("surrogate_psf", {n, k, k}, std::vector<T>(flat.begin(), flat.end()), {alpha},
                    [alpha, basis, clamp, a, n](const Tensor<T>& g) {
                      std::vector<double> up(g.values().begin(), g.values().end());
                      const auto ga = surrogate_psf_vjp(a, n, *basis, up, clamp);
                      return std::vector<Tensor<T>>{Tensor<T>::constant(alpha.shape(), std::vector<T>(ga.begin(), ga.end()))};
                    });
}

namespace {

struct TiledDims {
  int channels, n, batch, tiles, k;
};

TiledDims tiled_dims(const Shape& scene, const Shape& kernels, const TilePlan& plan) {
  if (scene.size() != 3 || scene[1] != scene[2] || scene[1] != plan.image_size) {
    throw std::invalid_argument("render_tiled: scene must be [C, N, N] matching the tile plan");
  }
  if (kernels.size() != 4 || kernels[1] != plan.num_tiles() || kernels[2] != kernels[3] || kernels[2] % 2 == 0) {
    throw std::invalid_argument("render_tiled: kernels must be [B, " + std::to_string(plan.num_tiles()) +
                                ", K, K] with odd K, got " + shape_string(kernels));
  }
  return {scene[0], scene[1], kernels[0], kernels[1], kernels[2]};
}

// Visits every (frame, channel, tile, pixel) term of the tiled sum with its blend
// weight; fn(b, c, tile, u, v, w) handles one output pixel of one tile.
template <typename Fn>
void for_each_tile_pixel(const TiledDims& d, const TilePlan& plan, Fn&& fn) {
  for (int b = 0; b < d.batch; ++b)
    for (int c = 0; c < d.channels; ++c)
      for (int tr = 0; tr < plan.tiles_per_axis; ++tr)
        for (int tc = 0; tc < plan.tiles_per_axis; ++tc) {
          const int t = tr * plan.tiles_per_axis + tc;
          for (int u = plan.first[tr]; u <= plan.last[tr]; ++u) {
            const double wu = plan.weight(tr, u);
            for (int v = plan.first[tc]; v <= plan.last[tc]; ++v) {
              const double w = wu * plan.weight(tc, v);
              if (w != 0.0) fn(b, c, t, u, v, w);
            }
          }
        }
}

}  // namespace

template <typename T>
Tensor<T> render_tiled(const Tensor<T>& scene, const Tensor<T>& kernels, std::shared_ptr<const TilePlan> plan) {
  const TiledDims d = tiled_dims(scene.shape(), kernels.shape(), *plan);
  const int rad = d.k / 2;
  const std::size_t plane = static_cast<std::size_t>(d.n) * d.n;
  const std::size_t kk = static_cast<std::size_t>(d.k) * d.k;
  // Reflected source indices, shared by every tile.
  std::vector<int> refl(static_cast<std::size_t>(d.n) * d.k);
  for (int u = 0; u < d.n; ++u)
    for (int a = 0; a < d.k; ++a) refl[u * d.k + a] = reflect_index(u - (a - rad), d.n);

  const auto& x = scene.values();
  const auto& h = kernels.values();
  std::vector<T> out(static_cast<std::size_t>(d.batch) * d.channels * plane, T(0));
  for_each_tile_pixel(d, *plan, [&](int b, int c, int t, int u, int v, double w) {
    const T* hk = h.data() + (static_cast<std::size_t>(b) * d.tiles + t) * kk;
    const T* xc = x.data() + c * plane;
    const int* ru = refl.data() + u * d.k;
    const int* rv = refl.data() + v * d.k;
    double acc = 0.0;
    for (int a = 0; a < d.k; ++a) {
      const T* row = xc + static_cast<std::size_t>(ru[a]) * d.n;
      const T* hrow = hk + a * d.k;
      for (int bb = 0; bb < d.k; ++bb) acc += static_cast<double>(hrow[bb]) * row[rv[bb]];
    }
    out[(static_cast<std::size_t>(b) * d.channels + c) * plane + u * d.n + v] += static_cast<T>(w * acc);
  });

  return make_op<T>("render_tiled", {d.batch, d.channels, d.n, d.n}, std::move(out), {scene, kernels},
                    [scene, kernels, plan, d, refl, plane, kk](const Tensor<T>& g) {
                      const auto& x = scene.values();
                      const auto& h = kernels.values();
                      const auto& gv = g.values();
                      std::vector<double> gx(x.size(), 0.0), gh(h.size(), 0.0);
                      const bool want_x = scene.requires_grad();
                      const bool want_h = kernels.requires_grad();
                      for_each_tile_pixel(d, *plan, [&](int b, int c, int t, int u, int v, double w) {
                        const double go = w * gv[(static_cast<std::size_t>(b) * d.channels + c) * plane + u * d.n + v];
                        if (go == 0.0) return;
                        const std::size_t hoff = (static_cast<std::size_t>(b) * d.tiles + t) * kk;
                        const int* ru = refl.data() + u * d.k;
                        const int* rv = refl.data() + v * d.k;
                        for (int a = 0; a < d.k; ++a) {
                          const std::size_t row = c * plane + static_cast<std::size_t>(ru[a]) * d.n;
                          for (int bb = 0; bb < d.k; ++bb) {
                            const std::size_t xi = row + rv[bb];
                            if (want_x) gx[xi] += go * h[hoff + a * d.k + bb];
                            if (want_h) gh[hoff + a * d.k + bb] += go * x[xi];
                          }
                        }
                      });
                      return std::vector<Tensor<T>>{
                          Tensor<T>::constant(scene.shape(), std::vector<T>(gx.begin(), gx.end())),
                          Tensor<T>::constant(kernels.shape(), std::vector<T>(gh.begin(), gh.end()))};
                    });
}

template <typename T>
Tensor<T> render_circular(const Tensor<T>& scene, const Tensor<T>& kernels) {
  if (scene.rank() != 3 || scene.dim(1) != scene.dim(2)) {
    throw std::invalid_argument("render_circular: scene must be [C, N, N]");
  }
  if (kernels.rank() != 3 || kernels.dim(1) != kernels.dim(2) || kernels.dim(1) % 2 == 0 ||
      kernels.dim(1) > scene.dim(1)) {
    throw std::invalid_argument("render_circular: kernels must be [B, k, k] with odd k <= N");
  }
  const int ch = scene.dim(0), n = scene.dim(1), batch = kernels.dim(0), k = kernels.dim(1), rad = k / 2;
  const std::size_t plane = static_cast<std::size_t>(n) * n;
  const std::size_t kk = static_cast<std::size_t>(k) * k;
  std::vector<int> wrap(static_cast<std::size_t>(n) * k);
  for (int u = 0; u < n; ++u)
    for (int a = 0; a < k; ++a) wrap[u * k + a] = wrap_index(u - (a - rad), n);
  const auto& x = scene.values();
  const auto& h = kernels.values();
  std::vector<T> out(static_cast<std::size_t>(batch) * ch * plane);
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < ch; ++c)
      for (int u = 0; u < n; ++u)
        for (int v = 0; v < n; ++v) {
          double acc = 0.0;
          for (int a = 0; a < k; ++a) {
            const std::size_t row = c * plane + static_cast<std::size_t>(wrap[u * k + a]) * n;
            for (int bb = 0; bb < k; ++bb) acc += static_cast<double>(h[b * kk + a * k + bb]) * x[row + wrap[v * k + bb]];
          }
          out[(static_cast<std::size_t>(b) * ch + c) * plane + u * n + v] = static_cast<T>(acc);
        }
  return make_op<T>("render_circular", {batch, ch, n, n}, std::move(out), {scene, kernels},
                    [scene, kernels, wrap, ch, n, batch, k, plane, kk](const Tensor<T>& g) {
                      const auto& x = scene.values();
                      const auto& h = kernels.values();
                      const auto& gv = g.values();
                      std::vector<double> gx(x.size(), 0.0), gh(h.size(), 0.0);
                      for (int b = 0; b < batch; ++b)
                        for (int c = 0; c < ch; ++c)
                          for (int u = 0; u < n; ++u)
                            for (int v = 0; v < n; ++v) {
                              const double go = gv[(static_cast<std::size_t>(b) * ch + c) * plane + u * n + v];
                              if (go == 0.0) continue;
                              for (int a = 0; a < k; ++a) {
                                const std::size_t row = c * plane + static_cast<std::size_t>(wrap[u * k + a]) * n;
                                for (int bb = 0; bb < k; ++bb) {
                                  const std::size_t xi = row + wrap[v * k + bb];
                                  gx[xi] += go * h[b * kk + a * k + bb];
                                  gh[b * kk + a * k + bb] += go * x[xi];
                                }
                              }
                            }
                      return std::vector<Tensor<T>>{
                          Tensor<T>::constant(scene.shape(), std::vector<T>(gx.begin(), gx.end())),
                          Tensor<T>::constant(kernels.shape(), std::vector<T>(gh.begin(), gh.end()))};
                    });
}

#define TURBUFORGE_TRAIN_OPS(T)                                                                          \
  template Tensor<T> surrogate_psf<T>(const Tensor<T>&, std::shared_ptr<const PsfBasis>, ClampGradient); \
  template Tensor<T> render_tiled<T>(const Tensor<T>&, const Tensor<T>&, std::shared_ptr<const TilePlan>); \
  template Tensor<T> render_circular<T>(const Tensor<T>&, const Tensor<T>&);

TURBUFORGE_TRAIN_OPS(float)
TURBUFORGE_TRAIN_OPS(double)

}  // namespace turbuforge::ad
