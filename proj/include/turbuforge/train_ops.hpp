#pragma once

// Graph ops for the rendering path used during reconstruction. Their backward
// passes are hand-written adjoints, so they support first-order gradients only.

#include <memory>

#include "turbuforge/autodiff.hpp"
#include "turbuforge/psf.hpp"
#include "turbuforge/render.hpp"

namespace turbuforge::ad {

/// alpha [n, M-1] -> kernels [n, K, K] through the surrogate.
template <typename T>
Tensor<T> surrogate_psf(const Tensor<T>& alpha, std::shared_ptr<const PsfBasis> basis,
                        ClampGradient clamp = ClampGradient::kStraightThrough);

/// Tiled spatially-varying blur: scene [C, N, N], kernels [B, tiles, K, K]
/// (tiles in row-major tile order) -> frames [B, C, N, N]. Same result as
/// convolve_tiled with these per-tile kernels, evaluated by direct sums.
template <typename T>
Tensor<T> render_tiled(const Tensor<T>& scene, const Tensor<T>& kernels, std::shared_ptr<const TilePlan> plan);

/// Isoplanatic circular blur: scene [C, N, N], kernels [B, k, k] -> [B, C, N, N].
template <typename T>
Tensor<T> render_circular(const Tensor<T>& scene, const Tensor<T>& kernels);

}  // namespace turbuforge::ad
