#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "turbuforge/image.hpp"
#include "turbuforge/psf.hpp"
#include "turbuforge/turbulence.hpp"

namespace turbuforge {

/// Scene in [0, 1], one or three channels.
using SceneImage = Image;

struct FrameStack {
  TurbulenceParams params;
  std::uint64_t master_seed = 0;
  double noise_sigma = 0.0;
  std::uint32_t flags = 0;  // TFS1 header flags; bit 0 set for noisy stacks
  std::vector<std::uint64_t> seeds;  // per frame
  std::vector<Image> frames;

  int size() const { return static_cast<int>(frames.size()); }
};

/// y[u,v] = sum_{a,b} h[a,b] x[refl(u - (a - r)), refl(v - (b - r))], r = K/2.
Image convolve_uniform(const Image& x, const Image& kernel);

/// Spatially varying blur. Per-anchor fields blend the four surrounding anchor
/// kernels bilinearly at every pixel; per-pixel fields use each pixel's kernel.
Image convolve_exact(const Image& scene, const PsfField& field);

/// Overlapping tiles centred at multiples of tile_px, each blurred by one kernel
/// and blended with separable cos^2 / sin^2 ramps of half-width overlap_px.
struct TilePlan {
  int image_size = 0;
  int tile_px = 0;
  int overlap_px = 0;
  int tiles_per_axis = 0;
  std::vector<double> weights;  // [tile][pixel], one axis
  std::vector<int> first;       // first pixel with non-zero weight, per tile
  std::vector<int> last;        // last pixel with non-zero weight, per tile

  double weight(int tile, int px) const { return weights[static_cast<std::size_t>(tile) * image_size + px]; }
  int centre(int tile) const { return tile * tile_px; }
  int num_tiles() const { return tiles_per_axis * tiles_per_axis; }
};

/// Requires tile_px >= 1 and 0 <= 2 * overlap_px <= tile_px.
TilePlan make_tile_plan(int image_size, int tile_px, int overlap_px);

/// Kernel used for a tile: the anchor (or pixel) nearest the tile centre.
const Image& tile_kernel(const PsfField& field, const TilePlan& plan, int tile_row, int tile_col);

Image convolve_tiled(const Image& scene, const PsfField& field, int tile_px, int overlap_px);

enum class RenderPath { kExactAnchor, kExactPixel, kTiledSurrogate };

struct SimulateOptions {
  RenderPath path = RenderPath::kExactAnchor;
  const PsfBasis* surrogate = nullptr;  // required for kTiledSurrogate
  int tile_px = 0;                      // 0: anchor stride
  int overlap_px = -1;                  // -1: tile_px / 2
  int threads = 1;
};

/// Frame i uses the coefficient field keyed by (seed, i); additive Gaussian noise,
/// then clamping to [0, 1].
FrameStack simulate_stack(const SceneImage& scene, const TurbulenceParams& params, int num_frames,
                          double noise_sigma, std::uint64_t seed, const SimulateOptions& options = {});

/// Per-frame seed recorded in FrameStack::seeds.
std::uint64_t frame_seed(std::uint64_t master_seed, int frame);

// ---- file formats ---------------------------------------------------------

/// TFS1 container; frames are stored as 32-bit floats.
void save_stack(const FrameStack& stack, const std::filesystem::path& path);
/// Reads frames and master seed; params.image_size_px is set from the header.
FrameStack load_stack(const std::filesystem::path& path);

void write_pfm(const Image& img, const std::filesystem::path& path);
Image read_pfm(const std::filesystem::path& path);
/// 8-bit PGM (1 channel) or PPM (3 channels); values clamped to [0, 1].
void write_pnm(const Image& img, const std::filesystem::path& path);
Image read_pnm(const std::filesystem::path& path);

}  // namespace turbuforge
