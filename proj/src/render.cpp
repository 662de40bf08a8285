#include "turbuforge/render.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "turbuforge/binary_io.hpp"
#include "turbuforge/fft.hpp"
#include "turbuforge/parallel.hpp"
#include "turbuforge/random.hpp"

namespace turbuforge {

namespace {

void check_kernel(const Image& scene, int kernel_size) {
  if (kernel_size % 2 == 0) throw std::invalid_argument("convolve: kernel side must be odd");
  if (kernel_size > 2 * std::min(scene.rows, scene.cols) - 1) {
    throw std::invalid_argument("convolve: kernel larger than the scene supports with reflect padding");
  }
}

// Adds weight * (h * x)(u, v) for u in [r0, r1], v in [c0, c1] into out, with
// per-pixel weights wr[u] * wc[v].
void accumulate_region(const Image& x, int ch, const Image& h, int r0, int r1, int c0, int c1,
                       const double* wr, const double* wc, Image& out) {
  const int k = h.rows;
  const int rad = k / 2;
  const int n = x.rows, m = x.cols;
  for (int u = r0; u <= r1; ++u) {
    const double wu = wr ? wr[u] : 1.0;
    if (wu == 0.0) continue;
    for (int v = c0; v <= c1; ++v) {
      const double w = wu * (wc ? wc[v] : 1.0);
      if (w == 0.0) continue;
      double acc = 0.0;
      for (int a = 0; a < k; ++a) {
        const int xr = reflect_index(u - (a - rad), n);
        for (int b = 0; b < k; ++b) acc += h(a, b) * x(xr, reflect_index(v - (b - rad), m), ch);
      }
      out(u, v, ch) += w * acc;
    }
  }
}

// Bilinear weight of anchor index `a` at pixel p along one axis (clamped like
// CoefficientField::interpolate).
double anchor_weight(int a, int p, int stride, int count) {
  const double f = std::clamp(static_cast<double>(p) / stride, 0.0, static_cast<double>(count - 1));
  return std::max(0.0, 1.0 - std::abs(f - a));
}

}  // namespace

Image convolve_uniform(const Image& x, const Image& kernel) {
  if (kernel.rows != kernel.cols) throw std::invalid_argument("convolve_uniform: kernel must be square");
  check_kernel(x, kernel.rows);
  Image out(x.rows, x.cols, x.channels);
  for (int ch = 0; ch < x.channels; ++ch)
    accumulate_region(x, ch, kernel, 0, x.rows - 1, 0, x.cols - 1, nullptr, nullptr, out);
  return out;
}

Image convolve_exact(const Image& scene, const PsfField& field) {
  if (scene.rows != field.image_size || scene.cols != field.image_size) {
    throw std::invalid_argument("convolve_exact: scene is " + std::to_string(scene.rows) + "x" +
                                std::to_string(scene.cols) + " but field covers " + std::to_string(field.image_size));
  }
  check_kernel(scene, field.kernel_size);
  const int n = field.image_size;
  Image out(n, n, scene.channels);
  if (field.per_pixel()) {
    for (int ch = 0; ch < scene.channels; ++ch)
      for (int u = 0; u < n; ++u)
        for (int v = 0; v < n; ++v) {
          const Image& h = field.pixel_kernel(u, v);
          const int rad = h.rows / 2;
          double acc = 0.0;
          for (int a = 0; a < h.rows; ++a) {
            const int xr = reflect_index(u - (a - rad), n);
            for (int b = 0; b < h.cols; ++b) acc += h(a, b) * scene(xr, reflect_index(v - (b - rad), n), ch);
          }
          out(u, v, ch) = acc;
        }
    return out;
  }
  const int s = field.anchor_stride;
  std::vector<double> wr(n), wc(n);
  for (int ar = 0; ar < field.anchor_rows; ++ar) {
    for (int p = 0; p < n; ++p) wr[p] = anchor_weight(ar, p, s, field.anchor_rows);
    const int r0 = std::max(0, (ar - 1) * s);
    const int r1 = std::min(n - 1, (ar + 1) * s);
    for (int ac = 0; ac < field.anchor_cols; ++ac) {
      for (int p = 0; p < n; ++p) wc[p] = anchor_weight(ac, p, s, field.anchor_cols);
      const int c0 = std::max(0, (ac - 1) * s);
      const int c1 = std::min(n - 1, (ac + 1) * s);
      if (r0 > n - 1 || c0 > n - 1) continue;
      for (int ch = 0; ch < scene.channels; ++ch)
        accumulate_region(scene, ch, field.anchor_kernel(ar, ac), r0, r1, c0, c1, wr.data(), wc.data(), out);
    }
  }
  return out;
}

TilePlan make_tile_plan(int image_size, int tile_px, int overlap_px) {
  if (image_size < 1 || tile_px < 1) throw std::invalid_argument("make_tile_plan: sizes must be positive");
  if (overlap_px < 0 || 2 * overlap_px > tile_px) {
    throw std::invalid_argument("make_tile_plan: overlap must lie in [0, tile_px / 2]");
  }
  TilePlan plan;
  plan.image_size = image_size;
  plan.tile_px = tile_px;
  plan.overlap_px = overlap_px;
  plan.tiles_per_axis = static_cast<int>(std::floor((image_size - 1.0) / tile_px + 0.5)) + 1;
  const int t_count = plan.tiles_per_axis;
  plan.weights.assign(static_cast<std::size_t>(t_count) * image_size, 0.0);
  plan.first.assign(t_count, image_size);
  plan.last.assign(t_count, -1);
  // Ramp across the boundary beta between tiles t and t+1: weight of tile t.
  auto falling = [&](double p, double beta) {
    const double d = p - beta;
    if (overlap_px == 0) return d < 0.0 ? 1.0 : 0.0;
    if (d <= -overlap_px) return 1.0;
    if (d >= overlap_px) return 0.0;
    const double c = std::cos(std::numbers::pi / 4.0 * (1.0 + d / overlap_px));
    return c * c;
  };
  for (int t = 0; t < t_count; ++t) {
    const double lo = (t - 0.5) * tile_px;  // boundary with tile t-1
    const double hi = (t + 0.5) * tile_px;  // boundary with tile t+1
    for (int p = 0; p < image_size; ++p) {
      double w = 1.0;
      if (t > 0) w *= 1.0 - falling(p, lo);
      if (t < t_count - 1) w *= falling(p, hi);
      plan.weights[static_cast<std::size_t>(t) * image_size + p] = w;
      if (w > 0.0) {
        plan.first[t] = std::min(plan.first[t], p);
        plan.last[t] = std::max(plan.last[t], p);
      }
    }
  }
  return plan;
}

const Image& tile_kernel(const PsfField& field, const TilePlan& plan, int tile_row, int tile_col) {
  const int n = field.image_size;
  const int cr = std::min(plan.centre(tile_row), n - 1);
  const int cc = std::min(plan.centre(tile_col), n - 1);
  if (field.per_pixel()) return field.pixel_kernel(cr, cc);
  const auto nearest = [&](int c, int count) {
    return std::clamp(static_cast<int>(std::lround(static_cast<double>(c) / field.anchor_stride)), 0, count - 1);
  };
  return field.anchor_kernel(nearest(cr, field.anchor_rows), nearest(cc, field.anchor_cols));
}

Image convolve_tiled(const Image& scene, const PsfField& field, int tile_px, int overlap_px) {
  if (scene.rows != field.image_size || scene.cols != field.image_size) {
    throw std::invalid_argument("convolve_tiled: scene/field size mismatch");
  }
  check_kernel(scene, field.kernel_size);
  const int n = field.image_size;
  const auto plan = make_tile_plan(n, tile_px, overlap_px);
  const int k = field.kernel_size;
  const int rad = k / 2;
  Image out(n, n, scene.channels);
  for (int tr = 0; tr < plan.tiles_per_axis; ++tr) {
    if (plan.last[tr] < 0) continue;
    for (int tc = 0; tc < plan.tiles_per_axis; ++tc) {
      if (plan.last[tc] < 0) continue;
      const Image& h = tile_kernel(field, plan, tr, tc);
      const int r0 = plan.first[tr], r1 = plan.last[tr];
      const int c0 = plan.first[tc], c1 = plan.last[tc];
      // Reflect-padded patch covering the region plus the kernel radius.
      const int pr = r1 - r0 + 1 + 2 * rad;
      const int pc = c1 - c0 + 1 + 2 * rad;
      std::vector<double> patch(static_cast<std::size_t>(pr) * pc);
      for (int ch = 0; ch < scene.channels; ++ch) {
        for (int i = 0; i < pr; ++i)
          for (int j = 0; j < pc; ++j)
            patch[i * pc + j] = scene(reflect_index(r0 - rad + i, n), reflect_index(c0 - rad + j, n), ch);
        const auto full = fft::convolve_full(patch, pr, pc, h.data, k, k);
        const int fc = pc + k - 1;
        // full[i][j] = sum h[a][b] patch[i-a][j-b]; pixel u sits at patch row u - r0 + rad,
        // so y(u) = full[u - r0 + 2 rad].
        for (int u = r0; u <= r1; ++u)
          for (int v = c0; v <= c1; ++v)
            out(u, v, ch) += plan.weight(tr, u) * plan.weight(tc, v) *
                             full[static_cast<std::size_t>(u - r0 + 2 * rad) * fc + (v - c0 + 2 * rad)];
      }
    }
  }
  return out;
}

std::uint64_t frame_seed(std::uint64_t master_seed, int frame) {
  return derive_key(master_seed, 0x46524d, static_cast<std::uint64_t>(frame));
}

FrameStack simulate_stack(const SceneImage& scene, const TurbulenceParams& params, int num_frames,
                          double noise_sigma, std::uint64_t seed, const SimulateOptions& options) {
  params.validate();
  if (num_frames < 1) throw std::invalid_argument("simulate_stack: need at least one frame");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("simulate_stack: noise_sigma must be >= 0");
  if (scene.rows != params.image_size_px || scene.cols != params.image_size_px) {
    throw std::invalid_argument("simulate_stack: scene size does not match image_size_px");
  }
  if (options.path == RenderPath::kTiledSurrogate && options.surrogate == nullptr) {
    throw std::invalid_argument("simulate_stack: tiled surrogate path needs a fitted PsfBasis");
  }
  FrameStack stack;
  stack.params = params;
  stack.master_seed = seed;
  stack.noise_sigma = noise_sigma;
  stack.frames.resize(num_frames);
  stack.seeds.resize(num_frames);
  const auto cov = noll_covariance(params.num_zernike, params.d_over_r0());
  const auto zb = build_zernike_basis(params.num_zernike, params.kernel_size_px);
  const int tile = options.tile_px > 0 ? options.tile_px : params.anchor_stride_px;
  const int overlap = options.overlap_px >= 0 ? options.overlap_px : tile / 2;

  parallel_for(num_frames, options.threads, [&](int i) {
    const std::uint64_t fs = frame_seed(seed, i);
    stack.seeds[i] = fs;
    const auto coeffs = sample_coefficient_field(cov, params, seed, static_cast<std::uint64_t>(i));
    Image frame;
    switch (options.path) {
      case RenderPath::kExactAnchor:
        frame = convolve_exact(scene, exact_anchor_field(coeffs, zb));
        break;
      case RenderPath::kExactPixel:
        frame = convolve_exact(scene, exact_pixel_field(coeffs, zb));
        break;
      case RenderPath::kTiledSurrogate:
        frame = convolve_tiled(scene, surrogate_anchor_field(coeffs, *options.surrogate), tile, overlap);
        break;
    }
    if (noise_sigma > 0.0) {
      const std::uint64_t key = derive_key(fs, 0x4e4f495345);
      for (std::size_t p = 0; p < frame.data.size(); ++p) frame.data[p] += noise_sigma * CounterRng::normal(key, p);
    }
    frame.clamp(0.0, 1.0);
    stack.frames[i] = std::move(frame);
  });
  return stack;
}

// ---- file formats ---------------------------------------------------------

void save_stack(const FrameStack& stack, const std::filesystem::path& path) {
  if (stack.frames.empty()) throw std::invalid_argument("save_stack: empty stack");
  const Image& f0 = stack.frames.front();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_stack: cannot open " + path.string());
  bin::put_magic(os, "TFS1");
  bin::put<std::uint32_t>(os, 1);
  bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(stack.frames.size()));
  bin::put<std::uint32_t>(os, f0.rows);
  bin::put<std::uint32_t>(os, f0.cols);
  bin::put<std::uint32_t>(os, f0.channels);
  bin::put<std::uint32_t>(os, stack.flags | (stack.noise_sigma > 0.0 ? 1u : 0u));
  bin::put<std::uint64_t>(os, stack.master_seed);
  for (const auto& f : stack.frames) {
    if (!f.same_shape(f0)) throw std::invalid_argument("save_stack: frames differ in shape");
    bin::put_f32(os, f.data);
  }
  if (!os) throw std::runtime_error("save_stack: write failed for " + path.string());
}

FrameStack load_stack(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_stack: cannot open " + path.string());
  bin::expect_magic(is, "TFS1");
  const auto version = bin::get<std::uint32_t>(is);
  if (version != 1) throw std::runtime_error("load_stack: unsupported version " + std::to_string(version));
  const auto count = bin::get<std::uint32_t>(is);
  const auto rows = bin::get<std::uint32_t>(is);
  const auto cols = bin::get<std::uint32_t>(is);
  const auto channels = bin::get<std::uint32_t>(is);
  const auto flags = bin::get<std::uint32_t>(is);
  if (count == 0 || rows == 0 || rows != cols || (channels != 1 && channels != 3)) {
    throw std::runtime_error("load_stack: corrupt header in " + path.string());
  }
  FrameStack stack;
  stack.flags = flags;
  stack.master_seed = bin::get<std::uint64_t>(is);
  stack.params.image_size_px = static_cast<int>(rows);
  for (std::uint32_t i = 0; i < count; ++i) {
    Image f(rows, cols, channels);
    f.data = bin::get_f32(is, f.size());
    stack.frames.push_back(std::move(f));
    stack.seeds.push_back(frame_seed(stack.master_seed, static_cast<int>(i)));
  }
  return stack;
}

void write_pfm(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_pfm: 1 or 3 channels");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pfm: cannot open " + path.string());
  os << (img.channels == 3 ? "PF" : "Pf") << "\n" << img.cols << " " << img.rows << "\n-1.0\n";
  // PFM scanlines run bottom to top; channels interleave.
  for (int r = img.rows - 1; r >= 0; --r)
    for (int c = 0; c < img.cols; ++c)
      for (int ch = 0; ch < img.channels; ++ch) bin::put<float>(os, static_cast<float>(img(r, c, ch)));
  if (!os) throw std::runtime_error("write_pfm: write failed for " + path.string());
}

Image read_pfm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_pfm: cannot open " + path.string());
  std::string tag;
  int cols = 0, rows = 0;
  double scale = 0.0;
  is >> tag >> cols >> rows >> scale;
  is.get();
  if ((tag != "Pf" && tag != "PF") || rows <= 0 || cols <= 0 || scale >= 0.0) {
    throw std::runtime_error("read_pfm: unsupported header in " + path.string());
  }
  Image img(rows, cols, tag == "PF" ? 3 : 1);
  for (int r = rows - 1; r >= 0; --r)
    for (int c = 0; c < cols; ++c)
      for (int ch = 0; ch < img.channels; ++ch) img(r, c, ch) = bin::get<float>(is);
  return img;
}

void write_pnm(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_pnm: 1 or 3 channels");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pnm: cannot open " + path.string());
  os << (img.channels == 3 ? "P6" : "P5") << "\n" << img.cols << " " << img.rows << "\n255\n";
  for (int r = 0; r < img.rows; ++r)
    for (int c = 0; c < img.cols; ++c)
      for (int ch = 0; ch < img.channels; ++ch) {
        const double v = std::clamp(img(r, c, ch), 0.0, 1.0);
        os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
  if (!os) throw std::runtime_error("write_pnm: write failed for " + path.string());
}

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_pnm: cannot open " + path.string());
  std::string tag;
  int cols = 0, rows = 0, maxval = 0;
  is >> tag;
  auto next_int = [&is]() {
    is >> std::ws;
    while (is.peek() == '#') {
      std::string skip;
      std::getline(is, skip);
      is >> std::ws;
    }
    int v = 0;
    is >> v;
    return v;
  };
  cols = next_int();
  rows = next_int();
  maxval = next_int();
  is.get();
  if ((tag != "P5" && tag != "P6") || rows <= 0 || cols <= 0 || maxval <= 0 || maxval > 255) {
    throw std::runtime_error("read_pnm: unsupported header in " + path.string());
  }
  Image img(rows, cols, tag == "P6" ? 3 : 1);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      for (int ch = 0; ch < img.channels; ++ch) {
        const int v = is.get();
        if (v == EOF) throw std::runtime_error("read_pnm: truncated pixel data");
        img(r, c, ch) = static_cast<double>(v) / maxval;
      }
  return img;
}

}  // namespace turbuforge
