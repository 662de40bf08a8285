#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace turbuforge {

/// Planar multi-channel image, stored [channel][row][col], double precision.
struct Image {
  int rows = 0;
  int cols = 0;
  int channels = 1;
  std::vector<double> data;

  Image() = default;
  Image(int rows_, int cols_, int channels_ = 1, double fill = 0.0)
      : rows(rows_), cols(cols_), channels(channels_),
        data(static_cast<std::size_t>(rows_) * cols_ * channels_, fill) {
    if (rows_ <= 0 || cols_ <= 0 || channels_ <= 0) {
      throw std::invalid_argument("Image: dimensions must be positive");
    }
  }

  static Image square(int side, double fill = 0.0) { return Image(side, side, 1, fill); }

  std::size_t plane_size() const { return static_cast<std::size_t>(rows) * cols; }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  double& operator()(int r, int c, int ch = 0) {
    return data[ch * plane_size() + static_cast<std::size_t>(r) * cols + c];
  }
  double operator()(int r, int c, int ch = 0) const {
    return data[ch * plane_size() + static_cast<std::size_t>(r) * cols + c];
  }

  std::span<double> plane(int ch) { return {data.data() + ch * plane_size(), plane_size()}; }
  std::span<const double> plane(int ch) const {
    return {data.data() + ch * plane_size(), plane_size()};
  }

  bool same_shape(const Image& o) const {
    return rows == o.rows && cols == o.cols && channels == o.channels;
  }

  double sum() const;
  double mean() const { return sum() / static_cast<double>(data.size()); }
  double min() const;
  double max() const;
  void clamp(double lo, double hi);
};

double l2_norm(const Image& a);
double l2_distance(const Image& a, const Image& b);
/// ||a - b|| / ||b||
double relative_l2(const Image& a, const Image& b);

/// 10 log10(1 / MSE) for unit peak, capped at 99 dB.
double psnr(const Image& img, const Image& ref);
inline constexpr double kPsnrCapDb = 99.0;

/// Circular shift by (dr, dc) with wrap-around.
Image circular_shift(const Image& img, int dr, int dc);

/// Index reflection without edge repeat (-1 -> 1, n -> n-2). Requires n >= 2 or idx in range.
inline int reflect_index(int idx, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  idx %= period;
  if (idx < 0) idx += period;
  return idx < n ? idx : period - idx;
}

inline int wrap_index(int idx, int n) {
  idx %= n;
  return idx < 0 ? idx + n : idx;
}

}  // namespace turbuforge
