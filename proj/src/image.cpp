#include "turbuforge/image.hpp"
#include "turbuforge/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace turbuforge {

double Image::sum() const {
  double s = 0.0;
  for (double v : data) s += v;
  return s;
}

double Image::min() const { return *std::min_element(data.begin(), data.end()); }
double Image::max() const { return *std::max_element(data.begin(), data.end()); }

void Image::clamp(double lo, double hi) {
  for (double& v : data) v = std::clamp(v, lo, hi);
}

double l2_norm(const Image& a) {
  double s = 0.0;
  for (double v : a.data) s += v * v;
  return std::sqrt(s);
}

double l2_distance(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("l2_distance: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double relative_l2(const Image& a, const Image& b) {
  const double denom = l2_norm(b);
  if (denom == 0.0) throw std::domain_error("relative_l2: zero reference");
  return l2_distance(a, b) / denom;
}

double psnr(const Image& img, const Image& ref) {
  const double d = l2_distance(img, ref);
  const double mse = d * d / static_cast<double>(ref.size());
  if (mse <= 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, -10.0 * std::log10(mse));
}

Image circular_shift(const Image& img, int dr, int dc) {
  Image out(img.rows, img.cols, img.channels);
  for (int ch = 0; ch < img.channels; ++ch)
    for (int r = 0; r < img.rows; ++r)
      for (int c = 0; c < img.cols; ++c)
        out(wrap_index(r + dr, img.rows), wrap_index(c + dc, img.cols), ch) = img(r, c, ch);
  return out;
}

double CounterRng::normal(std::uint64_t key, std::uint64_t counter) {
  const double u1 = uniform(key, 2 * counter);
  const double u2 = uniform(key, 2 * counter + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double t = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(t);
  has_spare_ = true;
  return r * std::cos(t);
}

}  // namespace turbuforge
