#include "turbuforge/charts.hpp"

#include <array>
#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>

#include "turbuforge/random.hpp"

namespace turbuforge {

namespace {

constexpr int kSuper = 4;

// Coverage-averaged rendering of f(x, y) over [0, 1)^2 (x = column, y = row).
Image rasterize(int n, const std::function<double(double, double)>& f) {
  Image img = Image::square(n);
  const double inv = 1.0 / (n * kSuper);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      double acc = 0.0;
      for (int sr = 0; sr < kSuper; ++sr)
        for (int sc = 0; sc < kSuper; ++sc) acc += f((c * kSuper + sc + 0.5) * inv, (r * kSuper + sr + 0.5) * inv);
      img(r, c) = acc / (kSuper * kSuper);
    }
  return img;
}

bool in_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
  const double dx = (x - cx) / rx, dy = (y - cy) / ry;
  return dx * dx + dy * dy <= 1.0;
}

// Seven-segment glyph masks: bit order a b c d e f g.
constexpr std::array<unsigned, 10> kSegments{0x3F, 0x06, 0x5B, 0x4F, 0x66, 0x6D, 0x7D, 0x07, 0x7F, 0x6F};

bool on_segment(unsigned mask, double u, double v) {
  constexpr double t = 0.16;  // stroke half-thickness in glyph units
  auto h = [&](double y0) { return std::abs(v - y0) <= t && u >= 0.1 && u <= 0.9; };
  auto vert = [&](double x0, double y0, double y1) { return std::abs(u - x0) <= t && v >= y0 && v <= y1; };
  return ((mask & 0x01) && h(0.08)) || ((mask & 0x02) && vert(0.88, 0.08, 0.5)) ||
         ((mask & 0x04) && vert(0.88, 0.5, 0.92)) || ((mask & 0x08) && h(0.92)) ||
         ((mask & 0x10) && vert(0.12, 0.5, 0.92)) || ((mask & 0x20) && vert(0.12, 0.08, 0.5)) ||
         ((mask & 0x40) && h(0.5));
}

Image digits(int n, std::uint64_t seed) {
  Rng rng(derive_key(seed, 0x444947));
  std::array<int, 4> d{};
  for (auto& v : d) v = rng.uniform_int(10);
  return rasterize(n, [&](double x, double y) {
    const int gc = x < 0.5 ? 0 : 1, gr = y < 0.5 ? 0 : 1;
    const double u = (x - 0.5 * gc - 0.1) / 0.3, v = (y - 0.5 * gr - 0.05) / 0.4;
    if (u < 0 || u > 1 || v < 0 || v > 1) return 0.1;
    return on_segment(kSegments[d[gr * 2 + gc]], u, v) ? 0.9 : 0.1;
  });
}

Image wedges(int n) {
  return rasterize(n, [](double x, double y) {
    const double angle = std::atan2(y - 0.5, x - 0.5);
    return std::sin(8.0 * angle) >= 0.0 ? 0.85 : 0.15;
  });
}

Image checkerboard(int n) {
  return rasterize(n, [](double x, double y) {
    const int i = static_cast<int>(std::floor(x * 8.0)), j = static_cast<int>(std::floor(y * 8.0));
    return ((i + j) % 2 == 0) ? 0.8 : 0.2;
  });
}

Image face(int n) {
  return rasterize(n, [](double x, double y) {
    double v = 0.15 + 0.1 * y;  // background gradient
    if (in_ellipse(x, y, 0.5, 0.3, 0.36, 0.24)) v = 0.25;  // hair
    if (in_ellipse(x, y, 0.5, 0.54, 0.3, 0.38)) {
      v = 0.7 - 0.15 * std::hypot(x - 0.5, y - 0.54);  // skin with soft shading
      if (in_ellipse(x, y, 0.37, 0.46, 0.07, 0.04) || in_ellipse(x, y, 0.63, 0.46, 0.07, 0.04)) v = 0.9;
      if (in_ellipse(x, y, 0.37, 0.46, 0.03, 0.03) || in_ellipse(x, y, 0.63, 0.46, 0.03, 0.03)) v = 0.1;
      if (std::abs(y - 0.385) < 0.015 && (std::abs(x - 0.37) < 0.08 || std::abs(x - 0.63) < 0.08)) v = 0.2;
      if (in_ellipse(x, y, 0.5, 0.6, 0.04, 0.08)) v = 0.55;  // nose
      if (in_ellipse(x, y, 0.5, 0.75, 0.12, 0.03)) v = 0.3;  // mouth
    }
    return v;
  });
}

}  // namespace

Image make_chart(ChartKind kind, int size, int channels, std::uint64_t seed) {
  if (size < 8) throw std::invalid_argument("make_chart: size must be at least 8");
  if (channels != 1 && channels != 3) throw std::invalid_argument("make_chart: channels must be 1 or 3");
  Image gray;
  switch (kind) {
    case ChartKind::kDigits: gray = digits(size, seed); break;
    case ChartKind::kWedges: gray = wedges(size); break;
    case ChartKind::kCheckerboard: gray = checkerboard(size); break;
    case ChartKind::kFaceLike: gray = face(size); break;
  }
  if (channels == 1) return gray;
  Image rgb(size, size, 3);
  constexpr std::array<double, 3> tint{1.0, 0.9, 0.8};
  for (int ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < gray.size(); ++i) rgb.data[ch * gray.size() + i] = 0.1 + (gray.data[i] - 0.1) * tint[ch];
  return rgb;
}

ChartKind parse_chart_kind(const std::string& name) {
  if (name == "digits") return ChartKind::kDigits;
  if (name == "wedges") return ChartKind::kWedges;
  if (name == "checkerboard") return ChartKind::kCheckerboard;
  if (name == "face") return ChartKind::kFaceLike;
  throw std::invalid_argument("unknown chart '" + name + "' (expected digits, wedges, checkerboard or face)");
}

std::string chart_name(ChartKind kind) {
  switch (kind) {
    case ChartKind::kDigits: return "digits";
    case ChartKind::kWedges: return "wedges";
    case ChartKind::kCheckerboard: return "checkerboard";
    case ChartKind::kFaceLike: return "face";
  }
  return "unknown";
}

}  // namespace turbuforge
