#include <cmath>

#include "doctest.h"
#include "oracles.hpp"

#include "turbuforge/charts.hpp"
#include "turbuforge/nn.hpp"
#include "turbuforge/random.hpp"

using namespace turbuforge;
using T64 = ad::Tensor<double>;

TEST_CASE("discriminator maps frames to one score each") {
  nn::DiscriminatorSpec spec;
  spec.widths = {8, 16, 32, 64};
  nn::Discriminator<double> d(spec, 1);
  const Image x = make_chart(ChartKind::kFaceLike, 32, 1, 0);
  const auto frames = nn::frames_to_tensor<double>({x, x, x}, {0, 1, 2});
  const auto s = d.forward(frames);
  REQUIRE(s.shape() == ad::Shape{3});
  CHECK(s.values()[0] == s.values()[1]);
  const auto names = d.parameter_names();
  CHECK(names.size() == d.parameters().size());
  CHECK(names.front() == "disc.conv0.weight");
  CHECK(names.back() == "disc.linear.bias");
}

TEST_CASE("discriminator initialisation is seeded") {
  nn::DiscriminatorSpec spec;
  spec.widths = {4, 8};
  nn::Discriminator<double> a(spec, 7), b(spec, 7), c(spec, 8);
  CHECK(a.parameters()[0].values() == b.parameters()[0].values());
  CHECK(a.parameters()[0].values() != c.parameters()[0].values());
}

TEST_CASE("empty widths give a linear discriminator") {
  nn::DiscriminatorSpec spec;
  spec.widths = {};
  spec.image_size = 8;
  nn::Discriminator<double> d(spec, 3);
  Rng rng(4);
  Image a(8, 8), b(8, 8);
  for (double& v : a.data) v = rng.uniform();
  for (double& v : b.data) v = rng.uniform();
  Image mix(8, 8);
  for (std::size_t i = 0; i < mix.size(); ++i) mix.data[i] = 0.25 * a.data[i] + 0.75 * b.data[i];
  const auto s = d.forward(nn::frames_to_tensor<double>({a, b, mix}, {0, 1, 2})).values();
  CHECK(std::abs(s[2] - (0.25 * s[0] + 0.75 * s[1])) < 1e-12);
}

TEST_CASE("pixel generator reproduces its initial image") {
  nn::GeneratorSpec spec;
  const Image init = make_chart(ChartKind::kDigits, 32, 1, 5);
  nn::Generator<double> g(spec, 1);
  g.initialize_from(init);
  const Image out = nn::tensor_to_image(g.forward());
  CHECK(l2_distance(out, init) / std::sqrt(double(init.size())) < 1e-12);
  CHECK(g.num_parameters() == 32u * 32u);
}

TEST_CASE("untrained-conv generator output lies in the unit interval") {
  nn::GeneratorSpec spec;
  spec.kind = nn::GeneratorKind::kUntrainedConv;
  spec.channels = 3;
  spec.widths = {4, 8};
  nn::Generator<double> g(spec, 2);
  const auto x = g.forward();
  REQUIRE(x.shape() == ad::Shape{3, 32, 32});
  for (double v : x.values()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  // Gradients reach every generator parameter.
  const auto grads = ad::backward(ad::mean(ad::square(g.forward())));
  for (const auto& p : g.parameters()) CHECK(grads.contains(p));
}

TEST_CASE("adam matches a scalar reference implementation") {
  nn::AdamOptions opt{0.01, 0.5, 0.9, 1e-8};
  const T64 p = T64::parameter({3}, {0.5, -1.0, 2.0});
  nn::Adam<double> adam({p}, opt);
  std::vector<double> x = {0.5, -1.0, 2.0}, m(3, 0.0), v(3, 0.0);
  for (int t = 1; t <= 5; ++t) {
    std::vector<double> g(3);
    for (int i = 0; i < 3; ++i) g[i] = std::sin(t + i) * (i + 1);
    adam.step(std::vector<T64>{T64::constant({3}, g)});
    for (int i = 0; i < 3; ++i) {
      m[i] = 0.5 * m[i] + 0.5 * g[i];
      v[i] = 0.9 * v[i] + 0.1 * g[i] * g[i];
      const double mh = m[i] / (1.0 - std::pow(0.5, t)), vh = v[i] / (1.0 - std::pow(0.9, t));
      x[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  CHECK(adam.steps() == 5);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(p.values()[i] - x[i]) < 1e-14);
}

TEST_CASE("image tensor conversions round trip") {
  const Image x = make_chart(ChartKind::kWedges, 16, 3, 0);
  const Image y = nn::tensor_to_image(nn::image_to_tensor<double>(x));
  CHECK(x.data == y.data);
  const auto t = nn::frames_to_tensor<float>({x, x}, {1, 0});
  CHECK(t.shape() == ad::Shape{2, 3, 16, 16});
}
