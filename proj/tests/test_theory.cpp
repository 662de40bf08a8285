#include <cmath>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"

#include "turbuforge/charts.hpp"
#include "turbuforge/fft.hpp"
#include "turbuforge/random.hpp"
#include "turbuforge/theory.hpp"

using namespace turbuforge;
using namespace turbuforge::theory;

namespace {

Image random_image(int n, std::uint64_t seed) {
  Rng rng(seed);
  Image img = Image::square(n);
  for (double& v : img.data) v = rng.uniform();
  return img;
}

Image shift(const Image& x, int dr, int dc) {
  Image out = Image::square(x.rows);
  for (int r = 0; r < x.rows; ++r)
    for (int c = 0; c < x.cols; ++c) out(wrap_index(r + dr, x.rows), wrap_index(c + dc, x.cols)) = x(r, c);
  return out;
}

}  // namespace

TEST_CASE("the delta family has a full mask below tau = 1") {
  const auto m = analytic_spectral_mask(delta_family(), 16, 0.999);
  CHECK(m.coverage() == 1.0);
  const auto e = estimate_spectral_mask(delta_family(), 16, 100, 0.5, 1);
  CHECK(e.coverage() == 1.0);
}

TEST_CASE("an ideal low-pass kernel yields exactly its passband") {
  const int n = 15;
  const double cutoff = 0.25;
  const auto fam = fixed_family(ideal_lowpass_kernel(n, cutoff), "lowpass");
  CHECK_FALSE(fam.non_negative);
  const auto m = analytic_spectral_mask(fam, n, 0.5);
  for (int u = 0; u < n; ++u)
    for (int v = 0; v < n; ++v) {
      const double fu = static_cast<double>(u <= n / 2 ? u : u - n) / n;
      const double fv = static_cast<double>(v <= n / 2 ? v : v - n) / n;
      CHECK(m.mask[static_cast<std::size_t>(u) * n + v] == (std::hypot(fu, fv) <= cutoff ? 1 : 0));
    }
}

TEST_CASE("closed-form and sampled power spectra agree for the two-kernel family") {
  const auto fam = two_kernel_family();
  const auto a = analytic_spectral_mask(fam, 16, 1e-3);
  const auto e = estimate_spectral_mask(fam, 16, 20000, 1e-3, 2);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.psd.size(); ++i) worst = std::max(worst, std::abs(a.psd[i] - e.psd[i]));
  CHECK(worst < 0.02);
}

TEST_CASE("turbulence masks thin out with frequency") {
  auto p = TurbulenceParams::defaults_for(32);
  p.set_d_over_r0(2.0);
  const auto m = estimate_spectral_mask(zernike_family(p), 32, 200, 1e-3, 3);
  const auto prof = radial_profile(m);
  REQUIRE(prof.size() > 4);
  CHECK(prof.front() == 1.0);
  CHECK(prof.back() <= prof.front());
  CHECK(m.coverage() > 0.0);
  CHECK(m.coverage() < 1.0);
}

TEST_CASE("masked magnitude error ignores phase") {
  const Image x = random_image(16, 4);
  const auto m = analytic_spectral_mask(delta_family(), 16, 0.5);
  CHECK(masked_magnitude_error(x, x, m) == 0.0);
  CHECK(masked_magnitude_error(x, shift(x, 3, -5), m) < 1e-12);
  CHECK(masked_magnitude_error(x, random_image(16, 5), m) > 0.3);
  CHECK(masked_relative_l2(shift(x, 1, 0), x, m) > 0.1);
  CHECK_THROWS_AS(masked_magnitude_error(x, random_image(8, 1), m), std::invalid_argument);
}

TEST_CASE("the delta-family oracle is exact") {
  const Image x = make_chart(ChartKind::kDigits, 16, 1, 0);
  const auto r = isoplanatic_oracle(x, delta_family(), 4, 1);
  CHECK(masked_magnitude_error(x, r.estimate, r.mask) < 1e-10);
  CHECK_FALSE(r.underdetermined);
}

TEST_CASE("the two-kernel oracle recovers masked magnitudes") {
  const Image x = make_chart(ChartKind::kFaceLike, 16, 1, 0);
  const auto r = isoplanatic_oracle(x, two_kernel_family(), 4096, 7);
  const double err = masked_magnitude_error(x, r.estimate, r.mask);
  MESSAGE("two-kernel masked magnitude error = " << err);
  CHECK(err < 0.05);
}

TEST_CASE("the Gaussian first-moment oracle recovers the masked spectrum") {
  const Image x = make_chart(ChartKind::kFaceLike, 16, 1, 0);
  OracleOptions opt;
  opt.moment = OracleMoment::kFirst;
  const auto r = isoplanatic_oracle(x, gaussian_family(0.5, 1.5, 7), 8192, 8, opt);
  const double err = masked_relative_l2(r.estimate, x, r.mask);
  MESSAGE("gaussian masked rel L2 = " << err);
  CHECK(err < 0.10);
}

TEST_CASE("oracle observations equal explicit circular blurs") {
  const Image x = random_image(12, 9);
  const auto fam = two_kernel_family();
  const auto ys = isoplanatic_observations(x, fam, 3, 11);
  for (int i = 0; i < 3; ++i) CHECK(l2_distance(ys[i], oracle::circular_conv(x, fam.sample(11, i))) < 1e-12);
}

TEST_CASE("misspecification check separates corrected and true scenes") {
  const Image x = make_chart(ChartKind::kWedges, 16, 1, 0);
  Image hc = Image::square(3, 1.0 / 9.0);
  const auto m = analytic_spectral_mask(delta_family(), 16, 0.5);
  const Image corrected = fft::circular_convolve(x, hc);
  const auto r = misspecification_check(x, hc, corrected, m);
  CHECK(r.rel_l2_to_corrected < 1e-12);
  CHECK(r.masked_to_corrected < 1e-12);
  CHECK(r.masked_to_truth > 0.0);
  CHECK(r.closer_to_corrected());
  Image delta = Image::square(3);
  delta(1, 1) = 1.0;
  const auto s = misspecification_check(x, delta, x, m);
  CHECK(s.rel_l2_to_truth == 0.0);
  CHECK(s.rel_l2_to_corrected < 1e-12);
}

TEST_CASE("check records are single-line JSON") {
  std::ostringstream os;
  write_jsonl(os, {"two_kernel", "abc", 0.01, 0.05, true});
  const std::string line = os.str();
  REQUIRE(line.back() == '\n');
  CHECK(line.find('\n') == line.size() - 1);
  const auto j = nlohmann::json::parse(line);
  CHECK(j["name"] == "two_kernel");
  CHECK(j["pass"] == true);
  CHECK(j["metric"] == 0.01);
}

TEST_CASE("narrow masks are flagged as underdetermined") {
  Image wide = Image::square(15, 1.0 / 225.0);
  const Image x = random_image(16, 12);
  const auto r = isoplanatic_oracle(x, fixed_family(wide, "box15"), 2, 1, OracleOptions{OracleMoment::kSecond, 0.5});
  CHECK(r.mask.coverage() < 0.1);
  CHECK(r.underdetermined);
}
