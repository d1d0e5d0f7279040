#include <doctest.h>

#include <cmath>

#include "mococxr/augment.hpp"

using namespace mococxr;
using namespace mococxr::augment;

namespace {

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(h * w);
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  return Tensor({1, h, w}, std::move(v));
}

Tensor constant_image(std::size_t h, std::size_t w, float c) { return Tensor({1, h, w}, std::vector<float>(h * w, c)); }

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.at(i) != b.at(i)) return false;
  }
  return true;
}

// Direct per-pixel bilinear resample with half-pixel centres and edge clamping.
float bilinear_oracle(const Tensor& img, std::size_t size, std::size_t oy, std::size_t ox) {
  const double h = static_cast<double>(img.dim(1)), w = static_cast<double>(img.dim(2));
  const double sy = std::clamp((oy + 0.5) * h / size - 0.5, 0.0, h - 1.0);
  const double sx = std::clamp((ox + 0.5) * w / size - 0.5, 0.0, w - 1.0);
  const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
  const auto y1 = std::min<std::size_t>(y0 + 1, img.dim(1) - 1), x1 = std::min<std::size_t>(x0 + 1, img.dim(2) - 1);
  const double fy = sy - y0, fx = sx - x0;
  auto px = [&](std::size_t y, std::size_t x) { return static_cast<double>(img.at(y * img.dim(2) + x)); };
  return static_cast<float>((1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x1)) +
                            fy * ((1 - fx) * px(y1, x0) + fx * px(y1, x1)));
}

}  // namespace

TEST_CASE("rotate by zero is an exact copy") {
  const auto img = random_image(9, 9, 1);
  CHECK(bitwise_equal(rotate(img, 0.0), img));
}

TEST_CASE("rotating a constant image keeps interior pixels exact") {
  const std::size_t n = 17;
  const float c = 0.37f;
  const auto img = constant_image(n, n, c);
  for (double deg : {-45.0, -10.0, 3.3, 10.0, 27.0, 45.0}) {
    const auto out = rotate(img, deg);
    const double theta = deg * std::numbers::pi / 180.0;
    const double ctr = (n - 1) / 2.0;
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double dx = x - ctr, dy = y - ctr;
        const double sx = std::cos(theta) * dx + std::sin(theta) * dy + ctr;
        const double sy = -std::sin(theta) * dx + std::cos(theta) * dy + ctr;
        // All four taps in bounds.
        if (sx >= 0 && sy >= 0 && std::floor(sx) + 1 <= n - 1 && std::floor(sy) + 1 <= n - 1) {
          CHECK(out.at(y * n + x) == c);
        }
      }
    }
  }
}

TEST_CASE("rotate then rotate back approximates the input on the central half-window") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    // Smooth image: a few low-frequency waves.
    const std::size_t n = 32;
    Rng rng(seed);
    std::vector<float> v(n * n);
    const double fx = rng.uniform(0.5, 2.0), fy = rng.uniform(0.5, 2.0), ph = rng.uniform(0.0, 6.28);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x)
        v[y * n + x] = static_cast<float>(0.5 + 0.4 * std::sin(2 * std::numbers::pi * (fx * x + fy * y) / n + ph));
    const Tensor img({1, n, n}, v);
    const auto back = rotate(rotate(img, 10.0), -10.0);
    double worst = 0.0;
    for (std::size_t y = n / 4; y < 3 * n / 4; ++y)
      for (std::size_t x = n / 4; x < 3 * n / 4; ++x) worst = std::max(worst, std::abs(double(back.at(y * n + x)) - v[y * n + x]));
    CHECK(worst < 0.05);
  }
}

TEST_CASE("rotate rejects angles beyond the engine limit and keeps values in range") {
  const auto img = random_image(8, 8, 2);
  CHECK_THROWS_AS(rotate(img, 45.5), std::invalid_argument);
  CHECK_THROWS_AS(rotate(img, -90), std::invalid_argument);
  const auto out = rotate(img, 33.0);
  for (float v : out.values()) CHECK((v >= 0.0f && v <= 1.0f));
  CHECK_THROWS_AS(rotate(Tensor({2, 3, 3}), 1.0), std::invalid_argument);
}

TEST_CASE("hflip examples") {
  const Tensor img({1, 2, 2}, {1, 2, 3, 4});
  const auto f = hflip(img);
  CHECK(f.at(0) == 2);
  CHECK(f.at(1) == 1);
  CHECK(f.at(2) == 4);
  CHECK(f.at(3) == 3);
  const auto r = random_image(5, 7, 3);
  CHECK(bitwise_equal(hflip(hflip(r)), r));
  const Tensor sym({1, 2, 3}, {0.1f, 0.5f, 0.1f, 0.9f, 0.2f, 0.9f});
  CHECK(bitwise_equal(hflip(sym), sym));
}

TEST_CASE("resize examples") {
  const auto img = random_image(6, 6, 4);
  CHECK(bitwise_equal(resize(img, 6), img));
  const auto c = resize(constant_image(5, 7, 0.25f), 3);
  for (float v : c.values()) CHECK(v == 0.25f);
  CHECK_THROWS_AS(resize(img, 0), std::invalid_argument);
  SUBCASE("4x4 checkerboard to 2x2 averages to one half") {
    std::vector<float> v(16);
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) v[y * 4 + x] = static_cast<float>((x + y) % 2);
    const Tensor board({1, 4, 4}, v);
    const auto out = resize(board, 2);
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) {
        CHECK(out.at(y * 2 + x) == 0.5f);
        CHECK(out.at(y * 2 + x) == doctest::Approx(bilinear_oracle(board, 2, y, x)).epsilon(1e-7));
      }
  }
  SUBCASE("matches the direct bilinear oracle up and down") {
    const auto src = random_image(7, 5, 5);
    for (std::size_t size : {3u, 4u, 9u, 13u}) {
      const auto out = resize(src, size);
      CHECK(out.shape() == diffcore::Shape{1, size, size});
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) CHECK(out.at(y * size + x) == doctest::Approx(bilinear_oracle(src, size, y, x)).epsilon(1e-6));
    }
  }
}

TEST_CASE("make_view_pair with a degenerate spec returns the input twice") {
  AugmentSpec spec;
  spec.max_rotation_degrees = 0.0;
  spec.hflip_probability = 0.0;
  spec.output_size = 8;
  Rng rng(1);
  const auto img = random_image(8, 8, 6);
  const auto pair = make_view_pair(img, 3, spec, rng);
  CHECK(bitwise_equal(pair.view_q, img));
  CHECK(bitwise_equal(pair.view_k, img));
  CHECK(pair.source_id == 3);
}

TEST_CASE("make_view_pair is deterministic under a fixed rng state") {
  AugmentSpec spec;
  spec.output_size = 12;
  const auto img = random_image(12, 12, 7);
  Rng a(99), b(99);
  const auto p = make_view_pair(img, 0, spec, a);
  const auto q = make_view_pair(img, 0, spec, b);
  CHECK(bitwise_equal(p.view_q, q.view_q));
  CHECK(bitwise_equal(p.view_k, q.view_k));
  CHECK_FALSE(bitwise_equal(p.view_q, p.view_k));
  CHECK_THROWS_AS(make_view_pair(random_image(10, 10, 1), 0, spec, a), std::invalid_argument);
}

TEST_CASE("augmented outputs stay in range and keep their shape") {
  AugmentSpec spec;
  spec.output_size = 10;
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const auto pair = make_view_pair(random_image(10, 10, i), i, spec, rng);
    for (const auto* v : {&pair.view_q, &pair.view_k}) {
      CHECK(v->shape() == diffcore::Shape{1, 10, 10});
      for (float x : v->values()) CHECK((x >= 0.0f && x <= 1.0f));
    }
  }
}

TEST_CASE("flip frequency over 10000 draws is within [0.48, 0.52]") {
  // A flip shows up as a mirrored single-pixel marker when rotation is off.
  AugmentSpec spec;
  spec.max_rotation_degrees = 0.0;
  spec.hflip_probability = 0.5;
  spec.output_size = 4;
  Tensor img({1, 4, 4});
  img.values_mut()[0] = 1.0f;
  Rng rng(2024);
  std::size_t flips = 0, draws = 0;
  for (int i = 0; i < 5000; ++i) {
    const auto pair = make_view_pair(img, 0, spec, rng);
    for (const auto* v : {&pair.view_q, &pair.view_k}) {
      ++draws;
      flips += v->at(3) == 1.0f;
    }
  }
  const double freq = static_cast<double>(flips) / static_cast<double>(draws);
  CHECK(draws == 10000);
  CHECK(freq >= 0.48);
  CHECK(freq <= 0.52);
}

TEST_CASE("angles of the two views are uncorrelated over 10000 pairs") {
  // Replay the documented draw order: angle, then flip, for view q then view k.
  AugmentSpec spec;
  Rng rng(31337);
  std::vector<double> aq, ak;
  for (int i = 0; i < 10000; ++i) {
    aq.push_back(rng.uniform(-spec.max_rotation_degrees, spec.max_rotation_degrees));
    rng.bernoulli(spec.hflip_probability);
    ak.push_back(rng.uniform(-spec.max_rotation_degrees, spec.max_rotation_degrees));
    rng.bernoulli(spec.hflip_probability);
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / v.size();
  };
  const double mq = mean(aq), mk = mean(ak);
  double sqk = 0, sqq = 0, skk = 0;
  for (std::size_t i = 0; i < aq.size(); ++i) {
    sqk += (aq[i] - mq) * (ak[i] - mk);
    sqq += (aq[i] - mq) * (aq[i] - mq);
    skk += (ak[i] - mk) * (ak[i] - mk);
  }
  CHECK(std::abs(sqk / std::sqrt(sqq * skk)) < 0.05);
  // Every angle within the configured bound.
  for (double a : aq) CHECK(std::abs(a) <= spec.max_rotation_degrees);

  // The replayed angles drive the real views: a view rotated by the replayed
  // angle matches random_view bitwise.
  Rng live(31337), replay(31337);
  const Tensor img = random_image(16, 16, 8);
  AugmentSpec s16 = spec;
  s16.output_size = 16;
  for (int i = 0; i < 20; ++i) {
    const auto v = random_view(img, s16, live);
    const double angle = replay.uniform(-10.0, 10.0);
    const bool flip = replay.bernoulli(0.5);
    const auto expect = flip ? hflip(rotate(img, angle)) : rotate(img, angle);
    CHECK(bitwise_equal(v, expect));
  }
}

TEST_CASE("augment spec validation") {
  AugmentSpec s;
  s.hflip_probability = 1.5;
  CHECK_THROWS(s.validate());
  s = {};
  s.max_rotation_degrees = -1;
  CHECK_THROWS(s.validate());
  s = {};
  CHECK_NOTHROW(s.validate());
}
