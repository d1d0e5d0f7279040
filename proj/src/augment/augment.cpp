#include "mococxr/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace mococxr::augment {
namespace {

void require_image(const Tensor& image, const char* op) {
  const auto& s = image.shape();
  if (s.size() != 3 || s[0] != 1 || s[1] == 0 || s[2] == 0) {
    throw std::invalid_argument(std::string(op) + ": expected image [1 x H x W], got " + diffcore::shape_str(s));
  }
}

// a + f * (b - a) keeps constant regions exact.
inline float lerp(float a, float b, float f) { return a + f * (b - a); }

inline float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

}  // namespace

void AugmentSpec::validate() const {
  if (!(hflip_probability >= 0.0 && hflip_probability <= 1.0)) {
    throw std::invalid_argument("augment: hflip_probability must lie in [0,1]");
  }
  if (!(max_rotation_degrees >= 0.0 && max_rotation_degrees <= kMaxRotationDegrees)) {
    throw std::invalid_argument("augment: max_rotation_degrees must lie in [0,45]");
  }
  if (output_size == 0) throw std::invalid_argument("augment: output_size must be >= 1");
}

Tensor rotate(const Tensor& image, double degrees) {
  require_image(image, "rotate");
  if (!(std::abs(degrees) <= kMaxRotationDegrees)) {
    throw std::invalid_argument("rotate: |angle| " + std::to_string(degrees) + " exceeds 45 degrees");
  }
  if (degrees == 0.0) return image.clone();
  const auto h = image.dim(1), w = image.dim(2);
  const auto src = image.values();
  std::vector<float> out(h * w);
  const double theta = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  auto tap = [&](std::ptrdiff_t y, std::ptrdiff_t x) -> float {
    if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) || x >= static_cast<std::ptrdiff_t>(w)) return 0.0f;
    return src[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  };
  for (std::size_t oy = 0; oy < h; ++oy) {
    for (std::size_t ox = 0; ox < w; ++ox) {
      // Inverse map: rotate the output coordinate by -theta back into the source.
      const double dx = static_cast<double>(ox) - cx;
      const double dy = static_cast<double>(oy) - cy;
      const double sx = c * dx + s * dy + cx;
      const double sy = -s * dx + c * dy + cy;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const auto x0 = static_cast<std::ptrdiff_t>(fx0);
      const auto y0 = static_cast<std::ptrdiff_t>(fy0);
      const auto fx = static_cast<float>(sx - fx0);
      const auto fy = static_cast<float>(sy - fy0);
      const float top = lerp(tap(y0, x0), tap(y0, x0 + 1), fx);
      const float bottom = lerp(tap(y0 + 1, x0), tap(y0 + 1, x0 + 1), fx);
      out[oy * w + ox] = clamp01(lerp(top, bottom, fy));
    }
  }
  return Tensor(image.shape(), std::move(out));
}

Tensor hflip(const Tensor& image) {
  require_image(image, "hflip");
  const auto h = image.dim(1), w = image.dim(2);
  const auto src = image.values();
  std::vector<float> out(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = src[y * w + (w - 1 - x)];
  return Tensor(image.shape(), std::move(out));
}

Tensor resize(const Tensor& image, std::size_t size) {
  require_image(image, "resize");
  if (size == 0) throw std::invalid_argument("resize: target size must be >= 1");
  const auto h = image.dim(1), w = image.dim(2);
  if (h == size && w == size) return image.clone();
  const auto src = image.values();
  const double sy = static_cast<double>(h) / static_cast<double>(size);
  const double sx = static_cast<double>(w) / static_cast<double>(size);
  auto coord = [](double pos, std::size_t extent, std::size_t& i0, std::size_t& i1, float& f) {
    pos = std::clamp(pos, 0.0, static_cast<double>(extent - 1));
    const double fl = std::floor(pos);
    i0 = static_cast<std::size_t>(fl);
    i1 = std::min(i0 + 1, extent - 1);
    f = static_cast<float>(pos - fl);
  };
  std::vector<float> out(size * size);
  for (std::size_t oy = 0; oy < size; ++oy) {
    std::size_t y0, y1;
    float fy;
    coord((static_cast<double>(oy) + 0.5) * sy - 0.5, h, y0, y1, fy);
    for (std::size_t ox = 0; ox < size; ++ox) {
      std::size_t x0, x1;
      float fx;
      coord((static_cast<double>(ox) + 0.5) * sx - 0.5, w, x0, x1, fx);
      const float top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
      const float bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
      out[oy * size + ox] = clamp01(lerp(top, bottom, fy));
    }
  }
  return Tensor({1, size, size}, std::move(out));
}

Tensor random_view(const Tensor& image, const AugmentSpec& spec, Rng& rng) {
  const double angle = rng.uniform(-spec.max_rotation_degrees, spec.max_rotation_degrees);
  const bool flip = rng.bernoulli(spec.hflip_probability);
  Tensor view = spec.max_rotation_degrees == 0.0 ? image.clone() : rotate(image, angle);
  return flip ? hflip(view) : view;
}

ViewPair make_view_pair(const Tensor& image, std::size_t source_id, const AugmentSpec& spec, Rng& rng) {
  spec.validate();
  require_image(image, "make_view_pair");
  if (image.dim(1) != spec.output_size || image.dim(2) != spec.output_size) {
    throw std::invalid_argument("make_view_pair: image " + diffcore::shape_str(image.shape()) +
                                " not resized to output_size " + std::to_string(spec.output_size));
  }
  ViewPair pair;
  pair.view_q = random_view(image, spec, rng);
  pair.view_k = random_view(image, spec, rng);
  pair.source_id = source_id;
  return pair;
}

Tensor stack(std::span<const Tensor> images) {
  if (images.empty()) throw std::invalid_argument("stack: no images");
  const auto shape = images.front().shape();
  require_image(images.front(), "stack");
  std::vector<float> out;
  out.reserve(images.size() * images.front().numel());
  for (const auto& img : images) {
    if (img.shape() != shape) throw std::invalid_argument("stack: images differ in shape");
    out.insert(out.end(), img.values().begin(), img.values().end());
  }
  return Tensor({images.size(), 1, shape[1], shape[2]}, std::move(out));
}

}  // namespace mococxr::augment
