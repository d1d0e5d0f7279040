#pragma once

// Label-preserving view generation for grayscale images: small random
// rotations and horizontal flips. Images are [1 x H x W] tensors in [0,1].

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mococxr/diffcore/tensor.hpp"
#include "mococxr/random.hpp"

namespace mococxr::augment {

using diffcore::Tensor;

inline constexpr double kMaxRotationDegrees = 45.0;

struct AugmentSpec {
  double max_rotation_degrees = 10.0;
  double hflip_probability = 0.5;
  std::size_t output_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ViewPair {
  Tensor view_q;
  Tensor view_k;
  std::size_t source_id = 0;
};

// Bilinear resampling about the image centre; taps falling outside the image read 0.
// degrees == 0 returns an exact copy. Throws for |degrees| > 45.
Tensor rotate(const Tensor& image, double degrees);

Tensor hflip(const Tensor& image);

// Bilinear resize with half-pixel centres and edge clamping. Same-size input is copied.
Tensor resize(const Tensor& image, std::size_t size);

// One draw of (angle ~ U[-max, max], flip ~ Bernoulli(p)) applied as rotate, then flip.
Tensor random_view(const Tensor& image, const AugmentSpec& spec, Rng& rng);

// Two independent views of one image (already at spec.output_size).
ViewPair make_view_pair(const Tensor& image, std::size_t source_id, const AugmentSpec& spec, Rng& rng);

// Stacks [1 x S x S] images into [N x 1 x S x S].
Tensor stack(std::span<const Tensor> images);

}  // namespace mococxr::augment
