#pragma once

#include <cstdint>
#include <vector>

#include "fpl/image.hpp"
#include "fpl/rng.hpp"

namespace fpl::augment {

enum class AugKind { hflip, vflip, translate, crop, affine, rotate, brightness, contrast };

struct AugmentOp {
  AugKind kind;
  // Parameter ranges; meaning depends on kind.
  float rotate_deg = 15.0f;       // rotation: +/- degrees
  float translate_frac = 0.1f;    // translation: +/- fraction of side
  float crop_min_area = 0.8f;     // crop: retained area fraction lower bound
  float affine_max = 0.1f;        // affine: +/- shear/scale perturbation
  float brightness_delta = 0.2f;  // brightness: +/- offset
  float contrast_lo = 0.8f;
  float contrast_hi = 1.25f;
};

// The full geometric + photometric op list with default ranges.
std::vector<AugmentOp> default_pipeline();

// One op with freshly sampled parameters. Degenerate geometric draws fall
// back to the identity so augmentation never aborts an epoch.
Tensor apply_op(const Tensor& image, const AugmentOp& op, RngStream& rng);

// Ops shuffled by rng, each applied independently with probability
// `apply_prob`; label/metadata pass through; pixels clamped to [0,1].
ImageSample apply_pipeline(const ImageSample& sample, const std::vector<AugmentOp>& ops,
                           RngStream& rng, float apply_prob = 0.5f);

struct FmixConfig {
  float alpha = 1.0f;        // Beta shape for lambda
  float decay_power = 3.0f;  // spectral attenuation exponent
};

// Binary mask from thresholded low-frequency noise.
// popcount(mask) == round(lambda * h * w) exactly; ties broken by row-major index.
std::vector<std::uint8_t> fmix_mask(int h, int w, double lambda, const FmixConfig& cfg,
                                    RngStream& rng);

struct FmixResult {
  ImageSample image;  // mask*a + (1-mask)*b, soft target mixed by lambda
  double lambda = 1.0;
  std::vector<std::uint8_t> mask;
};
FmixResult fmix_mix(const ImageSample& a, const ImageSample& b, const FmixConfig& cfg,
                    RngStream& rng);

}  // namespace fpl::augment
