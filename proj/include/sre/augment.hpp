#pragma once

// Simulate stage: three spatially-preserving photometric transforms with
// uniformly sampled intensities, composed as color jitter -> gaussian blur
// -> grayscale.

#include "sre/image.hpp"
#include "sre/rng.hpp"

namespace sre {

struct AugmentRanges {
    float factor_range = 0.4f;  // brightness/contrast/saturation factors in [1-r, 1+r]
    float hue_range = 0.1f;     // hue shift in turns, [-hue_range, +hue_range]
    float sigma_min = 0.1f;
    float sigma_max = 2.0f;
    float blend_min = 0.0f;
    float blend_max = 1.0f;
};

struct AugmentationIntensity {
    // phi_1: color jitter factors
    float brightness = 1.0f;
    float contrast = 1.0f;
    float saturation = 1.0f;
    float hue = 0.0f;  // turns
    // phi_2
    float sigma = 0.1f;
    // phi_3
    float blend = 0.0f;
};

// Brightness scales, contrast blends with the image mean luminance,
// saturation blends with per-pixel luminance, hue rotates in HSV space;
// applied in that fixed order, clamped to [0,1] after each step.
RasterImage color_jitter(const RasterImage& x, float brightness, float contrast,
                         float saturation, float hue);

// Separable Gaussian, kernel radius ceil(3*sigma), kernel renormalized to
// sum 1, reflect padding at borders, per channel.
RasterImage gaussian_blur(const RasterImage& x, float sigma);

// out = (1-blend)*x + blend*luminance(x) broadcast to 3 channels.
RasterImage grayscale(const RasterImage& x, float blend);

// Samples phi_1..phi_3 uniformly from `ranges` on the given stream and
// applies the composition. Sampling order: brightness, contrast, saturation,
// hue, sigma, blend.
RasterImage simulate_target(const RasterImage& x, Rng& stream, const AugmentRanges& ranges,
                            AugmentationIntensity* out_intensity = nullptr);

}  // namespace sre
