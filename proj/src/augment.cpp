#include "sre/augment.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "sre/errors.hpp"

namespace sre {

namespace {

inline float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
    float mx = std::max({r, g, b});
    float mn = std::min({r, g, b});
    float d = mx - mn;
    v = mx;
    s = mx <= 0.0f ? 0.0f : d / mx;
    if (d <= 0.0f) {
        h = 0.0f;
        return;
    }
    float hh;
    if (mx == r) hh = (g - b) / d;
    else if (mx == g) hh = (b - r) / d + 2.0f;
    else hh = (r - g) / d + 4.0f;
    hh /= 6.0f;
    if (hh < 0.0f) hh += 1.0f;
    h = hh;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    if (s <= 0.0f) {
        r = g = b = v;
        return;
    }
    float hh = (h - std::floor(h)) * 6.0f;
    int sector = static_cast<int>(hh);
    float f = hh - static_cast<float>(sector);
    float p = v * (1.0f - s);
    float q = v * (1.0f - s * f);
    float t = v * (1.0f - s * (1.0f - f));
    switch (sector % 6) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

}  // namespace

RasterImage color_jitter(const RasterImage& x, float brightness, float contrast,
                         float saturation, float hue) {
    RasterImage out = x;
    size_t n = out.pixels();

    // brightness
    if (brightness != 1.0f) {
        for (auto& v : out.data) v = clamp01(v * brightness);
    }

    // contrast: blend with the mean luminance of the current image
    if (contrast != 1.0f) {
        double mean_lum = 0.0;
        for (size_t p = 0; p < n; ++p)
            mean_lum += luminance(out.data[p], out.data[n + p], out.data[2 * n + p]);
        float ml = static_cast<float>(mean_lum / static_cast<double>(n));
        for (auto& v : out.data) v = clamp01(ml + contrast * (v - ml));
    }

    // saturation: blend with per-pixel luminance
    if (saturation != 1.0f) {
        for (size_t p = 0; p < n; ++p) {
            float l = luminance(out.data[p], out.data[n + p], out.data[2 * n + p]);
            out.data[p] = clamp01(l + saturation * (out.data[p] - l));
            out.data[n + p] = clamp01(l + saturation * (out.data[n + p] - l));
            out.data[2 * n + p] = clamp01(l + saturation * (out.data[2 * n + p] - l));
        }
    }

    // hue: rotate in HSV space, hue in turns, wraps
    if (hue != 0.0f) {
        for (size_t p = 0; p < n; ++p) {
            float h, s, v;
            rgb_to_hsv(out.data[p], out.data[n + p], out.data[2 * n + p], h, s, v);
            h += hue;
            h -= std::floor(h);
            float r, g, b;
            hsv_to_rgb(h, s, v, r, g, b);
            out.data[p] = clamp01(r);
            out.data[n + p] = clamp01(g);
            out.data[2 * n + p] = clamp01(b);
        }
    }
    return out;
}

namespace {

// reflect-101: -1 -> 1, n -> n-2
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    int period = 2 * (n - 1);
    i = std::abs(i) % period;
    return i < n ? i : period - i;
}

}  // namespace

RasterImage gaussian_blur(const RasterImage& x, float sigma) {
    if (sigma <= 0.0f) throw ConfigError("gaussian_blur: sigma must be positive");
    int radius = static_cast<int>(std::ceil(3.0f * sigma));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double s = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        double w = std::exp(-0.5 * (static_cast<double>(i) * i) /
                            (static_cast<double>(sigma) * sigma));
        kernel[static_cast<size_t>(i + radius)] = w;
        s += w;
    }
    for (auto& k : kernel) k /= s;

    // double accumulation: a unit-sum kernel must leave constants unchanged
    // at well below float resolution
    std::vector<double> tmp(x.data.size());
    RasterImage out(x.height, x.width);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < x.height; ++y)
            for (int xx = 0; xx < x.width; ++xx) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k)
                    acc += kernel[static_cast<size_t>(k + radius)] *
                           static_cast<double>(x.at(c, y, reflect_index(xx + k, x.width)));
                tmp[(static_cast<size_t>(c) * x.height + y) * x.width + xx] = acc;
            }
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < x.height; ++y)
            for (int xx = 0; xx < x.width; ++xx) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k)
                    acc += kernel[static_cast<size_t>(k + radius)] *
                           tmp[(static_cast<size_t>(c) * x.height +
                                reflect_index(y + k, x.height)) * x.width + xx];
                out.at(c, y, xx) = clamp01(static_cast<float>(acc));
            }
    return out;
}

RasterImage grayscale(const RasterImage& x, float blend) {
    if (blend < 0.0f || blend > 1.0f) throw ConfigError("grayscale: blend must be in [0,1]");
    RasterImage out = x;
    size_t n = out.pixels();
    for (size_t p = 0; p < n; ++p) {
        float g = luminance(x.data[p], x.data[n + p], x.data[2 * n + p]);
        out.data[p] = clamp01((1.0f - blend) * x.data[p] + blend * g);
        out.data[n + p] = clamp01((1.0f - blend) * x.data[n + p] + blend * g);
        out.data[2 * n + p] = clamp01((1.0f - blend) * x.data[2 * n + p] + blend * g);
    }
    return out;
}

RasterImage simulate_target(const RasterImage& x, Rng& stream, const AugmentRanges& ranges,
                            AugmentationIntensity* out_intensity) {
    AugmentationIntensity phi;
    float r = ranges.factor_range;
    phi.brightness = static_cast<float>(stream.uniform(1.0 - r, 1.0 + r));
    phi.contrast = static_cast<float>(stream.uniform(1.0 - r, 1.0 + r));
    phi.saturation = static_cast<float>(stream.uniform(1.0 - r, 1.0 + r));
    phi.hue = static_cast<float>(stream.uniform(-ranges.hue_range, ranges.hue_range));
    phi.sigma = static_cast<float>(stream.uniform(ranges.sigma_min, ranges.sigma_max));
    phi.blend = static_cast<float>(stream.uniform(ranges.blend_min, ranges.blend_max));
    if (out_intensity) *out_intensity = phi;
    RasterImage t = color_jitter(x, phi.brightness, phi.contrast, phi.saturation, phi.hue);
    t = gaussian_blur(t, phi.sigma);
    return grayscale(t, phi.blend);
}

}  // namespace sre
