#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sre {

// 3-channel float image, values in [0,1], planar C x H x W layout.
struct RasterImage {
    int height = 0;
    int width = 0;
    std::vector<float> data;  // 3 * height * width

    RasterImage() = default;
    RasterImage(int h, int w, float fill = 0.0f)
        : height(h), width(w), data(static_cast<size_t>(3) * h * w, fill) {}

    float& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    float at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    size_t pixels() const { return static_cast<size_t>(height) * width; }
};

inline float luminance(float r, float g, float b) {
    return 0.299f * r + 0.587f * g + 0.114f * b;
}

// PPM P6 / PGM P5, 8-bit, the only image formats the project reads or writes.
RasterImage load_ppm(const std::string& path);
void save_ppm(const std::string& path, const RasterImage& img);
void save_pgm(const std::string& path, const std::vector<uint8_t>& gray, int height, int width);

uint8_t quantize8(float v);

}  // namespace sre
