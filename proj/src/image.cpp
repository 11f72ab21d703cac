#include "sre/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "sre/errors.hpp"

namespace sre {

uint8_t quantize8(float v) {
    float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<uint8_t>(std::lround(c * 255.0f));
}

namespace {

// Skips whitespace and '#' comments between header tokens.
int next_int(std::istream& in, const std::string& path) {
    int ch;
    while ((ch = in.peek()) != EOF) {
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(ch)) {
            in.get();
        } else {
            break;
        }
    }
    int v;
    if (!(in >> v)) throw IoError("malformed PPM header in " + path);
    return v;
}

}  // namespace

RasterImage load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || m1 != '6') throw IoError(path + " is not a P6 PPM");
    int w = next_int(in, path);
    int h = next_int(in, path);
    int maxval = next_int(in, path);
    if (maxval != 255) throw IoError(path + ": only maxval 255 is supported");
    in.get();  // single whitespace after header
    std::vector<uint8_t> raw(static_cast<size_t>(3) * w * h);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size()))
        throw IoError(path + ": truncated pixel data");
    RasterImage img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = raw[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0f;
    return img;
}

void save_ppm(const std::string& path, const RasterImage& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<uint8_t> raw(static_cast<size_t>(3) * img.width * img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                raw[(static_cast<size_t>(y) * img.width + x) * 3 + c] =
                    quantize8(img.at(c, y, x));
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw IoError("short write to " + path);
}

void save_pgm(const std::string& path, const std::vector<uint8_t>& gray, int height, int width) {
    if (gray.size() != static_cast<size_t>(height) * width)
        throw ShapeError("save_pgm: buffer size does not match dimensions");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "P5\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
    if (!out) throw IoError("short write to " + path);
}

}  // namespace sre
