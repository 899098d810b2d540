#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace afr {

/// 8-bit grayscale image, row-major, origin top-left.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> px;

    Image() = default;
    Image(int w, int h, uint8_t fill = 0) : width(w), height(h), px(size_t(w) * h, fill) {}

    uint8_t& at(int x, int y) { return px[size_t(y) * width + x]; }
    uint8_t at(int x, int y) const { return px[size_t(y) * width + x]; }
    bool empty() const { return px.empty(); }
    size_t size() const { return px.size(); }

    bool operator==(const Image& o) const {
        return width == o.width && height == o.height && px == o.px;
    }
};

/// Binary mask over the same pixel lattice as Image. Nonzero = on.
struct Mask {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> on;

    Mask() = default;
    Mask(int w, int h, uint8_t v = 0) : width(w), height(h), on(size_t(w) * h, v) {}

    uint8_t& at(int x, int y) { return on[size_t(y) * width + x]; }
    uint8_t at(int x, int y) const { return on[size_t(y) * width + x]; }
    int64_t count() const {
        int64_t c = 0;
        for (uint8_t v : on) c += v ? 1 : 0;
        return c;
    }
};

namespace io {

/// Reads an 8-bit grayscale image. PGM (P5/P2) and PNG are accepted; color
/// PNG input is converted to luma.
Image read_image(const std::string& path);

/// Writes PGM or PNG depending on the file extension (".pgm" / ".png").
void write_image(const std::string& path, const Image& img);

}  // namespace io

/// Bilinear resize. Exact copy when dimensions already match.
Image resize_bilinear(const Image& src, int out_w, int out_h);

/// Pads to a square canvas (centered, background fill) then resizes to size.
/// No-op when the input is already size x size.
Image square_pad_resize(const Image& src, int size, uint8_t fill = 255);

}  // namespace afr
