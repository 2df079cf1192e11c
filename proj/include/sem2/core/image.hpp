#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sem2 {

// Interleaved RGB8 image, row-major, origin top-left.
struct Image {
    int h = 0, w = 0, c = 3;
    std::vector<uint8_t> px;

    Image() = default;
    Image(int h_, int w_, int c_ = 3, uint8_t fill = 0)
        : h(h_), w(w_), c(c_), px(static_cast<size_t>(h_) * w_ * c_, fill) {}

    uint8_t& at(int y, int x, int ch) {
        return px[(static_cast<size_t>(y) * w + x) * c + ch];
    }
    uint8_t at(int y, int x, int ch) const {
        return px[(static_cast<size_t>(y) * w + x) * c + ch];
    }
    bool same_shape(const Image& o) const { return h == o.h && w == o.w && c == o.c; }
    size_t size() const { return px.size(); }
};

// Writes an 8-bit RGB PNG. Throws IoError on failure.
void write_png(const std::string& path, const Image& img);

struct Rgb {
    uint8_t r, g, b;
};

// Minimal raster helpers for panels and metric plots.
void fill_rect(Image& img, int y0, int x0, int y1, int x1, Rgb color);
void draw_line(Image& img, int y0, int x0, int y1, int x1, Rgb color);
// 5x7 bitmap font (digits, lowercase, a few symbols); scale >= 1.
void draw_text(Image& img, int y, int x, const std::string& text, Rgb color, int scale = 1);
int text_width(const std::string& text, int scale = 1);

// Nearest-neighbour upscale by an integer factor.
Image upscale(const Image& img, int factor);

} // namespace sem2
