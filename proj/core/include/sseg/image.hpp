#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sseg/tensor.hpp"

namespace sseg {

/// Interleaved 8-bit image, row-major. channels is 1 (label/gray) or 3 (RGB).
struct ImageU8 {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;

    ImageU8() = default;
    ImageU8(int h, int w, int c, std::uint8_t fill = 0)
        : height(h), width(w), channels(c),
          pixels(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(c),
                 fill) {}

    std::uint8_t& at(int y, int x, int c = 0) {
        return pixels[(static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                       static_cast<std::size_t>(x)) * static_cast<std::size_t>(channels) +
                      static_cast<std::size_t>(c)];
    }
    std::uint8_t at(int y, int x, int c = 0) const {
        return pixels[(static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                       static_cast<std::size_t>(x)) * static_cast<std::size_t>(channels) +
                      static_cast<std::size_t>(c)];
    }
    bool empty() const { return pixels.empty(); }
};

/// Reads a PNG. 3-channel output is RGB; 1-channel stays as stored.
/// Throws std::runtime_error on missing or undecodable files.
ImageU8 read_png(const std::string& path);

/// Encodes to PNG and writes atomically (temp file in the same directory,
/// then rename).
void write_png(const std::string& path, const ImageU8& img);

/// Bilinear resampling with half-pixel centers, rounding to nearest.
/// Intended for photographic content.
ImageU8 resize_bilinear(const ImageU8& img, int out_h, int out_w);

/// Nearest-neighbor resampling; safe for label maps (introduces no new values).
ImageU8 resize_nearest(const ImageU8& img, int out_h, int out_w);

/// Copies the window [y0, y0+h) x [x0, x0+w); bounds are checked.
ImageU8 crop(const ImageU8& img, int y0, int x0, int h, int w);

/// 3-channel image to a [3,H,W] tensor scaled to [0,1].
Tensor image_to_chw(const ImageU8& img);

}  // namespace sseg
