#pragma once

#include "sseg/image.hpp"
#include "sseg/rng.hpp"

namespace sseg {

/// Random resized crop: picks an area fraction in [scale_lo, scale_hi] of the
/// source, takes a square window of that area at a random position, and
/// bilinearly resizes it to out_size x out_size.
ImageU8 augment(const ImageU8& image, int out_size, Rng& rng, double scale_lo = 0.5,
                double scale_hi = 1.0);

}  // namespace sseg
