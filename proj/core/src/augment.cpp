#include "sseg/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sseg {

ImageU8 augment(const ImageU8& image, int out_size, Rng& rng, double scale_lo, double scale_hi) {
    if (out_size < 8) throw std::invalid_argument("augment: out_size must be at least 8");
    if (!(scale_lo > 0.0 && scale_lo <= scale_hi && scale_hi <= 1.0))
        throw std::invalid_argument("augment: bad scale range");

    const double frac = rng.uniform(scale_lo, scale_hi);
    const double area = frac * image.height * image.width;
    int side = static_cast<int>(std::lround(std::sqrt(area)));
    side = std::clamp(side, 1, std::min(image.height, image.width));

    const int max_y = image.height - side;
    const int max_x = image.width - side;
    const int y0 = max_y > 0 ? static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(max_y + 1))) : 0;
    const int x0 = max_x > 0 ? static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(max_x + 1))) : 0;

    return resize_bilinear(crop(image, y0, x0, side, side), out_size, out_size);
}

}  // namespace sseg
