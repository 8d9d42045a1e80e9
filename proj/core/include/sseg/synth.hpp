#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sseg/manifest.hpp"
#include "sseg/rng.hpp"

namespace sseg {

enum class ShapeKind { circle, square, triangle };

struct SynthClass {
    std::string name;
    std::uint8_t r, g, b;
    ShapeKind shape;
};

/// circle/square/triangle in red/green/blue. Background is implicit class 0.
std::vector<SynthClass> default_palette();

struct SynthSample {
    ImageTextPair pair;
    LabeledImage labeled;
};

/// Draws 1-5 solid shapes per image on a dark background, occluding in draw
/// order. The caption names exactly the classes that kept at least one pixel
/// in the final label map (ascending class index). Deterministic given seed.
std::vector<SynthSample> synth_dataset(std::uint64_t seed, int n_images, int image_size,
                                       const std::vector<SynthClass>& palette);

/// Renders a dataset to `dir`: images/<id>.png, labels/<id>.png,
/// manifest.tsv, classes.txt. Returns the manifest path.
std::string write_synth_dataset(const std::string& dir, std::uint64_t seed, int n_images,
                                int image_size, const std::vector<SynthClass>& palette);

}  // namespace sseg
