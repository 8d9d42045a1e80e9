#include "sseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <stdexcept>

namespace fs = std::filesystem;

namespace sseg {

namespace {

constexpr std::uint8_t kBgGray = 40;

std::uint8_t jitter_channel(std::uint8_t base, Rng& rng) {
    const int v = static_cast<int>(base) + static_cast<int>(rng.uniform_int(11)) - 5;
    return static_cast<std::uint8_t>(std::clamp(v, 0, 255));
}

}  // namespace

std::vector<SynthClass> default_palette() {
    return {
        {"circle", 220, 40, 40, ShapeKind::circle},
        {"square", 40, 200, 60, ShapeKind::square},
        {"triangle", 50, 80, 220, ShapeKind::triangle},
    };
}

std::vector<SynthSample> synth_dataset(std::uint64_t seed, int n_images, int image_size,
                                       const std::vector<SynthClass>& palette) {
    if (n_images <= 0) throw std::invalid_argument("synth_dataset: n_images must be positive");
    if (image_size < 8) throw std::invalid_argument("synth_dataset: image_size too small");
    if (palette.size() < 2) throw std::invalid_argument("synth_dataset: need at least 2 classes");

    std::vector<SynthSample> out;
    out.reserve(static_cast<std::size_t>(n_images));
    for (int idx = 0; idx < n_images; ++idx) {
        Rng rng(derive_seed(seed, {kStreamSynth, static_cast<std::uint64_t>(idx)}));
        ImageU8 img(image_size, image_size, 3, kBgGray);
        ImageU8 labels(image_size, image_size, 1, 0);

        const int n_shapes = 1 + static_cast<int>(rng.uniform_int(5));
        for (int s = 0; s < n_shapes; ++s) {
            const auto cls = rng.uniform_int(static_cast<std::uint64_t>(palette.size()));
            const SynthClass& sc = palette[static_cast<std::size_t>(cls)];
            const int lo = image_size / 4, hi = image_size / 2;
            const int side = lo + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
            const int half = side / 2;
            const int cx = half + static_cast<int>(rng.uniform_int(
                                      static_cast<std::uint64_t>(image_size - 2 * half)));
            const int cy = half + static_cast<int>(rng.uniform_int(
                                      static_cast<std::uint64_t>(image_size - 2 * half)));
            const std::uint8_t cr = jitter_channel(sc.r, rng);
            const std::uint8_t cg = jitter_channel(sc.g, rng);
            const std::uint8_t cb = jitter_channel(sc.b, rng);
            const std::uint8_t label = static_cast<std::uint8_t>(cls + 1);

            for (int y = std::max(0, cy - half); y <= std::min(image_size - 1, cy + half); ++y) {
                for (int x = std::max(0, cx - half); x <= std::min(image_size - 1, cx + half);
                     ++x) {
                    bool inside = false;
                    switch (sc.shape) {
                        case ShapeKind::circle: {
                            const double dx = x - cx, dy = y - cy;
                            inside = dx * dx + dy * dy <= static_cast<double>(half) * half;
                            break;
                        }
                        case ShapeKind::square:
                            inside = true;  // the loop bounds are the square
                            break;
                        case ShapeKind::triangle: {
                            // isoceles, apex up: width grows linearly with depth
                            const double t = half > 0
                                                 ? static_cast<double>(y - (cy - half)) / (2.0 * half)
                                                 : 1.0;
                            inside = t >= 0.0 && std::abs(x - cx) <= t * half;
                            break;
                        }
                    }
                    if (inside) {
                        img.at(y, x, 0) = cr;
                        img.at(y, x, 1) = cg;
                        img.at(y, x, 2) = cb;
                        labels.at(y, x) = label;
                    }
                }
            }
        }

        // mild sensor-style noise so pixels within a region are not literal
        // duplicates
        for (int y = 0; y < image_size; ++y) {
            for (int x = 0; x < image_size; ++x) {
                for (int c = 0; c < 3; ++c) {
                    const int v = static_cast<int>(img.at(y, x, c)) +
                                  static_cast<int>(rng.uniform_int(5)) - 2;
                    img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
                }
            }
        }

        std::set<int> present;
        for (int y = 0; y < image_size; ++y)
            for (int x = 0; x < image_size; ++x)
                if (labels.at(y, x) != 0) present.insert(labels.at(y, x));

        std::string caption = "a photo of";
        bool first = true;
        for (int cls : present) {
            caption += first ? " " : " and ";
            caption += palette[static_cast<std::size_t>(cls - 1)].name;
            first = false;
        }

        SynthSample sample;
        char id[32];
        std::snprintf(id, sizeof(id), "synth_%05d", idx);
        sample.pair.id = id;
        sample.pair.image = img;
        sample.pair.caption = caption;
        sample.labeled.image = std::move(img);
        sample.labeled.labels = std::move(labels);
        sample.labeled.class_names.push_back("background");
        for (const auto& sc : palette) sample.labeled.class_names.push_back(sc.name);
        out.push_back(std::move(sample));
    }
    return out;
}

std::string write_synth_dataset(const std::string& dir, std::uint64_t seed, int n_images,
                                int image_size, const std::vector<SynthClass>& palette) {
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "labels");

    const auto samples = synth_dataset(seed, n_images, image_size, palette);
    std::vector<ManifestRecord> records;
    records.reserve(samples.size());
    for (const auto& s : samples) {
        const std::string img_rel = "images/" + s.pair.id + ".png";
        const std::string lab_rel = "labels/" + s.pair.id + ".png";
        write_png((fs::path(dir) / img_rel).string(), s.pair.image);
        write_png((fs::path(dir) / lab_rel).string(), s.labeled.labels);
        records.push_back({s.pair.id, img_rel, s.pair.caption, lab_rel});
    }
    const std::string manifest = (fs::path(dir) / "manifest.tsv").string();
    write_manifest(manifest, records);

    std::vector<std::string> names{"background"};
    for (const auto& sc : palette) names.push_back(sc.name);
    write_class_names((fs::path(dir) / "classes.txt").string(), names);
    return manifest;
}

}  // namespace sseg
