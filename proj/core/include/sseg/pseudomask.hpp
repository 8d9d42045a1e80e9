#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "sseg/image.hpp"
#include "sseg/manifest.hpp"
#include "sseg/tensor.hpp"

namespace sseg {

struct FeatureTokens {
    Tensor grid;  // [h, w, d]
    int stride = 1;
};

/// Per-token feature source for the pseudo-mask generator.
class FeatureBackbone {
public:
    virtual ~FeatureBackbone() = default;
    virtual std::string id() const = 0;  // cache key component
    virtual int stride() const = 0;
    /// Input dimensions must be multiples of stride() (see extract_features).
    virtual FeatureTokens extract(const ImageU8& image) const = 0;
};

/// Desk-scale extractor: per patch, mean RGB, RGB standard deviation, and
/// scaled normalized (row, col) position; d = 8.
class PatchStatBackbone : public FeatureBackbone {
public:
    explicit PatchStatBackbone(int stride = 8, double position_weight = 0.1);
    std::string id() const override;
    int stride() const override { return stride_; }
    FeatureTokens extract(const ImageU8& image) const override;

private:
    int stride_;
    double position_weight_;
};

/// Adapter running a ViT-style encoder from externally supplied weights (an
/// ArrayStore file; see docs/formats.md for the expected entries). Token grid
/// stride equals the patch size.
class VitFeatureBackbone : public FeatureBackbone {
public:
    explicit VitFeatureBackbone(const std::string& weights_path);
    ~VitFeatureBackbone() override;
    std::string id() const override;
    int stride() const override;
    FeatureTokens extract(const ImageU8& image) const override;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// Pads the image to a stride multiple (edge replication) and runs the
/// backbone; the returned grid covers the padded extent.
FeatureTokens extract_features(const ImageU8& image, const FeatureBackbone& backbone);

struct PseudoMaskSet {
    ImageU8 label_map;  // single channel, values in [0, k)
    int k = 0;          // number of segments present
};

/// Clusters feature tokens, reshapes assignments to the token grid, nearest-
/// upsamples to the image resolution, and relabels segments in first-
/// occurrence (row-major) order. k in the result counts surviving segments;
/// it can drop below the requested k only if a cluster fell entirely inside
/// stride padding.
PseudoMaskSet generate_pseudo_masks(const ImageU8& image, const FeatureBackbone& backbone, int k,
                                    std::uint64_t seed);

/// Nearest-neighbor label upsampling; value set preserved.
ImageU8 upsample_labels(const ImageU8& label_map, int target_h, int target_w);

/// Area-majority pooling onto a coarser grid whose cells tile the source
/// exactly (dims must divide). Ties go to the lower label value.
ImageU8 downsample_labels_majority(const ImageU8& label_map, int target_h, int target_w);

/// Relabels each pseudo-segment with its majority ground-truth class (ties to
/// the lower class index, ignore pixels excluded) and returns the mIoU of the
/// relabeled map against gt over the classes present.
double oracle_miou(const PseudoMaskSet& pseudo, const LabeledImage& gt);

/// Cache layout: <cache_dir>/<backbone_id>/k<k>/<image_id>.png with a
/// cache_meta.txt recording the generator seed. A seed mismatch invalidates
/// that directory (entries are regenerated on demand).
std::string pseudo_cache_path(const std::string& cache_dir, const std::string& backbone_id, int k,
                              const std::string& image_id);

/// Returns the cached mask when present (and seed-compatible), otherwise
/// generates and stores it atomically.
PseudoMaskSet load_or_generate_cached(const std::string& cache_dir, const ImageU8& image,
                                      const std::string& image_id, const FeatureBackbone& backbone,
                                      int k, std::uint64_t seed);

}  // namespace sseg
