#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sseg/image.hpp"
#include "sseg/segmodel.hpp"
#include "sseg/tensor.hpp"

namespace sseg {

/// Candidate class names for open-vocabulary prediction. The template wraps
/// each name before tokenization; "{}" marks the insertion point.
struct ClassVocabulary {
    std::vector<std::string> names;
    std::string prompt_template = "{}";
};

/// Names must be non-empty, distinct, and at most 254 (labels live in one
/// byte next to the background index and the ignore value); the template
/// needs exactly one placeholder.
void validate_class_vocabulary(const ClassVocabulary& vocab);

std::string apply_template(const std::string& prompt_template, const std::string& name);

struct SegmentationMap {
    ImageU8 labels;  // single channel: class indices, plus background_index pixels if set
    ClassVocabulary legend;
    int background_index = -1;  // -1 when no background thresholding was applied
};

/// One unit row per class name: template -> word split -> tokenize -> text
/// encoder -> text projection. Caption-style stop words are dropped unless
/// that would empty the prompt. Names that tokenize to only unknown words
/// still encode but are reported through unknown_names for the caller to
/// surface.
Tensor encode_classes(const ClassVocabulary& vocab, const LoadedModel& model,
                      std::vector<std::string>* unknown_names = nullptr);

/// N x |C| probabilities: each mask feature is projected and L2-normalized
/// individually, cosine similarity against every class embedding is divided
/// by the model temperature, and a softmax runs over classes.
Tensor classify_masks(const Tensor& mask_features, const Tensor& class_embs,
                      const LoadedModel& model);

/// Per-pixel class scores on the mask grid,
///   score(px, c) = sum_n sigmoid(mask_logits[n, px]) * class_probs[n, c]
/// with n ascending and the stable branched sigmoid, bilinearly resized to
/// [out_h, out_w] afterwards (skipped when sizes already match). Returns
/// [|C|, out_h, out_w].
Tensor combine_scores(const Tensor& mask_logits, std::int64_t grid_h, std::int64_t grid_w,
                      const Tensor& class_probs, int out_h, int out_w);

/// Argmax over the class axis of [|C|, H, W] scores; ties take the lower
/// class index.
ImageU8 argmax_labels(const Tensor& scores);

/// Labels pixels whose renormalized top score falls below tau (in [0, 1]) as
/// background; the background index is |C|. A pixel with zero total score
/// counts as confidence zero.
SegmentationMap background_threshold(const Tensor& scores, const ClassVocabulary& legend,
                                     double tau);

struct InferenceResult {
    SegmentationMap seg;
    Tensor scores;  // [|C|, H, W] combined scores at output resolution
};

/// Full pipeline on one image: the image is bilinearly resized up to the next
/// multiple-of-16 extent for the encoder, and scores come back at the input
/// resolution. tau < 0 skips background thresholding.
InferenceResult infer_image(const ImageU8& image, const LoadedModel& model,
                            const ClassVocabulary& vocab, const Tensor& class_embs, double tau);
InferenceResult infer_image(const ImageU8& image, const LoadedModel& model,
                            const ClassVocabulary& vocab, double tau);

using Rgb = std::array<std::uint8_t, 3>;

/// Distinct colors for labels 0..n_classes-1 plus black at background_index
/// (pass -1 for none). Colors follow the bit-spread colormap, shifted so no
/// class collides with the background black.
std::vector<Rgb> make_palette(int n_classes, int background_index);

/// Label map to 24-bit color through the palette. Every value present must
/// have a palette entry; gaps raise with the missing indices listed.
ImageU8 render_labels(const ImageU8& labels, const std::vector<Rgb>& palette);

/// Text sidecar pairing label indices with class names (and the background
/// row when present), one "<index>\t<name>" line each.
std::string format_legend(const SegmentationMap& seg);

}  // namespace sseg
