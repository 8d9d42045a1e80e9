#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "sseg/autograd.hpp"
#include "sseg/tensor.hpp"
#include "sseg/text.hpp"

namespace sseg {

/// Architecture hyperparameters. Defaults are the reference scale; desk
/// configs shrink every dimension.
struct ModelConfig {
    int n_queries = 64;
    int embed_dim = 256;
    int decoder_layers = 6;
    int text_layers = 12;
    int context_length = 77;
    int vocab_size = 0;  // set from the tokenizer vocabulary before init
    std::vector<int> backbone_channels = {64, 128, 256};  // strides 4, 8, 16
    int mask_stride = 4;  // 4, 8 or 16; output mask resolution divisor
    int proj_dim = 256;
};

/// All attention blocks use this many heads; embed_dim must divide by it
/// (and by 4, for the sinusoidal grid encoding).
inline constexpr int kAttnHeads = 4;

/// Total spatial reduction of the convolutional backbone: the first stage
/// strides by 4, each further stage by 2 (so 8 for two stages, 16 for
/// three). Inputs must be padded to multiples of this.
int backbone_stride(const ModelConfig& cfg);

void validate_config(const ModelConfig& cfg);

/// Named parameter registry. Iteration order (std::map) is the canonical
/// order for optimizers and serialization.
struct ModelParams {
    std::map<std::string, ag::Var> named;

    ag::Var& at(const std::string& name);
    const ag::Var& at(const std::string& name) const;
};

/// Deterministic random initialization; sigma starts at 0.07.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Checks only the fields the pyramid pass reads (backbone_channels,
/// embed_dim, mask_stride); validate_config includes these checks.
void validate_pyramid_config(const ModelConfig& cfg);

/// Just the backbone + pyramid parameters (stage convs, laterals, fused
/// output conv). Reads only backbone_channels, embed_dim and mask_stride;
/// the self-training student builds on this subset directly.
ModelParams init_pyramid_params(const ModelConfig& cfg, std::uint64_t seed);

/// Runs the backbone + pyramid alone: [3, H, W] image to per-pixel features
/// [embed_dim, H/mask_stride, W/mask_stride]. Same input contract as
/// forward_image.
ag::Var forward_pyramid(const Tensor& image, const ModelParams& params, const ModelConfig& cfg);

struct MaskOutputs {
    ag::Var mask_logits;    // [n_queries, out_h*out_w], pre-sigmoid
    ag::Var mask_features;  // [n_queries, embed_dim]
    std::int64_t out_h = 0;
    std::int64_t out_w = 0;
};

/// Image in [3, H, W] with values in [0, 1], H and W multiples of
/// backbone_stride(cfg). There is no classifier branch; queries come back as
/// raw mask features next to their mask logits.
MaskOutputs forward_image(const Tensor& image, const ModelParams& params, const ModelConfig& cfg);

/// Causally masked text transformer; returns the output row at the eos
/// position, [1, embed_dim].
ag::Var forward_text(const CaptionTokens& tokens, const ModelParams& params,
                     const ModelConfig& cfg);

/// Rows through the visual projection MLP, each L2-normalized: [M, proj_dim].
ag::Var project_visual_rows(const ag::Var& features, const ModelParams& params);

/// Training-time visual embedding: mean of the N mask features through the
/// same MLP, [1, proj_dim] unit row.
ag::Var project_visual(const ag::Var& mask_features, const ModelParams& params);

/// [1, embed_dim] -> [1, proj_dim] unit row.
ag::Var project_text(const ag::Var& text_feature, const ModelParams& params);

/// exp(log_sigma) as a scalar Var; gradient flows into log_sigma.
ag::Var sigma_var(const ModelParams& params);

/// Clamps sigma (not its log) into [lo, hi] by rewriting log_sigma. Called
/// after each optimizer step.
void clamp_sigma(ModelParams& params, double lo = 0.01, double hi = 100.0);

/// Single-file model container: config and vocabulary in the metadata,
/// parameters as named arrays. `extra` rides along for optimizer state;
/// `extra_meta_json` for scalar run state (must be a JSON object).
void save_model(const std::filesystem::path& path, const ModelConfig& cfg,
                const ModelParams& params, const std::vector<std::string>& vocab_words,
                const std::map<std::string, Tensor>& extra = {},
                const std::string& extra_meta_json = "{}");

struct LoadedModel {
    ModelConfig config;
    ModelParams params;
    std::vector<std::string> vocab_words;
    std::map<std::string, Tensor> extra;  // arrays outside the model itself
    std::string extra_meta_json = "{}";
};

LoadedModel load_model(const std::filesystem::path& path);

}  // namespace sseg
