#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sseg/losses.hpp"
#include "sseg/segmodel.hpp"
#include "sseg/tensor.hpp"
#include "sseg/text.hpp"

namespace sseg {

struct TrainConfig {
    double base_lr = 5e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;  // global norm ceiling; <= 0 disables clipping
    int warmup_epochs = 2;
    int batch_size = 32;  // >= 2, the contrastive loss needs in-batch negatives
    int epochs = 30;
    std::uint64_t seed = 0;
    int image_size = 64;  // training crop side, multiple of 16
    double augment_scale_lo = 0.5;
    double augment_scale_hi = 1.0;
    int pseudo_k = 8;
    int patch_stride = 8;          // patch-statistics backbone stride
    double position_weight = 0.1;  // patch-statistics position channel weight
    std::string vit_weights;       // nonempty selects the ViT feature backbone
    std::string cache_dir;         // nonempty enables the pseudo-mask cache
    std::size_t vocab_cap = 8192;
    WordFilter caption_filter = WordFilter::content_words;
    int checkpoint_every = 1;  // epochs between checkpoints; <= 0 keeps only the final one
    std::string out_dir = "train_out";
    LossWeights loss;
    ModelConfig model;  // vocab_size is filled from the corpus
};

void validate_train_config(const TrainConfig& cfg);

struct TrainState {
    ModelParams params;
    std::map<std::string, Tensor> opt_m;  // AdamW first moments, keyed like params
    std::map<std::string, Tensor> opt_v;  // AdamW second moments
    std::int64_t step = 0;                // completed optimizer steps
    std::int64_t epoch = 0;               // completed epochs
    std::uint64_t seed = 0;
    std::vector<std::string> vocab_words;
};

/// One assembled training batch. mask_targets[i] holds the indicator rows of
/// image i's pseudo-mask at mask resolution, [k_i, P].
struct TrainBatch {
    std::vector<Tensor> images;  // each [3, S, S], values in [0, 1]
    std::vector<CaptionTokens> tokens;
    std::vector<Tensor> mask_targets;
};

struct StepStats {
    LossReport loss;
    double lr = 0.0;
    double grad_norm = 0.0;  // pre-clip global norm
    double sigma = 0.0;      // post-clamp temperature
};

/// Linear warmup from zero to base_lr over warmup_steps, then cosine decay to
/// zero at total_steps. step counts completed steps (the first call sees 0).
double lr_at(double base_lr, std::int64_t step, std::int64_t warmup_steps,
             std::int64_t total_steps);

/// One AdamW update over every parameter, in sorted name order. Decoupled
/// weight decay applies to rank >= 2 arrays only (biases, gains and scalars
/// are exempt). Moments are created on first use; bias correction uses
/// step + 1, so pass the count of previously completed updates.
void adamw_update(ModelParams& params, std::map<std::string, Tensor>& opt_m,
                  std::map<std::string, Tensor>& opt_v, std::int64_t step, double lr,
                  double beta1, double beta2, double eps, double weight_decay);

/// Runs one forward/backward/update pass and advances state.step. The two
/// step counts fix the lr schedule horizon. Throws on a non-finite loss or
/// gradient, with the loss components, step and lr in the message; params are
/// left untouched in that case.
StepStats train_step(const TrainBatch& batch, TrainState& state, const TrainConfig& cfg,
                     std::int64_t warmup_steps, std::int64_t total_steps);

/// Builds the vocabulary from the manifest's captions, initializes or resumes
/// the model, and runs the full loop. Writes per-step JSON lines to
/// <out_dir>/train_log.jsonl, epoch checkpoints, and <out_dir>/model_final.ckpt
/// (the returned path). resume_from must be a checkpoint produced by this
/// loop; training continues after the epoch recorded in it.
std::string train(const TrainConfig& cfg, const std::string& manifest_path,
                  const std::string& resume_from = "");

/// Rebuilds a TrainState (params, moments, counters, vocab) from a checkpoint
/// written by train. The model config comes from the checkpoint.
TrainState load_train_state(const std::string& checkpoint_path, ModelConfig& cfg_out);

}  // namespace sseg
