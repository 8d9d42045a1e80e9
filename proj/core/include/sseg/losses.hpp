#pragma once

#include <vector>

#include "sseg/autograd.hpp"
#include "sseg/image.hpp"
#include "sseg/matching.hpp"
#include "sseg/tensor.hpp"

namespace sseg {

struct LossWeights {
    double lambda_mask = 1.0;
    double lambda_contrastive = 1.0;
    double lambda_dice = 1.0;
    double lambda_focal = 20.0;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;  // negative disables the alpha weighting
    double dice_smooth = 1.0;
};

/// Scalar values extracted from one step's loss graph, for logging.
struct LossReport {
    double mask = 0.0;
    double dice = 0.0;
    double focal = 0.0;
    double i2t = 0.0;
    double t2i = 0.0;
    double contrastive = 0.0;
    double total = 0.0;
};

/// Soft dice loss, 1 - (2*sum(p*t)+s) / (sum(p)+sum(t)+s). `pred_probs` are
/// probabilities in [0,1], `target` is 0/1, both the same shape.
ag::Var dice_loss(const ag::Var& pred_probs, const Tensor& target, double smooth = 1.0);

/// Sigmoid focal loss, averaged over elements. Probabilities are clamped at
/// 1e-12 before the log. `alpha` < 0 weights both terms by 1.
ag::Var focal_loss(const ag::Var& pred_logits, const Tensor& target, double gamma = 2.0,
                   double alpha = 0.25);

struct MaskLossParts {
    ag::Var mask;   // lambda_dice * dice + lambda_focal * focal
    ag::Var dice;   // mean over matched pairs
    ag::Var focal;  // mean over matched pairs
};

/// Per-segment 0/1 target rows extracted from a label map: row s of the
/// result marks the pixels of segment s. Result is [k, h*w].
Tensor binary_targets(const ImageU8& labels, int k);

/// Mask loss over matched (pseudo, prediction) pairs. `mask_logits` is
/// [N, P], `targets` is [K, P] as produced by binary_targets. Unmatched
/// prediction rows do not enter the graph.
MaskLossParts mask_loss(const ag::Var& mask_logits, const Tensor& targets,
                        const Assignment& assign, const LossWeights& w);

struct ContrastiveParts {
    ag::Var i2t;
    ag::Var t2i;
    ag::Var contrastive;  // i2t + t2i
};

/// Bidirectional InfoNCE over a batch of row-aligned embedding pairs.
/// `visual` and `text` are [B, D] (expected L2-normalized by the caller),
/// `sigma` is the positive scalar temperature dividing the similarities.
ContrastiveParts contrastive_loss(const ag::Var& visual, const ag::Var& text,
                                  const ag::Var& sigma);

/// lambda_mask * mask + lambda_contrastive * contrastive.
ag::Var total_loss(const ag::Var& mask, const ag::Var& contrastive, const LossWeights& w);

}  // namespace sseg
