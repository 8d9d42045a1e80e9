#include "sseg/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace sseg {

namespace {

constexpr double kLogClamp = 1e-12;

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
    }
}

}  // namespace

ag::Var dice_loss(const ag::Var& pred_probs, const Tensor& target, double smooth) {
    require_same_shape(pred_probs.value(), target, "dice_loss");
    if (target.size() == 0) throw std::invalid_argument("dice_loss: empty input");
    ag::Var t(target);
    ag::Var inter = ag::sum_all(ag::mul(pred_probs, t));
    double target_sum = 0.0;
    for (std::int64_t i = 0; i < target.size(); ++i) target_sum += target[i];
    ag::Var num = ag::add_const(ag::scale(inter, 2.0), smooth);
    ag::Var den = ag::add_const(ag::sum_all(pred_probs), target_sum + smooth);
    ag::Var frac = ag::sdiv(num, den);
    return ag::add_const(ag::scale(frac, -1.0), 1.0);
}

ag::Var focal_loss(const ag::Var& pred_logits, const Tensor& target, double gamma, double alpha) {
    require_same_shape(pred_logits.value(), target, "focal_loss");
    if (target.size() == 0) throw std::invalid_argument("focal_loss: empty input");
    if (gamma < 0.0) throw std::invalid_argument("focal_loss: gamma must be >= 0");
    double w_pos = alpha < 0.0 ? 1.0 : alpha;
    double w_neg = alpha < 0.0 ? 1.0 : 1.0 - alpha;

    Tensor neg_target = target;
    for (std::int64_t i = 0; i < neg_target.size(); ++i) neg_target[i] = 1.0 - neg_target[i];
    ag::Var t(target);
    ag::Var one_minus_t(neg_target);

    ag::Var p = ag::sigmoid(pred_logits);
    ag::Var one_minus_p = ag::add_const(ag::scale(p, -1.0), 1.0);
    ag::Var neg_log_p = ag::scale(ag::log_v(ag::max_const(p, kLogClamp)), -1.0);
    ag::Var neg_log_q = ag::scale(ag::log_v(ag::max_const(one_minus_p, kLogClamp)), -1.0);

    // (1-p)^gamma damps easy positives, p^gamma easy negatives. gamma == 0
    // skips the modulator; pow_const at 0^0 would poison the gradient.
    ag::Var pos_term = neg_log_p;
    ag::Var neg_term = neg_log_q;
    if (gamma != 0.0) {
        pos_term = ag::mul(ag::pow_const(one_minus_p, gamma), pos_term);
        neg_term = ag::mul(ag::pow_const(p, gamma), neg_term);
    }
    ag::Var loss_map = ag::add(ag::scale(ag::mul(t, pos_term), w_pos),
                               ag::scale(ag::mul(one_minus_t, neg_term), w_neg));
    return ag::mean_all(loss_map);
}

Tensor binary_targets(const ImageU8& labels, int k) {
    if (labels.channels != 1) throw std::invalid_argument("binary_targets: labels must have 1 channel");
    if (k < 1 || k > 255) throw std::invalid_argument("binary_targets: bad k");
    std::int64_t pixels = static_cast<std::int64_t>(labels.height) * labels.width;
    Tensor out({k, pixels}, 0.0);
    for (std::int64_t i = 0; i < pixels; ++i) {
        int v = labels.pixels[static_cast<std::size_t>(i)];
        if (v >= k) {
            throw std::invalid_argument("binary_targets: label " + std::to_string(v) +
                                        " out of range for k=" + std::to_string(k));
        }
        out.at(v, i) = 1.0;
    }
    return out;
}

MaskLossParts mask_loss(const ag::Var& mask_logits, const Tensor& targets,
                        const Assignment& assign, const LossWeights& w) {
    const Tensor& lv = mask_logits.value();
    if (lv.rank() != 2 || targets.rank() != 2) throw std::invalid_argument("mask_loss: rank-2 inputs expected");
    if (lv.dim(1) != targets.dim(1)) {
        throw std::invalid_argument("mask_loss: pixel count mismatch " + lv.shape_str() + " vs " +
                                    targets.shape_str());
    }
    if (assign.pairs.empty()) throw std::invalid_argument("mask_loss: no matched pairs");

    std::int64_t pixels = targets.dim(1);
    ag::Var dice_sum, focal_sum;
    for (const auto& [seg, pred] : assign.pairs) {
        if (seg < 0 || seg >= targets.dim(0) || pred < 0 || pred >= lv.dim(0)) {
            throw std::invalid_argument("mask_loss: assignment index out of range");
        }
        Tensor row_target({1, pixels}, 0.0);
        for (std::int64_t i = 0; i < pixels; ++i) row_target[i] = targets.at(seg, i);
        ag::Var row_logits = ag::take_row(mask_logits, pred);
        ag::Var d = dice_loss(ag::sigmoid(row_logits), row_target, w.dice_smooth);
        ag::Var f = focal_loss(row_logits, row_target, w.focal_gamma, w.focal_alpha);
        dice_sum = dice_sum.defined() ? ag::add(dice_sum, d) : d;
        focal_sum = focal_sum.defined() ? ag::add(focal_sum, f) : f;
    }
    double inv = 1.0 / static_cast<double>(assign.pairs.size());
    MaskLossParts parts;
    parts.dice = ag::scale(dice_sum, inv);
    parts.focal = ag::scale(focal_sum, inv);
    parts.mask = ag::add(ag::scale(parts.dice, w.lambda_dice), ag::scale(parts.focal, w.lambda_focal));
    return parts;
}

ContrastiveParts contrastive_loss(const ag::Var& visual, const ag::Var& text,
                                  const ag::Var& sigma) {
    const Tensor& v = visual.value();
    const Tensor& t = text.value();
    if (v.rank() != 2 || !v.same_shape(t)) {
        throw std::invalid_argument("contrastive_loss: embeddings must be same-shape [B,D]");
    }
    if (v.dim(0) < 1) throw std::invalid_argument("contrastive_loss: empty batch");
    if (sigma.value().size() != 1 || !(sigma.value()[0] > 0.0)) {
        throw std::invalid_argument("contrastive_loss: sigma must be a positive scalar");
    }
    ag::Var one(Tensor::scalar(1.0));
    ag::Var inv_sigma = ag::sdiv(one, sigma);
    ag::Var logits = ag::scale_by(ag::matmul(visual, ag::transpose(text)), inv_sigma);
    ag::Var i2t = ag::scale(ag::mean_all(ag::take_diag(ag::log_softmax_rows(logits))), -1.0);
    ag::Var t2i = ag::scale(
        ag::mean_all(ag::take_diag(ag::log_softmax_rows(ag::transpose(logits)))), -1.0);
    ContrastiveParts parts;
    parts.i2t = i2t;
    parts.t2i = t2i;
    parts.contrastive = ag::add(i2t, t2i);
    return parts;
}

ag::Var total_loss(const ag::Var& mask, const ag::Var& contrastive, const LossWeights& w) {
    return ag::add(ag::scale(mask, w.lambda_mask), ag::scale(contrastive, w.lambda_contrastive));
}

}  // namespace sseg
