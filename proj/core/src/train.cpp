#include "sseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "sseg/augment.hpp"
#include "sseg/manifest.hpp"
#include "sseg/matching.hpp"
#include "sseg/pseudomask.hpp"
#include "sseg/rng.hpp"

namespace fs = std::filesystem;

namespace sseg {

namespace {

std::int64_t ceil_div(std::int64_t n, std::int64_t d) { return (n + d - 1) / d; }

Tensor row_of(const Tensor& t, std::int64_t r) {
    const std::int64_t cols = t.dim(1);
    Tensor out({1, cols});
    for (std::int64_t j = 0; j < cols; ++j) out[j] = t.at(r, j);
    return out;
}

/// Sorted-name iteration keeps updates deterministic.
double global_grad_norm(const ModelParams& params) {
    double sq = 0.0;
    for (const auto& [name, var] : params.named) {
        const Tensor& g = var.grad();
        for (std::int64_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
    }
    return std::sqrt(sq);
}

void scale_grads(ModelParams& params, double factor) {
    for (auto& [name, var] : params.named) {
        Tensor& g = var.node()->grad;
        for (std::int64_t i = 0; i < g.size(); ++i) g[i] *= factor;
    }
}

std::string diagnostic(const LossReport& r, std::int64_t step, double lr) {
    std::ostringstream os;
    os << "mask=" << r.mask << " dice=" << r.dice << " focal=" << r.focal << " i2t=" << r.i2t
       << " t2i=" << r.t2i << " contrastive=" << r.contrastive << " total=" << r.total
       << " step=" << step << " lr=" << lr;
    return os.str();
}

bool report_finite(const LossReport& r) {
    for (double v : {r.mask, r.dice, r.focal, r.i2t, r.t2i, r.contrastive, r.total})
        if (!std::isfinite(v)) return false;
    return true;
}

std::unique_ptr<FeatureBackbone> make_backbone(const TrainConfig& cfg) {
    if (!cfg.vit_weights.empty()) return std::make_unique<VitFeatureBackbone>(cfg.vit_weights);
    return std::make_unique<PatchStatBackbone>(cfg.patch_stride, cfg.position_weight);
}

void write_checkpoint(const fs::path& path, const ModelConfig& model_cfg,
                      const TrainState& state) {
    std::map<std::string, Tensor> extra;
    for (const auto& [name, m] : state.opt_m) extra["opt.m." + name] = m;
    for (const auto& [name, v] : state.opt_v) extra["opt.v." + name] = v;
    nlohmann::json meta;
    meta["step"] = state.step;
    meta["epoch"] = state.epoch;
    meta["seed"] = state.seed;
    save_model(path, model_cfg, state.params, state.vocab_words, extra, meta.dump());
}

}  // namespace

void validate_train_config(const TrainConfig& cfg) {
    ModelConfig m = cfg.model;
    if (m.vocab_size == 0) m.vocab_size = 4;  // filled from the corpus later
    validate_config(m);
    if (!(cfg.base_lr > 0.0)) throw std::invalid_argument("train: base_lr must be positive");
    if (!(cfg.weight_decay >= 0.0)) throw std::invalid_argument("train: negative weight_decay");
    if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0))
        throw std::invalid_argument("train: betas must lie in [0, 1)");
    if (!(cfg.adam_eps > 0.0)) throw std::invalid_argument("train: adam_eps must be positive");
    if (cfg.warmup_epochs < 0) throw std::invalid_argument("train: negative warmup_epochs");
    if (cfg.batch_size < 2)
        throw std::invalid_argument("train: batch_size must be at least 2 (contrastive negatives)");
    if (cfg.epochs < 1) throw std::invalid_argument("train: epochs must be at least 1");
    const int stride = backbone_stride(m);
    if (cfg.image_size < stride || cfg.image_size % stride != 0)
        throw std::invalid_argument("train: image_size must be a positive multiple of " +
                                    std::to_string(stride));
    if (!(cfg.augment_scale_lo > 0.0 && cfg.augment_scale_lo <= cfg.augment_scale_hi &&
          cfg.augment_scale_hi <= 1.0))
        throw std::invalid_argument("train: bad augment scale range");
    if (cfg.pseudo_k < 1 || cfg.pseudo_k > cfg.model.n_queries)
        throw std::invalid_argument("train: pseudo_k must lie in [1, n_queries]");
    if (cfg.patch_stride < 1) throw std::invalid_argument("train: patch_stride must be positive");
    if (cfg.vocab_cap < 4) throw std::invalid_argument("train: vocab_cap below reserved tokens");
    if (cfg.out_dir.empty()) throw std::invalid_argument("train: out_dir must be set");
}

void adamw_update(ModelParams& params, std::map<std::string, Tensor>& opt_m,
                  std::map<std::string, Tensor>& opt_v, std::int64_t step, double lr,
                  double beta1, double beta2, double eps, double weight_decay) {
    const double t = static_cast<double>(step + 1);
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (auto& [name, var] : params.named) {
        Tensor& p = var.value_mut();
        const Tensor& g = var.grad();
        Tensor& m = opt_m.try_emplace(name, p.shape(), 0.0).first->second;
        Tensor& v = opt_v.try_emplace(name, p.shape(), 0.0).first->second;
        const double wd = p.rank() >= 2 ? weight_decay : 0.0;
        const bool has_grad = g.size() == p.size();
        for (std::int64_t i = 0; i < p.size(); ++i) {
            const double gi = has_grad ? g[i] : 0.0;
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
            p[i] -= lr * (update + wd * p[i]);
        }
    }
}

double lr_at(double base_lr, std::int64_t step, std::int64_t warmup_steps,
             std::int64_t total_steps) {
    if (step < warmup_steps)
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const std::int64_t span = std::max<std::int64_t>(total_steps - warmup_steps, 1);
    double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
    progress = std::clamp(progress, 0.0, 1.0);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

StepStats train_step(const TrainBatch& batch, TrainState& state, const TrainConfig& cfg,
                     std::int64_t warmup_steps, std::int64_t total_steps) {
    const std::size_t b = batch.images.size();
    if (b < 1) throw std::invalid_argument("train_step: empty batch");
    if (batch.tokens.size() != b || batch.mask_targets.size() != b)
        throw std::invalid_argument("train_step: batch field lengths disagree");

    const double lr = lr_at(cfg.base_lr, state.step, warmup_steps, total_steps);
    for (auto& [name, var] : state.params.named) var.zero_grad();

    // forward: per-image mask losses plus one batch-level contrastive loss
    ag::Var mask_sum, dice_sum, focal_sum;
    std::vector<ag::Var> visual_rows, text_rows;
    for (std::size_t i = 0; i < b; ++i) {
        const MaskOutputs out = forward_image(batch.images[i], state.params, cfg.model);
        if (!out.mask_logits.value().all_finite() || !out.mask_features.value().all_finite()) {
            LossReport r;
            r.total = std::numeric_limits<double>::quiet_NaN();
            throw std::runtime_error("train_step: non-finite forward activations; " +
                                     diagnostic(r, state.step, lr));
        }
        const Tensor& targets = batch.mask_targets[i];
        if (targets.rank() != 2 || targets.dim(1) != out.mask_logits.value().dim(1))
            throw std::invalid_argument("train_step: mask target pixel count mismatch");

        Assignment assign;
        {
            ag::NoGradGuard ng;
            Tensor costs({targets.dim(0), out.mask_logits.value().dim(0)});
            for (std::int64_t k = 0; k < costs.dim(0); ++k) {
                const Tensor target_row = row_of(targets, k);
                for (std::int64_t n = 0; n < costs.dim(1); ++n)
                    costs.at(k, n) =
                        pair_cost(row_of(out.mask_logits.value(), n), target_row, cfg.loss);
            }
            assign = hungarian(costs);
        }

        const MaskLossParts parts = mask_loss(out.mask_logits, targets, assign, cfg.loss);
        mask_sum = i == 0 ? parts.mask : ag::add(mask_sum, parts.mask);
        dice_sum = i == 0 ? parts.dice : ag::add(dice_sum, parts.dice);
        focal_sum = i == 0 ? parts.focal : ag::add(focal_sum, parts.focal);

        visual_rows.push_back(project_visual(out.mask_features, state.params));
        text_rows.push_back(
            project_text(forward_text(batch.tokens[i], state.params, cfg.model), state.params));
    }
    const double inv_b = 1.0 / static_cast<double>(b);
    const ag::Var mask_mean = ag::scale(mask_sum, inv_b);
    const ContrastiveParts cp =
        contrastive_loss(ag::concat_rows(visual_rows), ag::concat_rows(text_rows),
                         sigma_var(state.params));
    const ag::Var total = total_loss(mask_mean, cp.contrastive, cfg.loss);

    StepStats stats;
    stats.lr = lr;
    stats.loss.mask = mask_mean.value()[0];
    stats.loss.dice = dice_sum.value()[0] * inv_b;
    stats.loss.focal = focal_sum.value()[0] * inv_b;
    stats.loss.i2t = cp.i2t.value()[0];
    stats.loss.t2i = cp.t2i.value()[0];
    stats.loss.contrastive = cp.contrastive.value()[0];
    stats.loss.total = total.value()[0];
    if (!report_finite(stats.loss))
        throw std::runtime_error("train_step: non-finite loss; " +
                                 diagnostic(stats.loss, state.step, lr));

    ag::backward(total);
    stats.grad_norm = global_grad_norm(state.params);
    if (!std::isfinite(stats.grad_norm))
        throw std::runtime_error("train_step: non-finite gradient; " +
                                 diagnostic(stats.loss, state.step, lr));
    if (cfg.grad_clip > 0.0 && stats.grad_norm > cfg.grad_clip)
        scale_grads(state.params, cfg.grad_clip / stats.grad_norm);

    adamw_update(state.params, state.opt_m, state.opt_v, state.step, lr, cfg.beta1, cfg.beta2,
                 cfg.adam_eps, cfg.weight_decay);
    clamp_sigma(state.params);
    state.step += 1;
    stats.sigma = std::exp(state.params.at("log_sigma").value()[0]);
    return stats;
}

TrainState load_train_state(const std::string& checkpoint_path, ModelConfig& cfg_out) {
    LoadedModel lm = load_model(checkpoint_path);
    TrainState state;
    cfg_out = lm.config;
    state.params = std::move(lm.params);
    state.vocab_words = std::move(lm.vocab_words);
    for (auto& [name, arr] : lm.extra) {
        if (name.rfind("opt.m.", 0) == 0)
            state.opt_m[name.substr(6)] = std::move(arr);
        else if (name.rfind("opt.v.", 0) == 0)
            state.opt_v[name.substr(6)] = std::move(arr);
    }
    const nlohmann::json meta = nlohmann::json::parse(lm.extra_meta_json);
    state.step = meta.value("step", std::int64_t{0});
    state.epoch = meta.value("epoch", std::int64_t{0});
    state.seed = meta.value("seed", std::uint64_t{0});
    return state;
}

std::string train(const TrainConfig& cfg, const std::string& manifest_path,
                  const std::string& resume_from) {
    validate_train_config(cfg);
    const PairLoader loader(manifest_path);
    const std::int64_t n = static_cast<std::int64_t>(loader.size());
    if (n == 0) throw std::invalid_argument("train: empty dataset");

    const auto backbone = make_backbone(cfg);
    ModelConfig model_cfg = cfg.model;
    TrainState state;
    Vocab vocab;
    if (resume_from.empty()) {
        std::vector<std::vector<std::string>> corpus;
        corpus.reserve(loader.records().size());
        for (const auto& rec : loader.records())
            corpus.push_back(extract_words(rec.text, cfg.caption_filter));
        vocab = Vocab::build(corpus, cfg.vocab_cap);
        model_cfg.vocab_size = static_cast<std::int64_t>(vocab.words().size());
        state.params = init_params(model_cfg, cfg.seed);
        state.vocab_words = vocab.words();
        state.seed = cfg.seed;
    } else {
        state = load_train_state(resume_from, model_cfg);
        vocab = Vocab::from_words(state.vocab_words);
    }

    // the vocab-resolved model config drives every step
    TrainConfig run_cfg = cfg;
    run_cfg.model = model_cfg;

    const std::int64_t steps_per_epoch = ceil_div(n, cfg.batch_size);
    const std::int64_t total_steps = cfg.epochs * steps_per_epoch;
    const std::int64_t warmup_steps = cfg.warmup_epochs * steps_per_epoch;

    fs::create_directories(cfg.out_dir);
    const fs::path log_path = fs::path(cfg.out_dir) / "train_log.jsonl";
    std::ofstream log(log_path, resume_from.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw std::runtime_error("train: cannot open " + log_path.string());

    // caches hold identity-augmented masks; a collapsed scale range keeps the
    // crop equal to the source image, so the cache key (image id) stays valid
    const bool identity_aug = cfg.augment_scale_lo == 1.0 && cfg.augment_scale_hi == 1.0;
    const std::uint64_t cache_seed = derive_seed(state.seed, {kStreamPseudoMask});

    for (std::int64_t epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
        std::vector<std::int64_t> order(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        Rng shuffle_rng(derive_seed(state.seed, {kStreamShuffle, static_cast<std::uint64_t>(epoch)}));
        shuffle(order, shuffle_rng);

        for (std::int64_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
            const std::int64_t b1 = std::min<std::int64_t>(b0 + cfg.batch_size, n);
            TrainBatch batch;
            for (std::int64_t pos = b0; pos < b1; ++pos) {
                const std::int64_t ri = order[static_cast<std::size_t>(pos)];
                const ImageTextPair pair = loader.load(static_cast<std::size_t>(ri));

                ImageU8 view;
                PseudoMaskSet pseudo;
                if (identity_aug && !cfg.cache_dir.empty() &&
                    pair.image.height == cfg.image_size && pair.image.width == cfg.image_size) {
                    view = pair.image;
                    pseudo = load_or_generate_cached(cfg.cache_dir, view, pair.id, *backbone,
                                                     cfg.pseudo_k, cache_seed);
                } else {
                    Rng aug_rng(derive_seed(state.seed, {kStreamAugment,
                                                         static_cast<std::uint64_t>(epoch),
                                                         static_cast<std::uint64_t>(ri)}));
                    view = augment(pair.image, cfg.image_size, aug_rng, cfg.augment_scale_lo,
                                   cfg.augment_scale_hi);
                    pseudo = generate_pseudo_masks(
                        view, *backbone, cfg.pseudo_k,
                        derive_seed(state.seed, {kStreamPseudoMask,
                                                 static_cast<std::uint64_t>(epoch),
                                                 static_cast<std::uint64_t>(ri)}));
                }

                const int mask_side = cfg.image_size / static_cast<int>(model_cfg.mask_stride);
                batch.images.push_back(image_to_chw(view));
                batch.mask_targets.push_back(binary_targets(
                    downsample_labels_majority(pseudo.label_map, mask_side, mask_side), pseudo.k));
                batch.tokens.push_back(tokenize(extract_words(pair.caption, cfg.caption_filter),
                                                vocab, model_cfg.context_length));
            }

            const StepStats stats = train_step(batch, state, run_cfg, warmup_steps, total_steps);
            nlohmann::json line;
            line["step"] = state.step;
            line["epoch"] = epoch;
            line["lr"] = stats.lr;
            line["mask"] = stats.loss.mask;
            line["dice"] = stats.loss.dice;
            line["focal"] = stats.loss.focal;
            line["i2t"] = stats.loss.i2t;
            line["t2i"] = stats.loss.t2i;
            line["contrastive"] = stats.loss.contrastive;
            line["total"] = stats.loss.total;
            line["grad_norm"] = stats.grad_norm;
            line["sigma"] = stats.sigma;
            log << line.dump() << "\n";
            log.flush();
        }

        state.epoch = epoch + 1;
        if (cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0) {
            write_checkpoint(fs::path(cfg.out_dir) /
                                 ("model_epoch" + std::to_string(state.epoch) + ".ckpt"),
                             model_cfg, state);
        }
    }

    const fs::path final_path = fs::path(cfg.out_dir) / "model_final.ckpt";
    write_checkpoint(final_path, model_cfg, state);
    return final_path.string();
}

}  // namespace sseg
