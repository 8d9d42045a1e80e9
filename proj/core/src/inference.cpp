#include "sseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "sseg/autograd.hpp"
#include "sseg/text.hpp"

namespace sseg {

namespace {

double stable_sigmoid(double v) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

/// Bit-spread colormap: each of the low 8 index bits lands in a distinct
/// color-channel bit, so indices below 256 map to distinct colors and 0 maps
/// to black.
Rgb spread_color(int id) {
    int r = 0, g = 0, b = 0;
    for (int j = 0; j < 8; ++j) {
        r |= ((id >> 0) & 1) << (7 - j);
        g |= ((id >> 1) & 1) << (7 - j);
        b |= ((id >> 2) & 1) << (7 - j);
        id >>= 3;
    }
    return {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
            static_cast<std::uint8_t>(b)};
}

int ceil_to_16(int v) { return std::max(16, (v + 15) / 16 * 16); }

}  // namespace

void validate_class_vocabulary(const ClassVocabulary& vocab) {
    if (vocab.names.empty()) throw std::invalid_argument("ClassVocabulary: no class names");
    if (vocab.names.size() > 254)
        throw std::invalid_argument("ClassVocabulary: more than 254 classes");
    std::set<std::string> seen;
    for (const auto& name : vocab.names) {
        if (name.empty()) throw std::invalid_argument("ClassVocabulary: empty class name");
        if (!seen.insert(name).second)
            throw std::invalid_argument("ClassVocabulary: duplicate class name '" + name + "'");
    }
    const auto first = vocab.prompt_template.find("{}");
    if (first == std::string::npos || vocab.prompt_template.find("{}", first + 1) != std::string::npos)
        throw std::invalid_argument("ClassVocabulary: template needs exactly one {} placeholder");
}

std::string apply_template(const std::string& prompt_template, const std::string& name) {
    const auto pos = prompt_template.find("{}");
    if (pos == std::string::npos)
        throw std::invalid_argument("apply_template: missing {} placeholder");
    std::string out = prompt_template;
    return out.replace(pos, 2, name);
}

Tensor encode_classes(const ClassVocabulary& vocab, const LoadedModel& model,
                      std::vector<std::string>* unknown_names) {
    validate_class_vocabulary(vocab);
    const Vocab words = Vocab::from_words(model.vocab_words);
    if (unknown_names) unknown_names->clear();

    ag::NoGradGuard ng;
    Tensor out({static_cast<std::int64_t>(vocab.names.size()), model.config.proj_dim});
    for (std::size_t i = 0; i < vocab.names.size(); ++i) {
        const std::string prompt = apply_template(vocab.prompt_template, vocab.names[i]);
        std::vector<std::string> split = extract_words(prompt, WordFilter::content_words);
        if (split.empty()) split = extract_words(prompt, WordFilter::keep_all);
        const CaptionTokens tokens = tokenize(split, words, model.config.context_length);

        bool any_known = false;
        for (std::int64_t t = 1; t < tokens.eos_index; ++t)
            if (tokens.ids[static_cast<std::size_t>(t)] != Vocab::kUnk) any_known = true;
        if (!any_known && unknown_names) unknown_names->push_back(vocab.names[i]);

        const ag::Var row =
            project_text(forward_text(tokens, model.params, model.config), model.params);
        for (std::int64_t j = 0; j < model.config.proj_dim; ++j)
            out.at(static_cast<std::int64_t>(i), j) = row.value()[j];
    }
    return out;
}

Tensor classify_masks(const Tensor& mask_features, const Tensor& class_embs,
                      const LoadedModel& model) {
    if (mask_features.rank() != 2 || mask_features.dim(1) != model.config.embed_dim)
        throw std::invalid_argument("classify_masks: mask features must be [N, embed_dim]");
    if (class_embs.rank() != 2 || class_embs.dim(1) != model.config.proj_dim)
        throw std::invalid_argument("classify_masks: class embeddings must be [C, proj_dim]");

    ag::NoGradGuard ng;
    const ag::Var vis = project_visual_rows(ag::Var(mask_features), model.params);
    const ag::Var one(Tensor::scalar(1.0));
    const ag::Var logits = ag::scale_by(ag::matmul(vis, ag::transpose(ag::Var(class_embs))),
                                        ag::sdiv(one, sigma_var(model.params)));
    return ag::softmax_rows(logits).value();
}

Tensor combine_scores(const Tensor& mask_logits, std::int64_t grid_h, std::int64_t grid_w,
                      const Tensor& class_probs, int out_h, int out_w) {
    if (mask_logits.rank() != 2 || class_probs.rank() != 2 ||
        mask_logits.dim(0) != class_probs.dim(0))
        throw std::invalid_argument("combine_scores: need [N,P] logits and [N,C] probabilities");
    if (mask_logits.dim(1) != grid_h * grid_w)
        throw std::invalid_argument("combine_scores: pixel count does not match the grid");
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("combine_scores: bad output size");

    const std::int64_t n_masks = mask_logits.dim(0);
    const std::int64_t pixels = mask_logits.dim(1);
    const std::int64_t n_classes = class_probs.dim(1);
    Tensor grid({n_classes, grid_h, grid_w}, 0.0);
    for (std::int64_t n = 0; n < n_masks; ++n) {
        for (std::int64_t px = 0; px < pixels; ++px) {
            const double mass = stable_sigmoid(mask_logits.at(n, px));
            for (std::int64_t c = 0; c < n_classes; ++c)
                grid[c * pixels + px] += mass * class_probs.at(n, c);
        }
    }
    if (out_h == grid_h && out_w == grid_w) return grid;
    ag::NoGradGuard ng;
    return ag::bilinear_resize(ag::Var(grid), out_h, out_w).value();
}

ImageU8 argmax_labels(const Tensor& scores) {
    if (scores.rank() != 3 || scores.dim(0) < 1 || scores.dim(0) > 255)
        throw std::invalid_argument("argmax_labels: expects [C,H,W] with C in [1,255]");
    const std::int64_t n_classes = scores.dim(0);
    const std::int64_t h = scores.dim(1), w = scores.dim(2);
    ImageU8 labels(static_cast<int>(h), static_cast<int>(w), 1);
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            std::int64_t best = 0;
            for (std::int64_t c = 1; c < n_classes; ++c)
                if (scores.at(c, y, x) > scores.at(best, y, x)) best = c;
            labels.at(static_cast<int>(y), static_cast<int>(x)) = static_cast<std::uint8_t>(best);
        }
    }
    return labels;
}

SegmentationMap background_threshold(const Tensor& scores, const ClassVocabulary& legend,
                                     double tau) {
    validate_class_vocabulary(legend);
    if (!(tau >= 0.0 && tau <= 1.0))
        throw std::invalid_argument("background_threshold: tau must lie in [0, 1]");
    if (scores.rank() != 3 ||
        scores.dim(0) != static_cast<std::int64_t>(legend.names.size()))
        throw std::invalid_argument("background_threshold: scores do not match the legend");

    SegmentationMap seg;
    seg.legend = legend;
    seg.background_index = static_cast<int>(legend.names.size());
    seg.labels = argmax_labels(scores);
    const std::int64_t n_classes = scores.dim(0);
    for (int y = 0; y < seg.labels.height; ++y) {
        for (int x = 0; x < seg.labels.width; ++x) {
            double total = 0.0;
            for (std::int64_t c = 0; c < n_classes; ++c) total += scores.at(c, y, x);
            const double top = scores.at(seg.labels.at(y, x), y, x);
            const double confidence = total > 0.0 ? top / total : 0.0;
            if (confidence < tau)
                seg.labels.at(y, x) = static_cast<std::uint8_t>(seg.background_index);
        }
    }
    return seg;
}

InferenceResult infer_image(const ImageU8& image, const LoadedModel& model,
                            const ClassVocabulary& vocab, const Tensor& class_embs, double tau) {
    validate_class_vocabulary(vocab);
    if (class_embs.rank() != 2 ||
        class_embs.dim(0) != static_cast<std::int64_t>(vocab.names.size()))
        throw std::invalid_argument("infer_image: class embedding count does not match names");
    if (image.channels != 3 || image.height < 1 || image.width < 1)
        throw std::invalid_argument("infer_image: expects a nonempty RGB image");

    const int work_h = ceil_to_16(image.height);
    const int work_w = ceil_to_16(image.width);
    const ImageU8& work = (work_h == image.height && work_w == image.width)
                              ? image
                              : resize_bilinear(image, work_h, work_w);

    ag::NoGradGuard ng;
    const MaskOutputs out = forward_image(image_to_chw(work), model.params, model.config);
    const Tensor probs = classify_masks(out.mask_features.value(), class_embs, model);

    InferenceResult result;
    result.scores = combine_scores(out.mask_logits.value(), out.out_h, out.out_w, probs,
                                   image.height, image.width);
    if (tau >= 0.0) {
        result.seg = background_threshold(result.scores, vocab, tau);
    } else {
        result.seg.labels = argmax_labels(result.scores);
        result.seg.legend = vocab;
        result.seg.background_index = -1;
    }
    return result;
}

InferenceResult infer_image(const ImageU8& image, const LoadedModel& model,
                            const ClassVocabulary& vocab, double tau) {
    return infer_image(image, model, vocab, encode_classes(vocab, model), tau);
}

std::vector<Rgb> make_palette(int n_classes, int background_index) {
    if (n_classes < 1 || n_classes > 254) throw std::invalid_argument("make_palette: bad class count");
    if (background_index >= 0 && background_index < n_classes)
        throw std::invalid_argument("make_palette: background index collides with a class");
    const int entries = std::max(n_classes, background_index + 1);
    if (entries > 256) throw std::invalid_argument("make_palette: index exceeds one byte");
    std::vector<Rgb> palette(static_cast<std::size_t>(entries));
    for (int i = 0; i < entries; ++i)
        palette[static_cast<std::size_t>(i)] = spread_color(i + 1);  // skip black
    if (background_index >= 0) palette[static_cast<std::size_t>(background_index)] = {0, 0, 0};
    return palette;
}

ImageU8 render_labels(const ImageU8& labels, const std::vector<Rgb>& palette) {
    if (labels.channels != 1) throw std::invalid_argument("render_labels: labels must have 1 channel");
    std::set<int> missing;
    for (const std::uint8_t v : labels.pixels)
        if (static_cast<std::size_t>(v) >= palette.size()) missing.insert(v);
    if (!missing.empty()) {
        std::ostringstream os;
        os << "render_labels: no palette entry for label";
        for (int v : missing) os << " " << v;
        throw std::invalid_argument(os.str());
    }
    ImageU8 out(labels.height, labels.width, 3);
    for (int y = 0; y < labels.height; ++y) {
        for (int x = 0; x < labels.width; ++x) {
            const Rgb& color = palette[labels.at(y, x)];
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = color[static_cast<std::size_t>(c)];
        }
    }
    return out;
}

std::string format_legend(const SegmentationMap& seg) {
    std::ostringstream os;
    for (std::size_t i = 0; i < seg.legend.names.size(); ++i)
        os << i << "\t" << seg.legend.names[i] << "\n";
    if (seg.background_index >= 0) os << seg.background_index << "\tbackground\n";
    return os.str();
}

}  // namespace sseg
