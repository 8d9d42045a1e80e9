#include "sseg/segmodel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"
#include "sseg/checkpoint.hpp"
#include "sseg/rng.hpp"

namespace sseg {

namespace {

constexpr double kNormEps = 1e-8;
constexpr double kMaskedScore = -1e9;

Tensor randn(Rng& rng, std::vector<std::int64_t> shape, double stddev) {
    Tensor t(std::move(shape), 0.0);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

void add_param(ModelParams& p, const std::string& name, Tensor value) {
    p.named.emplace(name, ag::Var(std::move(value), true));
}

// He-style fan-in init for the gelu convolutions.
void init_conv(ModelParams& p, Rng& rng, const std::string& prefix, std::int64_t out_c,
               std::int64_t in_c, std::int64_t k) {
    double stddev = std::sqrt(2.0 / static_cast<double>(in_c * k * k));
    add_param(p, prefix + ".w", randn(rng, {out_c, in_c, k, k}, stddev));
    add_param(p, prefix + ".b", Tensor({out_c}, 0.0));
}

void init_linear(ModelParams& p, Rng& rng, const std::string& prefix, std::int64_t in_d,
                 std::int64_t out_d) {
    add_param(p, prefix + ".w", randn(rng, {in_d, out_d}, 0.02));
    add_param(p, prefix + ".b", Tensor({out_d}, 0.0));
}

void init_layer_norm(ModelParams& p, const std::string& prefix, std::int64_t d) {
    add_param(p, prefix + ".g", Tensor({d}, 1.0));
    add_param(p, prefix + ".b", Tensor({d}, 0.0));
}

void init_attention(ModelParams& p, Rng& rng, const std::string& prefix, std::int64_t d) {
    for (const char* part : {"q", "k", "v", "o"}) {
        add_param(p, prefix + ".w" + part, randn(rng, {d, d}, 0.02));
        add_param(p, prefix + ".b" + part, Tensor({d}, 0.0));
    }
}

ag::Var layer_norm_at(const ModelParams& p, const std::string& prefix, const ag::Var& x) {
    return ag::layer_norm(x, p.at(prefix + ".g"), p.at(prefix + ".b"));
}

ag::Var linear_at(const ModelParams& p, const std::string& prefix, const ag::Var& x) {
    return ag::add_row_bias(ag::matmul(x, p.at(prefix + ".w")), p.at(prefix + ".b"));
}

ag::Var mlp_at(const ModelParams& p, const std::string& prefix, const ag::Var& x) {
    return linear_at(p, prefix + ".fc2", ag::gelu(linear_at(p, prefix + ".fc1", x)));
}

ag::Var conv_block(const ModelParams& p, const std::string& prefix, const ag::Var& x, int stride,
                   int pad) {
    return ag::gelu(ag::conv2d(x, p.at(prefix + ".w"), p.at(prefix + ".b"), stride, pad));
}

/// Multi-head attention; queries from xq, keys/values from xkv. `mask` is an
/// additive score mask shared by all heads.
ag::Var attention(const ModelParams& p, const std::string& prefix, const ag::Var& xq,
                  const ag::Var& xkv, const Tensor* mask) {
    ag::Var q = ag::add_row_bias(ag::matmul(xq, p.at(prefix + ".wq")), p.at(prefix + ".bq"));
    ag::Var k = ag::add_row_bias(ag::matmul(xkv, p.at(prefix + ".wk")), p.at(prefix + ".bk"));
    ag::Var v = ag::add_row_bias(ag::matmul(xkv, p.at(prefix + ".wv")), p.at(prefix + ".bv"));
    std::int64_t d = q.value().dim(1);
    std::int64_t hd = d / kAttnHeads;
    double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<ag::Var> heads;
    heads.reserve(kAttnHeads);
    for (int h = 0; h < kAttnHeads; ++h) {
        ag::Var qh = ag::slice_cols(q, h * hd, (h + 1) * hd);
        ag::Var kh = ag::slice_cols(k, h * hd, (h + 1) * hd);
        ag::Var vh = ag::slice_cols(v, h * hd, (h + 1) * hd);
        ag::Var scores = ag::scale(ag::matmul(qh, ag::transpose(kh)), inv_scale);
        heads.push_back(ag::matmul(ag::softmax_rows(scores, mask), vh));
    }
    return ag::add_row_bias(ag::matmul(ag::concat_cols(heads), p.at(prefix + ".wo")),
                            p.at(prefix + ".bo"));
}

/// Fixed 2-D sin/cos table added to the decoder memory, [h*w, dim].
Tensor sinusoidal_grid(std::int64_t h, std::int64_t w, std::int64_t dim) {
    std::int64_t quarter = dim / 4;
    Tensor out({h * w, dim}, 0.0);
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            std::int64_t row = y * w + x;
            for (std::int64_t i = 0; i < quarter; ++i) {
                double freq = std::pow(10000.0, -static_cast<double>(i) /
                                                    static_cast<double>(quarter));
                out.at(row, 2 * i) = std::sin(static_cast<double>(y) * freq);
                out.at(row, 2 * i + 1) = std::cos(static_cast<double>(y) * freq);
                out.at(row, dim / 2 + 2 * i) = std::sin(static_cast<double>(x) * freq);
                out.at(row, dim / 2 + 2 * i + 1) = std::cos(static_cast<double>(x) * freq);
            }
        }
    }
    return out;
}

Tensor causal_mask(std::int64_t n) {
    Tensor m({n, n}, 0.0);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = i + 1; j < n; ++j) m.at(i, j) = kMaskedScore;
    return m;
}

void init_pyramid(ModelParams& p, Rng& rng, const ModelConfig& cfg) {
    const std::int64_t d = cfg.embed_dim;
    std::int64_t prev = 3;
    for (std::size_t s = 0; s < cfg.backbone_channels.size(); ++s) {
        const std::int64_t ch = cfg.backbone_channels[s];
        const std::string base = "backbone.s" + std::to_string(s);
        init_conv(p, rng, base + ".down", ch, prev, s == 0 ? 4 : 2);
        init_conv(p, rng, base + ".conv", ch, ch, 3);
        init_conv(p, rng, "fpn.lat" + std::to_string(s), d, ch, 1);
        prev = ch;
    }
    init_conv(p, rng, "fpn.out", d, d, 3);
}

struct PyramidOut {
    ag::Var per_pixel;  // [embed_dim, H/mask_stride, W/mask_stride]
    ag::Var top;        // deepest lateral, [embed_dim, H/stride, W/stride]
};

PyramidOut run_pyramid(const Tensor& image, const ModelParams& params, const ModelConfig& cfg,
                       const char* who) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw std::invalid_argument(std::string(who) + ": expects [3,H,W], got " +
                                    image.shape_str());
    }
    const std::int64_t h = image.dim(1), w = image.dim(2);
    const int total_stride = backbone_stride(cfg);
    if (h % total_stride != 0 || w % total_stride != 0 || h == 0 || w == 0) {
        throw std::invalid_argument(std::string(who) +
                                    ": spatial dims must be positive multiples of " +
                                    std::to_string(total_stride));
    }
    const int stages = static_cast<int>(cfg.backbone_channels.size());

    std::vector<ag::Var> feats;
    ag::Var x(image);
    for (int s = 0; s < stages; ++s) {
        const std::string base = "backbone.s" + std::to_string(s);
        x = conv_block(params, base + ".conv",
                       conv_block(params, base + ".down", x, s == 0 ? 4 : 2, 0), 1, 1);
        feats.push_back(x);
    }

    // Top-down feature pyramid, trimmed at the requested mask resolution.
    // Stage s sits at stride 4*2^s; mask_stride picks the stop level.
    auto lateral = [&](int s) {
        const std::string base = "fpn.lat" + std::to_string(s);
        return ag::conv2d(feats[static_cast<std::size_t>(s)], params.at(base + ".w"),
                          params.at(base + ".b"), 1, 0);
    };
    PyramidOut out;
    out.top = lateral(stages - 1);
    ag::Var level = out.top;
    int stop = 0;
    while ((4 << stop) < cfg.mask_stride) ++stop;
    for (int s = stages - 2; s >= stop; --s)
        level = ag::add(lateral(s), ag::upsample_nearest2x(level));
    out.per_pixel = ag::conv2d(level, params.at("fpn.out.w"), params.at("fpn.out.b"), 1, 1);
    return out;
}

}  // namespace

void validate_pyramid_config(const ModelConfig& cfg) {
    if (cfg.embed_dim < 1) throw std::invalid_argument("ModelConfig: embed_dim must be >= 1");
    if (cfg.backbone_channels.size() != 2 && cfg.backbone_channels.size() != 3) {
        throw std::invalid_argument("ModelConfig: backbone_channels must list 2 or 3 stage widths");
    }
    for (int c : cfg.backbone_channels) {
        if (c < 1) throw std::invalid_argument("ModelConfig: backbone channel must be >= 1");
    }
    if (cfg.mask_stride != 4 && cfg.mask_stride != 8 && cfg.mask_stride != 16) {
        throw std::invalid_argument("ModelConfig: mask_stride must be 4, 8 or 16");
    }
    if (cfg.mask_stride > backbone_stride(cfg)) {
        throw std::invalid_argument("ModelConfig: mask_stride exceeds the backbone stride");
    }
}

void validate_config(const ModelConfig& cfg) {
    auto positive = [](int v, const char* what) {
        if (v < 1) throw std::invalid_argument(std::string("ModelConfig: ") + what + " must be >= 1");
    };
    positive(cfg.n_queries, "n_queries");
    positive(cfg.embed_dim, "embed_dim");
    positive(cfg.decoder_layers, "decoder_layers");
    positive(cfg.text_layers, "text_layers");
    positive(cfg.proj_dim, "proj_dim");
    if (cfg.context_length < 3) throw std::invalid_argument("ModelConfig: context_length must be >= 3");
    if (cfg.vocab_size < 4) throw std::invalid_argument("ModelConfig: vocab_size must cover the reserved tokens");
    if (cfg.embed_dim % kAttnHeads != 0 || cfg.embed_dim % 4 != 0) {
        throw std::invalid_argument("ModelConfig: embed_dim must be divisible by 4");
    }
    validate_pyramid_config(cfg);
}

int backbone_stride(const ModelConfig& cfg) {
    return 4 << (static_cast<int>(cfg.backbone_channels.size()) - 1);
}

ag::Var& ModelParams::at(const std::string& name) {
    auto it = named.find(name);
    if (it == named.end()) throw std::out_of_range("ModelParams: no parameter named " + name);
    return it->second;
}

const ag::Var& ModelParams::at(const std::string& name) const {
    auto it = named.find(name);
    if (it == named.end()) throw std::out_of_range("ModelParams: no parameter named " + name);
    return it->second;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    validate_config(cfg);
    Rng rng(derive_seed(seed, {kStreamInit}));
    ModelParams p;
    init_pyramid(p, rng, cfg);
    std::int64_t d = cfg.embed_dim;

    add_param(p, "query.embed", randn(rng, {cfg.n_queries, d}, 0.02));
    for (int l = 0; l < cfg.decoder_layers; ++l) {
        std::string base = "dec" + std::to_string(l);
        init_layer_norm(p, base + ".ln1", d);
        init_attention(p, rng, base + ".self", d);
        init_layer_norm(p, base + ".ln2", d);
        init_attention(p, rng, base + ".cross", d);
        init_layer_norm(p, base + ".ln3", d);
        init_linear(p, rng, base + ".mlp.fc1", d, 4 * d);
        init_linear(p, rng, base + ".mlp.fc2", 4 * d, d);
    }
    init_layer_norm(p, "dec.final_ln", d);
    init_linear(p, rng, "mask_head.fc1", d, d);
    init_linear(p, rng, "mask_head.fc2", d, d);

    add_param(p, "text.token_embed", randn(rng, {cfg.vocab_size, d}, 0.02));
    add_param(p, "text.pos_embed", randn(rng, {cfg.context_length, d}, 0.02));
    for (int l = 0; l < cfg.text_layers; ++l) {
        std::string base = "txt" + std::to_string(l);
        init_layer_norm(p, base + ".ln1", d);
        init_attention(p, rng, base + ".attn", d);
        init_layer_norm(p, base + ".ln2", d);
        init_linear(p, rng, base + ".mlp.fc1", d, 4 * d);
        init_linear(p, rng, base + ".mlp.fc2", 4 * d, d);
    }
    init_layer_norm(p, "text.final_ln", d);

    init_linear(p, rng, "proj_v.fc1", d, d);
    init_linear(p, rng, "proj_v.fc2", d, cfg.proj_dim);
    init_linear(p, rng, "proj_t.fc1", d, d);
    init_linear(p, rng, "proj_t.fc2", d, cfg.proj_dim);

    add_param(p, "log_sigma", Tensor({1}, std::log(0.07)));
    return p;
}

ModelParams init_pyramid_params(const ModelConfig& cfg, std::uint64_t seed) {
    validate_pyramid_config(cfg);
    Rng rng(derive_seed(seed, {kStreamInit}));
    ModelParams p;
    init_pyramid(p, rng, cfg);
    return p;
}

ag::Var forward_pyramid(const Tensor& image, const ModelParams& params, const ModelConfig& cfg) {
    validate_pyramid_config(cfg);
    return run_pyramid(image, params, cfg, "forward_pyramid").per_pixel;
}

MaskOutputs forward_image(const Tensor& image, const ModelParams& params, const ModelConfig& cfg) {
    validate_config(cfg);
    const PyramidOut pyr = run_pyramid(image, params, cfg, "forward_image");
    const std::int64_t h = image.dim(1), w = image.dim(2);
    const std::int64_t d = cfg.embed_dim;
    const ag::Var per_pixel = pyr.per_pixel;
    std::int64_t out_h = h / cfg.mask_stride, out_w = w / cfg.mask_stride;

    // Decoder memory: lowest-resolution pyramid level plus a fixed spatial
    // encoding (the queries themselves carry learned embeddings only).
    std::int64_t mem_h = h / backbone_stride(cfg), mem_w = w / backbone_stride(cfg);
    ag::Var mem = ag::add(ag::transpose(ag::reshape(pyr.top, {d, mem_h * mem_w})),
                          ag::Var(sinusoidal_grid(mem_h, mem_w, d)));

    ag::Var q = params.at("query.embed");
    for (int l = 0; l < cfg.decoder_layers; ++l) {
        std::string base = "dec" + std::to_string(l);
        ag::Var h1 = layer_norm_at(params, base + ".ln1", q);
        q = ag::add(q, attention(params, base + ".self", h1, h1, nullptr));
        ag::Var h2 = layer_norm_at(params, base + ".ln2", q);
        q = ag::add(q, attention(params, base + ".cross", h2, mem, nullptr));
        ag::Var h3 = layer_norm_at(params, base + ".ln3", q);
        q = ag::add(q, mlp_at(params, base + ".mlp", h3));
    }

    MaskOutputs out;
    out.mask_features = layer_norm_at(params, "dec.final_ln", q);
    ag::Var mask_embeds = mlp_at(params, "mask_head", out.mask_features);
    out.mask_logits = ag::matmul(mask_embeds, ag::reshape(per_pixel, {d, out_h * out_w}));
    out.out_h = out_h;
    out.out_w = out_w;
    return out;
}

ag::Var forward_text(const CaptionTokens& tokens, const ModelParams& params,
                     const ModelConfig& cfg) {
    if (tokens.context_length != cfg.context_length ||
        tokens.ids.size() != static_cast<std::size_t>(cfg.context_length)) {
        throw std::invalid_argument("forward_text: token context does not match the model config");
    }
    if (tokens.eos_index < 0 || tokens.eos_index >= cfg.context_length) {
        throw std::invalid_argument("forward_text: eos_index out of range");
    }
    ag::Var x = ag::add(ag::embedding(params.at("text.token_embed"), tokens.ids),
                        params.at("text.pos_embed"));
    Tensor mask = causal_mask(cfg.context_length);
    for (int l = 0; l < cfg.text_layers; ++l) {
        std::string base = "txt" + std::to_string(l);
        ag::Var h1 = layer_norm_at(params, base + ".ln1", x);
        x = ag::add(x, attention(params, base + ".attn", h1, h1, &mask));
        ag::Var h2 = layer_norm_at(params, base + ".ln2", x);
        x = ag::add(x, mlp_at(params, base + ".mlp", h2));
    }
    x = layer_norm_at(params, "text.final_ln", x);
    return ag::take_row(x, tokens.eos_index);
}

ag::Var project_visual_rows(const ag::Var& features, const ModelParams& params) {
    return ag::l2_normalize_rows(mlp_at(params, "proj_v", features), kNormEps);
}

ag::Var project_visual(const ag::Var& mask_features, const ModelParams& params) {
    return project_visual_rows(ag::mean_rows(mask_features), params);
}

ag::Var project_text(const ag::Var& text_feature, const ModelParams& params) {
    return ag::l2_normalize_rows(mlp_at(params, "proj_t", text_feature), kNormEps);
}

ag::Var sigma_var(const ModelParams& params) { return ag::exp_v(params.at("log_sigma")); }

void clamp_sigma(ModelParams& params, double lo, double hi) {
    if (!(lo > 0.0) || !(hi >= lo)) throw std::invalid_argument("clamp_sigma: bad range");
    ag::Var& ls = params.at("log_sigma");
    const double sigma = std::exp(ls.value()[0]);
    // write back only when the clamp binds; exp/log round-trip noise would
    // otherwise perturb an in-range value
    if (sigma < lo)
        ls.value_mut()[0] = std::log(lo);
    else if (sigma > hi)
        ls.value_mut()[0] = std::log(hi);
}

void save_model(const std::filesystem::path& path, const ModelConfig& cfg,
                const ModelParams& params, const std::vector<std::string>& vocab_words,
                const std::map<std::string, Tensor>& extra, const std::string& extra_meta_json) {
    nlohmann::json meta;
    meta["format"] = "sseg-model";
    meta["extra"] = nlohmann::json::parse(extra_meta_json);
    meta["config"] = {{"n_queries", cfg.n_queries},
                      {"embed_dim", cfg.embed_dim},
                      {"decoder_layers", cfg.decoder_layers},
                      {"text_layers", cfg.text_layers},
                      {"context_length", cfg.context_length},
                      {"vocab_size", cfg.vocab_size},
                      {"backbone_channels", cfg.backbone_channels},
                      {"mask_stride", cfg.mask_stride},
                      {"proj_dim", cfg.proj_dim}};
    meta["vocab"] = vocab_words;

    ArrayStore store;
    store.meta_json = meta.dump();
    for (const auto& [name, var] : params.named) store.arrays["model." + name] = var.value();
    for (const auto& [name, tensor] : extra) {
        if (name.rfind("model.", 0) == 0) {
            throw std::invalid_argument("save_model: extra array name collides with model.: " + name);
        }
        store.arrays[name] = tensor;
    }
    save_arrays(path.string(), store);
}

LoadedModel load_model(const std::filesystem::path& path) {
    ArrayStore store = load_arrays(path.string());
    nlohmann::json meta = nlohmann::json::parse(store.meta_json);
    if (meta.value("format", "") != "sseg-model") {
        throw std::runtime_error("load_model: not a model file: " + path.string());
    }
    LoadedModel out;
    const auto& jc = meta.at("config");
    out.config.n_queries = jc.at("n_queries").get<int>();
    out.config.embed_dim = jc.at("embed_dim").get<int>();
    out.config.decoder_layers = jc.at("decoder_layers").get<int>();
    out.config.text_layers = jc.at("text_layers").get<int>();
    out.config.context_length = jc.at("context_length").get<int>();
    out.config.vocab_size = jc.at("vocab_size").get<int>();
    out.config.backbone_channels = jc.at("backbone_channels").get<std::vector<int>>();
    out.config.mask_stride = jc.at("mask_stride").get<int>();
    out.config.proj_dim = jc.at("proj_dim").get<int>();
    validate_config(out.config);
    out.vocab_words = meta.at("vocab").get<std::vector<std::string>>();
    if (meta.contains("extra")) out.extra_meta_json = meta["extra"].dump();

    for (auto& [name, tensor] : store.arrays) {
        if (name.rfind("model.", 0) == 0) {
            out.params.named.emplace(name.substr(6), ag::Var(std::move(tensor), true));
        } else {
            out.extra.emplace(name, std::move(tensor));
        }
    }
    if (out.params.named.find("log_sigma") == out.params.named.end()) {
        throw std::runtime_error("load_model: parameter arrays missing from " + path.string());
    }
    return out;
}

}  // namespace sseg
