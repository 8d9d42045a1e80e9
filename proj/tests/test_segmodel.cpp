#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "sseg/losses.hpp"
#include "sseg/segmodel.hpp"
#include "sseg/text.hpp"
#include "testutil.hpp"

using namespace sseg;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_queries = 4;
    cfg.embed_dim = 8;
    cfg.decoder_layers = 1;
    cfg.text_layers = 1;
    cfg.context_length = 8;
    cfg.vocab_size = 16;
    cfg.backbone_channels = {4, 6, 8};
    cfg.mask_stride = 4;
    cfg.proj_dim = 8;
    return cfg;
}

Tensor random_image(Rng& rng, std::int64_t side) {
    return testutil::random_tensor(rng, {3, side, side}, 0.0, 1.0);
}

CaptionTokens tokens_for(const std::vector<std::string>& words, const ModelConfig& cfg) {
    std::vector<std::string> table = {"<pad>", "<start>", "<eos>", "<unk>", "circle", "square",
                                      "triangle", "red", "green", "blue"};
    Vocab vocab = Vocab::from_words(table);
    return tokenize(words, vocab, cfg.context_length);
}

double grad_norm(const ag::Var& v) {
    if (!v.grad().defined()) return 0.0;
    double s = 0.0;
    for (std::int64_t i = 0; i < v.grad().size(); ++i) s += v.grad()[i] * v.grad()[i];
    return std::sqrt(s);
}

// Finite-difference check of the image forward pass with respect to one
// named parameter.
void check_image_param_gradient(const ModelConfig& cfg, const ModelParams& base,
                                const Tensor& image, const std::string& pname, Rng& rng) {
    INFO("parameter " << pname);
    testutil::check_gradient(
        [&](const std::vector<ag::Var>& in) {
            ModelParams p;
            for (const auto& [k, v] : base.named) {
                p.named.emplace(k, k == pname ? in[0] : ag::Var(v.value()));
            }
            MaskOutputs mo = forward_image(image, p, cfg);
            return ag::add(ag::sum_all(mo.mask_logits), ag::sum_all(mo.mask_features));
        },
        {base.at(pname).value()}, rng, 1e-4, 1e-7);
}

}  // namespace

TEST_CASE("config validation rejects malformed dimensions") {
    ModelConfig cfg = tiny_config();
    CHECK_NOTHROW(validate_config(cfg));
    cfg.mask_stride = 5;
    CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
    cfg = tiny_config();
    cfg.embed_dim = 10;
    CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
    cfg = tiny_config();
    cfg.vocab_size = 3;
    CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
    cfg = tiny_config();
    cfg.context_length = 2;
    CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
    cfg = tiny_config();
    cfg.backbone_channels = {4};
    CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
    cfg.backbone_channels = {4, 6, 8, 8};
    CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
    // two stages cap the total stride at 8
    cfg.backbone_channels = {4, 6};
    CHECK(backbone_stride(cfg) == 8);
    CHECK_NOTHROW(validate_config(cfg));
    cfg.mask_stride = 16;
    CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
    cfg = tiny_config();
    CHECK(backbone_stride(cfg) == 16);
    cfg.n_queries = 0;
    CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
}

TEST_CASE("initialization is deterministic, finite, and starts sigma at 0.07") {
    ModelConfig cfg = tiny_config();
    ModelParams a = init_params(cfg, 11);
    ModelParams b = init_params(cfg, 11);
    ModelParams c = init_params(cfg, 12);
    REQUIRE(a.named.size() == b.named.size());
    bool any_diff_seed_difference = false;
    for (const auto& [name, var] : a.named) {
        const Tensor& av = var.value();
        const Tensor& bv = b.at(name).value();
        REQUIRE(av.same_shape(bv));
        CHECK(av.all_finite());
        for (std::int64_t i = 0; i < av.size(); ++i) CHECK(av[i] == bv[i]);
        const Tensor& cv = c.at(name).value();
        for (std::int64_t i = 0; i < av.size(); ++i) {
            if (av[i] != cv[i]) any_diff_seed_difference = true;
        }
    }
    CHECK(any_diff_seed_difference);
    CHECK(sigma_var(a).value()[0] == doctest::Approx(0.07).epsilon(1e-14));
    CHECK_THROWS_AS(a.at("no.such.parameter"), std::out_of_range);
}

TEST_CASE("forward_image obeys the shape contract") {
    ModelConfig cfg = tiny_config();
    cfg.n_queries = 16;
    ModelParams p = init_params(cfg, 3);
    Rng rng(40);
    Tensor image = random_image(rng, 64);
    MaskOutputs mo = forward_image(image, p, cfg);
    CHECK(mo.out_h == 16);
    CHECK(mo.out_w == 16);
    REQUIRE(mo.mask_logits.value().rank() == 2);
    CHECK(mo.mask_logits.value().dim(0) == 16);
    CHECK(mo.mask_logits.value().dim(1) == 256);
    CHECK(mo.mask_features.value().dim(0) == 16);
    CHECK(mo.mask_features.value().dim(1) == cfg.embed_dim);
    CHECK(mo.mask_logits.value().all_finite());
    CHECK(mo.mask_features.value().all_finite());

    SUBCASE("stride 8 and 16 trims the pyramid") {
        cfg.mask_stride = 8;
        MaskOutputs m8 = forward_image(image, init_params(cfg, 3), cfg);
        CHECK(m8.out_h == 8);
        cfg.mask_stride = 16;
        MaskOutputs m16 = forward_image(image, init_params(cfg, 3), cfg);
        CHECK(m16.out_h == 4);
    }

    SUBCASE("a two-stage backbone runs at total stride 8") {
        cfg.backbone_channels = {4, 6};
        cfg.mask_stride = 4;
        ModelParams p2 = init_params(cfg, 3);
        CHECK(p2.named.count("backbone.s2.down.w") == 0);
        CHECK(p2.named.count("fpn.lat2.w") == 0);
        Tensor small = random_image(rng, 24);  // multiple of 8, not of 16
        MaskOutputs m2 = forward_image(small, p2, cfg);
        CHECK(m2.out_h == 6);
        CHECK(m2.mask_logits.value().dim(1) == 36);
        CHECK(m2.mask_logits.value().all_finite());
        CHECK_THROWS_AS(forward_image(Tensor({3, 20, 24}, 0.0), p2, cfg), std::invalid_argument);
    }

    CHECK_THROWS_AS(forward_image(Tensor({3, 60, 64}, 0.0), p, cfg), std::invalid_argument);
    CHECK_THROWS_AS(forward_image(Tensor({1, 64, 64}, 0.0), p, cfg), std::invalid_argument);
}

TEST_CASE("permuting query embeddings permutes both outputs identically") {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 5);
    Rng rng(41);
    Tensor image = random_image(rng, 32);
    MaskOutputs base = forward_image(image, p, cfg);

    std::vector<int> perm = {2, 0, 3, 1};
    const Tensor& q = p.at("query.embed").value();
    Tensor shuffled(q.shape(), 0.0);
    for (int i = 0; i < 4; ++i) {
        for (std::int64_t j = 0; j < q.dim(1); ++j) {
            shuffled.at(i, j) = q.at(perm[static_cast<std::size_t>(i)], j);
        }
    }
    ModelParams p2;
    for (const auto& [k, v] : p.named) {
        p2.named.emplace(k, k == "query.embed" ? ag::Var(shuffled) : ag::Var(v.value()));
    }
    // Permuting the queries also permutes the self-attention summation
    // order, so agreement is to rounding noise, not bitwise.
    MaskOutputs moved = forward_image(image, p2, cfg);
    for (int i = 0; i < 4; ++i) {
        int src = perm[static_cast<std::size_t>(i)];
        std::int64_t argmax_moved = 0, argmax_base = 0;
        for (std::int64_t j = 0; j < base.mask_logits.value().dim(1); ++j) {
            CHECK(testutil::close(moved.mask_logits.value().at(i, j),
                                  base.mask_logits.value().at(src, j), 1e-9, 1e-12));
            if (moved.mask_logits.value().at(i, j) >
                moved.mask_logits.value().at(i, argmax_moved)) {
                argmax_moved = j;
            }
            if (base.mask_logits.value().at(src, j) >
                base.mask_logits.value().at(src, argmax_base)) {
                argmax_base = j;
            }
        }
        CHECK(argmax_moved == argmax_base);
        for (std::int64_t j = 0; j < cfg.embed_dim; ++j) {
            CHECK(testutil::close(moved.mask_features.value().at(i, j),
                                  base.mask_features.value().at(src, j), 1e-9, 1e-12));
        }
    }
}

TEST_CASE("forward_image is pure: repeated calls match bit for bit") {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 6);
    Rng rng(42);
    Tensor img_a = random_image(rng, 32);
    Tensor img_b = random_image(rng, 32);
    MaskOutputs fresh = forward_image(img_b, p, cfg);
    (void)forward_image(img_a, p, cfg);
    MaskOutputs again = forward_image(img_b, p, cfg);
    for (std::int64_t i = 0; i < fresh.mask_logits.value().size(); ++i) {
        CHECK(fresh.mask_logits.value()[i] == again.mask_logits.value()[i]);
    }
}

TEST_CASE("image forward gradients match finite differences") {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 7);
    Rng rng(43);
    Tensor image = random_image(rng, 32);
    check_image_param_gradient(cfg, p, image, "query.embed", rng);
    check_image_param_gradient(cfg, p, image, "mask_head.fc1.w", rng);
    check_image_param_gradient(cfg, p, image, "backbone.s0.down.w", rng);
    check_image_param_gradient(cfg, p, image, "fpn.lat2.b", rng);
    check_image_param_gradient(cfg, p, image, "dec0.cross.wk", rng);
}

TEST_CASE("text forward reads the eos row under a causal mask") {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 8);
    CaptionTokens toks = tokens_for({"red", "circle"}, cfg);
    REQUIRE(toks.eos_index == 3);
    ag::Var out = forward_text(toks, p, cfg);
    REQUIRE(out.value().rank() == 2);
    CHECK(out.value().dim(0) == 1);
    CHECK(out.value().dim(1) == cfg.embed_dim);

    // Corrupt a pad slot after the eos: the readout must not move at all.
    CaptionTokens padded = toks;
    padded.ids[static_cast<std::size_t>(toks.eos_index) + 2] = 9;
    ag::Var out2 = forward_text(padded, p, cfg);
    for (std::int64_t j = 0; j < cfg.embed_dim; ++j) CHECK(out.value()[j] == out2.value()[j]);

    CaptionTokens other = tokens_for({"green", "square"}, cfg);
    ag::Var out3 = forward_text(other, p, cfg);
    bool differs = false;
    for (std::int64_t j = 0; j < cfg.embed_dim; ++j) {
        if (out.value()[j] != out3.value()[j]) differs = true;
    }
    CHECK(differs);

    CaptionTokens wrong = toks;
    wrong.context_length = 5;
    wrong.ids.resize(5);
    CHECK_THROWS_AS(forward_text(wrong, p, cfg), std::invalid_argument);
}

TEST_CASE("text projection gradient reaches the text transformer") {
    ModelConfig cfg = tiny_config();
    ModelParams base = init_params(cfg, 9);
    CaptionTokens toks = tokens_for({"blue", "triangle"}, cfg);
    Rng rng(44);
    testutil::check_gradient(
        [&](const std::vector<ag::Var>& in) {
            ModelParams p;
            for (const auto& [k, v] : base.named) {
                p.named.emplace(k, k == "txt0.attn.wq" ? in[0] : ag::Var(v.value()));
            }
            return ag::sum_all(project_text(forward_text(toks, p, cfg), p));
        },
        {base.at("txt0.attn.wq").value()}, rng, 1e-4, 1e-7);
}

TEST_CASE("visual and text projections produce unit rows") {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 10);
    Rng rng(45);
    Tensor feats = testutil::random_tensor(rng, {4, cfg.embed_dim}, -1.0, 1.0);

    ag::Var vis = project_visual(ag::Var(feats), p);
    REQUIRE(vis.value().dim(0) == 1);
    REQUIRE(vis.value().dim(1) == cfg.proj_dim);
    double norm = 0.0;
    for (std::int64_t j = 0; j < cfg.proj_dim; ++j) norm += vis.value()[j] * vis.value()[j];
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));

    // Identical rows collapse to the single-row case.
    Tensor same({3, cfg.embed_dim}, 0.0);
    Tensor one({1, cfg.embed_dim}, 0.0);
    for (std::int64_t j = 0; j < cfg.embed_dim; ++j) {
        double v = rng.uniform(-1.0, 1.0);
        one.at(0, j) = v;
        for (std::int64_t i = 0; i < 3; ++i) same.at(i, j) = v;
    }
    ag::Var from_mean = project_visual(ag::Var(same), p);
    ag::Var from_one = project_visual(ag::Var(one), p);
    for (std::int64_t j = 0; j < cfg.proj_dim; ++j) {
        CHECK(from_mean.value()[j] == doctest::Approx(from_one.value()[j]).epsilon(1e-12));
    }

    // Row order is irrelevant to the mean.
    Tensor swapped = feats;
    for (std::int64_t j = 0; j < cfg.embed_dim; ++j) std::swap(swapped.at(0, j), swapped.at(3, j));
    ag::Var vis2 = project_visual(ag::Var(swapped), p);
    for (std::int64_t j = 0; j < cfg.proj_dim; ++j) {
        CHECK(vis2.value()[j] == doctest::Approx(vis.value()[j]).epsilon(1e-12));
    }

    ag::Var rows = project_visual_rows(ag::Var(feats), p);
    REQUIRE(rows.value().dim(0) == 4);
    for (std::int64_t i = 0; i < 4; ++i) {
        double n = 0.0;
        for (std::int64_t j = 0; j < cfg.proj_dim; ++j) n += rows.value().at(i, j) * rows.value().at(i, j);
        CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));
    }

    ag::Var txt = project_text(ag::Var(one), p);
    double tn = 0.0;
    for (std::int64_t j = 0; j < cfg.proj_dim; ++j) tn += txt.value()[j] * txt.value()[j];
    CHECK(std::sqrt(tn) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("every parameter array receives gradient from the combined loss") {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 13);
    Rng rng(46);

    std::vector<Tensor> images = {random_image(rng, 32), random_image(rng, 32)};
    std::vector<CaptionTokens> caps = {tokens_for({"red", "circle"}, cfg),
                                       tokens_for({"green", "square"}, cfg)};

    LossWeights w;
    Assignment assign;
    assign.pairs = {{0, 0}, {1, 1}};

    ag::Var mask_sum;
    std::vector<ag::Var> vis_rows, txt_rows;
    for (std::size_t i = 0; i < images.size(); ++i) {
        MaskOutputs mo = forward_image(images[i], p, cfg);
        ImageU8 labels;
        labels.height = static_cast<int>(mo.out_h);
        labels.width = static_cast<int>(mo.out_w);
        labels.channels = 1;
        labels.pixels.resize(static_cast<std::size_t>(mo.out_h * mo.out_w));
        for (std::size_t px = 0; px < labels.pixels.size(); ++px) {
            labels.pixels[px] = static_cast<std::uint8_t>(rng.uniform_int(2));
        }
        Tensor targets = binary_targets(labels, 2);
        ag::Var m = mask_loss(mo.mask_logits, targets, assign, w).mask;
        mask_sum = mask_sum.defined() ? ag::add(mask_sum, m) : m;
        vis_rows.push_back(project_visual(mo.mask_features, p));
        txt_rows.push_back(project_text(forward_text(caps[i], p, cfg), p));
    }
    ag::Var mask_mean = ag::scale(mask_sum, 0.5);
    ag::Var contr = contrastive_loss(ag::concat_rows(vis_rows), ag::concat_rows(txt_rows),
                                     sigma_var(p))
                        .contrastive;
    ag::Var total = total_loss(mask_mean, contr, w);
    ag::backward(total);

    for (const auto& [name, var] : p.named) {
        INFO("parameter " << name);
        CHECK(grad_norm(var) > 0.0);
    }
}

TEST_CASE("sigma clamp keeps the temperature inside its range") {
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 14);
    p.at("log_sigma").value_mut()[0] = 12.0;
    clamp_sigma(p);
    CHECK(sigma_var(p).value()[0] == doctest::Approx(100.0).epsilon(1e-12));
    p.at("log_sigma").value_mut()[0] = -30.0;
    clamp_sigma(p);
    CHECK(sigma_var(p).value()[0] == doctest::Approx(0.01).epsilon(1e-12));
    p.at("log_sigma").value_mut()[0] = std::log(0.07);
    clamp_sigma(p);
    CHECK(sigma_var(p).value()[0] == doctest::Approx(0.07).epsilon(1e-12));
    CHECK_THROWS_AS(clamp_sigma(p, -1.0, 2.0), std::invalid_argument);
}

TEST_CASE("model container round-trips params, config, vocab and extras") {
    namespace fs = std::filesystem;
    ModelConfig cfg = tiny_config();
    ModelParams p = init_params(cfg, 15);
    std::vector<std::string> vocab = {"<pad>", "<start>", "<eos>", "<unk>", "circle"};
    std::map<std::string, Tensor> extra;
    extra["opt.step"] = Tensor::scalar(17.0);

    fs::path dir = fs::temp_directory_path() / "sseg_model_rt";
    fs::create_directories(dir);
    fs::path file = dir / "model.ckpt";
    save_model(file, cfg, p, vocab, extra);

    LoadedModel loaded = load_model(file);
    CHECK(loaded.config.n_queries == cfg.n_queries);
    CHECK(loaded.config.backbone_channels == cfg.backbone_channels);
    CHECK(loaded.config.mask_stride == cfg.mask_stride);
    CHECK(loaded.vocab_words == vocab);
    REQUIRE(loaded.extra.count("opt.step") == 1);
    CHECK(loaded.extra.at("opt.step")[0] == 17.0);
    REQUIRE(loaded.params.named.size() == p.named.size());
    for (const auto& [name, var] : p.named) {
        const Tensor& got = loaded.params.at(name).value();
        REQUIRE(got.same_shape(var.value()));
        for (std::int64_t i = 0; i < got.size(); ++i) CHECK(got[i] == var.value()[i]);
    }

    Rng rng(47);
    Tensor image = random_image(rng, 32);
    MaskOutputs before = forward_image(image, p, cfg);
    MaskOutputs after = forward_image(image, loaded.params, loaded.config);
    for (std::int64_t i = 0; i < before.mask_logits.value().size(); ++i) {
        CHECK(before.mask_logits.value()[i] == after.mask_logits.value()[i]);
    }

    Tensor clash = Tensor::scalar(1.0);
    std::map<std::string, Tensor> bad;
    bad["model.query.embed"] = clash;
    CHECK_THROWS_AS(save_model(file, cfg, p, vocab, bad), std::invalid_argument);
    fs::remove_all(dir);
}
