#include "sseg/selftrain.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "sseg/checkpoint.hpp"
#include "sseg/manifest.hpp"
#include "sseg/pseudomask.hpp"
#include "sseg/rng.hpp"
#include "sseg/train.hpp"

namespace fs = std::filesystem;

namespace sseg {

namespace {

std::int64_t ceil_div(std::int64_t n, std::int64_t d) { return (n + d - 1) / d; }

int ceil_to(int v, int multiple) {
    const int m = std::max(v, 1);
    return static_cast<int>(ceil_div(m, multiple)) * multiple;
}

/// The pyramid pass reads exactly these three fields of ModelConfig.
ModelConfig pyramid_config(const StudentConfig& cfg) {
    ModelConfig m;
    m.backbone_channels = cfg.backbone_channels;
    m.embed_dim = cfg.embed_dim;
    m.mask_stride = cfg.mask_stride;
    return m;
}

ag::Var student_logits(const Tensor& image, const ModelParams& params, const ModelConfig& pcfg) {
    const ag::Var feat = forward_pyramid(image, params, pcfg);
    return ag::conv2d(feat, params.at("head.w"), params.at("head.b"), 1, 0);
}

void check_label_values(const ImageU8& labels, int n_classes, int ignore_value,
                        const std::string& id) {
    for (std::uint8_t v : labels.pixels) {
        if (v != ignore_value && v >= n_classes)
            throw std::invalid_argument("train_student: record " + id + " has label value " +
                                        std::to_string(v) + " outside the class list");
    }
}

}  // namespace

LabelGenResult generate_labels(const std::string& checkpoint_path,
                               const std::string& images_manifest, const ClassVocabulary& vocab,
                               double tau, const std::string& out_dir) {
    validate_class_vocabulary(vocab);
    const bool thresholded = tau >= 0.0;
    if (thresholded) {
        for (const auto& name : vocab.names)
            if (name == "background")
                throw std::invalid_argument(
                    "generate_labels: thresholding adds its own background class; drop it from "
                    "the vocabulary");
    }

    const LoadedModel model = load_model(checkpoint_path);
    const Tensor class_embs = encode_classes(vocab, model);
    const PairLoader loader(images_manifest);
    const fs::path base = fs::path(images_manifest).parent_path();

    fs::create_directories(fs::path(out_dir) / "labels");

    LabelGenResult result;
    result.class_names = vocab.names;
    if (thresholded) result.class_names.push_back("background");

    std::vector<ManifestRecord> kept;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < loader.size(); ++i) {
        const ManifestRecord& rec = loader.records()[i];
        try {
            if (!seen.insert(rec.id).second)
                throw std::runtime_error("duplicate record id");
            const ImageTextPair pair = loader.load(i);
            const InferenceResult inf = infer_image(pair.image, model, vocab, class_embs, tau);
            const std::string rel = "labels/" + rec.id + ".png";
            write_png((fs::path(out_dir) / rel).string(), inf.seg.labels);

            fs::path src = rec.image;
            if (src.is_relative()) src = base / src;
            ManifestRecord out = rec;
            out.image = fs::absolute(src).lexically_normal().string();
            out.labels = rel;
            kept.push_back(std::move(out));
            result.written += 1;
        } catch (const std::exception& e) {
            result.failures.push_back(rec.id + ": " + e.what());
        }
    }

    result.manifest_path = (fs::path(out_dir) / "manifest.tsv").string();
    write_manifest(result.manifest_path, kept);
    write_class_names((fs::path(out_dir) / "classes.txt").string(), result.class_names);

    std::ofstream skipped((fs::path(out_dir) / "skipped.txt").string(), std::ios::trunc);
    for (const auto& f : result.failures) skipped << f << "\n";
    skipped << "skipped " << result.failures.size() << " of " << loader.size() << " records\n";
    return result;
}

void validate_student_config(const StudentConfig& cfg) {
    const ModelConfig pcfg = pyramid_config(cfg);
    validate_pyramid_config(pcfg);
    if (cfg.n_classes < 0 || cfg.n_classes == 1 || cfg.n_classes > 255)
        throw std::invalid_argument("student: n_classes must be 0 (from classes.txt) or in [2, 255]");
    if (cfg.ignore_value < 0 || cfg.ignore_value > 255)
        throw std::invalid_argument("student: ignore_value must fit in a byte");
    if (!(cfg.base_lr > 0.0)) throw std::invalid_argument("student: base_lr must be positive");
    if (!(cfg.weight_decay >= 0.0)) throw std::invalid_argument("student: negative weight_decay");
    if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0))
        throw std::invalid_argument("student: betas must lie in [0, 1)");
    if (!(cfg.adam_eps > 0.0)) throw std::invalid_argument("student: adam_eps must be positive");
    if (!(cfg.poly_power > 0.0)) throw std::invalid_argument("student: poly_power must be positive");
    if (cfg.warmup_epochs < 0) throw std::invalid_argument("student: negative warmup_epochs");
    if (cfg.batch_size < 1) throw std::invalid_argument("student: batch_size must be >= 1");
    if (cfg.epochs < 1) throw std::invalid_argument("student: epochs must be >= 1");
    const int stride = backbone_stride(pcfg);
    if (cfg.image_size < stride || cfg.image_size % stride != 0)
        throw std::invalid_argument("student: image_size must be a positive multiple of " +
                                    std::to_string(stride));
    if (cfg.out_dir.empty()) throw std::invalid_argument("student: out_dir must be set");
}

double student_lr_at(double base_lr, std::int64_t step, std::int64_t warmup_steps,
                     std::int64_t total_steps, double power) {
    if (step < warmup_steps)
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const std::int64_t span = std::max<std::int64_t>(total_steps - warmup_steps, 1);
    double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
    progress = std::clamp(progress, 0.0, 1.0);
    return base_lr * std::pow(1.0 - progress, power);
}

std::string train_student(const std::string& labels_manifest, const StudentConfig& cfg) {
    validate_student_config(cfg);
    const PairLoader loader(labels_manifest);
    const std::int64_t n = static_cast<std::int64_t>(loader.size());
    if (n == 0) throw std::invalid_argument("train_student: empty manifest");

    // the class list comes from a classes.txt next to the manifest when one
    // exists; a bare manifest needs n_classes set explicitly
    std::vector<std::string> names;
    const fs::path classes_path = fs::path(labels_manifest).parent_path() / "classes.txt";
    if (fs::exists(classes_path)) {
        names = read_class_names(classes_path.string());
        if (cfg.n_classes > 0 && cfg.n_classes != static_cast<int>(names.size()))
            throw std::invalid_argument("train_student: n_classes disagrees with classes.txt");
    } else {
        if (cfg.n_classes == 0)
            throw std::invalid_argument("train_student: no classes.txt beside the manifest and "
                                        "n_classes unset");
        for (int c = 0; c < cfg.n_classes; ++c) names.push_back("class" + std::to_string(c));
    }
    const int n_classes = static_cast<int>(names.size());
    if (n_classes < 2 || n_classes > 255)
        throw std::invalid_argument("train_student: class count must lie in [2, 255]");

    StudentConfig run_cfg = cfg;
    run_cfg.n_classes = n_classes;
    const ModelConfig pcfg = pyramid_config(run_cfg);

    ModelParams params = init_pyramid_params(pcfg, cfg.seed);
    {
        Rng head_rng(derive_seed(cfg.seed, {kStreamInit, 1}));
        const double stddev = std::sqrt(2.0 / static_cast<double>(cfg.embed_dim));
        Tensor w({n_classes, cfg.embed_dim, 1, 1}, 0.0);
        for (std::int64_t i = 0; i < w.size(); ++i) w[i] = head_rng.normal(0.0, stddev);
        params.named.emplace("head.w", ag::Var(std::move(w), true));
        params.named.emplace("head.b", ag::Var(Tensor({n_classes}, 0.0), true));
    }
    std::map<std::string, Tensor> opt_m, opt_v;

    const std::int64_t steps_per_epoch = ceil_div(n, cfg.batch_size);
    const std::int64_t total_steps = cfg.epochs * steps_per_epoch;
    const std::int64_t warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    const std::int64_t side = cfg.image_size / cfg.mask_stride;

    fs::create_directories(cfg.out_dir);
    const fs::path log_path = fs::path(cfg.out_dir) / "student_log.jsonl";
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw std::runtime_error("train_student: cannot open " + log_path.string());

    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::int64_t> order(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        Rng shuffle_rng(
            derive_seed(cfg.seed, {kStreamShuffle, static_cast<std::uint64_t>(epoch)}));
        shuffle(order, shuffle_rng);

        for (std::int64_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
            const std::int64_t b1 = std::min<std::int64_t>(b0 + cfg.batch_size, n);
            const double lr =
                student_lr_at(cfg.base_lr, step, warmup_steps, total_steps, cfg.poly_power);
            for (auto& [name, var] : params.named) var.zero_grad();

            ag::Var loss_sum;
            std::int64_t contributing = 0;
            for (std::int64_t pos = b0; pos < b1; ++pos) {
                const std::int64_t ri = order[static_cast<std::size_t>(pos)];
                const ImageTextPair pair = loader.load(static_cast<std::size_t>(ri));
                ImageU8 labels = loader.load_labels(static_cast<std::size_t>(ri));
                if (labels.channels != 1)
                    throw std::invalid_argument("train_student: record " + pair.id +
                                                " has a multi-channel label map");
                check_label_values(labels, n_classes, cfg.ignore_value, pair.id);

                const ImageU8 view = resize_bilinear(pair.image, cfg.image_size, cfg.image_size);
                if (labels.height != cfg.image_size || labels.width != cfg.image_size)
                    labels = resize_nearest(labels, cfg.image_size, cfg.image_size);
                const ImageU8 down = downsample_labels_majority(
                    labels, static_cast<int>(side), static_cast<int>(side));

                const ag::Var logits = student_logits(image_to_chw(view), params, pcfg);
                const std::int64_t pixels = side * side;
                const ag::Var logp = ag::log_softmax_rows(
                    ag::transpose(ag::reshape(logits, {n_classes, pixels})));

                // one-hot picks the supervised entries; majority cells that
                // stayed at ignore_value drop out of the mean
                Tensor picks({pixels, n_classes}, 0.0);
                std::int64_t scored = 0;
                for (std::int64_t px = 0; px < pixels; ++px) {
                    const int v = down.pixels[static_cast<std::size_t>(px)];
                    if (v == cfg.ignore_value) continue;
                    picks.at(px, v) = 1.0;
                    scored += 1;
                }
                if (scored == 0) continue;
                const ag::Var ce = ag::scale(ag::sum_all(ag::mul(logp, ag::Var(picks))),
                                             -1.0 / static_cast<double>(scored));
                loss_sum = contributing == 0 ? ce : ag::add(loss_sum, ce);
                contributing += 1;
            }
            if (contributing == 0)
                throw std::runtime_error("train_student: batch without supervised pixels");
            const ag::Var loss = ag::scale(loss_sum, 1.0 / static_cast<double>(contributing));
            if (!std::isfinite(loss.value()[0]))
                throw std::runtime_error("train_student: non-finite loss at step " +
                                         std::to_string(step));

            ag::backward(loss);
            adamw_update(params, opt_m, opt_v, step, lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
                         cfg.weight_decay);
            step += 1;

            nlohmann::json line;
            line["step"] = step;
            line["epoch"] = epoch;
            line["lr"] = lr;
            line["loss"] = loss.value()[0];
            log << line.dump() << "\n";
            log.flush();
        }
    }

    nlohmann::json meta;
    meta["format"] = "sseg-student";
    meta["config"] = {{"backbone_channels", run_cfg.backbone_channels},
                      {"embed_dim", run_cfg.embed_dim},
                      {"mask_stride", run_cfg.mask_stride},
                      {"n_classes", run_cfg.n_classes},
                      {"ignore_value", run_cfg.ignore_value},
                      {"image_size", run_cfg.image_size},
                      {"base_lr", run_cfg.base_lr},
                      {"weight_decay", run_cfg.weight_decay},
                      {"beta1", run_cfg.beta1},
                      {"beta2", run_cfg.beta2},
                      {"adam_eps", run_cfg.adam_eps},
                      {"poly_power", run_cfg.poly_power},
                      {"warmup_epochs", run_cfg.warmup_epochs},
                      {"batch_size", run_cfg.batch_size},
                      {"epochs", run_cfg.epochs},
                      {"seed", run_cfg.seed}};
    meta["classes"] = names;
    ArrayStore store;
    store.meta_json = meta.dump();
    for (const auto& [name, var] : params.named) store.arrays["model." + name] = var.value();

    const fs::path ckpt_path = fs::path(cfg.out_dir) / "student_final.ckpt";
    save_arrays(ckpt_path.string(), store);
    return ckpt_path.string();
}

StudentModel load_student(const std::string& checkpoint_path) {
    ArrayStore store = load_arrays(checkpoint_path);
    const nlohmann::json meta = nlohmann::json::parse(store.meta_json);
    if (meta.value("format", "") != "sseg-student")
        throw std::runtime_error("load_student: not a student file: " + checkpoint_path);

    StudentModel out;
    const auto& jc = meta.at("config");
    out.config.backbone_channels = jc.at("backbone_channels").get<std::vector<int>>();
    out.config.embed_dim = jc.at("embed_dim").get<int>();
    out.config.mask_stride = jc.at("mask_stride").get<int>();
    out.config.n_classes = jc.at("n_classes").get<int>();
    out.config.ignore_value = jc.at("ignore_value").get<int>();
    out.config.image_size = jc.at("image_size").get<int>();
    out.config.base_lr = jc.at("base_lr").get<double>();
    out.config.weight_decay = jc.at("weight_decay").get<double>();
    out.config.beta1 = jc.at("beta1").get<double>();
    out.config.beta2 = jc.at("beta2").get<double>();
    out.config.adam_eps = jc.at("adam_eps").get<double>();
    out.config.poly_power = jc.at("poly_power").get<double>();
    out.config.warmup_epochs = jc.at("warmup_epochs").get<int>();
    out.config.batch_size = jc.at("batch_size").get<int>();
    out.config.epochs = jc.at("epochs").get<int>();
    out.config.seed = jc.at("seed").get<std::uint64_t>();
    out.class_names = meta.at("classes").get<std::vector<std::string>>();
    if (out.config.n_classes != static_cast<int>(out.class_names.size()))
        throw std::runtime_error("load_student: class list and n_classes disagree");
    validate_student_config(out.config);

    for (auto& [name, tensor] : store.arrays) {
        if (name.rfind("model.", 0) == 0)
            out.params.named.emplace(name.substr(6), ag::Var(std::move(tensor), true));
    }
    if (out.params.named.find("head.w") == out.params.named.end())
        throw std::runtime_error("load_student: parameter arrays missing from " + checkpoint_path);
    return out;
}

ImageU8 student_predict(const ImageU8& image, const StudentModel& student) {
    const ModelConfig pcfg = pyramid_config(student.config);
    const int stride = backbone_stride(pcfg);
    const int work_h = ceil_to(image.height, stride);
    const int work_w = ceil_to(image.width, stride);
    const ImageU8 view = resize_bilinear(image, work_h, work_w);

    ag::NoGradGuard ng;
    const ag::Var logits = student_logits(image_to_chw(view), student.params, pcfg);
    const ag::Var full = ag::bilinear_resize(logits, image.height, image.width);
    return argmax_labels(full.value());
}

EvalDelta compare(const EvalReport& teacher, const EvalReport& student) {
    if (teacher.protocol != student.protocol)
        throw std::invalid_argument("compare: reports use different protocols");
    if (teacher.class_names != student.class_names)
        throw std::invalid_argument("compare: reports use different class lists");

    const IouTable t = compute_iou(teacher);
    const IouTable s = compute_iou(student);
    EvalDelta d;
    d.class_names = teacher.class_names;
    d.iou_delta.resize(d.class_names.size(), 0.0);
    d.defined.resize(d.class_names.size(), false);
    for (std::size_t c = 0; c < d.class_names.size(); ++c) {
        d.defined[c] = t.defined[c] && s.defined[c];
        if (d.defined[c]) d.iou_delta[c] = s.iou[c] - t.iou[c];
    }
    d.miou_delta = s.miou - t.miou;
    return d;
}

std::string format_delta(const EvalDelta& d) {
    std::ostringstream os;
    os << "per-class IoU delta (student - teacher)\n";
    for (std::size_t c = 0; c < d.class_names.size(); ++c) {
        os << "  " << d.class_names[c] << "\t";
        if (d.defined[c])
            os << (d.iou_delta[c] >= 0.0 ? "+" : "") << d.iou_delta[c] << "\n";
        else
            os << "(undefined)\n";
    }
    os << "mIoU delta\t" << (d.miou_delta >= 0.0 ? "+" : "") << d.miou_delta << "\n";
    return os.str();
}

}  // namespace sseg
