#include "sseg/cli.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sseg/config.hpp"
#include "sseg/eval.hpp"
#include "sseg/inference.hpp"
#include "sseg/manifest.hpp"
#include "sseg/pseudomask.hpp"
#include "sseg/selftrain.hpp"
#include "sseg/synth.hpp"
#include "sseg/train.hpp"

namespace fs = std::filesystem;

namespace sseg {

namespace {

constexpr const char* kTopHelp =
    "sseg: open-vocabulary segmentation pipeline\n"
    "\n"
    "usage: sseg <command> [--config FILE] [--<key> <value>]...\n"
    "\n"
    "commands:\n"
    "  synth       render a synthetic shapes dataset (manifest + PNGs)\n"
    "  pseudomask  cluster one image into a pseudo-mask label map\n"
    "  train       train the mask model on an image-text manifest\n"
    "  infer       segment one image against a class list\n"
    "  eval        score predicted label maps against ground truth\n"
    "  selftrain   label a dataset with a trained model, then train a student\n"
    "\n"
    "Flags override --config file values, which override built-in defaults.\n"
    "Flag names match config keys; '-' and '_' are interchangeable.\n"
    "`sseg <command> --help` lists that command's keys and defaults.\n";

void command_usage(std::ostream& os, const std::string& name, const ConfigBinder& binder) {
    os << "usage: sseg " << name << " [--config FILE] [--<key> <value>]...\n"
       << "keys and defaults:\n";
    for (const auto& [key, value] : binder.snapshot())
        os << "  " << key << "=" << value << "\n";
}

void write_snapshot(const std::string& dir, const std::string& command,
                    const ConfigBinder& binder) {
    fs::create_directories(dir);
    ConfigMap snap = binder.snapshot();
    snap["command"] = command;
    write_config_file((fs::path(dir) / "config_resolved.cfg").string(), snap);
}

void require(const std::string& command, const std::string& flag, const std::string& value) {
    if (value.empty())
        throw std::invalid_argument(command + ": --" + flag + " is required");
}

/// A value that names an existing file is read one-name-per-line; anything
/// else is split on commas.
std::vector<std::string> class_list(const std::string& value) {
    if (fs::exists(value) && fs::is_regular_file(value)) return read_class_names(value);
    std::vector<std::string> names;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = value.find(',', start);
        names.push_back(value.substr(start, comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return names;
}

std::unique_ptr<FeatureBackbone> feature_backbone(const std::string& vit_weights,
                                                  int patch_stride, double position_weight) {
    if (!vit_weights.empty()) return std::make_unique<VitFeatureBackbone>(vit_weights);
    return std::make_unique<PatchStatBackbone>(patch_stride, position_weight);
}

/// PNG label maps under dir/labels when that exists, else dir itself, keyed
/// by filename stem.
std::map<std::string, fs::path> label_maps_in(const fs::path& dir) {
    fs::path scan = dir;
    if (fs::is_directory(dir / "labels")) scan = dir / "labels";
    if (!fs::is_directory(scan))
        throw std::runtime_error("eval: not a directory: " + dir.string());
    std::map<std::string, fs::path> out;
    for (const auto& entry : fs::directory_iterator(scan)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
        out[entry.path().stem().string()] = entry.path();
    }
    return out;
}

struct SynthCmd {
    std::string out_dir;
    int n = 100;
    int size = 64;
    std::uint64_t seed = 0;

    void bind(ConfigBinder& b) {
        b.bind("out", &out_dir);
        b.bind("n", &n);
        b.bind("size", &size);
        b.bind("seed", &seed);
    }
    void check() const { require("synth", "out", out_dir); }
    void run(std::ostream& out, const ConfigBinder& binder) const {
        const std::string manifest = write_synth_dataset(out_dir, seed, n, size,
                                                         default_palette());
        write_snapshot(out_dir, "synth", binder);
        out << manifest << "\n";
    }
};

struct PseudomaskCmd {
    std::string image;
    std::string out_dir = "pseudomask_out";
    std::string vit_weights;
    std::string cache_dir;
    int k = 8;
    int patch_stride = 8;
    double position_weight = 0.1;
    std::uint64_t seed = 0;

    void bind(ConfigBinder& b) {
        b.bind("image", &image);
        b.bind("out", &out_dir);
        b.bind("k", &k);
        b.bind("seed", &seed);
        b.bind("patch_stride", &patch_stride);
        b.bind("position_weight", &position_weight);
        b.bind("vit_weights", &vit_weights);
        b.bind("cache_dir", &cache_dir);
    }
    void check() const { require("pseudomask", "image", image); }
    void run(std::ostream& out, const ConfigBinder& binder) const {
        const ImageU8 img = read_png(image);
        const auto backbone = feature_backbone(vit_weights, patch_stride, position_weight);
        const std::string stem = fs::path(image).stem().string();
        const PseudoMaskSet pm =
            cache_dir.empty()
                ? generate_pseudo_masks(img, *backbone, k, seed)
                : load_or_generate_cached(cache_dir, img, stem, *backbone, k, seed);

        fs::create_directories(out_dir);
        const fs::path labels_path = fs::path(out_dir) / (stem + "_labels.png");
        write_png(labels_path.string(), pm.label_map);
        const auto palette = make_palette(pm.k, -1);
        write_png((fs::path(out_dir) / (stem + "_color.png")).string(),
                  render_labels(pm.label_map, palette));
        write_snapshot(out_dir, "pseudomask", binder);
        out << "segments=" << pm.k << " labels=" << labels_path.string() << "\n";
    }
};

struct TrainCmd {
    TrainConfig cfg;
    std::string data;
    std::string resume;
    std::uint64_t vocab_cap = 8192;
    std::string caption_filter = "content_words";

    void bind(ConfigBinder& b) {
        b.bind("data", &data);
        b.bind("resume", &resume);
        b.bind("base_lr", &cfg.base_lr);
        b.bind("weight_decay", &cfg.weight_decay);
        b.bind("beta1", &cfg.beta1);
        b.bind("beta2", &cfg.beta2);
        b.bind("adam_eps", &cfg.adam_eps);
        b.bind("grad_clip", &cfg.grad_clip);
        b.bind("warmup_epochs", &cfg.warmup_epochs);
        b.bind("batch_size", &cfg.batch_size);
        b.bind("epochs", &cfg.epochs);
        b.bind("seed", &cfg.seed);
        b.bind("image_size", &cfg.image_size);
        b.bind("augment_scale_lo", &cfg.augment_scale_lo);
        b.bind("augment_scale_hi", &cfg.augment_scale_hi);
        b.bind("pseudo_k", &cfg.pseudo_k);
        b.bind("patch_stride", &cfg.patch_stride);
        b.bind("position_weight", &cfg.position_weight);
        b.bind("vit_weights", &cfg.vit_weights);
        b.bind("cache_dir", &cfg.cache_dir);
        b.bind("vocab_cap", &vocab_cap);
        b.bind("caption_filter", &caption_filter);
        b.bind("checkpoint_every", &cfg.checkpoint_every);
        b.bind("out_dir", &cfg.out_dir);
        b.bind("loss.lambda_mask", &cfg.loss.lambda_mask);
        b.bind("loss.lambda_contrastive", &cfg.loss.lambda_contrastive);
        b.bind("loss.lambda_dice", &cfg.loss.lambda_dice);
        b.bind("loss.lambda_focal", &cfg.loss.lambda_focal);
        b.bind("loss.focal_gamma", &cfg.loss.focal_gamma);
        b.bind("loss.focal_alpha", &cfg.loss.focal_alpha);
        b.bind("loss.dice_smooth", &cfg.loss.dice_smooth);
        b.bind("model.n_queries", &cfg.model.n_queries);
        b.bind("model.embed_dim", &cfg.model.embed_dim);
        b.bind("model.decoder_layers", &cfg.model.decoder_layers);
        b.bind("model.text_layers", &cfg.model.text_layers);
        b.bind("model.context_length", &cfg.model.context_length);
        b.bind("model.backbone_channels", &cfg.model.backbone_channels);
        b.bind("model.mask_stride", &cfg.model.mask_stride);
        b.bind("model.proj_dim", &cfg.model.proj_dim);
    }
    void check() const {
        require("train", "data", data);
        if (caption_filter != "content_words" && caption_filter != "keep_all")
            throw std::invalid_argument(
                "train: caption_filter must be content_words or keep_all");
    }
    void run(std::ostream& out, const ConfigBinder& binder) {
        cfg.vocab_cap = static_cast<std::size_t>(vocab_cap);
        cfg.caption_filter = caption_filter == "keep_all" ? WordFilter::keep_all
                                                          : WordFilter::content_words;
        write_snapshot(cfg.out_dir, "train", binder);
        out << train(cfg, data, resume) << "\n";
    }
};

struct InferCmd {
    std::string image;
    std::string classes;
    std::string checkpoint;
    std::string prompt_template = "{}";
    std::string out_dir = "infer_out";
    double tau = 0.5;

    void bind(ConfigBinder& b) {
        b.bind("image", &image);
        b.bind("classes", &classes);
        b.bind("checkpoint", &checkpoint);
        b.bind("tau", &tau);
        b.bind("template", &prompt_template);
        b.bind("out", &out_dir);
    }
    void check() const {
        require("infer", "image", image);
        require("infer", "classes", classes);
        require("infer", "checkpoint", checkpoint);
    }
    void run(std::ostream& out, const ConfigBinder& binder) const {
        const LoadedModel model = load_model(checkpoint);
        ClassVocabulary vocab;
        vocab.names = class_list(classes);
        vocab.prompt_template = prompt_template;
        const InferenceResult res = infer_image(read_png(image), model, vocab, tau);

        fs::create_directories(out_dir);
        write_png((fs::path(out_dir) / "labels.png").string(), res.seg.labels);
        const auto palette = make_palette(static_cast<int>(vocab.names.size()),
                                          res.seg.background_index);
        write_png((fs::path(out_dir) / "color.png").string(),
                  render_labels(res.seg.labels, palette));

        std::vector<std::string> legend_names = vocab.names;
        if (res.seg.background_index >= 0) legend_names.push_back("background");
        write_class_names((fs::path(out_dir) / "classes.txt").string(), legend_names);
        std::ofstream legend((fs::path(out_dir) / "legend.txt").string(), std::ios::trunc);
        legend << format_legend(res.seg);
        write_snapshot(out_dir, "infer", binder);
        out << format_legend(res.seg);
    }
};

struct EvalCmd {
    std::string pred;
    std::string gt;
    std::string protocol = "with_background";
    std::string out_dir = "eval_out";
    double tau = -1.0;
    int ignore_value = 255;

    void bind(ConfigBinder& b) {
        b.bind("pred", &pred);
        b.bind("gt", &gt);
        b.bind("protocol", &protocol);
        b.bind("tau", &tau);
        b.bind("ignore_value", &ignore_value);
        b.bind("out", &out_dir);
    }
    void check() const {
        require("eval", "pred", pred);
        require("eval", "gt", gt);
        if (protocol != "with_background" && protocol != "without_background")
            throw std::invalid_argument(
                "eval: protocol must be with_background or without_background");
    }
    void run(std::ostream& out, const ConfigBinder& binder) const {
        const auto pred_names = read_class_names((fs::path(pred) / "classes.txt").string());
        const auto gt_names = read_class_names((fs::path(gt) / "classes.txt").string());
        const auto pred_maps = label_maps_in(pred);
        const auto gt_maps = label_maps_in(gt);

        int pred_background = -1;
        for (std::size_t i = 0; i < pred_names.size(); ++i)
            if (pred_names[i] == "background") pred_background = static_cast<int>(i);

        EvalReport report(gt_names, protocol == "with_background"
                                        ? Protocol::with_background
                                        : Protocol::without_background);
        report.ignore_value = ignore_value;
        if (tau >= 0.0) report.tau = tau;

        std::int64_t scored = 0;
        for (const auto& [stem, gt_path] : gt_maps) {
            const auto it = pred_maps.find(stem);
            if (it == pred_maps.end()) continue;
            const ImageU8 aligned = align_legend(read_png(it->second.string()), pred_names,
                                                 pred_background, gt_names);
            accumulate(report, aligned, read_png(gt_path.string()));
            scored += 1;
        }
        if (scored == 0)
            throw std::runtime_error("eval: no overlapping label-map ids between " + pred +
                                     " and " + gt);

        const std::string text = format_report(report);
        const IouTable table = compute_iou(report);
        nlohmann::json j;
        j["protocol"] = protocol;
        if (report.tau) j["tau"] = *report.tau;
        j["scored"] = scored;
        j["miou"] = table.miou;
        j["classes"] = nlohmann::json::array();
        for (std::size_t c = 0; c < gt_names.size(); ++c)
            j["classes"].push_back({{"name", gt_names[c]},
                                    {"iou", table.iou[c]},
                                    {"defined", static_cast<bool>(table.defined[c])}});

        fs::create_directories(out_dir);
        std::ofstream txt((fs::path(out_dir) / "report.txt").string(), std::ios::trunc);
        txt << text;
        std::ofstream js((fs::path(out_dir) / "report.json").string(), std::ios::trunc);
        js << j.dump(2) << "\n";
        write_snapshot(out_dir, "eval", binder);
        out << "scored " << scored << " of " << gt_maps.size() << " label maps\n" << text;
    }
};

struct SelftrainCmd {
    std::string checkpoint;
    std::string images;
    std::string classes;
    std::string prompt_template = "{}";
    std::string out_dir = "selftrain_out";
    double tau = 0.5;
    StudentConfig student;

    void bind(ConfigBinder& b) {
        b.bind("checkpoint", &checkpoint);
        b.bind("images", &images);
        b.bind("classes", &classes);
        b.bind("tau", &tau);
        b.bind("template", &prompt_template);
        b.bind("out_dir", &out_dir);
        b.bind("student.backbone_channels", &student.backbone_channels);
        b.bind("student.embed_dim", &student.embed_dim);
        b.bind("student.mask_stride", &student.mask_stride);
        b.bind("student.image_size", &student.image_size);
        b.bind("student.base_lr", &student.base_lr);
        b.bind("student.weight_decay", &student.weight_decay);
        b.bind("student.beta1", &student.beta1);
        b.bind("student.beta2", &student.beta2);
        b.bind("student.adam_eps", &student.adam_eps);
        b.bind("student.poly_power", &student.poly_power);
        b.bind("student.warmup_epochs", &student.warmup_epochs);
        b.bind("student.batch_size", &student.batch_size);
        b.bind("student.epochs", &student.epochs);
        b.bind("student.seed", &student.seed);
    }
    void check() const {
        require("selftrain", "checkpoint", checkpoint);
        require("selftrain", "images", images);
        require("selftrain", "classes", classes);
    }
    void run(std::ostream& out, const ConfigBinder& binder) {
        ClassVocabulary vocab;
        vocab.names = class_list(classes);
        vocab.prompt_template = prompt_template;
        write_snapshot(out_dir, "selftrain", binder);

        const LabelGenResult gen = generate_labels(checkpoint, images, vocab, tau, out_dir);
        out << "labeled " << gen.written << " images";
        if (!gen.failures.empty())
            out << ", skipped " << gen.failures.size() << " (see skipped.txt)";
        out << "\n";

        StudentConfig scfg = student;
        scfg.n_classes = 0;  // classes.txt written next to the generated manifest
        scfg.out_dir = (fs::path(out_dir) / "student").string();
        out << train_student(gen.manifest_path, scfg) << "\n";
    }
};

template <typename Cmd>
int drive(const std::string& name, const ConfigMap& merged, bool want_help, std::ostream& out,
          std::ostream& err) {
    Cmd cmd;
    ConfigBinder binder;
    cmd.bind(binder);
    if (want_help) {
        command_usage(out, name, binder);
        return 0;
    }
    try {
        binder.apply(merged);
        cmd.check();
    } catch (const std::exception& e) {
        err << e.what() << "\n";
        command_usage(err, name, binder);
        return 1;
    }
    try {
        cmd.run(out, binder);
        return 0;
    } catch (const std::exception& e) {
        err << "sseg " << name << ": " << e.what() << "\n";
        return 2;
    }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    if (argc < 2) {
        err << kTopHelp;
        return 1;
    }
    const std::string command = argv[1];
    if (command == "help" || command == "--help" || command == "-h") {
        out << kTopHelp;
        return 0;
    }

    ConfigMap flags;
    std::string config_path;
    bool want_help = false;
    for (int i = 2; i < argc; ++i) {
        std::string token = argv[i];
        if (token == "--help" || token == "-h") {
            want_help = true;
            continue;
        }
        if (token.rfind("--", 0) != 0) {
            err << "sseg " << command << ": unexpected argument '" << token << "'\n";
            return 1;
        }
        std::string key = token.substr(2);
        std::string value;
        const std::size_t eq = key.find('=');
        if (eq != std::string::npos) {
            value = key.substr(eq + 1);
            key = key.substr(0, eq);
        } else {
            if (i + 1 >= argc) {
                err << "sseg " << command << ": flag --" << key << " needs a value\n";
                return 1;
            }
            value = argv[++i];
        }
        for (char& c : key)
            if (c == '-') c = '_';
        if (key == "config")
            config_path = value;
        else
            flags[key] = value;
    }

    ConfigMap merged;
    try {
        if (!config_path.empty()) merged = read_config_file(config_path);
    } catch (const std::exception& e) {
        err << e.what() << "\n";
        return 1;
    }
    merged = merge_configs(merged, flags);

    if (command == "synth") return drive<SynthCmd>(command, merged, want_help, out, err);
    if (command == "pseudomask")
        return drive<PseudomaskCmd>(command, merged, want_help, out, err);
    if (command == "train") return drive<TrainCmd>(command, merged, want_help, out, err);
    if (command == "infer") return drive<InferCmd>(command, merged, want_help, out, err);
    if (command == "eval") return drive<EvalCmd>(command, merged, want_help, out, err);
    if (command == "selftrain")
        return drive<SelftrainCmd>(command, merged, want_help, out, err);

    err << "sseg: unknown command '" << command << "'\n\n" << kTopHelp;
    return 1;
}

}  // namespace sseg
