#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "sseg/manifest.hpp"
#include "sseg/selftrain.hpp"
#include "sseg/synth.hpp"
#include "sseg/train.hpp"
#include "testutil.hpp"

using namespace sseg;
namespace fs = std::filesystem;

namespace {

LoadedModel tiny_teacher(std::uint64_t seed = 21) {
    LoadedModel lm;
    lm.config.n_queries = 4;
    lm.config.embed_dim = 8;
    lm.config.decoder_layers = 1;
    lm.config.text_layers = 1;
    lm.config.context_length = 12;
    lm.config.backbone_channels = {4, 6, 8};
    lm.config.mask_stride = 8;
    lm.config.proj_dim = 8;
    lm.config.vocab_size = 10;
    lm.vocab_words = {"<pad>", "<start>", "<eos>", "<unk>", "circle",
                      "square", "triangle", "red",   "green", "blue"};
    lm.params = init_params(lm.config, seed);
    return lm;
}

std::string save_teacher(const fs::path& dir, std::uint64_t seed = 21) {
    fs::create_directories(dir);
    const LoadedModel lm = tiny_teacher(seed);
    const fs::path path = dir / "teacher.ckpt";
    save_model(path, lm.config, lm.params, lm.vocab_words);
    return path.string();
}

fs::path temp_dir(const std::string& tag) {
    const fs::path dir = fs::temp_directory_path() / ("sseg_selftrain_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

// Each image is four 16x16 constant-class quadrants; colors encode the class,
// so the set is memorizable, and block edges sit on the student's label grid.
const std::uint8_t kQuadColors[4][3] = {
    {200, 30, 30}, {30, 200, 30}, {30, 30, 200}, {200, 200, 30}};

std::string write_quadrant_set(const fs::path& dir, int n_images, std::uint64_t seed) {
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "labels");
    Rng rng(seed);
    std::vector<ManifestRecord> records;
    for (int i = 0; i < n_images; ++i) {
        ImageU8 img(32, 32, 3);
        ImageU8 lab(32, 32, 1);
        int quad[4];
        for (int q = 0; q < 4; ++q) quad[q] = static_cast<int>(rng.uniform_int(4));
        for (int y = 0; y < 32; ++y) {
            for (int x = 0; x < 32; ++x) {
                const int c = quad[(y / 16) * 2 + (x / 16)];
                img.at(y, x, 0) = kQuadColors[c][0];
                img.at(y, x, 1) = kQuadColors[c][1];
                img.at(y, x, 2) = kQuadColors[c][2];
                lab.at(y, x, 0) = static_cast<std::uint8_t>(c);
            }
        }
        // a small ignored patch in the first image exercises loss skipping
        if (i == 0)
            for (int y = 0; y < 4; ++y)
                for (int x = 0; x < 4; ++x) lab.at(y, x, 0) = 255;
        const std::string id = "q" + std::to_string(i);
        write_png((dir / "images" / (id + ".png")).string(), img);
        write_png((dir / "labels" / (id + ".png")).string(), lab);
        records.push_back({id, "images/" + id + ".png", "", "labels/" + id + ".png"});
    }
    const std::string manifest = (dir / "manifest.tsv").string();
    write_manifest(manifest, records);
    write_class_names((dir / "classes.txt").string(), {"red", "green", "blue", "yellow"});
    return manifest;
}

StudentConfig quadrant_config(const std::string& out_dir) {
    StudentConfig cfg;
    cfg.backbone_channels = {8, 12};
    cfg.embed_dim = 8;
    cfg.mask_stride = 4;
    cfg.image_size = 32;
    cfg.base_lr = 5e-3;
    cfg.warmup_epochs = 2;
    cfg.batch_size = 4;
    cfg.epochs = 50;
    cfg.seed = 9;
    cfg.out_dir = out_dir;
    return cfg;
}

EvalReport report_with(const std::vector<std::string>& names, Protocol proto,
                       const std::vector<std::int64_t>& confusion) {
    EvalReport r(names, proto);
    REQUIRE(confusion.size() == r.confusion.size());
    r.confusion = confusion;
    return r;
}

}  // namespace

TEST_CASE("polynomial schedule warms up linearly then decays to zero") {
    CHECK(student_lr_at(2e-4, 0, 4, 20, 0.9) == 0.0);
    CHECK(student_lr_at(2e-4, 2, 4, 20, 0.9) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(student_lr_at(2e-4, 4, 4, 20, 0.9) == 2e-4);
    CHECK(student_lr_at(2e-4, 20, 4, 20, 0.9) == 0.0);
    CHECK(student_lr_at(2e-4, 40, 4, 20, 0.9) == 0.0);

    // power 1 is plain linear decay
    CHECK(student_lr_at(8e-4, 12, 4, 20, 1.0) == doctest::Approx(4e-4).epsilon(1e-12));

    double prev = student_lr_at(1e-3, 4, 4, 40, 0.9);
    for (std::int64_t s = 5; s <= 40; ++s) {
        const double cur = student_lr_at(1e-3, s, 4, 40, 0.9);
        CHECK(cur <= prev);
        prev = cur;
    }
}

TEST_CASE("student config validation rejects bad settings") {
    StudentConfig ok = quadrant_config("unused");
    CHECK_NOTHROW(validate_student_config(ok));

    StudentConfig c = ok;
    c.n_classes = 1;
    CHECK_THROWS_AS(validate_student_config(c), std::invalid_argument);
    c = ok;
    c.n_classes = 300;
    CHECK_THROWS_AS(validate_student_config(c), std::invalid_argument);
    c = ok;
    c.image_size = 30;  // not a multiple of the stride-8 backbone grid
    CHECK_THROWS_AS(validate_student_config(c), std::invalid_argument);
    c = ok;
    c.backbone_channels = {8};
    CHECK_THROWS_AS(validate_student_config(c), std::invalid_argument);
    c = ok;
    c.batch_size = 0;
    CHECK_THROWS_AS(validate_student_config(c), std::invalid_argument);
    c = ok;
    c.epochs = 0;
    CHECK_THROWS_AS(validate_student_config(c), std::invalid_argument);
    c = ok;
    c.poly_power = 0.0;
    CHECK_THROWS_AS(validate_student_config(c), std::invalid_argument);
    c = ok;
    c.ignore_value = 300;
    CHECK_THROWS_AS(validate_student_config(c), std::invalid_argument);
    c = ok;
    c.base_lr = 0.0;
    CHECK_THROWS_AS(validate_student_config(c), std::invalid_argument);
    c = ok;
    c.out_dir.clear();
    CHECK_THROWS_AS(validate_student_config(c), std::invalid_argument);
}

TEST_CASE("generate_labels writes one label map per record plus manifest and classes") {
    const fs::path dir = temp_dir("gen");
    const std::string teacher = save_teacher(dir);
    const std::string images = write_synth_dataset((dir / "data").string(), 3, 6, 32,
                                                   default_palette());
    const ClassVocabulary vocab{{"circle", "square", "triangle"}, "{}"};

    const LabelGenResult res =
        generate_labels(teacher, images, vocab, 0.4, (dir / "out").string());
    CHECK(res.written == 6);
    CHECK(res.failures.empty());
    REQUIRE(res.class_names.size() == 4);
    CHECK(res.class_names.back() == "background");
    CHECK(read_class_names((dir / "out" / "classes.txt").string()) == res.class_names);

    const auto records = read_manifest(res.manifest_path);
    REQUIRE(records.size() == 6);
    for (const auto& rec : records) {
        CHECK(fs::path(rec.image).is_absolute());
        CHECK(fs::exists(rec.image));
        const ImageU8 lab = read_png((dir / "out" / rec.labels).string());
        CHECK(lab.channels == 1);
        CHECK(lab.height == 32);
        CHECK(lab.width == 32);
        // only vocabulary indices and the trailing background index appear
        for (std::uint8_t v : lab.pixels) CHECK(v <= 3);
    }

    // the background class is claimed by thresholding; a vocabulary that
    // already carries one is rejected
    CHECK_THROWS_AS(generate_labels(teacher, images,
                                    ClassVocabulary{{"circle", "background"}, "{}"}, 0.4,
                                    (dir / "out2").string()),
                    std::invalid_argument);
}

TEST_CASE("generate_labels reruns byte-identically and matches direct inference") {
    const fs::path dir = temp_dir("gen_repro");
    const std::string teacher = save_teacher(dir);
    const std::string images = write_synth_dataset((dir / "data").string(), 5, 5, 32,
                                                   default_palette());
    const ClassVocabulary vocab{{"circle", "square", "triangle"}, "a photo of a {}"};

    const LabelGenResult a = generate_labels(teacher, images, vocab, 0.3, (dir / "a").string());
    const LabelGenResult b = generate_labels(teacher, images, vocab, 0.3, (dir / "b").string());
    CHECK(read_file(a.manifest_path) == read_file(b.manifest_path));
    CHECK(read_file((dir / "a" / "classes.txt").string()) ==
          read_file((dir / "b" / "classes.txt").string()));
    CHECK(read_file((dir / "a" / "skipped.txt").string()) ==
          read_file((dir / "b" / "skipped.txt").string()));

    // pipeline consistency: the PNGs hold exactly the teacher's predictions
    const LoadedModel model = load_model(teacher);
    const PairLoader loader(images);
    const auto records = read_manifest(a.manifest_path);
    REQUIRE(records.size() == loader.size());
    for (std::size_t i = 0; i < loader.size(); ++i) {
        const std::string rel = records[i].labels;
        CHECK(read_file((dir / "a" / rel).string()) == read_file((dir / "b" / rel).string()));

        const InferenceResult inf = infer_image(loader.load(i).image, model, vocab, 0.3);
        const ImageU8 lab = read_png((dir / "a" / rel).string());
        REQUIRE(lab.pixels.size() == inf.seg.labels.pixels.size());
        CHECK(lab.pixels == inf.seg.labels.pixels);
    }
}

TEST_CASE("generate_labels skips failing records and reports a summary") {
    const fs::path dir = temp_dir("gen_skip");
    const std::string teacher = save_teacher(dir);
    const std::string images = write_synth_dataset((dir / "data").string(), 7, 2, 32,
                                                   default_palette());
    const auto source = read_manifest(images);
    REQUIRE(source.size() == 2);

    std::vector<ManifestRecord> records;
    records.push_back({"good", (dir / "data" / source[0].image).string(), "shapes", ""});
    records.push_back({"gone", (dir / "data" / "images" / "missing.png").string(), "", ""});
    records.push_back({"good", (dir / "data" / source[1].image).string(), "again", ""});
    const std::string manifest = (dir / "mixed.tsv").string();
    write_manifest(manifest, records);

    const ClassVocabulary vocab{{"circle", "square"}, "{}"};
    const LabelGenResult res =
        generate_labels(teacher, manifest, vocab, 0.5, (dir / "out").string());
    CHECK(res.written == 1);
    REQUIRE(res.failures.size() == 2);
    CHECK(res.failures[0].rfind("gone: ", 0) == 0);
    CHECK(res.failures[1].rfind("good: ", 0) == 0);
    CHECK(read_manifest(res.manifest_path).size() == 1);

    const auto skipped = read_lines((dir / "out" / "skipped.txt").string());
    REQUIRE(skipped.size() == 3);
    CHECK(skipped.back() == "skipped 2 of 3 records");
}

TEST_CASE("student overfits a block-aligned set and the checkpoint round-trips") {
    const fs::path dir = temp_dir("student");
    const std::string manifest = write_quadrant_set(dir / "data", 8, 11);
    const StudentConfig cfg = quadrant_config((dir / "run").string());

    const std::string ckpt = train_student(manifest, cfg);
    CHECK(fs::path(ckpt).filename() == "student_final.ckpt");

    const StudentModel student = load_student(ckpt);
    CHECK(student.class_names ==
          std::vector<std::string>{"red", "green", "blue", "yellow"});
    CHECK(student.config.n_classes == 4);
    CHECK(student.config.backbone_channels == cfg.backbone_channels);
    CHECK(student.config.seed == cfg.seed);

    // pixel accuracy on its own training labels, ignored pixels excluded
    const PairLoader loader(manifest);
    std::int64_t hit = 0, total = 0;
    for (std::size_t i = 0; i < loader.size(); ++i) {
        const ImageU8 pred = student_predict(loader.load(i).image, student);
        const ImageU8 gt = loader.load_labels(i);
        REQUIRE(pred.pixels.size() == gt.pixels.size());
        for (std::size_t px = 0; px < gt.pixels.size(); ++px) {
            CHECK(pred.pixels[px] < 4);  // never outside the training vocab
            if (gt.pixels[px] == 255) continue;
            total += 1;
            if (pred.pixels[px] == gt.pixels[px]) hit += 1;
        }
    }
    const double accuracy = static_cast<double>(hit) / static_cast<double>(total);
    CHECK(accuracy >= 0.95);

    // odd-size input still comes back at input resolution, inside the vocab
    Rng rng(5);
    ImageU8 odd(22, 30, 3);
    for (auto& px : odd.pixels) px = static_cast<std::uint8_t>(rng.uniform_int(256));
    const ImageU8 odd_pred = student_predict(odd, student);
    CHECK(odd_pred.height == 22);
    CHECK(odd_pred.width == 30);
    for (std::uint8_t v : odd_pred.pixels) CHECK(v < 4);

    // loss trend: the last tenth of the log sits below the first tenth
    const auto lines = read_lines((fs::path(cfg.out_dir) / "student_log.jsonl").string());
    REQUIRE(static_cast<int>(lines.size()) == cfg.epochs * 2);
    std::vector<double> losses;
    for (const auto& line : lines)
        losses.push_back(nlohmann::json::parse(line).at("loss").get<double>());
    const std::size_t tenth = losses.size() / 10;
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    const std::vector<double> head(losses.begin(), losses.begin() + tenth);
    const std::vector<double> tail(losses.end() - tenth, losses.end());
    CHECK(median(tail) < median(head));
}

TEST_CASE("student training is deterministic for a fixed seed") {
    const fs::path dir = temp_dir("student_repro");
    const std::string manifest = write_quadrant_set(dir / "data", 4, 13);
    StudentConfig cfg = quadrant_config((dir / "a").string());
    cfg.epochs = 3;
    const std::string a = train_student(manifest, cfg);
    cfg.out_dir = (dir / "b").string();
    const std::string b = train_student(manifest, cfg);
    CHECK(read_file(a) == read_file(b));
    CHECK(read_file((dir / "a" / "student_log.jsonl").string()) ==
          read_file((dir / "b" / "student_log.jsonl").string()));
}

TEST_CASE("student training validates its inputs") {
    const fs::path dir = temp_dir("student_bad");
    const StudentConfig cfg = quadrant_config((dir / "run").string());

    fs::create_directories(dir / "empty");
    const std::string empty = (dir / "empty" / "manifest.tsv").string();
    write_manifest(empty, {});
    CHECK_THROWS_AS(train_student(empty, cfg), std::invalid_argument);

    // no classes.txt and no explicit class count
    const std::string manifest = write_quadrant_set(dir / "data", 2, 17);
    fs::remove(dir / "data" / "classes.txt");
    CHECK_THROWS_AS(train_student(manifest, cfg), std::invalid_argument);

    // an explicit count substitutes for the file, with synthesized names
    StudentConfig five = cfg;
    five.n_classes = 5;
    five.epochs = 2;
    five.out_dir = (dir / "five").string();
    const StudentModel named = load_student(train_student(manifest, five));
    CHECK(named.class_names.back() == "class4");

    // class count disagreeing with classes.txt
    const std::string manifest2 = write_quadrant_set(dir / "data2", 2, 17);
    StudentConfig wrong = cfg;
    wrong.n_classes = 7;
    CHECK_THROWS_AS(train_student(manifest2, wrong), std::invalid_argument);

    // a label value outside the class list
    const std::string manifest3 = write_quadrant_set(dir / "data3", 2, 19);
    ImageU8 bad(32, 32, 1);
    for (auto& px : bad.pixels) px = 9;
    write_png((dir / "data3" / "labels" / "q0.png").string(), bad);
    CHECK_THROWS_WITH_AS(train_student(manifest3, cfg),
                         doctest::Contains("outside the class list"), std::invalid_argument);
}

TEST_CASE("compare reports per-class and mIoU deltas with preconditions") {
    const std::vector<std::string> names{"circle", "square", "background"};

    // teacher scores everything perfectly; the student loses ground on the
    // first two classes (dyadic counts keep the IoUs exact)
    const EvalReport teacher = report_with(names, Protocol::with_background,
                                           {4, 0, 0, 0, 4, 0, 0, 0, 4});
    const EvalReport student = report_with(names, Protocol::with_background,
                                           {2, 2, 0, 0, 4, 0, 0, 0, 4});

    const EvalDelta zero = compare(teacher, teacher);
    CHECK(zero.miou_delta == 0.0);
    for (std::size_t c = 0; c < names.size(); ++c) {
        CHECK(zero.defined[c]);
        CHECK(zero.iou_delta[c] == 0.0);
    }

    const EvalDelta d = compare(teacher, student);
    CHECK(d.class_names == names);
    CHECK(d.iou_delta[0] == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(d.iou_delta[1] == doctest::Approx(4.0 / 6.0 - 1.0).epsilon(1e-12));
    CHECK(d.iou_delta[2] == 0.0);
    const double teacher_miou = 1.0;
    const double student_miou = (0.5 + 4.0 / 6.0 + 1.0) / 3.0;
    CHECK(d.miou_delta == doctest::Approx(student_miou - teacher_miou).epsilon(1e-12));

    // antisymmetry under swapping arguments, exactly
    const EvalDelta back = compare(student, teacher);
    CHECK(back.miou_delta == -d.miou_delta);
    for (std::size_t c = 0; c < names.size(); ++c) CHECK(back.iou_delta[c] == -d.iou_delta[c]);

    // a class undefined on one side stays undefined in the delta
    const std::vector<std::string> wide{"circle", "ghost"};
    const EvalReport t2 = report_with(wide, Protocol::with_background, {4, 0, 0, 0});
    const EvalReport s2 = report_with(wide, Protocol::with_background, {2, 0, 2, 0});
    const EvalDelta d2 = compare(t2, s2);
    CHECK_FALSE(d2.defined[1]);
    CHECK(d2.iou_delta[1] == 0.0);
    CHECK(d2.iou_delta[0] == doctest::Approx(0.5 - 1.0).epsilon(1e-12));

    const std::string table = format_delta(d);
    CHECK(table.find("circle") != std::string::npos);
    CHECK(table.find("mIoU delta") != std::string::npos);

    EvalReport other_proto = student;
    other_proto.protocol = Protocol::without_background;
    CHECK_THROWS_AS(compare(teacher, other_proto), std::invalid_argument);
    const EvalReport other_names = report_with({"circle", "square", "sky"},
                                               Protocol::with_background,
                                               {4, 0, 0, 0, 4, 0, 0, 0, 4});
    CHECK_THROWS_AS(compare(teacher, other_names), std::invalid_argument);
}
