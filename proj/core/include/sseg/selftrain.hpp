#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sseg/eval.hpp"
#include "sseg/inference.hpp"
#include "sseg/segmodel.hpp"

namespace sseg {

/// Outcome of labeling a dataset with a trained model. manifest_path lists
/// the records that succeeded; class_names is the label legend in pixel-value
/// order (vocabulary order, then "background" when thresholding was on).
struct LabelGenResult {
    std::string manifest_path;
    std::vector<std::string> class_names;
    int written = 0;
    std::vector<std::string> failures;  // "<id>: <reason>" per skipped record
};

/// Labels every record of images_manifest with the model's open-vocabulary
/// predictions at threshold tau (tau < 0 disables background thresholding).
/// Writes labels/<id>.png per image under out_dir plus manifest.tsv (pointing
/// back at the source images) and classes.txt. Failing records are skipped
/// and reported through the result, never fatal; reruns are byte-identical.
LabelGenResult generate_labels(const std::string& checkpoint_path,
                               const std::string& images_manifest,
                               const ClassVocabulary& vocab, double tau,
                               const std::string& out_dir);

/// Closed-vocabulary student: the model's convolutional pyramid backbone
/// with a 1x1 per-pixel classifier on top, trained with cross-entropy on
/// generated labels. Pixels at ignore_value are skipped by the loss.
struct StudentConfig {
    std::vector<int> backbone_channels = {64, 128, 256};
    int embed_dim = 256;
    int mask_stride = 4;  // logits resolution divisor during training
    int n_classes = 0;    // including background; 0 means fill from classes.txt
    int ignore_value = 255;
    int image_size = 64;  // training resize target, multiple of the backbone stride
    double base_lr = 1e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double poly_power = 0.9;
    int warmup_epochs = 2;
    int batch_size = 8;
    int epochs = 40;
    std::uint64_t seed = 0;
    std::string out_dir = "student_out";
};

void validate_student_config(const StudentConfig& cfg);

/// Linear warmup from zero to base_lr over warmup_steps, then polynomial
/// decay (1 - progress)^power down to zero at total_steps.
double student_lr_at(double base_lr, std::int64_t step, std::int64_t warmup_steps,
                     std::int64_t total_steps, double power);

/// Trains the student on a labels manifest (every record needs image and
/// labels fields). Class names come from a classes.txt beside the manifest
/// when present; otherwise cfg.n_classes must be set. Writes per-step JSON
/// lines to <out_dir>/student_log.jsonl and returns the checkpoint path
/// (<out_dir>/student_final.ckpt).
std::string train_student(const std::string& labels_manifest, const StudentConfig& cfg);

struct StudentModel {
    StudentConfig config;
    ModelParams params;
    std::vector<std::string> class_names;
};

StudentModel load_student(const std::string& checkpoint_path);

/// Full-resolution prediction: the image is bilinearly resized up to the
/// backbone grid, per-pixel class logits are bilinearly upsampled back to the
/// input size, and argmax breaks ties toward the lower class index. Output
/// values always lie in [0, n_classes).
ImageU8 student_predict(const ImageU8& image, const StudentModel& student);

/// Per-class IoU and mIoU differences, second report minus first. Antisymmetric
/// under swapping arguments.
struct EvalDelta {
    std::vector<std::string> class_names;
    std::vector<double> iou_delta;  // meaningful where defined
    std::vector<bool> defined;      // IoU defined on both sides
    double miou_delta = 0.0;
};

/// Reports must share protocol and class list; mismatch throws.
EvalDelta compare(const EvalReport& teacher, const EvalReport& student);

/// Human-readable delta table.
std::string format_delta(const EvalDelta& d);

}  // namespace sseg
