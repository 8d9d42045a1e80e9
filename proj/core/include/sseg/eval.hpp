#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sseg/image.hpp"

namespace sseg {

enum class Protocol { with_background, without_background };

/// Confusion-matrix accumulator over a fixed ground-truth legend.
/// Indexing: confusion[gt * n_classes + pred].
struct EvalReport {
    std::vector<std::string> class_names;
    std::vector<std::int64_t> confusion;
    Protocol protocol = Protocol::with_background;
    std::optional<double> tau;  // background threshold used, when applicable
    int ignore_value = 255;

    explicit EvalReport(std::vector<std::string> names,
                        Protocol proto = Protocol::with_background);
    EvalReport() = default;

    std::int64_t n_classes() const { return static_cast<std::int64_t>(class_names.size()); }
    std::int64_t& at(std::int64_t gt, std::int64_t pred) {
        return confusion[static_cast<std::size_t>(gt * n_classes() + pred)];
    }
    std::int64_t at(std::int64_t gt, std::int64_t pred) const {
        return confusion[static_cast<std::size_t>(gt * n_classes() + pred)];
    }

    /// Index of "background" in class_names, or -1 when the legend has none.
    std::int64_t background_index() const;
};

/// Remaps prediction pixel values into the ground-truth legend by class name.
/// `pred_background_value` (pass -1 when unused) maps onto the gt legend's
/// background entry. Unknown names or unmappable background raise
/// std::invalid_argument.
ImageU8 align_legend(const ImageU8& pred, const std::vector<std::string>& pred_names,
                     int pred_background_value, const std::vector<std::string>& gt_names);

/// Scores one image pair. pred must already be in gt legend indices (see
/// align_legend) and is nearest-resized to gt resolution when shapes differ.
/// with_background scores every non-ignore pixel; without_background skips
/// pixels whose ground truth is background or ignore.
void accumulate(EvalReport& report, const ImageU8& pred, const ImageU8& gt);

struct IouTable {
    std::vector<double> iou;       // per class; meaningless where !defined
    std::vector<bool> defined;     // TP+FP+FN > 0 and class participates in the protocol
    double miou = 0.0;
};

/// Per-class IoU = TP/(TP+FP+FN); undefined classes are excluded from the
/// mean, as is the background class under without_background. Throws when no
/// class is defined.
IouTable compute_iou(const EvalReport& report);

/// Human-readable report (protocol, tau, per-class table, mIoU).
std::string format_report(const EvalReport& report);

}  // namespace sseg
