#include "sseg/eval.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace sseg {

EvalReport::EvalReport(std::vector<std::string> names, Protocol proto)
    : class_names(std::move(names)),
      confusion(class_names.size() * class_names.size(), 0),
      protocol(proto) {
    if (class_names.empty()) throw std::invalid_argument("EvalReport: empty legend");
}

std::int64_t EvalReport::background_index() const {
    for (std::size_t i = 0; i < class_names.size(); ++i)
        if (class_names[i] == "background") return static_cast<std::int64_t>(i);
    return -1;
}

ImageU8 align_legend(const ImageU8& pred, const std::vector<std::string>& pred_names,
                     int pred_background_value, const std::vector<std::string>& gt_names) {
    std::unordered_map<std::string, int> gt_index;
    for (std::size_t i = 0; i < gt_names.size(); ++i)
        gt_index[gt_names[i]] = static_cast<int>(i);

    // value in pred -> value in gt legend
    std::vector<int> remap(256, -1);
    for (std::size_t i = 0; i < pred_names.size(); ++i) {
        const auto it = gt_index.find(pred_names[i]);
        if (it == gt_index.end())
            throw std::invalid_argument("align_legend: class '" + pred_names[i] +
                                        "' not in ground-truth legend");
        remap[i] = it->second;
    }
    if (pred_background_value >= 0) {
        const auto it = gt_index.find("background");
        if (it == gt_index.end()) {
            // tolerated as long as no pixel actually uses the sentinel
            remap[static_cast<std::size_t>(pred_background_value)] = -2;
        } else {
            remap[static_cast<std::size_t>(pred_background_value)] = it->second;
        }
    }

    ImageU8 out(pred.height, pred.width, 1);
    for (int y = 0; y < pred.height; ++y) {
        for (int x = 0; x < pred.width; ++x) {
            const int v = pred.at(y, x);
            const int m = remap[static_cast<std::size_t>(v)];
            if (m == -2)
                throw std::invalid_argument(
                    "align_legend: prediction marks background but the ground-truth legend has "
                    "no background class");
            if (m < 0)
                throw std::invalid_argument("align_legend: prediction value " + std::to_string(v) +
                                            " has no legend entry");
            out.at(y, x) = static_cast<std::uint8_t>(m);
        }
    }
    return out;
}

void accumulate(EvalReport& report, const ImageU8& pred, const ImageU8& gt) {
    if (gt.channels != 1 || pred.channels != 1)
        throw std::invalid_argument("accumulate: label maps must be single channel");
    ImageU8 p = (pred.height != gt.height || pred.width != gt.width)
                    ? resize_nearest(pred, gt.height, gt.width)
                    : pred;
    const std::int64_t n = report.n_classes();
    const std::int64_t bg = report.background_index();
    for (int y = 0; y < gt.height; ++y) {
        for (int x = 0; x < gt.width; ++x) {
            const int g = gt.at(y, x);
            if (g == report.ignore_value) continue;
            if (report.protocol == Protocol::without_background && g == bg) continue;
            if (g >= n)
                throw std::invalid_argument("accumulate: ground-truth value " + std::to_string(g) +
                                            " outside legend");
            const int pv = p.at(y, x);
            if (pv >= n)
                throw std::invalid_argument("accumulate: prediction value " + std::to_string(pv) +
                                            " outside legend");
            ++report.at(g, pv);
        }
    }
}

IouTable compute_iou(const EvalReport& report) {
    const std::int64_t n = report.n_classes();
    const std::int64_t bg = report.background_index();
    IouTable table;
    table.iou.assign(static_cast<std::size_t>(n), 0.0);
    table.defined.assign(static_cast<std::size_t>(n), false);

    double sum = 0.0;
    std::int64_t defined_count = 0;
    for (std::int64_t c = 0; c < n; ++c) {
        if (report.protocol == Protocol::without_background && c == bg) continue;
        const std::int64_t tp = report.at(c, c);
        std::int64_t fp = 0, fn = 0;
        for (std::int64_t o = 0; o < n; ++o) {
            if (o == c) continue;
            fp += report.at(o, c);
            fn += report.at(c, o);
        }
        if (tp + fp + fn == 0) continue;
        table.defined[static_cast<std::size_t>(c)] = true;
        table.iou[static_cast<std::size_t>(c)] =
            static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
        sum += table.iou[static_cast<std::size_t>(c)];
        ++defined_count;
    }
    if (defined_count == 0) throw std::runtime_error("compute_iou: no class has any pixels");
    table.miou = sum / static_cast<double>(defined_count);
    return table;
}

std::string format_report(const EvalReport& report) {
    const IouTable table = compute_iou(report);
    std::ostringstream out;
    out << "protocol: "
        << (report.protocol == Protocol::with_background ? "with_background"
                                                         : "without_background")
        << '\n';
    if (report.tau) out << "tau: " << *report.tau << '\n';
    out << "per-class IoU:\n";
    for (std::size_t c = 0; c < report.class_names.size(); ++c) {
        out << "  " << report.class_names[c] << ": ";
        if (table.defined[c])
            out << table.iou[c];
        else
            out << "n/a";
        out << '\n';
    }
    out << "mIoU: " << table.miou << '\n';
    return out.str();
}

}  // namespace sseg
