#include "doctest.h"
#include "sseg/eval.hpp"

using namespace sseg;

namespace {

ImageU8 map2x2(int a, int b, int c, int d) {
    ImageU8 m(2, 2, 1);
    m.at(0, 0) = static_cast<std::uint8_t>(a);
    m.at(0, 1) = static_cast<std::uint8_t>(b);
    m.at(1, 0) = static_cast<std::uint8_t>(c);
    m.at(1, 1) = static_cast<std::uint8_t>(d);
    return m;
}

}  // namespace

TEST_CASE("hand-counted 2x2 example gives 7/12 under both protocols") {
    // gt = [[A,A],[B,B]], pred = [[A,B],[B,B]]
    const ImageU8 gt = map2x2(0, 0, 1, 1);
    const ImageU8 pred = map2x2(0, 1, 1, 1);
    for (Protocol proto : {Protocol::with_background, Protocol::without_background}) {
        EvalReport report({"A", "B"}, proto);
        accumulate(report, pred, gt);
        const IouTable t = compute_iou(report);
        CHECK(t.iou[0] == 1.0 / 2.0);
        CHECK(t.iou[1] == 2.0 / 3.0);
        // exact at double precision; (1/2 + 2/3)/2 is one ulp off the
        // correctly-rounded literal 7.0/12.0, so compare the same expression
        CHECK(t.miou == (1.0 / 2.0 + 2.0 / 3.0) / 2.0);
        CHECK(t.miou == doctest::Approx(7.0 / 12.0).epsilon(1e-15));
    }
}

TEST_CASE("perfect prediction is diagonal and scores 1.0") {
    const ImageU8 gt = map2x2(0, 1, 2, 2);
    EvalReport report({"a", "b", "c"});
    accumulate(report, gt, gt);
    CHECK(report.at(0, 0) == 1);
    CHECK(report.at(1, 1) == 1);
    CHECK(report.at(2, 2) == 2);
    CHECK(report.at(0, 1) == 0);
    CHECK(compute_iou(report).miou == 1.0);
}

TEST_CASE("without_background skips gt background and drops it from the mean") {
    // gt: background left column, A right column; pred: everything A
    const ImageU8 gt = map2x2(0, 1, 0, 1);
    const ImageU8 pred = map2x2(1, 1, 1, 1);
    EvalReport report({"background", "A"}, Protocol::without_background);
    accumulate(report, pred, gt);
    const IouTable t = compute_iou(report);
    CHECK_FALSE(t.defined[0]);
    CHECK(t.iou[1] == 1.0);  // the two scored pixels are correct
    CHECK(t.miou == 1.0);

    EvalReport with({"background", "A"}, Protocol::with_background);
    accumulate(with, pred, gt);
    const IouTable tw = compute_iou(with);
    CHECK(tw.iou[0] == 0.0);       // background fully missed
    CHECK(tw.iou[1] == 0.5);       // two correct, two false positives
    CHECK(tw.miou == 0.25);
}

TEST_CASE("all-background image scores zero pixels without_background") {
    const ImageU8 gt = map2x2(0, 0, 0, 0);
    EvalReport report({"background", "A"}, Protocol::without_background);
    accumulate(report, gt, gt);
    std::int64_t total = 0;
    for (auto v : report.confusion) total += v;
    CHECK(total == 0);
    CHECK_THROWS(compute_iou(report));
}

TEST_CASE("ignore pixels are skipped in both protocols") {
    ImageU8 gt = map2x2(0, 1, 1, 1);
    gt.at(0, 0) = 255;
    const ImageU8 pred = map2x2(1, 1, 1, 0);
    EvalReport report({"A", "B"});
    accumulate(report, pred, gt);
    std::int64_t total = 0;
    for (auto v : report.confusion) total += v;
    CHECK(total == 3);
}

TEST_CASE("accumulation is order-independent") {
    const ImageU8 gt1 = map2x2(0, 0, 1, 1), pred1 = map2x2(0, 1, 1, 1);
    const ImageU8 gt2 = map2x2(1, 1, 0, 0), pred2 = map2x2(1, 0, 0, 0);
    EvalReport ab({"A", "B"});
    accumulate(ab, pred1, gt1);
    accumulate(ab, pred2, gt2);
    EvalReport ba({"A", "B"});
    accumulate(ba, pred2, gt2);
    accumulate(ba, pred1, gt1);
    CHECK(ab.confusion == ba.confusion);
}

TEST_CASE("permuting the legend permutes per-class iou and keeps miou") {
    const ImageU8 gt = map2x2(0, 0, 1, 1);
    const ImageU8 pred = map2x2(0, 1, 1, 1);
    EvalReport fwd({"A", "B"});
    accumulate(fwd, pred, gt);

    // swap labels 0<->1 in both maps
    auto swap01 = [](ImageU8 m) {
        for (auto& px : m.pixels) px = px == 0 ? 1 : 0;
        return m;
    };
    EvalReport rev({"B", "A"});
    accumulate(rev, swap01(pred), swap01(gt));

    const IouTable tf = compute_iou(fwd), tr = compute_iou(rev);
    CHECK(tf.iou[0] == tr.iou[1]);
    CHECK(tf.iou[1] == tr.iou[0]);
    CHECK(tf.miou == tr.miou);
}

TEST_CASE("align_legend remaps names and background sentinel") {
    const std::vector<std::string> gt_names{"background", "cat", "dog"};
    const std::vector<std::string> pred_names{"dog", "cat"};
    ImageU8 pred = map2x2(0, 1, 2, 2);  // 2 = background sentinel
    const ImageU8 aligned = align_legend(pred, pred_names, 2, gt_names);
    CHECK(aligned.at(0, 0) == 2);  // dog
    CHECK(aligned.at(0, 1) == 1);  // cat
    CHECK(aligned.at(1, 0) == 0);  // background
    CHECK(aligned.at(1, 1) == 0);

    CHECK_THROWS(align_legend(pred, {"dog", "weasel"}, 2, gt_names));
    // background sentinel used but gt has no background class
    CHECK_THROWS(align_legend(pred, pred_names, 2, {"dog", "cat"}));
    // sentinel unused: fine even without a background class
    const ImageU8 fg = map2x2(0, 1, 0, 1);
    CHECK_NOTHROW(align_legend(fg, pred_names, 2, {"dog", "cat"}));
}

TEST_CASE("prediction upsamples to gt resolution before scoring") {
    ImageU8 pred(1, 1, 1);
    pred.at(0, 0) = 1;
    ImageU8 gt(2, 2, 1);
    for (auto& px : gt.pixels) px = 1;
    EvalReport report({"A", "B"});
    accumulate(report, pred, gt);
    CHECK(report.at(1, 1) == 4);
}

TEST_CASE("format_report prints protocol and miou") {
    const ImageU8 gt = map2x2(0, 0, 1, 1);
    EvalReport report({"A", "B"});
    report.tau = 0.5;
    accumulate(report, gt, gt);
    const std::string text = format_report(report);
    CHECK(text.find("with_background") != std::string::npos);
    CHECK(text.find("tau: 0.5") != std::string::npos);
    CHECK(text.find("mIoU: 1") != std::string::npos);
}
