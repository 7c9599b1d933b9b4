#include <doctest.h>

#include <cmath>

#include "iseg/evaluation.hpp"
#include "oracles.hpp"

using namespace iseg;

namespace {

BinaryMask rect_mask(int img, int x0, int y0, int x1, int y1) {
    BinaryMask m(img, img);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) m.set(x, y, true);
    return m;
}

EvalPrediction pred_from_mask(const BinaryMask& m, double score) {
    EvalPrediction p;
    p.score = score;
    p.mask = m;
    p.box = mask_tight_box(m);
    return p;
}

// one-scene toy dataset with hand-placed rectangle instances
Dataset toy_dataset(int img, const std::vector<std::pair<int, BinaryMask>>& instances) {
    Dataset ds;
    ds.spec.num_scenes = 1;
    ds.spec.image_width = img;
    ds.spec.image_height = img;
    ds.spec.num_categories = 2;
    Scene s;
    s.id = "scene_00000";
    s.width = img;
    s.height = img;
    s.image.assign(std::size_t(img) * std::size_t(img), 0.0f);
    for (const auto& [cat, mask] : instances)
        s.instances.push_back(SceneInstance{cat, mask, *mask_tight_box(mask)});
    ds.scenes.push_back(std::move(s));
    return ds;
}

PredictionRecord record_for(const std::string& scene, int cat, double score,
                            const BinaryMask& m) {
    PredictionRecord r;
    r.scene_id = scene;
    r.category = cat;
    r.score = score;
    r.box = *mask_tight_box(m);
    r.mask = m;
    return r;
}

}  // namespace

TEST_CASE("match_instances: identity predictions are all true positives") {
    const BinaryMask a = rect_mask(32, 2, 2, 12, 12);
    const BinaryMask b = rect_mask(32, 16, 16, 28, 30);
    std::vector<EvalPrediction> preds{pred_from_mask(a, 0.9), pred_from_mask(b, 0.8)};
    std::vector<EvalGroundTruth> gts{{*mask_tight_box(a), &a}, {*mask_tight_box(b), &b}};
    const MatchResult r = match_instances(preds, gts, 0.5, MatchKind::mask);
    CHECK(r.true_positive == std::vector<std::uint8_t>{1, 1});
    CHECK(r.gt_matched == std::vector<std::uint8_t>{1, 1});
}

TEST_CASE("match_instances: no predictions leaves every ground truth unmatched") {
    const BinaryMask a = rect_mask(32, 2, 2, 12, 12);
    std::vector<EvalGroundTruth> gts{{*mask_tight_box(a), &a}};
    const MatchResult r = match_instances({}, gts, 0.5, MatchKind::mask);
    CHECK(r.true_positive.empty());
    CHECK(r.gt_matched == std::vector<std::uint8_t>{0});
}

TEST_CASE("match_instances: the higher-scored prediction claims the best match first") {
    // one ground truth; the lower-scored prediction overlaps better
    const BinaryMask gt = rect_mask(40, 10, 10, 30, 30);
    const BinaryMask good = rect_mask(40, 10, 12, 30, 32);   // IoU ~ 0.82
    const BinaryMask okay = rect_mask(40, 10, 16, 30, 36);   // IoU ~ 0.54
    std::vector<EvalPrediction> preds{pred_from_mask(okay, 0.9), pred_from_mask(good, 0.8)};
    std::vector<EvalGroundTruth> gts{{*mask_tight_box(gt), &gt}};
    const MatchResult r = match_instances(preds, gts, 0.5, MatchKind::mask);
    CHECK(r.true_positive == std::vector<std::uint8_t>{1, 0});

    // the brute-force oracle sees the same outcome
    std::vector<std::vector<double>> iou{{mask_iou(okay, gt)}, {mask_iou(good, gt)}};
    const auto ref = oracle::greedy_match_reference(iou, 0.5);
    CHECK(ref.tp == std::vector<bool>{true, false});
}

TEST_CASE("match_instances: random strip scenarios agree with the brute-force oracle") {
    // 10-wide strips at controlled offsets give IoU = (10-d)/(10+d)
    Rng rng(61);
    const int img = 96;
    auto strip = [&](int x0) { return rect_mask(img, x0, 0, x0 + 10, 10); };
    for (int trial = 0; trial < 30; ++trial) {
        const int np = rng.uniform_int(0, 6), ng = rng.uniform_int(1, 4);
        std::vector<BinaryMask> gt_masks;
        std::vector<EvalGroundTruth> gts;
        for (int g = 0; g < ng; ++g) gt_masks.push_back(strip(rng.uniform_int(0, 80)));
        for (const BinaryMask& m : gt_masks) gts.push_back({*mask_tight_box(m), &m});
        std::vector<EvalPrediction> preds;
        for (int p = 0; p < np; ++p)
            preds.push_back(pred_from_mask(strip(rng.uniform_int(0, 80)), rng.uniform()));
        std::stable_sort(preds.begin(), preds.end(),
                         [](const auto& a, const auto& b) { return a.score > b.score; });

        for (MatchKind kind : {MatchKind::mask, MatchKind::box}) {
            std::vector<std::vector<double>> iou;
            for (const auto& p : preds) {
                std::vector<double> row;
                for (std::size_t g = 0; g < gts.size(); ++g)
                    row.push_back(kind == MatchKind::mask ? mask_iou(p.mask, *gts[g].mask)
                                                          : box_iou(*p.box, gts[g].box));
                iou.push_back(std::move(row));
            }
            const auto ref = oracle::greedy_match_reference(iou, 0.5);
            const MatchResult mine = match_instances(preds, gts, 0.5, kind);
            REQUIRE(mine.true_positive.size() == ref.tp.size());
            for (std::size_t i = 0; i < ref.tp.size(); ++i)
                CHECK((mine.true_positive[i] != 0) == ref.tp[i]);
        }
    }
}

TEST_CASE("average_precision: frozen hand-computed PR values") {
    // 1 GT, single true positive
    CHECK(average_precision({1}, 1) == doctest::Approx(1.0));
    // 1 GT, false positive above a true positive: precision 1/2 at recall 1
    CHECK(average_precision({0, 1}, 1) == doctest::Approx(0.5));
    // 2 GT, both recovered in order
    CHECK(average_precision({1, 1}, 2) == doctest::Approx(1.0));
    // 2 GT, flags TP FP TP: AP = 0.5*1 + 0.5*(2/3)
    CHECK(average_precision({1, 0, 1}, 2) == doctest::Approx(5.0 / 6.0));
    // trailing false positives after full recall do not change all-point AP
    CHECK(average_precision({1, 0, 0}, 1) == doctest::Approx(1.0));
    // no ground truth: zero by convention
    CHECK(average_precision({0, 0}, 0) == doctest::Approx(0.0));
    // no predictions at all
    CHECK(average_precision(std::vector<std::uint8_t>{}, 3) == doctest::Approx(0.0));
}

TEST_CASE("evaluate_map: perfect predictions score 1.0 at both thresholds and both kinds") {
    const BinaryMask disk = rect_mask(48, 4, 4, 20, 20);
    const BinaryMask rect = rect_mask(48, 24, 24, 44, 40);
    const Dataset ds = toy_dataset(48, {{1, disk}, {2, rect}});
    std::vector<PredictionRecord> preds{record_for("scene_00000", 1, 0.9, disk),
                                        record_for("scene_00000", 2, 0.8, rect)};
    for (MatchKind kind : {MatchKind::mask, MatchKind::box}) {
        const EvalResult r = evaluate_map(preds, ds, {0.5, 0.7}, kind);
        CHECK(r.mean_ap.at(0.5) == doctest::Approx(1.0));
        CHECK(r.mean_ap.at(0.7) == doctest::Approx(1.0));
        REQUIRE(r.categories.size() == 2);
        CHECK(r.categories[0].name == "disk");
        CHECK(r.categories[1].name == "rectangle");
    }
}

TEST_CASE("evaluate_map: no predictions scores zero for categories with ground truth") {
    const Dataset ds = toy_dataset(48, {{1, rect_mask(48, 4, 4, 20, 20)},
                                        {2, rect_mask(48, 24, 24, 44, 40)}});
    const EvalResult r = evaluate_map({}, ds, {0.5, 0.7}, MatchKind::mask);
    CHECK(r.mean_ap.at(0.5) == doctest::Approx(0.0));
    CHECK(r.mean_ap.at(0.7) == doctest::Approx(0.0));
}

TEST_CASE("evaluate_map: a 0.6-IoU mask counts at 0.5 and misses at 0.7") {
    // ground truth 20 rows tall; prediction shifted 5 rows: IoU = 15/25 = 0.6
    const BinaryMask gt = rect_mask(64, 10, 10, 30, 30);
    const BinaryMask shifted = rect_mask(64, 10, 15, 30, 35);
    CHECK(mask_iou(gt, shifted) == doctest::Approx(0.6));
    const BinaryMask other = rect_mask(64, 40, 40, 60, 60);

    const Dataset ds = toy_dataset(64, {{1, gt}, {2, other}});
    std::vector<PredictionRecord> preds{record_for("scene_00000", 1, 0.9, shifted),
                                        record_for("scene_00000", 2, 0.8, other)};
    const EvalResult r = evaluate_map(preds, ds, {0.5, 0.7}, MatchKind::mask);
    CHECK(r.categories[0].ap.at(0.5) == doctest::Approx(1.0));
    CHECK(r.categories[0].ap.at(0.7) == doctest::Approx(0.0));
    CHECK(r.categories[1].ap.at(0.5) == doctest::Approx(1.0));
    CHECK(r.mean_ap.at(0.5) == doctest::Approx(1.0));
    CHECK(r.mean_ap.at(0.7) == doctest::Approx(0.5));

    // box-level behaves identically here: tight boxes carry the same IoU
    const EvalResult rb = evaluate_map(preds, ds, {0.5, 0.7}, MatchKind::box);
    CHECK(rb.mean_ap.at(0.5) == doctest::Approx(1.0));
    CHECK(rb.mean_ap.at(0.7) == doctest::Approx(0.5));
}

TEST_CASE("evaluate_map: AP is invariant under monotone score transforms") {
    const BinaryMask gt = rect_mask(64, 10, 10, 30, 30);
    const BinaryMask near = rect_mask(64, 10, 12, 30, 32);
    const BinaryMask wrong = rect_mask(64, 40, 40, 56, 52);
    const Dataset ds = toy_dataset(64, {{1, gt}});
    std::vector<PredictionRecord> preds{record_for("scene_00000", 1, 0.6, near),
                                        record_for("scene_00000", 1, 0.3, wrong)};
    const double base = evaluate_map(preds, ds, {0.5}, MatchKind::mask).mean_ap.at(0.5);
    for (auto& p : preds) p.score = std::exp(5 * p.score) + 2;
    const double transformed =
        evaluate_map(preds, ds, {0.5}, MatchKind::mask).mean_ap.at(0.5);
    CHECK(base == doctest::Approx(transformed));
}

TEST_CASE("evaluate_map: AP never increases with the IoU threshold") {
    Rng rng(87);
    const BinaryMask gt1 = rect_mask(64, 8, 8, 28, 28);
    const BinaryMask gt2 = rect_mask(64, 36, 36, 58, 52);
    const Dataset ds = toy_dataset(64, {{1, gt1}, {1, gt2}});
    std::vector<PredictionRecord> preds;
    for (int i = 0; i < 6; ++i) {
        const int dx = rng.uniform_int(-6, 6), dy = rng.uniform_int(-6, 6);
        const BinaryMask m = rect_mask(64, std::max(0, 8 + dx), std::max(0, 8 + dy),
                                       std::min(64, 28 + dx), std::min(64, 28 + dy));
        preds.push_back(record_for("scene_00000", 1, rng.uniform(), m));
    }
    std::vector<double> thresholds;
    for (int i = 0; i < 10; ++i) thresholds.push_back(0.5 + 0.05 * i);
    const EvalResult r = evaluate_map(preds, ds, thresholds, MatchKind::mask);
    for (std::size_t i = 1; i < thresholds.size(); ++i)
        CHECK(r.mean_ap.at(thresholds[i]) <= r.mean_ap.at(thresholds[i - 1]) + 1e-12);
}

TEST_CASE("evaluate_map: the mean is the arithmetic mean over populated categories") {
    const BinaryMask gt = rect_mask(64, 10, 10, 30, 30);
    const BinaryMask shifted = rect_mask(64, 10, 15, 30, 35);  // IoU 0.6
    const BinaryMask other = rect_mask(64, 40, 40, 60, 60);
    const Dataset ds = toy_dataset(64, {{1, gt}, {2, other}});
    std::vector<PredictionRecord> preds{record_for("scene_00000", 1, 0.9, shifted),
                                        record_for("scene_00000", 2, 0.8, other)};
    const EvalResult r = evaluate_map(preds, ds, {0.7}, MatchKind::mask);
    double mean = 0;
    for (const CategoryAp& c : r.categories) mean += c.ap.at(0.7);
    mean /= double(r.categories.size());
    CHECK(r.mean_ap.at(0.7) == doctest::Approx(mean));
}

TEST_CASE("evaluate_map: unknown scene or category ids are rejected with the record named") {
    const Dataset ds = toy_dataset(48, {{1, rect_mask(48, 4, 4, 20, 20)}});
    std::vector<PredictionRecord> bad_scene{
        record_for("scene_99999", 1, 0.9, rect_mask(48, 4, 4, 20, 20))};
    CHECK_THROWS_AS(evaluate_map(bad_scene, ds, {0.5}, MatchKind::mask), ParseError);
    std::vector<PredictionRecord> bad_cat{
        record_for("scene_00000", 9, 0.9, rect_mask(48, 4, 4, 20, 20))};
    CHECK_THROWS_AS(evaluate_map(bad_cat, ds, {0.5}, MatchKind::mask), ParseError);
}

TEST_CASE("COCO-style threshold sweep averages the per-threshold means") {
    const BinaryMask gt = rect_mask(48, 4, 4, 24, 24);
    const Dataset ds = toy_dataset(48, {{1, gt}});
    std::vector<PredictionRecord> preds{record_for("scene_00000", 1, 0.9, gt)};
    CHECK(evaluate_map_averaged(preds, ds, MatchKind::mask) == doctest::Approx(1.0));
}

TEST_CASE("eval report: aligned table plus machine-readable block") {
    const BinaryMask gt = rect_mask(48, 4, 4, 24, 24);
    const Dataset ds = toy_dataset(48, {{1, gt}});
    std::vector<PredictionRecord> preds{record_for("scene_00000", 1, 0.9, gt)};
    const EvalResult rm = evaluate_map(preds, ds, {0.5, 0.7}, MatchKind::mask);
    const EvalResult rb = evaluate_map(preds, ds, {0.5, 0.7}, MatchKind::box);
    const std::string report = format_eval_report(rm, rb);
    CHECK(report.find("disk") != std::string::npos);
    CHECK(report.find("map_r@0.50 = 1.000000") != std::string::npos);
    CHECK(report.find("map_r@0.70 = 1.000000") != std::string::npos);
    CHECK(report.find("map_b@0.50 = 1.000000") != std::string::npos);
    CHECK(report.find("ap_r@0.50/disk = 1.000000") != std::string::npos);
}
