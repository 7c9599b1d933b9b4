#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "iseg/inference.hpp"
#include "iseg/synth_data.hpp"

// Mask-level and box-level average precision. Matching is greedy in score
// order: a prediction claims the unmatched instance of its category with the
// highest IoU and is a true positive when that IoU reaches the threshold.
// AP integrates the precision envelope over all recall points.

namespace iseg {

enum class MatchKind { mask, box };

struct MatchResult {
    std::vector<std::uint8_t> true_positive;  // per prediction, score order
    std::vector<std::uint8_t> gt_matched;     // per ground truth
};

// predictions of one (scene, category) set
struct EvalPrediction {
    double score = 0;
    std::optional<Box> box;  // tight box of the mask when present
    BinaryMask mask;
};

struct EvalGroundTruth {
    Box box;
    const BinaryMask* mask = nullptr;
};

namespace detail {

inline double pair_iou(const EvalPrediction& p, const EvalGroundTruth& g, MatchKind kind) {
    if (kind == MatchKind::mask) {
        if (!g.mask || p.mask.width == 0) return 0.0;
        if (p.mask.width != g.mask->width || p.mask.height != g.mask->height) return 0.0;
        return mask_iou(p.mask, *g.mask);
    }
    if (!p.box) return 0.0;
    return box_iou(*p.box, g.box);
}

}  // namespace detail

// `preds` must already be sorted by descending score (ties: input order).
// A ground truth is consumed only by the true positive that claims it.
inline MatchResult match_instances(const std::vector<EvalPrediction>& preds,
                                   const std::vector<EvalGroundTruth>& gts,
                                   double iou_threshold, MatchKind kind) {
    MatchResult out;
    out.true_positive.assign(preds.size(), 0);
    out.gt_matched.assign(gts.size(), 0);
    for (std::size_t p = 0; p < preds.size(); ++p) {
        double best = 0.0;
        int arg = -1;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (out.gt_matched[g]) continue;
            const double iou = detail::pair_iou(preds[p], gts[g], kind);
            if (iou > best) {
                best = iou;
                arg = int(g);
            }
        }
        if (arg >= 0 && best >= iou_threshold) {
            out.true_positive[p] = 1;
            out.gt_matched[std::size_t(arg)] = 1;
        }
    }
    return out;
}

// All-point interpolated AP from score-ordered TP flags. Zero detections of
// an existing class score 0; no ground truth with detections scores 0.
inline double average_precision(const std::vector<std::uint8_t>& tp_ordered,
                                std::size_t num_gt) {
    if (num_gt == 0) return 0.0;
    std::vector<double> precision, recall;
    std::size_t tp = 0;
    for (std::size_t i = 0; i < tp_ordered.size(); ++i) {
        tp += tp_ordered[i];
        precision.push_back(double(tp) / double(i + 1));
        recall.push_back(double(tp) / double(num_gt));
    }
    double ap = 0.0, prev_recall = 0.0, envelope = 0.0;
    // walk the PR points right to left so the envelope is available directly
    std::vector<double> env(precision.size());
    for (std::size_t i = precision.size(); i-- > 0;) {
        envelope = std::max(envelope, precision[i]);
        env[i] = envelope;
    }
    for (std::size_t i = 0; i < precision.size(); ++i) {
        ap += (recall[i] - prev_recall) * env[i];
        prev_recall = recall[i];
    }
    return ap;
}

inline double average_precision(const MatchResult& match, std::size_t num_gt) {
    return average_precision(match.true_positive, num_gt);
}

// ---------------------------------------------------------------------------
// dataset-level evaluation

struct CategoryAp {
    int category = 0;
    std::string name;
    std::size_t num_gt = 0;
    std::map<double, double> ap;  // threshold -> AP
};

struct EvalResult {
    MatchKind kind = MatchKind::mask;
    std::vector<double> thresholds;
    std::vector<CategoryAp> categories;          // only categories with ground truth
    std::map<double, double> mean_ap;            // threshold -> mean over categories
    std::size_t num_predictions = 0;
};

// Box-level evaluation uses the tight bounding box of each predicted mask.
inline EvalResult evaluate_map(const std::vector<PredictionRecord>& predictions,
                               const Dataset& data, const std::vector<double>& thresholds,
                               MatchKind kind) {
    std::map<std::string, std::size_t> scene_index;
    for (std::size_t i = 0; i < data.scenes.size(); ++i) scene_index[data.scenes[i].id] = i;

    struct Flagged {
        double score;
        std::size_t order;
        bool tp;
    };

    const int N = data.spec.num_categories;
    for (const PredictionRecord& r : predictions) {
        if (!scene_index.count(r.scene_id))
            throw ParseError("prediction references unknown scene " + r.scene_id, 0);
        if (r.category < 1 || r.category > N)
            throw ParseError("prediction references unknown category " +
                                 std::to_string(r.category) + " in scene " + r.scene_id,
                             0);
    }

    EvalResult result;
    result.kind = kind;
    result.thresholds = thresholds;
    result.num_predictions = predictions.size();
    const auto names = data.category_names();

    for (int cat = 1; cat <= N; ++cat) {
        // group this category's predictions by scene, keeping global order
        std::map<std::size_t, std::vector<std::pair<std::size_t, EvalPrediction>>> by_scene;
        for (std::size_t i = 0; i < predictions.size(); ++i) {
            const PredictionRecord& r = predictions[i];
            if (r.category != cat) continue;
            EvalPrediction p;
            p.score = r.score;
            p.mask = r.mask;
            p.box = kind == MatchKind::box ? mask_tight_box(r.mask) : std::nullopt;
            by_scene[scene_index[r.scene_id]].emplace_back(i, std::move(p));
        }
        std::size_t num_gt = 0;
        for (const Scene& s : data.scenes)
            for (const SceneInstance& inst : s.instances)
                if (inst.category == cat) ++num_gt;

        CategoryAp cap;
        cap.category = cat;
        cap.name = names[std::size_t(cat - 1)];
        cap.num_gt = num_gt;
        for (double thr : thresholds) {
            std::vector<Flagged> flags;
            for (auto& [si, preds] : by_scene) {
                std::vector<std::pair<std::size_t, EvalPrediction>> ordered = preds;
                std::stable_sort(ordered.begin(), ordered.end(),
                                 [](const auto& a, const auto& b) {
                                     return a.second.score > b.second.score;
                                 });
                std::vector<EvalPrediction> plist;
                for (auto& [ord, p] : ordered) plist.push_back(p);
                std::vector<EvalGroundTruth> gts;
                for (const SceneInstance& inst : data.scenes[si].instances)
                    if (inst.category == cat)
                        gts.push_back(EvalGroundTruth{inst.tight_box, &inst.mask});
                const MatchResult mr = match_instances(plist, gts, thr, kind);
                for (std::size_t p = 0; p < plist.size(); ++p)
                    flags.push_back(Flagged{plist[p].score, ordered[p].first,
                                            mr.true_positive[p] != 0});
            }
            std::stable_sort(flags.begin(), flags.end(), [](const Flagged& a, const Flagged& b) {
                if (a.score != b.score) return a.score > b.score;
                return a.order < b.order;
            });
            std::vector<std::uint8_t> tp;
            for (const Flagged& f : flags) tp.push_back(f.tp ? 1 : 0);
            cap.ap[thr] = average_precision(tp, num_gt);
        }
        if (num_gt > 0) result.categories.push_back(std::move(cap));
    }

    for (double thr : thresholds) {
        double sum = 0;
        for (const CategoryAp& c : result.categories) sum += c.ap.at(thr);
        result.mean_ap[thr] =
            result.categories.empty() ? 0.0 : sum / double(result.categories.size());
    }
    return result;
}

// COCO-style average over thresholds 0.5, 0.55, ..., 0.95.
inline double evaluate_map_averaged(const std::vector<PredictionRecord>& predictions,
                                    const Dataset& data, MatchKind kind) {
    std::vector<double> thresholds;
    for (int i = 0; i < 10; ++i) thresholds.push_back(0.5 + 0.05 * i);
    const EvalResult r = evaluate_map(predictions, data, thresholds, kind);
    double sum = 0;
    for (double thr : thresholds) sum += r.mean_ap.at(thr);
    return sum / double(thresholds.size());
}

// Aligned table plus a machine-readable key=value block.
inline std::string format_eval_report(const EvalResult& mask_result,
                                      const EvalResult& box_result) {
    std::ostringstream os;
    auto header = [&](const EvalResult& r, const std::string& tag) {
        std::string s;
        for (double thr : r.thresholds) s += "  " + tag + "@" + format_fixed(thr, 2);
        return s;
    };
    os << "category        " << header(mask_result, "AP^r") << header(box_result, "AP^b")
       << "\n";
    auto row = [&](const std::string& name, const std::vector<double>& vals) {
        std::ostringstream line;
        line << name;
        for (std::size_t i = name.size(); i < 16; ++i) line << ' ';
        for (double v : vals) line << "  " << format_fixed(v, 4) << "   ";
        return line.str();
    };
    for (std::size_t c = 0; c < mask_result.categories.size(); ++c) {
        std::vector<double> vals;
        for (double thr : mask_result.thresholds)
            vals.push_back(mask_result.categories[c].ap.at(thr));
        for (double thr : box_result.thresholds)
            vals.push_back(box_result.categories[c].ap.at(thr));
        os << row(mask_result.categories[c].name, vals) << "\n";
    }
    {
        std::vector<double> vals;
        for (double thr : mask_result.thresholds) vals.push_back(mask_result.mean_ap.at(thr));
        for (double thr : box_result.thresholds) vals.push_back(box_result.mean_ap.at(thr));
        os << row("mean", vals) << "\n";
    }
    os << "\n";
    for (double thr : mask_result.thresholds)
        os << "map_r@" << format_fixed(thr, 2) << " = "
           << format_fixed(mask_result.mean_ap.at(thr), 6) << "\n";
    for (double thr : box_result.thresholds)
        os << "map_b@" << format_fixed(thr, 2) << " = "
           << format_fixed(box_result.mean_ap.at(thr), 6) << "\n";
    for (const CategoryAp& c : mask_result.categories)
        for (double thr : mask_result.thresholds)
            os << "ap_r@" << format_fixed(thr, 2) << "/" << c.name << " = "
               << format_fixed(c.ap.at(thr), 6) << "\n";
    for (const CategoryAp& c : box_result.categories)
        for (double thr : box_result.thresholds)
            os << "ap_b@" << format_fixed(thr, 2) << "/" << c.name << " = "
               << format_fixed(c.ap.at(thr), 6) << "\n";
    return os.str();
}

}  // namespace iseg
