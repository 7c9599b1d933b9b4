#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "iseg/cascade.hpp"

// Five-stage inference: propose, mask, classify+refine, re-mask, re-classify;
// then per-category mask voting. Inference never records a tape.

namespace iseg {

// One of the 600 pre-voting detections: the box its mask was regressed in,
// the full category score vector and the m x m mask probabilities.
struct RawInstance {
    Box box;
    std::vector<double> scores;      // N+1 softmax, index 0 = background
    std::vector<double> mask_probs;  // m*m
};

// Final detection after voting.
struct Instance {
    Box box;
    int category = 0;  // 1..N
    double score = 0;
    std::vector<double> mask_probs;  // m*m map of the kept instance
    BinaryMask mask;                 // merged, binarized, image resolution
};

// wall-clock seconds per inference segment, for the timing breakdown
struct SegmentTimes {
    double conv = 0, stage2 = 0, stage3 = 0, stage4 = 0, stage5 = 0, others = 0;
    int images = 0;
    double total() const { return conv + stage2 + stage3 + stage4 + stage5 + others; }
};

namespace detail {

class SegmentClock {
public:
    explicit SegmentClock(double* sink) : sink_(sink), t0_(std::chrono::steady_clock::now()) {}
    ~SegmentClock() {
        if (sink_) *sink_ += std::chrono::duration<double>(
                                 std::chrono::steady_clock::now() - t0_).count();
    }

private:
    double* sink_;
    std::chrono::steady_clock::time_point t0_;
};

template <typename T>
std::vector<double> tensor_to_doubles(const Tensor<T>& t) {
    std::vector<double> out(t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = double(t.values()[i]);
    return out;
}

}  // namespace detail

// Stage-1 proposals for an image: decode, clip, NMS, top-k by objectness.
template <typename T>
ProposalSet propose(const CascadeModel<T>& model, const Tensor<T>& image) {
    Tensor<T> features = const_cast<CascadeModel<T>&>(model).backbone_forward(nullptr, image);
    RpnOut<T> rpn = const_cast<CascadeModel<T>&>(model).rpn_forward(nullptr, features);
    const std::vector<Box> anchors = model.make_anchors(rpn.feat_h, rpn.feat_w);
    return propose_boxes(model, rpn, anchors, double(image.dim(2)), double(image.dim(1)),
                         model.cfg.nms_threshold_infer);
}

// Optional insight into the pipeline, used by tests and the bench command.
struct InferenceTrace {
    std::vector<Box> proposals;        // stage-2 inputs
    std::vector<Box> regressed_boxes;  // stage-3 outputs == stage-4 inputs
};

// Runs stages 1..5 and returns the concatenated detections: one per proposal
// from the first mask/classify pass, then one per refined box from the second
// pass (600 when the proposal budget is filled).
template <typename T>
std::vector<RawInstance> run_cascade_inference(const CascadeModel<T>& model,
                                               const Tensor<T>& image,
                                               SegmentTimes* times = nullptr,
                                               InferenceTrace* trace = nullptr) {
    require(model.params.parameter_count() > 0, "model has no parameters");
    CascadeModel<T>& m = const_cast<CascadeModel<T>&>(model);
    const CascadeConfig& cfg = model.cfg;
    const double img_w = double(image.dim(2)), img_h = double(image.dim(1));
    const int mres = cfg.mask_resolution;
    const int n1 = cfg.num_categories + 1;

    Tensor<T> features;
    RpnOut<T> rpn;
    {
        detail::SegmentClock clock(times ? &times->conv : nullptr);
        features = m.backbone_forward(nullptr, image);
        rpn = m.rpn_forward(nullptr, features);
    }
    ProposalSet routed;
    {
        detail::SegmentClock clock(times ? &times->others : nullptr);
        const std::vector<Box> anchors = model.make_anchors(rpn.feat_h, rpn.feat_w);
        routed = propose_boxes(model, rpn, anchors, img_w, img_h, cfg.nms_threshold_infer);
    }

    std::vector<RawInstance> out;
    out.reserve(2 * routed.proposals.size());
    std::vector<Box> refined;
    refined.reserve(routed.proposals.size());

    // first pass: stages 2 and 3 on the routed proposals
    for (const Proposal& p : routed.proposals) {
        const Box& b = p.box;
        Tensor<T> box_t = Tensor<T>::from_data({4}, {T(b.x), T(b.y), T(b.w), T(b.h)});
        Tensor<T> mask_probs;
        {
            detail::SegmentClock clock(times ? &times->stage2 : nullptr);
            mask_probs = ops::sigmoid<T>(nullptr, m.stage2_forward(nullptr, features, box_t));
        }
        Stage3Out<T> s3;
        {
            detail::SegmentClock clock(times ? &times->stage3 : nullptr);
            s3 = m.stage3_forward(nullptr, features, box_t,
                                  ops::reshape<T>(nullptr, mask_probs,
                                                  {std::size_t(mres), std::size_t(mres)}));
        }
        RawInstance inst;
        inst.box = b;
        inst.scores = detail::tensor_to_doubles(s3.cls_mask_probs);
        inst.mask_probs = detail::tensor_to_doubles(mask_probs);
        out.push_back(std::move(inst));

        // refined box from the highest-scoring non-background category
        int best_c = 1;
        double best_p = -1;
        for (int c = 1; c < n1; ++c)
            if (out.back().scores[std::size_t(c)] > best_p) {
                best_p = out.back().scores[std::size_t(c)];
                best_c = c;
            }
        const std::size_t dbase = std::size_t(4 * best_c);
        const BoxDelta d{double(s3.deltas.values()[dbase]), double(s3.deltas.values()[dbase + 1]),
                         double(s3.deltas.values()[dbase + 2]),
                         double(s3.deltas.values()[dbase + 3])};
        refined.push_back(clip_box(decode_box(b, d), img_w, img_h));
    }

    // second pass: stages 4 and 5 on the refined boxes
    for (const Box& b : refined) {
        Tensor<T> box_t = Tensor<T>::from_data({4}, {T(b.x), T(b.y), T(b.w), T(b.h)});
        Tensor<T> mask_probs;
        {
            detail::SegmentClock clock(times ? &times->stage4 : nullptr);
            mask_probs = ops::sigmoid<T>(nullptr, m.stage2_forward(nullptr, features, box_t));
        }
        Stage3Out<T> s5;
        {
            detail::SegmentClock clock(times ? &times->stage5 : nullptr);
            s5 = m.stage3_forward(nullptr, features, box_t,
                                  ops::reshape<T>(nullptr, mask_probs,
                                                  {std::size_t(mres), std::size_t(mres)}));
        }
        RawInstance inst;
        inst.box = b;
        inst.scores = detail::tensor_to_doubles(s5.cls_mask_probs);
        inst.mask_probs = detail::tensor_to_doubles(mask_probs);
        out.push_back(std::move(inst));
    }

    if (times) ++times->images;
    if (trace) {
        trace->proposals.clear();
        for (const Proposal& p : routed.proposals) trace->proposals.push_back(p.box);
        trace->regressed_boxes = refined;
    }
    return out;
}

// Per-category NMS at voting_nms_iou, then score-weighted pixel averaging of
// each kept instance's mask with its suppressed lookalikes (box IoU >=
// voting_similar_iou), binarized at the mask threshold. Scores pass through
// unchanged; instances whose merged mask is empty are dropped. Output is
// sorted by descending score (ties: category, then original order).
inline std::vector<Instance> mask_voting(const std::vector<RawInstance>& raw,
                                         const CascadeConfig& cfg, int img_w, int img_h) {
    const int mres = cfg.mask_resolution;
    std::vector<Instance> final_instances;
    for (int cat = 1; cat <= cfg.num_categories; ++cat) {
        std::vector<std::pair<Box, double>> scored;
        scored.reserve(raw.size());
        for (const RawInstance& r : raw) scored.emplace_back(r.box, r.scores[std::size_t(cat)]);
        const std::vector<int> kept = nms(scored, cfg.voting_nms_iou);
        std::vector<char> is_kept(raw.size(), 0);
        for (int k : kept) is_kept[std::size_t(k)] = 1;

        for (int k : kept) {
            const RawInstance& keeper = raw[std::size_t(k)];
            const double keeper_score = keeper.scores[std::size_t(cat)];
            if (keeper_score < cfg.score_threshold) continue;

            std::vector<int> members{k};
            for (int i = 0; i < int(raw.size()); ++i) {
                if (is_kept[std::size_t(i)]) continue;
                if (box_iou(keeper.box, raw[std::size_t(i)].box) >= cfg.voting_similar_iou)
                    members.push_back(i);
            }

            // weighted average of the member probability maps over the union
            // of their boxes, in image space
            double x0 = img_w, y0 = img_h, x1 = 0, y1 = 0;
            double wsum = 0;
            for (int i : members) {
                const Box& b = raw[std::size_t(i)].box;
                x0 = std::min(x0, b.x0());
                y0 = std::min(y0, b.y0());
                x1 = std::max(x1, b.x1());
                y1 = std::max(y1, b.y1());
                wsum += raw[std::size_t(i)].scores[std::size_t(cat)];
            }
            const int px0 = std::max(0, int(std::floor(x0)));
            const int px1 = std::min(img_w, int(std::ceil(x1)));
            const int py0 = std::max(0, int(std::floor(y0)));
            const int py1 = std::min(img_h, int(std::ceil(y1)));

            BinaryMask merged(img_w, img_h);
            if (wsum > 0) {
                for (int py = py0; py < py1; ++py) {
                    for (int px = px0; px < px1; ++px) {
                        double acc = 0;
                        for (int i : members) {
                            const RawInstance& r = raw[std::size_t(i)];
                            acc += r.scores[std::size_t(cat)] *
                                   sample_prob_map(r.mask_probs, mres, r.box, px + 0.5, py + 0.5);
                        }
                        if (acc / wsum >= cfg.mask_threshold) merged.set(px, py, true);
                    }
                }
            }
            if (merged.empty_mask()) continue;

            Instance inst;
            inst.box = keeper.box;
            inst.category = cat;
            inst.score = keeper_score;
            inst.mask_probs = keeper.mask_probs;
            inst.mask = std::move(merged);
            final_instances.push_back(std::move(inst));
        }
    }
    std::stable_sort(final_instances.begin(), final_instances.end(),
                     [](const Instance& a, const Instance& b) {
                         if (a.score != b.score) return a.score > b.score;
                         return a.category < b.category;
                     });
    return final_instances;
}

template <typename T>
std::vector<Instance> infer_scene(const CascadeModel<T>& model, const Scene& scene,
                                  SegmentTimes* times = nullptr) {
    Tensor<T> image = scene_image_tensor<T>(scene);
    std::vector<RawInstance> raw = run_cascade_inference(model, image, times);
    detail::SegmentClock clock(times ? &times->others : nullptr);
    return mask_voting(raw, model.cfg, scene.width, scene.height);
}

// ---------------------------------------------------------------------------
// prediction file: one line per instance,
//   scene_id category score x y w h RLE
// instances are ordered by scene id, then by descending score within a scene.

struct PredictionRecord {
    std::string scene_id;
    int category = 0;
    double score = 0;
    Box box;
    BinaryMask mask;
};

inline void write_predictions(const std::vector<PredictionRecord>& records,
                              const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open prediction file for writing: " + path);
    for (const PredictionRecord& r : records) {
        os << r.scene_id << ' ' << r.category << ' ' << format_float(r.score) << ' '
           << format_float(r.box.x) << ' ' << format_float(r.box.y) << ' '
           << format_float(r.box.w) << ' ' << format_float(r.box.h) << ' '
           << mask_to_rle_text(r.mask) << "\n";
    }
    if (!os) throw IoError("prediction write failed: " + path);
}

inline std::vector<PredictionRecord> read_predictions(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open prediction file: " + path);
    std::vector<PredictionRecord> out;
    std::string line;
    std::size_t lineno = 0;
    std::uint64_t offset = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::uint64_t line_start = offset;
        offset += line.size() + 1;
        if (kv::trim(line).empty()) continue;
        std::istringstream ls(line);
        PredictionRecord r;
        if (!(ls >> r.scene_id >> r.category >> r.score >> r.box.x >> r.box.y >> r.box.w >>
              r.box.h))
            throw ParseError("bad prediction record on line " + std::to_string(lineno),
                             line_start);
        std::string rle;
        std::getline(ls, rle);
        try {
            r.mask = mask_from_rle_text(kv::trim(rle));
        } catch (const ParseError&) {
            throw ParseError("bad mask RLE on line " + std::to_string(lineno), line_start);
        }
        out.push_back(std::move(r));
    }
    return out;
}

// Inference over a whole dataset. Scenes are independent, so they may be
// processed on several threads; records come back ordered by scene, then by
// descending score, independent of the thread count.
template <typename T>
std::vector<PredictionRecord> run_inference_over_dataset(const CascadeModel<T>& model,
                                                         const Dataset& data, int threads = 1,
                                                         SegmentTimes* times = nullptr) {
    std::vector<std::vector<Instance>> per_scene(data.scenes.size());
    if (threads <= 1 || data.scenes.size() <= 1 || times != nullptr) {
        for (std::size_t i = 0; i < data.scenes.size(); ++i)
            per_scene[i] = infer_scene(model, data.scenes[i], times);
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&]() {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= data.scenes.size()) return;
                per_scene[i] = infer_scene(model, data.scenes[i], nullptr);
            }
        };
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    std::vector<PredictionRecord> records;
    for (std::size_t i = 0; i < data.scenes.size(); ++i) {
        for (const Instance& inst : per_scene[i]) {
            PredictionRecord r;
            r.scene_id = data.scenes[i].id;
            r.category = inst.category;
            r.score = inst.score;
            r.box = inst.box;
            r.mask = inst.mask;
            records.push_back(std::move(r));
        }
    }
    return records;
}

}  // namespace iseg
