#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "iseg/config.hpp"
#include "iseg/geometry.hpp"
#include "iseg/maskops.hpp"
#include "iseg/roi_warp.hpp"
#include "iseg/synth_data.hpp"
#include "iseg/tensor.hpp"

// The three-stage cascade: box proposals, per-box mask regression, and
// categorization with class-wise box refinement, trained end to end as one
// objective. Five-stage training reruns the mask/categorize pair on the
// refined boxes with shared weights.
//
// Discrete routing decisions (which anchors are sampled, which proposals are
// routed, labels and regression targets) carry no gradient; box coordinates
// of routed proposals do, via the warping layer. All routing decisions can be
// frozen in a TrainPlan so the remaining computation is a smooth function of
// the parameters, which is what the finite-difference checks exercise.

namespace iseg {

// ---------------------------------------------------------------------------
// loss primitives

namespace ops {

inline double smooth_l1_value(double x) {
    const double a = std::abs(x);
    return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

// mean over elements of the numerically-stable binary cross entropy on
// sigmoid(logit); d/dz = (sigmoid(z) - t) / k
template <typename T>
Tensor<T> bce_with_logits_mean(Tape<T>* tape, const Tensor<T>& logits,
                               const std::vector<double>& targets) {
    require_dims(logits.numel() == targets.size(), "bce target length mismatch");
    require(!targets.empty(), "bce needs at least one element");
    Tensor<T> out = Tensor<T>::zeros({1}, track(tape, {&logits}));
    double acc = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const double z = double(logits.values()[i]);
        acc += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
    }
    out.values()[0] = T(acc / double(targets.size()));
    if (out.requires_grad()) {
        tape->record([logits, targets, out]() {
            T* gz = const_cast<Tensor<T>&>(logits).grads().data();
            const double g = double(out.grads()[0]) / double(targets.size());
            for (std::size_t i = 0; i < targets.size(); ++i) {
                const double s = double(sigmoid_value(logits.values()[i]));
                gz[i] += T(g * (s - targets[i]));
            }
        });
    }
    return out;
}

// cross entropy of a softmax over `logits` against an integer label;
// d/dz = softmax(z) - onehot(label)
template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>* tape, const Tensor<T>& logits, int label) {
    require(label >= 0 && std::size_t(label) < logits.numel(),
            "cross entropy label out of range");
    Tensor<T> out = Tensor<T>::zeros({1}, track(tape, {&logits}));
    double mx = double(logits.values()[0]);
    for (T v : logits.values()) mx = std::max(mx, double(v));
    double denom = 0;
    for (T v : logits.values()) denom += std::exp(double(v) - mx);
    out.values()[0] = T(mx + std::log(denom) - double(logits.values()[std::size_t(label)]));
    if (out.requires_grad()) {
        tape->record([logits, out, label, mx, denom]() {
            T* gz = const_cast<Tensor<T>&>(logits).grads().data();
            const double g = double(out.grads()[0]);
            for (std::size_t i = 0; i < logits.numel(); ++i) {
                const double p = std::exp(double(logits.values()[i]) - mx) / denom;
                gz[i] += T(g * (p - (int(i) == label ? 1.0 : 0.0)));
            }
        });
    }
    return out;
}

// sum over elements of smooth-L1(pred - target)
template <typename T>
Tensor<T> smooth_l1_sum(Tape<T>* tape, const Tensor<T>& pred,
                        const std::vector<double>& targets) {
    require_dims(pred.numel() == targets.size(), "smooth_l1 target length mismatch");
    Tensor<T> out = Tensor<T>::zeros({1}, track(tape, {&pred}));
    double acc = 0;
    for (std::size_t i = 0; i < targets.size(); ++i)
        acc += smooth_l1_value(double(pred.values()[i]) - targets[i]);
    out.values()[0] = T(acc);
    if (out.requires_grad()) {
        tape->record([pred, targets, out]() {
            T* gp = const_cast<Tensor<T>&>(pred).grads().data();
            const double g = double(out.grads()[0]);
            for (std::size_t i = 0; i < targets.size(); ++i) {
                const double d = double(pred.values()[i]) - targets[i];
                gp[i] += T(g * std::clamp(d, -1.0, 1.0));
            }
        });
    }
    return out;
}

// box4 = (x,y,w,h) from a base box tensor and a delta tensor; the log-scale
// entries are clamped before exponentiation and carry zero gradient when
// clamped
template <typename T>
Tensor<T> decode_box_t(Tape<T>* tape, const Tensor<T>& base4, const Tensor<T>& delta4) {
    require_dims(base4.numel() == 4 && delta4.numel() == 4, "decode_box_t needs 4-vectors");
    Tensor<T> out = Tensor<T>::zeros({4}, track(tape, {&base4, &delta4}));
    const double bx = double(base4.values()[0]), by = double(base4.values()[1]);
    const double bw = double(base4.values()[2]), bh = double(base4.values()[3]);
    const double tx = double(delta4.values()[0]), ty = double(delta4.values()[1]);
    const double tw = std::min(double(delta4.values()[2]), kMaxLogScale);
    const double th = std::min(double(delta4.values()[3]), kMaxLogScale);
    out.values()[0] = T(bx + tx * bw);
    out.values()[1] = T(by + ty * bh);
    out.values()[2] = T(bw * std::exp(tw));
    out.values()[3] = T(bh * std::exp(th));
    if (out.requires_grad()) {
        tape->record([base4, delta4, out]() {
            const T* go = out.grads().data();
            const double bw = double(base4.values()[2]), bh = double(base4.values()[3]);
            const double tx = double(delta4.values()[0]), ty = double(delta4.values()[1]);
            const double twr = double(delta4.values()[2]), thr = double(delta4.values()[3]);
            const double ew = std::exp(std::min(twr, kMaxLogScale));
            const double eh = std::exp(std::min(thr, kMaxLogScale));
            if (base4.requires_grad()) {
                T* gb = const_cast<Tensor<T>&>(base4).grads().data();
                gb[0] += go[0];
                gb[1] += go[1];
                gb[2] += T(double(go[0]) * tx + double(go[2]) * ew);
                gb[3] += T(double(go[1]) * ty + double(go[3]) * eh);
            }
            if (delta4.requires_grad()) {
                T* gd = const_cast<Tensor<T>&>(delta4).grads().data();
                gd[0] += T(double(go[0]) * bw);
                gd[1] += T(double(go[1]) * bh);
                if (twr < kMaxLogScale) gd[2] += T(double(go[2]) * bw * ew);
                if (thr < kMaxLogScale) gd[3] += T(double(go[3]) * bh * eh);
            }
        });
    }
    return out;
}

// clamp corners into [0,img_w) x [0,img_h); coordinates pinned at a border
// get zero gradient
template <typename T>
Tensor<T> clip_box_t(Tape<T>* tape, const Tensor<T>& box4, double img_w, double img_h,
                     double min_extent = 1e-3) {
    require_dims(box4.numel() == 4, "clip_box_t needs a 4-vector");
    Tensor<T> out = Tensor<T>::zeros({4}, track(tape, {&box4}));
    const double x = double(box4.values()[0]), y = double(box4.values()[1]);
    const double w = double(box4.values()[2]), h = double(box4.values()[3]);
    auto clamp_axis = [min_extent](double lo, double hi, double bound, double* plo,
                                   double* phi, bool* lo_free, bool* hi_free) {
        double clo = std::clamp(lo, 0.0, bound);
        double chi = std::clamp(hi, 0.0, bound);
        *lo_free = (lo > 0.0 && lo < bound);
        *hi_free = (hi > 0.0 && hi < bound);
        if (chi - clo < min_extent) {
            chi = std::min(clo + min_extent, bound);
            clo = chi - min_extent;
            *lo_free = *hi_free = false;  // degenerate: treat as constant
        }
        *plo = clo;
        *phi = chi;
    };
    double x0, x1, y0, y1;
    bool x0f, x1f, y0f, y1f;
    clamp_axis(x - w / 2, x + w / 2, img_w, &x0, &x1, &x0f, &x1f);
    clamp_axis(y - h / 2, y + h / 2, img_h, &y0, &y1, &y0f, &y1f);
    out.values()[0] = T((x0 + x1) / 2);
    out.values()[1] = T((y0 + y1) / 2);
    out.values()[2] = T(x1 - x0);
    out.values()[3] = T(y1 - y0);
    if (out.requires_grad()) {
        tape->record([box4, out, x0f, x1f, y0f, y1f]() {
            T* g = const_cast<Tensor<T>&>(box4).grads().data();
            const T* go = out.grads().data();
            const double a0 = x0f ? 1 : 0, a1 = x1f ? 1 : 0;
            const double b0 = y0f ? 1 : 0, b1 = y1f ? 1 : 0;
            g[0] += T(double(go[0]) * (a0 + a1) / 2 + double(go[2]) * (a1 - a0));
            g[2] += T(double(go[0]) * (a1 - a0) / 4 + double(go[2]) * (a0 + a1) / 2);
            g[1] += T(double(go[1]) * (b0 + b1) / 2 + double(go[3]) * (b1 - b0));
            g[3] += T(double(go[1]) * (b1 - b0) / 4 + double(go[3]) * (b0 + b1) / 2);
        });
    }
    return out;
}

}  // namespace ops

// ---------------------------------------------------------------------------
// model

template <typename T>
struct Backbone {
    Tensor<T> conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b;
};

template <typename T>
struct Stage1Head {
    Tensor<T> conv_w, conv_b;    // 3x3 dimension reduction
    Tensor<T> obj_w, obj_b;      // 1x1, one objectness logit per anchor
    Tensor<T> delta_w, delta_b;  // 1x1, four delta channels per anchor
};

template <typename T>
struct Stage2Head {
    Tensor<T> fc1_w, fc1_b;    // pooled feature -> hidden (with ReLU)
    Tensor<T> mask_w, mask_b;  // hidden -> m^2 mask logits
};

template <typename T>
struct Stage3Head {
    Tensor<T> mask_fc1_w, mask_fc1_b, mask_fc2_w, mask_fc2_b;
    Tensor<T> box_fc1_w, box_fc1_b, box_fc2_w, box_fc2_b;
    Tensor<T> cls_mask_w, cls_mask_b;  // (N+1)-way, mask-level samples
    Tensor<T> cls_box_w, cls_box_b;    // (N+1)-way, box-level samples
    Tensor<T> bbox_w, bbox_b;          // 4(N+1) class-wise deltas
};

template <typename T>
struct RpnOut {
    Tensor<T> obj;     // [A, Hf, Wf] logits
    Tensor<T> deltas;  // [4A, Hf, Wf]
    int feat_h = 0, feat_w = 0;
};

template <typename T>
struct Stage3Out {
    Tensor<T> cls_mask_logits, cls_box_logits, deltas;
    Tensor<T> cls_mask_probs, cls_box_probs;  // softmax of the logits
};

template <typename T>
class CascadeModel {
public:
    CascadeConfig cfg;
    ParameterStore<T> params;
    Backbone<T> backbone;
    Stage1Head<T> stage1;
    Stage2Head<T> stage2;
    Stage3Head<T> stage3;

    int anchors_per_position() const {
        return int(cfg.anchor_scales.size() * cfg.anchor_ratios.size());
    }
    int stage2_input_dim() const {
        return cfg.conv3_channels * (cfg.warp_height / cfg.stage2_pool) *
               (cfg.warp_width / cfg.stage2_pool);
    }
    int stage3_input_dim() const {
        return cfg.conv3_channels * (cfg.warp_height / cfg.stage3_pool) *
               (cfg.warp_width / cfg.stage3_pool);
    }

    void init(std::uint64_t seed) {
        cfg.validate();
        Rng rng = Rng::from(seed, 0x706172616d73ull);
        const int A = anchors_per_position();
        const int n1 = cfg.num_categories + 1;

        backbone.conv1_w = conv_param("backbone.conv1.weight",
                                      {std::size_t(cfg.conv1_channels), std::size_t(cfg.image_channels), 5, 5}, rng);
        backbone.conv1_b = bias_param("backbone.conv1.bias", cfg.conv1_channels);
        backbone.conv2_w = conv_param("backbone.conv2.weight",
                                      {std::size_t(cfg.conv2_channels), std::size_t(cfg.conv1_channels), 5, 5}, rng);
        backbone.conv2_b = bias_param("backbone.conv2.bias", cfg.conv2_channels);
        backbone.conv3_w = conv_param("backbone.conv3.weight",
                                      {std::size_t(cfg.conv3_channels), std::size_t(cfg.conv2_channels), 3, 3}, rng);
        backbone.conv3_b = bias_param("backbone.conv3.bias", cfg.conv3_channels);

        stage1.conv_w = conv_param("stage1.conv.weight",
                                   {std::size_t(cfg.rpn_channels), std::size_t(cfg.conv3_channels), 3, 3}, rng);
        stage1.conv_b = bias_param("stage1.conv.bias", cfg.rpn_channels);
        stage1.obj_w = head_conv_param("stage1.objectness.weight",
                                       {std::size_t(A), std::size_t(cfg.rpn_channels), 1, 1}, rng, 0.01);
        stage1.obj_b = bias_param("stage1.objectness.bias", A);
        stage1.delta_w = head_conv_param("stage1.delta.weight",
                                         {std::size_t(4 * A), std::size_t(cfg.rpn_channels), 1, 1}, rng, 0.01);
        stage1.delta_b = bias_param("stage1.delta.bias", 4 * A);

        stage2.fc1_w = fc_param("stage2.fc1.weight", cfg.stage2_fc_dim, stage2_input_dim(), rng);
        stage2.fc1_b = bias_param("stage2.fc1.bias", cfg.stage2_fc_dim);
        stage2.mask_w = head_fc_param("stage2.mask.weight",
                                      cfg.mask_resolution * cfg.mask_resolution,
                                      cfg.stage2_fc_dim, rng, 0.01);
        stage2.mask_b = bias_param("stage2.mask.bias", cfg.mask_resolution * cfg.mask_resolution);

        const int d3 = cfg.stage3_fc_dim;
        stage3.mask_fc1_w = fc_param("stage3.mask_fc1.weight", d3, stage3_input_dim(), rng);
        stage3.mask_fc1_b = bias_param("stage3.mask_fc1.bias", d3);
        stage3.mask_fc2_w = fc_param("stage3.mask_fc2.weight", d3, d3, rng);
        stage3.mask_fc2_b = bias_param("stage3.mask_fc2.bias", d3);
        stage3.box_fc1_w = fc_param("stage3.box_fc1.weight", d3, stage3_input_dim(), rng);
        stage3.box_fc1_b = bias_param("stage3.box_fc1.bias", d3);
        stage3.box_fc2_w = fc_param("stage3.box_fc2.weight", d3, d3, rng);
        stage3.box_fc2_b = bias_param("stage3.box_fc2.bias", d3);
        stage3.cls_mask_w = head_fc_param("stage3.cls_mask.weight", n1, 2 * d3, rng, 0.01);
        stage3.cls_mask_b = bias_param("stage3.cls_mask.bias", n1);
        stage3.cls_box_w = head_fc_param("stage3.cls_box.weight", n1, 2 * d3, rng, 0.01);
        stage3.cls_box_b = bias_param("stage3.cls_box.bias", n1);
        stage3.bbox_w = head_fc_param("stage3.bbox.weight", 4 * n1, 2 * d3, rng, 0.001);
        stage3.bbox_b = bias_param("stage3.bbox.bias", 4 * n1);
    }

    Tensor<T> backbone_forward(Tape<T>* tape, const Tensor<T>& image) const {
        using namespace ops;
        Tensor<T> h1 = relu(tape, channel_bias(tape, conv2d(tape, image, backbone.conv1_w, 2, 2),
                                               backbone.conv1_b));
        Tensor<T> h2 = relu(tape, channel_bias(tape, conv2d(tape, h1, backbone.conv2_w, 2, 2),
                                               backbone.conv2_b));
        return relu(tape, channel_bias(tape, conv2d(tape, h2, backbone.conv3_w, 2, 1),
                                       backbone.conv3_b));
    }

    RpnOut<T> rpn_forward(Tape<T>* tape, const Tensor<T>& features) const {
        using namespace ops;
        Tensor<T> h = relu(tape, channel_bias(tape, conv2d(tape, features, stage1.conv_w, 1, 1),
                                              stage1.conv_b));
        RpnOut<T> out;
        out.obj = channel_bias(tape, conv2d(tape, h, stage1.obj_w, 1, 0), stage1.obj_b);
        out.deltas = channel_bias(tape, conv2d(tape, h, stage1.delta_w, 1, 0), stage1.delta_b);
        out.feat_h = int(features.dim(1));
        out.feat_w = int(features.dim(2));
        return out;
    }

    Tensor<T> stage2_forward(Tape<T>* tape, const Tensor<T>& features,
                             const Tensor<T>& box4) const {
        using namespace ops;
        Tensor<T> pooled = roi_pool(tape, features, box4, double(cfg.feature_stride()),
                                    cfg.warp_height, cfg.warp_width, cfg.stage2_pool,
                                    cfg.box_gradient_scale);
        Tensor<T> flat = reshape(tape, pooled, {pooled.numel()});
        Tensor<T> hidden = relu(tape, affine(tape, flat, stage2.fc1_w, stage2.fc1_b));
        return affine(tape, hidden, stage2.mask_w, stage2.mask_b);
    }

    // mask_probs: [m, m] probabilities from stage 2 (or forced values)
    Stage3Out<T> stage3_forward(Tape<T>* tape, const Tensor<T>& features, const Tensor<T>& box4,
                                const Tensor<T>& mask_probs) const {
        using namespace ops;
        const int pooled_res = cfg.warp_height / cfg.stage3_pool;
        Tensor<T> pooled = roi_pool(tape, features, box4, double(cfg.feature_stride()),
                                    cfg.warp_height, cfg.warp_width, cfg.stage3_pool,
                                    cfg.box_gradient_scale);
        Tensor<T> resized = resize_bilinear(tape, mask_probs, std::size_t(pooled_res),
                                            std::size_t(pooled_res));
        Tensor<T> masked = elementwise_mul(
            tape, pooled, broadcast_channels(tape, resized, std::size_t(cfg.conv3_channels)));

        Tensor<T> mflat = reshape(tape, masked, {masked.numel()});
        Tensor<T> m1 = relu(tape, affine(tape, mflat, stage3.mask_fc1_w, stage3.mask_fc1_b));
        Tensor<T> m2 = relu(tape, affine(tape, m1, stage3.mask_fc2_w, stage3.mask_fc2_b));

        Tensor<T> bflat = reshape(tape, pooled, {pooled.numel()});
        Tensor<T> b1 = relu(tape, affine(tape, bflat, stage3.box_fc1_w, stage3.box_fc1_b));
        Tensor<T> b2 = relu(tape, affine(tape, b1, stage3.box_fc2_w, stage3.box_fc2_b));

        Tensor<T> joint = concat(tape, m2, b2);
        Stage3Out<T> out;
        out.cls_mask_logits = affine(tape, joint, stage3.cls_mask_w, stage3.cls_mask_b);
        out.cls_box_logits = affine(tape, joint, stage3.cls_box_w, stage3.cls_box_b);
        out.deltas = affine(tape, joint, stage3.bbox_w, stage3.bbox_b);
        out.cls_mask_probs = softmax(tape, out.cls_mask_logits);
        out.cls_box_probs = softmax(tape, out.cls_box_logits);
        return out;
    }

    std::vector<Box> make_anchors(int feat_h, int feat_w) const {
        return generate_anchors(feat_h, feat_w, double(cfg.feature_stride()), cfg.anchor_scales,
                                cfg.anchor_ratios);
    }

    // flat index of anchor a's objectness logit in the [A,Hf,Wf] map
    std::size_t obj_index(int a, int feat_h, int feat_w) const {
        const int A = anchors_per_position();
        const int pos = a / A, k = a % A;
        const int row = pos / feat_w, col = pos % feat_w;
        return (std::size_t(k) * std::size_t(feat_h) + std::size_t(row)) * std::size_t(feat_w) +
               std::size_t(col);
    }

    std::array<std::size_t, 4> delta_indices(int a, int feat_h, int feat_w) const {
        const int A = anchors_per_position();
        const int pos = a / A, k = a % A;
        const int row = pos / feat_w, col = pos % feat_w;
        std::array<std::size_t, 4> idx{};
        for (int j = 0; j < 4; ++j)
            idx[std::size_t(j)] =
                (std::size_t(4 * k + j) * std::size_t(feat_h) + std::size_t(row)) *
                    std::size_t(feat_w) +
                std::size_t(col);
        return idx;
    }

private:
    Tensor<T> conv_param(const std::string& name, std::vector<std::size_t> shape, Rng& rng) {
        const std::size_t fan_in = shape[1] * shape[2] * shape[3];
        return normal_param(name, std::move(shape), std::sqrt(2.0 / double(fan_in)), rng);
    }
    Tensor<T> head_conv_param(const std::string& name, std::vector<std::size_t> shape, Rng& rng,
                              double stddev) {
        return normal_param(name, std::move(shape), stddev, rng);
    }
    Tensor<T> fc_param(const std::string& name, int out_dim, int in_dim, Rng& rng) {
        return normal_param(name, {std::size_t(out_dim), std::size_t(in_dim)},
                            std::sqrt(2.0 / double(in_dim)), rng);
    }
    Tensor<T> head_fc_param(const std::string& name, int out_dim, int in_dim, Rng& rng,
                            double stddev) {
        return normal_param(name, {std::size_t(out_dim), std::size_t(in_dim)}, stddev, rng);
    }
    Tensor<T> normal_param(const std::string& name, std::vector<std::size_t> shape,
                           double stddev, Rng& rng) {
        Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
        for (auto& v : t.values()) v = T(rng.normal(0.0, stddev));
        return params.add(name, std::move(t));
    }
    Tensor<T> bias_param(const std::string& name, int n) {
        return params.add(name, Tensor<T>::zeros({std::size_t(n)}, true));
    }
};

// ---------------------------------------------------------------------------
// proposal routing (no gradients)

struct ProposalSet {
    std::vector<Proposal> proposals;  // descending objectness
    std::vector<int> anchor_ids;      // source anchor of each proposal
};

// decode + clip + size filter + NMS + top-k, on raw values
template <typename T>
ProposalSet propose_boxes(const CascadeModel<T>& model, const RpnOut<T>& rpn,
                          const std::vector<Box>& anchors, double img_w, double img_h,
                          double nms_threshold) {
    const auto& cfg = model.cfg;
    std::vector<std::pair<Box, double>> candidates;
    std::vector<int> cand_ids;
    candidates.reserve(anchors.size());
    for (int a = 0; a < int(anchors.size()); ++a) {
        const double score =
            double(ops::sigmoid_value(rpn.obj.values()[model.obj_index(a, rpn.feat_h, rpn.feat_w)]));
        const auto di = model.delta_indices(a, rpn.feat_h, rpn.feat_w);
        const BoxDelta d{double(rpn.deltas.values()[di[0]]), double(rpn.deltas.values()[di[1]]),
                         double(rpn.deltas.values()[di[2]]), double(rpn.deltas.values()[di[3]])};
        const Box b = clip_box(decode_box(anchors[std::size_t(a)], d), img_w, img_h);
        if (b.w < cfg.min_box_size || b.h < cfg.min_box_size) continue;
        candidates.emplace_back(b, score);
        cand_ids.push_back(a);
    }
    ProposalSet out;
    for (int idx : nms(candidates, nms_threshold)) {
        if (int(out.proposals.size()) >= cfg.proposal_count) break;
        out.proposals.push_back(Proposal{candidates[std::size_t(idx)].first,
                                         candidates[std::size_t(idx)].second});
        out.anchor_ids.push_back(cand_ids[std::size_t(idx)]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// sample assignment

struct RpnSamples {
    std::vector<int> anchor_ids;
    std::vector<std::uint8_t> labels;   // 1 positive, 0 negative
    std::vector<BoxDelta> targets;      // meaningful for positives
};

// Positives: IoU >= positive_iou with some instance box, plus the best anchor
// per instance. Negatives: IoU <= negative_iou. In-between anchors are never
// sampled. At most half the sample is positive.
inline RpnSamples assign_rpn_samples(const std::vector<Box>& anchors,
                                     const std::vector<Box>& gt_boxes, int sample_count,
                                     double positive_iou, double negative_iou, Rng& rng) {
    const int n = int(anchors.size());
    std::vector<double> best_iou(std::size_t(n), 0.0);
    std::vector<int> best_gt(std::size_t(n), -1);
    for (int a = 0; a < n; ++a) {
        for (int g = 0; g < int(gt_boxes.size()); ++g) {
            const double iou = box_iou(anchors[std::size_t(a)], gt_boxes[std::size_t(g)]);
            if (iou > best_iou[std::size_t(a)]) {
                best_iou[std::size_t(a)] = iou;
                best_gt[std::size_t(a)] = g;
            }
        }
    }
    std::vector<char> forced(std::size_t(n), 0);
    for (int g = 0; g < int(gt_boxes.size()); ++g) {
        double best = 0.0;
        int arg = -1;
        for (int a = 0; a < n; ++a) {
            const double iou = box_iou(anchors[std::size_t(a)], gt_boxes[std::size_t(g)]);
            if (iou > best) {
                best = iou;
                arg = a;
            }
        }
        if (arg >= 0) {
            forced[std::size_t(arg)] = 1;
            if (best_gt[std::size_t(arg)] < 0) best_gt[std::size_t(arg)] = g;
        }
    }

    std::vector<int> positives, negatives;
    for (int a = 0; a < n; ++a) {
        if (forced[std::size_t(a)] || (best_gt[std::size_t(a)] >= 0 &&
                                       best_iou[std::size_t(a)] >= positive_iou))
            positives.push_back(a);
        else if (best_iou[std::size_t(a)] <= negative_iou)
            negatives.push_back(a);
    }
    rng.shuffle(positives);
    rng.shuffle(negatives);
    const int max_pos = std::min(int(positives.size()), sample_count / 2);
    RpnSamples out;
    for (int i = 0; i < max_pos; ++i) {
        const int a = positives[std::size_t(i)];
        out.anchor_ids.push_back(a);
        out.labels.push_back(1);
        out.targets.push_back(encode_box(anchors[std::size_t(a)],
                                         gt_boxes[std::size_t(best_gt[std::size_t(a)])]));
    }
    const int want_neg = std::min(int(negatives.size()), sample_count - max_pos);
    for (int i = 0; i < want_neg; ++i) {
        out.anchor_ids.push_back(negatives[std::size_t(i)]);
        out.labels.push_back(0);
        out.targets.push_back(BoxDelta{});
    }
    return out;
}

struct Stage2Assignment {
    bool positive = false;
    int gt = -1;
    std::vector<std::uint8_t> mask_target;  // m*m, only when positive
};

// positive when box IoU with the best instance is strictly greater than 0.5;
// the target is the instance mask restricted to the proposal box
inline Stage2Assignment assign_stage2_samples(const Box& roi, const Scene& scene, int m) {
    Stage2Assignment out;
    double best = 0.0;
    for (int g = 0; g < int(scene.instances.size()); ++g) {
        const double iou = box_iou(roi, scene.instances[std::size_t(g)].tight_box);
        if (iou > best) {
            best = iou;
            out.gt = g;
        }
    }
    if (out.gt >= 0 && best > 0.5 && !scene.boxes_only) {
        out.positive = true;
        out.mask_target =
            rasterize_mask_in_box(scene.instances[std::size_t(out.gt)].mask, roi, m);
    }
    return out;
}

struct Stage3Assignment {
    int label_box = 0;   // category for the box-level sample set (0 = background)
    int label_mask = 0;  // category for the mask-level sample set
    bool has_reg = false;
    BoxDelta reg_target;
};

// Box-level positives need box IoU >= 0.5; mask-level positives additionally
// need IoU >= 0.5 between the predicted mask (binarized) and the instance
// mask. Scenes without mask annotations fall back to the box test alone.
inline Stage3Assignment assign_stage3_samples(const Box& roi,
                                              const BinaryMask& predicted_mask,
                                              const Scene& scene) {
    Stage3Assignment out;
    double best = 0.0;
    int best_gt = -1;
    for (int g = 0; g < int(scene.instances.size()); ++g) {
        const double iou = box_iou(roi, scene.instances[std::size_t(g)].tight_box);
        if (iou > best) {
            best = iou;
            best_gt = g;
        }
    }
    if (best_gt < 0 || best < 0.5) return out;
    const SceneInstance& gt = scene.instances[std::size_t(best_gt)];
    out.label_box = gt.category;
    out.has_reg = true;
    out.reg_target = encode_box(roi, gt.tight_box);
    if (scene.boxes_only) {
        out.label_mask = gt.category;
    } else {
        out.label_mask = mask_iou(predicted_mask, gt.mask) >= 0.5 ? gt.category : 0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// the unified training objective

// Frozen routing decisions for one step. When supplied, the loss becomes a
// smooth function of the parameters (up to the usual ReLU/max/kappa kinks).
struct TrainPlan {
    RpnSamples rpn;
    struct Roi {
        int anchor = -1;   // source anchor; -1 means const_box (no box gradient)
        Box const_box;
        bool s2_positive = false;
        std::vector<std::uint8_t> s2_target;
        int label_box = 0, label_mask = 0;
        bool has_reg = false;
        BoxDelta reg_target;
        // stages 4/5 (valid when trained with 5 stages)
        int s4_class = 1;
        bool s4_s2_positive = false;
        std::vector<std::uint8_t> s4_target;
        int s4_label_box = 0, s4_label_mask = 0;
        bool s4_has_reg = false;
        BoxDelta s4_reg_target;
    };
    std::vector<Roi> rois;
};

struct LossReport {
    double l1 = 0, l2 = 0, l3 = 0, l4 = 0, l5 = 0, total = 0;
};

namespace detail {

template <typename T>
Tensor<T> zero_loss(Tape<T>*) {
    return Tensor<T>::scalar(T(0));
}

// mean of `terms` over `count` (not over terms.size(); background-only parts
// contribute nothing but still normalize by the sample count)
template <typename T>
Tensor<T> mean_over(Tape<T>* tape, std::vector<Tensor<T>>& terms, std::size_t count) {
    if (terms.empty() || count == 0) return zero_loss(tape);
    return ops::scale(tape, ops::add_all(tape, terms), T(1.0 / double(count)));
}

}  // namespace detail

// Builds the full training graph for one scene. With `frozen == nullptr`,
// routing decisions are made from the current forward pass (and returned in
// `plan_out` when given); otherwise the frozen decisions are replayed.
template <typename T>
Tensor<T> training_loss(CascadeModel<T>& model, Tape<T>* tape, const Scene& scene, Rng* rng,
                        const TrainPlan* frozen, TrainPlan* plan_out, LossReport* report) {
    using namespace ops;
    const CascadeConfig& cfg = model.cfg;
    require(frozen != nullptr || rng != nullptr, "training_loss needs an rng or a frozen plan");

    const double img_w = scene.width, img_h = scene.height;
    Tensor<T> image = scene_image_tensor<T>(scene);
    Tensor<T> features = model.backbone_forward(tape, image);
    RpnOut<T> rpn = model.rpn_forward(tape, features);
    const std::vector<Box> anchors = model.make_anchors(rpn.feat_h, rpn.feat_w);

    std::vector<Box> gt_boxes;
    for (const auto& inst : scene.instances) gt_boxes.push_back(inst.tight_box);

    TrainPlan local;
    const TrainPlan* plan = frozen;
    if (!plan) {
        local.rpn = assign_rpn_samples(anchors, gt_boxes, cfg.anchors_per_image,
                                       cfg.rpn_positive_iou, cfg.rpn_negative_iou, *rng);
        plan = &local;
    }

    // --- stage 1 loss: objectness + box regression over the sampled anchors
    Tensor<T> l1 = detail::zero_loss(tape);
    if (!plan->rpn.anchor_ids.empty()) {
        const std::size_t S = plan->rpn.anchor_ids.size();
        std::vector<std::size_t> obj_idx;
        std::vector<double> obj_targets;
        std::vector<std::size_t> reg_idx;
        std::vector<double> reg_targets;
        for (std::size_t i = 0; i < S; ++i) {
            const int a = plan->rpn.anchor_ids[i];
            obj_idx.push_back(model.obj_index(a, rpn.feat_h, rpn.feat_w));
            obj_targets.push_back(double(plan->rpn.labels[i]));
            if (plan->rpn.labels[i]) {
                const auto di = model.delta_indices(a, rpn.feat_h, rpn.feat_w);
                for (std::size_t j = 0; j < 4; ++j) reg_idx.push_back(di[j]);
                const BoxDelta& t = plan->rpn.targets[i];
                reg_targets.insert(reg_targets.end(), {t.tx, t.ty, t.tw, t.th});
            }
        }
        Tensor<T> cls = bce_with_logits_mean(tape, gather(tape, rpn.obj, obj_idx), obj_targets);
        l1 = cls;
        if (!reg_idx.empty()) {
            Tensor<T> reg = smooth_l1_sum(tape, gather(tape, rpn.deltas, reg_idx), reg_targets);
            l1 = add(tape, cls, scale(tape, reg, T(1.0 / double(S))));
        }
    }

    // --- route proposals and pick the RoI sample
    if (!frozen) {
        ProposalSet routed = propose_boxes(model, rpn, anchors, img_w, img_h,
                                           cfg.nms_threshold_train);
        struct Cand {
            int anchor;
            Box box;
            bool positive;
        };
        std::vector<Cand> cands;
        for (std::size_t i = 0; i < routed.proposals.size(); ++i)
            cands.push_back({routed.anchor_ids[i], routed.proposals[i].box, false});
        if (cfg.train_add_gt_proposals)
            for (const Box& g : gt_boxes) cands.push_back({-1, g, false});
        for (auto& c : cands) {
            double best = 0;
            for (const Box& g : gt_boxes) best = std::max(best, box_iou(c.box, g));
            c.positive = best > 0.5;
        }
        std::vector<int> pos, neg;
        for (int i = 0; i < int(cands.size()); ++i)
            (cands[std::size_t(i)].positive ? pos : neg).push_back(i);
        rng->shuffle(pos);
        rng->shuffle(neg);
        const int want_pos = std::min(int(pos.size()),
                                      int(std::lround(cfg.roi_positive_fraction * cfg.rois_per_image)));
        std::vector<int> chosen(pos.begin(), pos.begin() + want_pos);
        const int want_neg = std::min(int(neg.size()), cfg.rois_per_image - want_pos);
        chosen.insert(chosen.end(), neg.begin(), neg.begin() + want_neg);
        for (int ci : chosen) {
            TrainPlan::Roi r;
            r.anchor = cands[std::size_t(ci)].anchor;
            r.const_box = cands[std::size_t(ci)].box;
            local.rois.push_back(r);
        }
    }

    // --- stages 2..5 per sampled RoI
    std::vector<Tensor<T>> l2_terms, l3_cls_mask, l3_cls_box, l3_reg;
    std::vector<Tensor<T>> l4_terms, l5_cls_mask, l5_cls_box, l5_reg;
    std::size_t s2_positives = 0, s4_positives = 0;
    const int m = cfg.mask_resolution;
    const int n1 = cfg.num_categories + 1;
    std::vector<TrainPlan::Roi>& rois =
        frozen ? const_cast<std::vector<TrainPlan::Roi>&>(frozen->rois) : local.rois;

    for (TrainPlan::Roi& roi : rois) {
        // box tensor: re-decoded from the live delta map so gradients flow
        Tensor<T> box_t;
        if (roi.anchor >= 0) {
            const auto di = model.delta_indices(roi.anchor, rpn.feat_h, rpn.feat_w);
            Tensor<T> delta = gather(tape, rpn.deltas,
                                     {di[0], di[1], di[2], di[3]});
            const Box& a = anchors[std::size_t(roi.anchor)];
            Tensor<T> base = Tensor<T>::from_data({4}, {T(a.x), T(a.y), T(a.w), T(a.h)});
            box_t = clip_box_t(tape, decode_box_t(tape, base, delta), img_w, img_h);
        } else {
            const Box& b = roi.const_box;
            box_t = Tensor<T>::from_data({4}, {T(b.x), T(b.y), T(b.w), T(b.h)});
        }
        const Box box_val{double(box_t.values()[0]), double(box_t.values()[1]),
                          double(box_t.values()[2]), double(box_t.values()[3])};

        // stage 2
        Tensor<T> mask_logits = model.stage2_forward(tape, features, box_t);
        if (!frozen) {
            Stage2Assignment a2 = assign_stage2_samples(box_val, scene, m);
            roi.s2_positive = a2.positive;
            roi.s2_target = std::move(a2.mask_target);
        }
        if (roi.s2_positive) {
            std::vector<double> target(roi.s2_target.begin(), roi.s2_target.end());
            l2_terms.push_back(bce_with_logits_mean(tape, mask_logits, target));
            ++s2_positives;
        }

        // stage 3
        Tensor<T> mask_probs = reshape(tape, sigmoid(tape, mask_logits),
                                       {std::size_t(m), std::size_t(m)});
        Stage3Out<T> s3 = model.stage3_forward(tape, features, box_t, mask_probs);
        if (!frozen) {
            std::vector<double> probs(mask_probs.numel());
            for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = double(mask_probs.values()[i]);
            const BinaryMask pred = render_mask_to_image(probs, m, box_val, scene.width,
                                                         scene.height, cfg.mask_threshold);
            Stage3Assignment a3 = assign_stage3_samples(box_val, pred, scene);
            roi.label_box = a3.label_box;
            roi.label_mask = a3.label_mask;
            roi.has_reg = a3.has_reg;
            roi.reg_target = a3.reg_target;
        }
        l3_cls_mask.push_back(softmax_cross_entropy(tape, s3.cls_mask_logits, roi.label_mask));
        l3_cls_box.push_back(softmax_cross_entropy(tape, s3.cls_box_logits, roi.label_box));
        if (roi.has_reg) {
            const std::size_t base = std::size_t(4 * roi.label_box);
            Tensor<T> pred = gather(tape, s3.deltas, {base, base + 1, base + 2, base + 3});
            l3_reg.push_back(smooth_l1_sum(
                tape, pred,
                {roi.reg_target.tx, roi.reg_target.ty, roi.reg_target.tw, roi.reg_target.th}));
        }

        if (cfg.train_stages != 5) continue;

        // stage 3 -> 4 handoff: refine the box with the highest-scoring
        // non-background category's regressor
        if (!frozen) {
            int best_c = 1;
            double best_p = -1;
            for (int c = 1; c < n1; ++c) {
                const double p = double(s3.cls_mask_probs.values()[std::size_t(c)]);
                if (p > best_p) {
                    best_p = p;
                    best_c = c;
                }
            }
            roi.s4_class = best_c;
        }
        const std::size_t dbase = std::size_t(4 * roi.s4_class);
        Tensor<T> delta4 = gather(tape, s3.deltas, {dbase, dbase + 1, dbase + 2, dbase + 3});
        Tensor<T> box4_t = clip_box_t(tape, decode_box_t(tape, box_t, delta4), img_w, img_h);
        const Box box4_val{double(box4_t.values()[0]), double(box4_t.values()[1]),
                           double(box4_t.values()[2]), double(box4_t.values()[3])};

        // stage 4 (stage-2 structure, shared weights)
        Tensor<T> mask_logits4 = model.stage2_forward(tape, features, box4_t);
        if (!frozen) {
            Stage2Assignment a4 = assign_stage2_samples(box4_val, scene, m);
            roi.s4_s2_positive = a4.positive;
            roi.s4_target = std::move(a4.mask_target);
        }
        if (roi.s4_s2_positive) {
            std::vector<double> target(roi.s4_target.begin(), roi.s4_target.end());
            l4_terms.push_back(bce_with_logits_mean(tape, mask_logits4, target));
            ++s4_positives;
        }

        // stage 5 (stage-3 structure, shared weights)
        Tensor<T> mask_probs4 = reshape(tape, sigmoid(tape, mask_logits4),
                                        {std::size_t(m), std::size_t(m)});
        Stage3Out<T> s5 = model.stage3_forward(tape, features, box4_t, mask_probs4);
        if (!frozen) {
            std::vector<double> probs(mask_probs4.numel());
            for (std::size_t i = 0; i < probs.size(); ++i)
                probs[i] = double(mask_probs4.values()[i]);
            const BinaryMask pred = render_mask_to_image(probs, m, box4_val, scene.width,
                                                         scene.height, cfg.mask_threshold);
            Stage3Assignment a5 = assign_stage3_samples(box4_val, pred, scene);
            roi.s4_label_box = a5.label_box;
            roi.s4_label_mask = a5.label_mask;
            roi.s4_has_reg = a5.has_reg;
            roi.s4_reg_target = a5.reg_target;
        }
        l5_cls_mask.push_back(softmax_cross_entropy(tape, s5.cls_mask_logits, roi.s4_label_mask));
        l5_cls_box.push_back(softmax_cross_entropy(tape, s5.cls_box_logits, roi.s4_label_box));
        if (roi.s4_has_reg) {
            const std::size_t base = std::size_t(4 * roi.s4_label_box);
            Tensor<T> pred = gather(tape, s5.deltas, {base, base + 1, base + 2, base + 3});
            l5_reg.push_back(smooth_l1_sum(tape, pred,
                                           {roi.s4_reg_target.tx, roi.s4_reg_target.ty,
                                            roi.s4_reg_target.tw, roi.s4_reg_target.th}));
        }
    }

    const std::size_t R = rois.size();
    Tensor<T> l2 = detail::mean_over(tape, l2_terms, s2_positives);
    Tensor<T> l3 = add(tape, detail::mean_over(tape, l3_cls_mask, R),
                       add(tape, detail::mean_over(tape, l3_cls_box, R),
                           detail::mean_over(tape, l3_reg, R)));
    Tensor<T> total = add(tape, l1, add(tape, l2, l3));
    Tensor<T> l4 = detail::zero_loss(tape), l5 = detail::zero_loss(tape);
    if (cfg.train_stages == 5) {
        l4 = detail::mean_over(tape, l4_terms, s4_positives);
        l5 = add(tape, detail::mean_over(tape, l5_cls_mask, R),
                 add(tape, detail::mean_over(tape, l5_cls_box, R),
                     detail::mean_over(tape, l5_reg, R)));
        total = add(tape, total, add(tape, l4, l5));
    }

    if (report) {
        report->l1 = double(l1.item());
        report->l2 = double(l2.item());
        report->l3 = double(l3.item());
        report->l4 = double(l4.item());
        report->l5 = double(l5.item());
        report->total = double(total.item());
    }
    if (plan_out && !frozen) *plan_out = std::move(local);
    return total;
}

// one SGD step on one scene: forward, backward, update
template <typename T>
LossReport train_step(CascadeModel<T>& model, const Scene& scene, double lr, Rng& rng) {
    Tape<T> tape;
    LossReport report;
    Tensor<T> loss = training_loss(model, &tape, scene, &rng, nullptr, nullptr, &report);
    backward(tape, loss, model.params);
    model.params.sgd_step(T(lr));
    return report;
}

// ---------------------------------------------------------------------------
// training loop

struct TrainOptions {
    int iterations = 0;           // 0: use the config schedule length
    std::uint64_t seed = 0;
    int log_every = 1;
};

struct TrainTiming {
    double forward_s = 0, backward_s = 0, update_s = 0;
};

// Runs the schedule, optionally writing one loss-log line per iteration:
// "iter L1 L2 L3 total lr" (total includes the stage-4/5 terms when training
// five stages).
template <typename T>
TrainTiming train_cascade(CascadeModel<T>& model, const Dataset& data,
                          const TrainOptions& opts, std::ostream* loss_log,
                          std::vector<LossReport>* history = nullptr) {
    require(!data.scenes.empty(), "training dataset is empty");
    const int iterations =
        opts.iterations > 0 ? opts.iterations : model.cfg.total_iterations();
    Rng rng = Rng::from(opts.seed, 0x747261696eull);
    TrainTiming timing;
    if (loss_log) *loss_log << "# iter L1 L2 L3 total lr\n";
    for (int iter = 0; iter < iterations; ++iter) {
        const Scene& scene =
            data.scenes[std::size_t(rng.uniform_int(0, int(data.scenes.size()) - 1))];
        const double lr = model.cfg.lr_at(
            opts.iterations > 0
                ? int(double(iter) * double(model.cfg.total_iterations()) / double(iterations))
                : iter);

        const auto t0 = std::chrono::steady_clock::now();
        Tape<T> tape;
        LossReport report;
        Tensor<T> loss = training_loss(model, &tape, scene, &rng, nullptr, nullptr, &report);
        const auto t1 = std::chrono::steady_clock::now();
        backward(tape, loss, model.params);
        const auto t2 = std::chrono::steady_clock::now();
        model.params.sgd_step(T(lr));
        const auto t3 = std::chrono::steady_clock::now();
        timing.forward_s += std::chrono::duration<double>(t1 - t0).count();
        timing.backward_s += std::chrono::duration<double>(t2 - t1).count();
        timing.update_s += std::chrono::duration<double>(t3 - t2).count();

        if (history) history->push_back(report);
        if (loss_log && (iter % opts.log_every == 0 || iter == iterations - 1)) {
            *loss_log << iter << ' ' << format_fixed(report.l1, 6) << ' '
                      << format_fixed(report.l2, 6) << ' ' << format_fixed(report.l3, 6) << ' '
                      << format_fixed(report.total, 6) << ' ' << format_float(lr) << "\n";
        }
    }
    return timing;
}

}  // namespace iseg
