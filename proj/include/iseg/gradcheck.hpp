#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "iseg/cascade.hpp"
#include "iseg/roi_warp.hpp"

// Central finite-difference verification of the analytic gradients, always in
// double precision. Box-coordinate checks construct boxes whose sample
// positions keep a 0.3 margin from the interpolation kinks; the kinks are
// measure-zero and carry a zero subgradient by convention, so checking next
// to them is meaningless.

namespace iseg {

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0;
    double tolerance = 0;
    int comparisons = 0;
    bool passed() const { return max_rel_err <= tolerance; }
};

namespace gradcheck_detail {

// relative error with a floor hiding only differences below the oracle's own
// accuracy
inline double rel_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) /
           std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct WarpConfig {
    int channels, feat_h, feat_w;
    WarpSpec spec;
    std::vector<double> feature;
    std::vector<double> readout;  // random weights defining the scalar loss
};

// Sample positions form the arithmetic progression x0 + i * (w / out). With
// w = out * (k + u) for small u and frac(x0) = 0.5, every fractional part
// stays within 0.3 of 0.5, giving the kink margin.
inline WarpConfig random_warp_config(Rng& rng) {
    WarpConfig c;
    c.channels = rng.uniform_int(1, 3);
    c.feat_h = rng.uniform_int(10, 16);
    c.feat_w = rng.uniform_int(10, 16);
    c.spec.out_w = 4;
    c.spec.out_h = 4;
    auto pick_axis = [&rng](int out, int feat, double* center, double* extent) {
        const double u = rng.uniform(-0.2, 0.2) / double(out - 1);
        const double step = 1.0 + u;  // one feature cell per output cell, roughly
        const double w = step * out;
        const int base = rng.uniform_int(1, feat - out - 3);
        const double lo = base + 0.5;
        *extent = w;
        *center = lo + w / 2.0;
    };
    pick_axis(c.spec.out_w, c.feat_w, &c.spec.box.x, &c.spec.box.w);
    pick_axis(c.spec.out_h, c.feat_h, &c.spec.box.y, &c.spec.box.h);
    c.feature.resize(std::size_t(c.channels) * std::size_t(c.feat_h) * std::size_t(c.feat_w));
    for (auto& v : c.feature) v = rng.normal();
    c.readout.resize(std::size_t(c.channels) * std::size_t(c.spec.out_h) *
                     std::size_t(c.spec.out_w));
    for (auto& v : c.readout) v = rng.normal();
    return c;
}

inline double warp_loss(const WarpConfig& c) {
    const auto out =
        roi_warp_forward_values(c.feature, c.channels, c.feat_h, c.feat_w, c.spec);
    double loss = 0;
    for (std::size_t i = 0; i < out.size(); ++i) loss += out[i] * c.readout[i];
    return loss;
}

}  // namespace gradcheck_detail

// d(loss)/d(x,y,w,h) against central differences, step 1e-4
inline GradCheckResult check_roi_warp_box_gradients(int trials, std::uint64_t seed) {
    using namespace gradcheck_detail;
    Rng rng = Rng::from(seed, 0x77626f78ull);
    GradCheckResult result{"roi_warp.box_gradients", 0, 1e-4, 0};
    const double step = 1e-4;
    for (int t = 0; t < trials; ++t) {
        WarpConfig c = random_warp_config(rng);
        std::vector<double> grad_f(c.feature.size(), 0.0);
        const BoxGrad gb = roi_warp_backward_values(c.feature, c.channels, c.feat_h, c.feat_w,
                                                    c.spec, c.readout, &grad_f);
        double* coords[4] = {&c.spec.box.x, &c.spec.box.y, &c.spec.box.w, &c.spec.box.h};
        const double analytic[4] = {gb.x, gb.y, gb.w, gb.h};
        for (int k = 0; k < 4; ++k) {
            const double saved = *coords[k];
            *coords[k] = saved + step;
            const double up = warp_loss(c);
            *coords[k] = saved - step;
            const double dn = warp_loss(c);
            *coords[k] = saved;
            const double numeric = (up - dn) / (2 * step);
            result.max_rel_err =
                std::max(result.max_rel_err, rel_error(analytic[k], numeric, 1e-6));
            ++result.comparisons;
        }
    }
    return result;
}

// d(loss)/dF against central differences on a sample of feature cells
inline GradCheckResult check_roi_warp_feature_gradients(int trials, std::uint64_t seed) {
    using namespace gradcheck_detail;
    Rng rng = Rng::from(seed, 0x7766656174ull);
    GradCheckResult result{"roi_warp.feature_gradients", 0, 1e-6, 0};
    const double step = 1e-3;
    for (int t = 0; t < trials; ++t) {
        WarpConfig c = random_warp_config(rng);
        std::vector<double> grad_f(c.feature.size(), 0.0);
        roi_warp_backward_values(c.feature, c.channels, c.feat_h, c.feat_w, c.spec, c.readout,
                                 &grad_f);
        for (int probe = 0; probe < 12; ++probe) {
            const std::size_t i = std::size_t(rng.next_u64() % c.feature.size());
            const double saved = c.feature[i];
            c.feature[i] = saved + step;
            const double up = warp_loss(c);
            c.feature[i] = saved - step;
            const double dn = warp_loss(c);
            c.feature[i] = saved;
            const double numeric = (up - dn) / (2 * step);
            result.max_rel_err = std::max(result.max_rel_err, rel_error(grad_f[i], numeric, 1e-8));
            ++result.comparisons;
        }
    }
    return result;
}

// sigmoid -> resize -> broadcast -> elementwise product path, both inputs
inline GradCheckResult check_masking_gradients(int trials, std::uint64_t seed) {
    using namespace gradcheck_detail;
    Rng rng = Rng::from(seed, 0x6d61736bull);
    GradCheckResult result{"masking.gradients", 0, 1e-6, 0};
    const double step = 1e-5;
    for (int t = 0; t < trials; ++t) {
        const int m = 6, k = 3;
        const std::size_t channels = 2;
        std::vector<double> logits_v(std::size_t(m) * std::size_t(m));
        for (auto& v : logits_v) v = rng.normal();
        std::vector<double> feat_v(channels * k * k);
        for (auto& v : feat_v) v = rng.normal();
        std::vector<double> readout(channels * k * k);
        for (auto& v : readout) v = rng.normal();

        auto forward = [&](const std::vector<double>& lv, const std::vector<double>& fv,
                           Tape<double>* tape, Tensor<double>* logits_out,
                           Tensor<double>* feat_out) {
            Tensor<double> logits = Tensor<double>::from_data(
                {std::size_t(m) * std::size_t(m)}, lv, tape != nullptr);
            Tensor<double> feat =
                Tensor<double>::from_data({channels, k, k}, fv, tape != nullptr);
            Tensor<double> probs = ops::reshape(tape, ops::sigmoid(tape, logits),
                                                {std::size_t(m), std::size_t(m)});
            Tensor<double> resized = ops::resize_bilinear(tape, probs, k, k);
            Tensor<double> masked = ops::elementwise_mul(
                tape, feat, ops::broadcast_channels(tape, resized, channels));
            Tensor<double> weights = Tensor<double>::from_data({channels, k, k}, readout);
            Tensor<double> loss = ops::sum(tape, ops::elementwise_mul(tape, masked, weights));
            if (logits_out) *logits_out = logits;
            if (feat_out) *feat_out = feat;
            return loss;
        };

        Tape<double> tape;
        Tensor<double> logits, feat;
        Tensor<double> loss = forward(logits_v, feat_v, &tape, &logits, &feat);
        tape.backward(loss);

        for (int probe = 0; probe < 8; ++probe) {
            {
                const std::size_t i = std::size_t(rng.next_u64() % logits_v.size());
                std::vector<double> lv = logits_v;
                lv[i] += step;
                const double up = forward(lv, feat_v, nullptr, nullptr, nullptr).item();
                lv[i] -= 2 * step;
                const double dn = forward(lv, feat_v, nullptr, nullptr, nullptr).item();
                const double numeric = (up - dn) / (2 * step);
                result.max_rel_err = std::max(result.max_rel_err,
                                              rel_error(logits.grads()[i], numeric, 1e-8));
                ++result.comparisons;
            }
            {
                const std::size_t i = std::size_t(rng.next_u64() % feat_v.size());
                std::vector<double> fv = feat_v;
                fv[i] += step;
                const double up = forward(logits_v, fv, nullptr, nullptr, nullptr).item();
                fv[i] -= 2 * step;
                const double dn = forward(logits_v, fv, nullptr, nullptr, nullptr).item();
                const double numeric = (up - dn) / (2 * step);
                result.max_rel_err =
                    std::max(result.max_rel_err, rel_error(feat.grads()[i], numeric, 1e-8));
                ++result.comparisons;
            }
        }
    }
    return result;
}

// the three loss primitives against central differences
inline GradCheckResult check_loss_gradients(int trials, std::uint64_t seed) {
    using namespace gradcheck_detail;
    Rng rng = Rng::from(seed, 0x6c6f7373ull);
    GradCheckResult result{"loss.gradients", 0, 1e-6, 0};
    const double step = 1e-5;
    for (int t = 0; t < trials; ++t) {
        {
            const std::size_t k = 9;
            std::vector<double> logits_v(k), targets(k);
            for (auto& v : logits_v) v = rng.normal();
            for (auto& v : targets) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
            Tape<double> tape;
            Tensor<double> logits = Tensor<double>::from_data({k}, logits_v, true);
            tape.backward(ops::bce_with_logits_mean(&tape, logits, targets));
            for (std::size_t i = 0; i < k; ++i) {
                std::vector<double> lv = logits_v;
                lv[i] += step;
                const double up =
                    ops::bce_with_logits_mean<double>(nullptr,
                                                      Tensor<double>::from_data({k}, lv), targets)
                        .item();
                lv[i] -= 2 * step;
                const double dn =
                    ops::bce_with_logits_mean<double>(nullptr,
                                                      Tensor<double>::from_data({k}, lv), targets)
                        .item();
                result.max_rel_err =
                    std::max(result.max_rel_err,
                             rel_error(logits.grads()[i], (up - dn) / (2 * step), 1e-8));
                ++result.comparisons;
            }
        }
        {
            const std::size_t n = 5;
            std::vector<double> logits_v(n);
            for (auto& v : logits_v) v = rng.normal();
            const int label = rng.uniform_int(0, int(n) - 1);
            Tape<double> tape;
            Tensor<double> logits = Tensor<double>::from_data({n}, logits_v, true);
            tape.backward(ops::softmax_cross_entropy(&tape, logits, label));
            for (std::size_t i = 0; i < n; ++i) {
                std::vector<double> lv = logits_v;
                lv[i] += step;
                const double up = ops::softmax_cross_entropy<double>(
                                      nullptr, Tensor<double>::from_data({n}, lv), label)
                                      .item();
                lv[i] -= 2 * step;
                const double dn = ops::softmax_cross_entropy<double>(
                                      nullptr, Tensor<double>::from_data({n}, lv), label)
                                      .item();
                result.max_rel_err =
                    std::max(result.max_rel_err,
                             rel_error(logits.grads()[i], (up - dn) / (2 * step), 1e-8));
                ++result.comparisons;
            }
        }
        {
            const std::size_t k = 4;
            std::vector<double> pred_v(k), targets(k);
            for (std::size_t i = 0; i < k; ++i) {
                targets[i] = rng.normal();
                // keep |pred - target| away from the curvature switch at 1
                double d = rng.uniform(-0.8, 0.8);
                if (rng.uniform() < 0.5) d += (d >= 0 ? 1.3 : -1.3);
                pred_v[i] = targets[i] + d;
            }
            Tape<double> tape;
            Tensor<double> pred = Tensor<double>::from_data({k}, pred_v, true);
            tape.backward(ops::smooth_l1_sum(&tape, pred, targets));
            for (std::size_t i = 0; i < k; ++i) {
                std::vector<double> pv = pred_v;
                pv[i] += step;
                const double up =
                    ops::smooth_l1_sum<double>(nullptr, Tensor<double>::from_data({k}, pv),
                                               targets)
                        .item();
                pv[i] -= 2 * step;
                const double dn =
                    ops::smooth_l1_sum<double>(nullptr, Tensor<double>::from_data({k}, pv),
                                               targets)
                        .item();
                result.max_rel_err =
                    std::max(result.max_rel_err,
                             rel_error(pred.grads()[i], (up - dn) / (2 * step), 1e-8));
                ++result.comparisons;
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// end-to-end check on a tiny cascade

// 8-channel 24x24 feature map, two categories, m = 8, 8x8 warp
inline CascadeConfig tiny_cascade_config(int train_stages) {
    CascadeConfig cfg;
    cfg.num_categories = 2;
    cfg.image_channels = 1;
    cfg.conv1_channels = 4;
    cfg.conv2_channels = 8;
    cfg.conv3_channels = 8;
    cfg.rpn_channels = 8;
    cfg.mask_resolution = 8;
    cfg.warp_width = 8;
    cfg.warp_height = 8;
    cfg.stage2_pool = 2;
    cfg.stage3_pool = 4;
    cfg.stage2_fc_dim = 16;
    cfg.stage3_fc_dim = 16;
    cfg.anchor_scales = {16, 40};
    cfg.anchor_ratios = {1.0};
    cfg.proposal_count = 12;
    cfg.min_box_size = 4;
    cfg.anchors_per_image = 24;
    cfg.rois_per_image = 6;
    cfg.train_stages = train_stages;
    return cfg;
}

inline DatasetSpec tiny_cascade_scene_spec() {
    DatasetSpec spec;
    spec.num_scenes = 4;
    spec.image_width = 192;  // stride 8 -> 24x24 features
    spec.image_height = 192;
    spec.num_categories = 2;
    spec.min_instances = 2;
    spec.max_instances = 3;
    spec.noise_amplitude = 0.01;
    spec.adjacency_prob = 0.0;
    spec.seed = 99;
    return spec;
}

// Every parameter of the unified objective against central differences, with
// routing frozen to the plan captured at the base point.
inline GradCheckResult check_end_to_end_gradients_with(const CascadeConfig& cfg,
                                                       const DatasetSpec& scene_spec,
                                                       std::uint64_t seed,
                                                       const std::string& name) {
    GradCheckResult result{name, 0, 1e-3, 0};
    CascadeModel<double> model;
    model.cfg = cfg;
    model.init(seed);
    const Scene scene = generate_scene(scene_spec, 1);

    Rng rng = Rng::from(seed, 0xe2eull);
    TrainPlan plan;
    Tape<double> tape;
    Tensor<double> loss = training_loss(model, &tape, scene, &rng, nullptr, &plan, nullptr);
    backward(tape, loss, model.params);

    auto loss_at = [&]() {
        return training_loss(model, (Tape<double>*)nullptr, scene, nullptr, &plan, nullptr,
                             nullptr)
            .item();
    };
    auto fd_at = [&](Tensor<double>& t, std::size_t i, double step) {
        const double saved = t.values()[i];
        t.values()[i] = saved + step;
        const double up = loss_at();
        t.values()[i] = saved - step;
        const double dn = loss_at();
        t.values()[i] = saved;
        return (up - dn) / (2 * step);
    };

    // The quotient at the base step can straddle a ReLU/max/kappa kink (a
    // parameter nudge shifts whole activation maps). The derivative exists
    // away from those measure-zero points, so when an entry misses tolerance
    // the step is refined; a wrong analytic gradient fails at every step.
    for (auto& [name, tensor] : const_cast<ParameterStore<double>&>(model.params).entries()) {
        Tensor<double>& t = const_cast<Tensor<double>&>(tensor);
        for (std::size_t i = 0; i < t.numel(); ++i) {
            double err = 0;
            for (double step : {1e-5, 1e-6, 1e-7, 3e-8}) {
                err = gradcheck_detail::rel_error(t.grads()[i], fd_at(t, i, step), 1e-5);
                if (err <= result.tolerance) break;
            }
            result.max_rel_err = std::max(result.max_rel_err, err);
            ++result.comparisons;
        }
    }
    model.params.zero_grad();
    return result;
}

inline GradCheckResult check_end_to_end_gradients(int train_stages, std::uint64_t seed) {
    return check_end_to_end_gradients_with(
        tiny_cascade_config(train_stages), tiny_cascade_scene_spec(), seed,
        train_stages == 5 ? "end_to_end.five_stage" : "end_to_end.three_stage");
}

// ---------------------------------------------------------------------------

inline std::vector<GradCheckResult> run_all_gradchecks(std::uint64_t seed, int warp_trials = 100,
                                                       int small_trials = 20) {
    std::vector<GradCheckResult> results;
    results.push_back(check_roi_warp_box_gradients(warp_trials, seed));
    results.push_back(check_roi_warp_feature_gradients(warp_trials, seed));
    results.push_back(check_masking_gradients(small_trials, seed));
    results.push_back(check_loss_gradients(small_trials, seed));
    results.push_back(check_end_to_end_gradients(3, seed));
    results.push_back(check_end_to_end_gradients(5, seed));
    return results;
}

inline std::string format_gradcheck_report(const std::vector<GradCheckResult>& results) {
    std::ostringstream os;
    bool all = true;
    for (const GradCheckResult& r : results) {
        os << (r.passed() ? "PASS" : "FAIL") << "  " << r.name << "  max_rel_err=";
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.3e", r.max_rel_err);
        os << buf << "  tolerance=";
        std::snprintf(buf, sizeof(buf), "%.0e", r.tolerance);
        os << buf << "  comparisons=" << r.comparisons << "\n";
        all = all && r.passed();
    }
    os << (all ? "all gradient checks passed" : "GRADIENT CHECK FAILURES PRESENT") << "\n";
    return os.str();
}

inline bool all_passed(const std::vector<GradCheckResult>& results) {
    for (const auto& r : results)
        if (!r.passed()) return false;
    return true;
}

}  // namespace iseg
