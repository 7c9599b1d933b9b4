// Acceptance suite: runs every gate criterion at its stated tolerance and
// prints one PASS/FAIL line per criterion. Exit status is nonzero if any
// criterion fails. The toy-training criterion trains a full five-stage
// cascade, so the suite takes tens of minutes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "iseg/evaluation.hpp"
#include "iseg/gradcheck.hpp"
#include "iseg/inference.hpp"
#include "oracles.hpp"

using namespace iseg;
namespace fs = std::filesystem;

namespace {

struct Criterion {
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0;
};

std::vector<Criterion> g_results;

template <typename Fn>
void run_criterion(const std::string& name, Fn&& fn) {
    Criterion c;
    c.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        c.pass = fn(c.detail);
    } catch (const std::exception& e) {
        c.pass = false;
        c.detail = std::string("exception: ") + e.what();
    }
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] %-28s %s (%.1fs)\n", c.pass ? "PASS" : "FAIL", c.name.c_str(),
                c.detail.c_str(), c.seconds);
    std::fflush(stdout);
    g_results.push_back(c);
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.3e", v);
    return buf;
}

// ---------------------------------------------------------------------------

bool roi_warp_gradient_fidelity(std::string& detail) {
    const auto box = check_roi_warp_box_gradients(120, 20260808);
    const auto feat = check_roi_warp_feature_gradients(120, 20260808);
    detail = "box max rel err " + fmt(box.max_rel_err) + " (tol 1e-4, " +
             std::to_string(box.comparisons) + " cmp), feature " + fmt(feat.max_rel_err) +
             " (tol 1e-6)";
    return box.passed() && feat.passed();
}

bool linearity_and_adjointness(std::string& detail) {
    Rng rng(424242);
    double worst_linearity = 0, worst_adjoint = 0;
    for (int t = 0; t < 100; ++t) {
        const int C = rng.uniform_int(1, 3);
        const int H = rng.uniform_int(8, 16), W = rng.uniform_int(8, 16);
        std::vector<double> f1(std::size_t(C * H * W)), f2(f1.size());
        for (auto& v : f1) v = rng.normal();
        for (auto& v : f2) v = rng.normal();
        WarpSpec spec{Box{rng.uniform(2, W - 2), rng.uniform(2, H - 2),
                          rng.uniform(1.0, W / 2.0), rng.uniform(1.0, H / 2.0)},
                      4, 4};
        const double alpha = rng.uniform(-2, 2), beta = rng.uniform(-2, 2);
        std::vector<double> mix(f1.size());
        for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * f1[i] + beta * f2[i];
        const auto wmix = roi_warp_forward_values(mix, C, H, W, spec);
        const auto w1 = roi_warp_forward_values(f1, C, H, W, spec);
        const auto w2 = roi_warp_forward_values(f2, C, H, W, spec);
        for (std::size_t i = 0; i < wmix.size(); ++i)
            worst_linearity =
                std::max(worst_linearity, std::abs(wmix[i] - (alpha * w1[i] + beta * w2[i])));

        std::vector<double> g(wmix.size());
        for (auto& v : g) v = rng.normal();
        std::vector<double> gf(f1.size(), 0.0);
        roi_warp_backward_values(f1, C, H, W, spec, g, &gf);
        double lhs = 0, rhs = 0;
        for (std::size_t i = 0; i < g.size(); ++i) lhs += w1[i] * g[i];
        for (std::size_t i = 0; i < f1.size(); ++i) rhs += f1[i] * gf[i];
        worst_adjoint = std::max(
            worst_adjoint, std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-12}));
    }
    detail = "linearity " + fmt(worst_linearity) + " (tol 1e-12 abs), adjoint " +
             fmt(worst_adjoint) + " (tol 1e-10 rel), 100 trials";
    return worst_linearity <= 1e-12 && worst_adjoint <= 1e-10;
}

bool bilinear_exactness(std::string& detail) {
    Rng rng(777);
    double worst_ramp = 0, worst_crop = 0;
    for (int t = 0; t < 50; ++t) {
        const int H = rng.uniform_int(12, 20), W = rng.uniform_int(12, 20);
        std::vector<double> ramp(std::size_t(H * W));
        for (int v = 0; v < H; ++v)
            for (int u = 0; u < W; ++u) ramp[std::size_t(v * W + u)] = u;
        const int out = 4;
        WarpSpec spec{Box{rng.uniform(4.0, W - 4.0), rng.uniform(4.0, H - 4.0),
                          rng.uniform(2.0, 5.0), rng.uniform(2.0, 5.0)},
                      out, out};
        const auto warped = roi_warp_forward_values(ramp, 1, H, W, spec);
        for (int vy = 0; vy < out; ++vy)
            for (int vx = 0; vx < out; ++vx) {
                const double expected = spec.box.x + ((vx - out / 2.0) / out) * spec.box.w;
                worst_ramp = std::max(worst_ramp,
                                      std::abs(warped[std::size_t(vy * out + vx)] - expected));
            }

        // integer-aligned box of size out x out reproduces the exact crop
        std::vector<double> f(std::size_t(H * W));
        for (auto& v : f) v = rng.normal();
        const int x0 = rng.uniform_int(0, W - out - 1), y0 = rng.uniform_int(0, H - out - 1);
        WarpSpec crop{Box{x0 + out / 2.0, y0 + out / 2.0, double(out), double(out)}, out, out};
        const auto cropped = roi_warp_forward_values(f, 1, H, W, crop);
        for (int vy = 0; vy < out; ++vy)
            for (int vx = 0; vx < out; ++vx)
                worst_crop = std::max(worst_crop,
                                      std::abs(cropped[std::size_t(vy * out + vx)] -
                                               f[std::size_t((y0 + vy) * W + x0 + vx)]));
    }
    detail = "ramp err " + fmt(worst_ramp) + " (tol 1e-12), crop err " + fmt(worst_crop) +
             " (exact)";
    return worst_ramp <= 1e-12 && worst_crop == 0.0;
}

bool end_to_end_differentiation(std::string& detail) {
    const auto three = check_end_to_end_gradients(3, 7);
    const auto five = check_end_to_end_gradients(5, 7);
    detail = "3-stage max rel err " + fmt(three.max_rel_err) + ", 5-stage " +
             fmt(five.max_rel_err) + " (tol 1e-3, " +
             std::to_string(three.comparisons + five.comparisons) + " parameters)";
    return three.passed() && five.passed();
}

bool oracle_equivalence(std::string& detail) {
    // NMS against the literal reference on 1000 random boxes
    Rng rng(555);
    std::vector<std::pair<Box, double>> cands;
    for (int i = 0; i < 1000; ++i)
        cands.emplace_back(Box{rng.uniform(0, 90), rng.uniform(0, 90), rng.uniform(2, 30),
                               rng.uniform(2, 30)},
                           rng.uniform());
    const bool nms_ok = nms(cands, 0.5) == oracle::nms_reference(cands, 0.5) &&
                        nms(cands, 0.7) == oracle::nms_reference(cands, 0.7);

    // box IoU against grid counting
    double worst_box = 0;
    for (int t = 0; t < 40; ++t) {
        const Box a{rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(1, 6), rng.uniform(1, 6)};
        const Box b{rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(1, 6), rng.uniform(1, 6)};
        worst_box = std::max(worst_box, std::abs(box_iou(a, b) - oracle::box_iou_grid(a, b)));
    }

    // mask IoU against direct bit counting
    double worst_mask = 0;
    for (int t = 0; t < 40; ++t) {
        BinaryMask a(24, 24), b(24, 24);
        for (auto& bit : a.bits) bit = rng.uniform() < 0.35 ? 1 : 0;
        for (auto& bit : b.bits) bit = rng.uniform() < 0.35 ? 1 : 0;
        std::size_t inter = 0, uni = 0;
        for (std::size_t i = 0; i < a.bits.size(); ++i) {
            inter += (a.bits[i] && b.bits[i]) ? 1 : 0;
            uni += (a.bits[i] || b.bits[i]) ? 1 : 0;
        }
        const double direct = uni == 0 ? 0.0 : double(inter) / double(uni);
        worst_mask = std::max(worst_mask, std::abs(mask_iou(a, b) - direct));
    }

    // AP against hand-computed precision/recall values
    const bool ap_ok = average_precision({1}, 1) == 1.0 &&
                       average_precision({0, 1}, 1) == 0.5 &&
                       average_precision({1, 1}, 2) == 1.0 &&
                       std::abs(average_precision({1, 0, 1}, 2) - 5.0 / 6.0) < 1e-15 &&
                       average_precision({1, 0, 0}, 1) == 1.0 &&
                       average_precision({0, 0}, 0) == 0.0;

    detail = std::string("nms ") + (nms_ok ? "exact" : "MISMATCH") + ", box iou err " +
             fmt(worst_box) + ", mask iou err " + fmt(worst_mask) + " (tol 1e-3), AP cases " +
             (ap_ok ? "exact" : "MISMATCH");
    return nms_ok && worst_box <= 1e-3 && worst_mask <= 1e-3 && ap_ok;
}

// the desk-scale training configuration used by the training criterion
CascadeConfig desk_config() {
    CascadeConfig cfg;
    cfg.num_categories = 2;
    cfg.conv1_channels = 12;
    cfg.conv2_channels = 24;
    cfg.conv3_channels = 24;
    cfg.rpn_channels = 24;
    cfg.train_stages = 5;
    cfg.lr_schedule = {{0.01, 2800}, {0.001, 1200}};
    return cfg;
}

DatasetSpec desk_train_spec() {
    DatasetSpec spec;
    spec.num_scenes = 500;
    spec.image_width = 96;
    spec.image_height = 96;
    spec.min_instances = 1;
    spec.max_instances = 4;
    spec.noise_amplitude = 0.02;
    spec.adjacency_prob = 0.25;
    spec.seed = 11;
    return spec;
}

bool toy_training_target(std::string& detail) {
    const auto t0 = std::chrono::steady_clock::now();
    const Dataset train = generate_dataset(desk_train_spec());
    DatasetSpec espec = desk_train_spec();
    espec.num_scenes = 100;
    espec.seed = 12;
    const Dataset eval = generate_dataset(espec);

    CascadeModel<float> model;
    model.cfg = desk_config();
    model.init(1);
    TrainOptions opts;
    opts.seed = 2;
    std::vector<LossReport> history;
    train_cascade(model, train, opts, nullptr, &history);
    const double train_minutes =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;

    // smoothed descent: consecutive 500-iteration block means must decrease
    bool monotone = true;
    std::vector<double> block_means;
    for (std::size_t start = 0; start + 500 <= history.size(); start += 500) {
        double m = 0;
        for (std::size_t i = start; i < start + 500; ++i) m += history[i].total;
        block_means.push_back(m / 500.0);
    }
    for (std::size_t i = 1; i < block_means.size(); ++i)
        if (block_means[i] > block_means[i - 1]) monotone = false;

    const auto records = run_inference_over_dataset(model, eval, 2);
    const auto rm = evaluate_map(records, eval, {0.5, 0.7}, MatchKind::mask);
    const double map50 = rm.mean_ap.at(0.5);

    std::ostringstream os;
    os << "map_r@0.5 = " << format_fixed(map50, 4) << " (need >= 0.50), "
       << history.size() << " iters in " << format_fixed(train_minutes, 1)
       << " min (limit 60), block means";
    for (double m : block_means) os << ' ' << format_fixed(m, 3);
    detail = os.str();
    return map50 >= 0.50 && int(history.size()) <= 20000 && train_minutes <= 60.0 && monotone;
}

bool structural_conformance(std::string& detail) {
    // untrained model: structure only. The 96x96 image yields 12x12x9 = 1296
    // anchors, far more than 300 NMS survivors.
    CascadeModel<float> model;
    model.cfg = desk_config();
    model.init(99);
    DatasetSpec spec = desk_train_spec();
    spec.num_scenes = 2;
    const Scene scene = generate_scene(spec, 0);
    Tensor<float> image = scene_image_tensor<float>(scene);

    InferenceTrace trace;
    const auto raw = run_cascade_inference(model, image, nullptr, &trace);
    const bool six_hundred =
        trace.proposals.size() == 300 && raw.size() == 600;

    bool handoff = trace.regressed_boxes.size() == trace.proposals.size();
    for (std::size_t i = 0; handoff && i < trace.regressed_boxes.size(); ++i) {
        const Box& a = raw[300 + i].box;
        const Box& b = trace.regressed_boxes[i];
        if (a.x != b.x || a.y != b.y || a.w != b.w || a.h != b.h) handoff = false;
    }

    // voting a single instance is the identity up to binarization
    CascadeConfig vcfg = model.cfg;
    vcfg.mask_resolution = 3;
    RawInstance single;
    single.box = Box::from_corners(4, 4, 7, 7);
    single.scores = {0.05, 0.9, 0.05};
    single.mask_probs = {0.9, 0.2, 0.8, 0.1, 0.7, 0.3, 0.6, 0.4, 0.55};
    const auto voted = mask_voting({single}, vcfg, 16, 16);
    bool identity = false;
    for (const Instance& inst : voted) {
        if (inst.category != 1) continue;
        identity = inst.score == 0.9;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                if (inst.mask.at(4 + j, 4 + i) != (single.mask_probs[std::size_t(i * 3 + j)] >= 0.5))
                    identity = false;
    }

    detail = "proposals " + std::to_string(trace.proposals.size()) + ", raw instances " +
             std::to_string(raw.size()) + " (need 600), stage-4 handoff " +
             (handoff ? "exact" : "MISMATCH") + ", voting identity " +
             (identity ? "ok" : "BROKEN");
    return six_hundred && handoff && identity;
}

// ---------------------------------------------------------------------------
// determinism through the command-line interface

int run_cli(const std::string& args) {
    const std::string cmd = std::string(ISEG_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    return std::system(cmd.c_str());
}

bool same_bytes(const fs::path& a, const fs::path& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    if (!fa || !fb) return false;
    std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    return !sa.empty() && sa == sb;
}

bool determinism(std::string& detail) {
    const fs::path work = fs::current_path() / "acceptance_work";
    fs::create_directories(work);
    const auto p = [&](const char* name) { return (work / name).string(); };

    {
        std::ofstream os(p("spec.cfg"));
        os << "num_scenes = 40\nimage_width = 96\nimage_height = 96\nseed = 11\n";
    }
    {
        CascadeConfig cfg = desk_config();
        cfg.lr_schedule = {{0.01, 120}};
        save_cascade_config(cfg, p("model.cfg"));
    }

    if (run_cli("gendata --config " + p("spec.cfg") + " --out " + p("data.ds")) != 0) {
        detail = "gendata failed";
        return false;
    }

    bool train_ok = true, infer_ok = true, eval_ok = true, grad_ok = true;
    for (const char* tag : {"a", "b"}) {
        const std::string t(tag);
        if (run_cli("train --config " + p("model.cfg") + " --dataset " + p("data.ds") +
                    " --checkpoint " + (work / ("ckpt_" + t)).string() + " --out " +
                    (work / ("loss_" + t)).string() + " --seed 5") != 0)
            train_ok = false;
        if (run_cli("infer --config " + p("model.cfg") + " --dataset " + p("data.ds") +
                    " --checkpoint " + (work / ("ckpt_" + t)).string() + " --out " +
                    (work / ("preds_" + t)).string() + " --threads 2") != 0)
            infer_ok = false;
        if (run_cli("eval --predictions " + (work / ("preds_" + t)).string() + " --dataset " +
                    p("data.ds") + " --out " + (work / ("report_" + t)).string()) != 0)
            eval_ok = false;
        if (run_cli("gradcheck --seed 7 --out " + (work / ("grad_" + t)).string()) != 0)
            grad_ok = false;
    }
    train_ok = train_ok && same_bytes(work / "ckpt_a", work / "ckpt_b") &&
               same_bytes(work / "loss_a", work / "loss_b");
    infer_ok = infer_ok && same_bytes(work / "preds_a", work / "preds_b");
    eval_ok = eval_ok && same_bytes(work / "report_a", work / "report_b");
    grad_ok = grad_ok && same_bytes(work / "grad_a", work / "grad_b");

    detail = std::string("train ") + (train_ok ? "bit-identical" : "DIFFERS") + ", infer " +
             (infer_ok ? "bit-identical" : "DIFFERS") + ", eval " +
             (eval_ok ? "bit-identical" : "DIFFERS") + ", gradcheck " +
             (grad_ok ? "bit-identical" : "DIFFERS");
    return train_ok && infer_ok && eval_ok && grad_ok;
}

}  // namespace

int main() {
    std::printf("acceptance suite\n");
    run_criterion("roi_warp_gradient_fidelity", roi_warp_gradient_fidelity);
    run_criterion("linearity_and_adjointness", linearity_and_adjointness);
    run_criterion("bilinear_exactness", bilinear_exactness);
    run_criterion("end_to_end_differentiation", end_to_end_differentiation);
    run_criterion("oracle_equivalence", oracle_equivalence);
    run_criterion("structural_conformance", structural_conformance);
    run_criterion("determinism", determinism);
    run_criterion("toy_training_target", toy_training_target);

    int failures = 0;
    for (const Criterion& c : g_results)
        if (!c.pass) ++failures;
    std::printf("%d/%zu criteria passed\n", int(g_results.size()) - failures, g_results.size());
    return failures == 0 ? 0 : 1;
}
