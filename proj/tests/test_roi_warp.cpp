#include <doctest.h>

#include <cmath>

#include "iseg/gradcheck.hpp"
#include "iseg/roi_warp.hpp"
#include "test_util.hpp"

using namespace iseg;
using D = Tensor<double>;

TEST_CASE("bilinear_weight: exact hit, support boundary and midpoint") {
    // sample position x + (u'/W')w = 10 + (-2/4)*4 = 8
    CHECK(bilinear_weight(8, -2, 10, 4, 4) == doctest::Approx(1.0));
    CHECK(bilinear_weight(7, -2, 10, 4, 4) == doctest::Approx(0.0));
    CHECK(bilinear_weight(10, 0, 10.5, 4, 4) == doctest::Approx(0.5));
}

TEST_CASE("bilinear_weight_derivative: signs and kink conventions") {
    CHECK(bilinear_weight_derivative(0.5) == -1.0);
    CHECK(bilinear_weight_derivative(-0.5) == 1.0);
    CHECK(bilinear_weight_derivative(0.0) == 0.0);
    CHECK(bilinear_weight_derivative(1.0) == 0.0);
    CHECK(bilinear_weight_derivative(-1.0) == 0.0);
    CHECK(bilinear_weight_derivative(1.5) == 0.0);
}

TEST_CASE("roi_warp forward: constant feature map warps to the same constant") {
    const int C = 2, H = 12, W = 12;
    std::vector<double> f(std::size_t(C * H * W), 3.25);
    WarpSpec spec{Box{6.1, 5.7, 4.4, 3.9}, 4, 4};
    const auto out = roi_warp_forward_values(f, C, H, W, spec);
    for (double v : out) CHECK(v == doctest::Approx(3.25).epsilon(1e-12));
}

TEST_CASE("roi_warp forward: integer-aligned box reproduces the exact crop") {
    const int C = 1, H = 10, W = 10;
    std::vector<double> f(100);
    for (int i = 0; i < 100; ++i) f[std::size_t(i)] = i * 0.37 - 3;
    // width 4 box with x0 = 2, y0 = 3: samples land exactly on cells 2..5 x 3..6
    WarpSpec spec{Box{4.0, 5.0, 4.0, 4.0}, 4, 4};
    const auto out = roi_warp_forward_values(f, C, H, W, spec);
    for (int vy = 0; vy < 4; ++vy)
        for (int vx = 0; vx < 4; ++vx)
            CHECK(out[std::size_t(vy * 4 + vx)] ==
                  doctest::Approx(f[std::size_t((3 + vy) * W + 2 + vx)]).epsilon(1e-14));
}

TEST_CASE("roi_warp forward: linear ramp is reproduced analytically") {
    const int C = 1, H = 16, W = 16;
    std::vector<double> f(std::size_t(H * W));
    for (int v = 0; v < H; ++v)
        for (int u = 0; u < W; ++u) f[std::size_t(v * W + u)] = u;
    WarpSpec spec{Box{7.3, 8.1, 5.0, 6.0}, 4, 4};
    const auto out = roi_warp_forward_values(f, C, H, W, spec);
    for (int vy = 0; vy < 4; ++vy)
        for (int vx = 0; vx < 4; ++vx) {
            const double u_prime = vx - 2.0;
            const double expected = spec.box.x + (u_prime / 4.0) * spec.box.w;
            CHECK(std::abs(out[std::size_t(vy * 4 + vx)] - expected) < 1e-12);
        }
}

TEST_CASE("roi_warp forward: out-of-bounds samples read zero") {
    const int C = 1, H = 6, W = 6;
    std::vector<double> f(36, 1.0);
    WarpSpec spec{Box{0.0, 3.0, 4.0, 2.0}, 4, 2};  // spills over the left edge
    const auto out = roi_warp_forward_values(f, C, H, W, spec);
    // leftmost samples sit at x = -2 and -1: fully outside
    CHECK(out[0] == 0.0);
    CHECK(out[1] == 0.0);
    CHECK(out[3] == doctest::Approx(1.0));
    CHECK_THROWS_AS(roi_warp_forward_values(f, C, H, W, WarpSpec{Box{3, 3, 0, 2}, 4, 4}),
                    ContractError);
}

TEST_CASE("roi_warp backward: zero grad_out gives zero gradients") {
    const int C = 2, H = 8, W = 8;
    Rng rng(3);
    std::vector<double> f(std::size_t(C * H * W));
    for (auto& v : f) v = rng.normal();
    WarpSpec spec{Box{4.2, 3.9, 3.0, 3.0}, 4, 4};
    std::vector<double> gout(std::size_t(C * 16), 0.0), gf(f.size(), 0.0);
    const BoxGrad gb = roi_warp_backward_values(f, C, H, W, spec, gout, &gf);
    CHECK(gb.x == 0.0);
    CHECK(gb.w == 0.0);
    for (double v : gf) CHECK(v == 0.0);
}

TEST_CASE("roi_warp backward: constant feature map has zero box gradient") {
    const int C = 1, H = 14, W = 14;
    std::vector<double> f(std::size_t(H * W), 2.0);
    WarpSpec spec{Box{7.3, 6.8, 4.5, 3.7}, 4, 4};  // strictly interior
    Rng rng(9);
    std::vector<double> gout(16);
    for (auto& v : gout) v = rng.normal();
    std::vector<double> gf(f.size(), 0.0);
    const BoxGrad gb = roi_warp_backward_values(f, C, H, W, spec, gout, &gf);
    CHECK(std::abs(gb.x) < 1e-12);
    CHECK(std::abs(gb.y) < 1e-12);
    CHECK(std::abs(gb.w) < 1e-12);
    CHECK(std::abs(gb.h) < 1e-12);
}

TEST_CASE("roi_warp: linearity in the feature map to machine epsilon") {
    Rng rng(13);
    const int C = 2, H = 10, W = 10;
    std::vector<double> f1(std::size_t(C * H * W)), f2(f1.size());
    for (auto& v : f1) v = rng.normal();
    for (auto& v : f2) v = rng.normal();
    const double alpha = 1.7, beta = -0.6;
    WarpSpec spec{Box{5.1, 4.9, 3.3, 4.1}, 4, 4};
    std::vector<double> mix(f1.size());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * f1[i] + beta * f2[i];
    const auto wmix = roi_warp_forward_values(mix, C, H, W, spec);
    const auto w1 = roi_warp_forward_values(f1, C, H, W, spec);
    const auto w2 = roi_warp_forward_values(f2, C, H, W, spec);
    for (std::size_t i = 0; i < wmix.size(); ++i)
        CHECK(std::abs(wmix[i] - (alpha * w1[i] + beta * w2[i])) < 1e-12);
}

TEST_CASE("roi_warp: forward/backward adjointness over 100 random trials") {
    Rng rng(31);
    for (int t = 0; t < 100; ++t) {
        const int C = rng.uniform_int(1, 3);
        const int H = rng.uniform_int(8, 14), W = rng.uniform_int(8, 14);
        std::vector<double> f(std::size_t(C * H * W));
        for (auto& v : f) v = rng.normal();
        WarpSpec spec{Box{rng.uniform(2, W - 2), rng.uniform(2, H - 2), rng.uniform(1, W / 2.0),
                          rng.uniform(1, H / 2.0)},
                      4, 4};
        std::vector<double> g(std::size_t(C * 16));
        for (auto& v : g) v = rng.normal();
        const auto out = roi_warp_forward_values(f, C, H, W, spec);
        std::vector<double> gf(f.size(), 0.0);
        roi_warp_backward_values(f, C, H, W, spec, g, &gf);
        double lhs = 0, rhs = 0;
        for (std::size_t i = 0; i < out.size(); ++i) lhs += out[i] * g[i];
        for (std::size_t i = 0; i < f.size(); ++i) rhs += f[i] * gf[i];
        CHECK(testutil::rel_error(lhs, rhs, 1e-12) < 1e-10);
    }
}

TEST_CASE("roi_warp: interior bilinear weights sum to one per output cell") {
    const int W = 20;
    const Box box{9.37, 0, 6.13, 1};
    const int out_w = 7;
    for (int i = 0; i < out_w; ++i) {
        const double u_prime = i - out_w / 2.0;
        double total = 0;
        for (int u = 0; u < W; ++u) total += bilinear_weight(u, u_prime, box.x, box.w, out_w);
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("roi_warp box gradients match finite differences (margin-safe configs)") {
    const auto r = check_roi_warp_box_gradients(60, 2024);
    CHECK(r.passed());
    CHECK(r.max_rel_err <= 1e-4);
}

TEST_CASE("roi_warp feature gradients match finite differences") {
    const auto r = check_roi_warp_feature_gradients(60, 2024);
    CHECK(r.passed());
    CHECK(r.max_rel_err <= 1e-6);
}

TEST_CASE("roi_warp tape op: gradients reach both the feature and the box tensors") {
    Rng rng(77);
    const int C = 2, H = 12, W = 12;
    std::vector<double> fv(std::size_t(C * H * W));
    for (auto& v : fv) v = rng.normal();
    // image coordinates with stride 2: feature box (5.35, 5.45, 4.5, 4.3),
    // whose sample positions stay clear of the integer kinks
    const std::vector<double> bv{10.7, 10.9, 9.0, 8.6};
    std::vector<double> weights(std::size_t(C * 16));
    for (auto& v : weights) v = rng.normal();

    auto loss_of = [&](const std::vector<double>& f, const std::vector<double>& b) {
        D feat = D::from_data({2, 12, 12}, f);
        D box = D::from_data({4}, b);
        D out = ops::roi_warp<double>(nullptr, feat, box, 2.0, 4, 4);
        double acc = 0;
        for (std::size_t i = 0; i < out.numel(); ++i) acc += out.values()[i] * weights[i];
        return acc;
    };

    Tape<double> tape;
    D feat = D::from_data({2, 12, 12}, fv, true);
    D box = D::from_data({4}, bv, true);
    D out = ops::roi_warp(&tape, feat, box, 2.0, 4, 4);
    D wt = D::from_data({std::size_t(C * 16)}, weights);
    tape.backward(ops::sum(&tape, ops::elementwise_mul(&tape, ops::reshape(&tape, out, {out.numel()}), wt)));

    for (std::size_t i = 0; i < 4; ++i) {
        auto f = [&](const std::vector<double>& b) { return loss_of(fv, b); };
        const double fd = testutil::finite_difference(f, bv, i, 1e-5);
        CHECK(testutil::rel_error(box.grads()[i], fd, 1e-7) < 1e-5);
    }
    for (int probe = 0; probe < 10; ++probe) {
        const std::size_t i = std::size_t(rng.next_u64() % fv.size());
        auto f = [&](const std::vector<double>& fvals) { return loss_of(fvals, bv); };
        const double fd = testutil::finite_difference(f, fv, i, 1e-5);
        CHECK(testutil::rel_error(feat.grads()[i], fd, 1e-7) < 1e-5);
    }
}

TEST_CASE("roi_pool: stage resolutions 14x14 and 7x7 from a 28x28 warp") {
    const int C = 3, H = 12, W = 12;
    D feat = D::full({3, 12, 12}, 1.5);
    D box = D::from_data({4}, {48.0, 48.0, 40.0, 40.0});  // image coords, stride 8
    D p2 = roi_pool<double>(nullptr, feat, box, 8.0, 28, 28, 2);
    CHECK(p2.shape() == std::vector<std::size_t>{3, 14, 14});
    D p3 = roi_pool<double>(nullptr, feat, box, 8.0, 28, 28, 4);
    CHECK(p3.shape() == std::vector<std::size_t>{3, 7, 7});
    for (double v : p3.values()) CHECK(v == doctest::Approx(1.5));
    CHECK_THROWS_AS(roi_pool<double>(nullptr, feat, box, 8.0, 28, 28, 5), DimensionError);
    (void)C; (void)H; (void)W;
}
