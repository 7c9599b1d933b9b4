#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "iseg/geometry.hpp"
#include "iseg/tensor.hpp"

// Differentiable RoI warping: crop-and-resize of a feature map by separable
// bilinear interpolation, differentiable with respect to the feature map and
// to the four box coordinates.
//
// A box spanning [x-w/2, x+w/2) is resampled onto target indices
// u' in [-W'/2, W'/2); sample position u' maps to s = x + (u'/W')*w on the
// feature axis and picks up weight kappa(s - u) = max(0, 1-|s - u|) from the
// feature cell at integer coordinate u. Positions outside [0, W) contribute
// zero. The whole operation is a sparse linear map in the feature values, so
// the feature backward is its exact transpose; the box backward follows from
// kappa'(t) = -sign(t) on 0 < |t| < 1 and 0 at the kinks.

namespace iseg {

struct WarpSpec {
    Box box;           // feature-map coordinates
    int out_w = 0, out_h = 0;
};

// kappa(x + (u'/out_w)*w - u), with u' counted from -out_w/2
inline double bilinear_weight(double u, double u_prime, double x, double w, int out_w) {
    const double t = x + (u_prime / out_w) * w - u;
    return std::max(0.0, 1.0 - std::abs(t));
}

// d/dt of kappa, with the subgradient 0 chosen at t = 0 and |t| = 1
inline double bilinear_weight_derivative(double t) {
    if (t > 0.0 && t < 1.0) return -1.0;
    if (t < 0.0 && t > -1.0) return 1.0;
    return 0.0;
}

namespace detail {

// per output index: the <= 2 feature cells with nonzero kappa on one axis
struct AxisTap {
    int cell[2] = {-1, -1};     // -1 marks out-of-range (implicit zero pad)
    double weight[2] = {0, 0};
    double dweight[2] = {0, 0};  // d(weight)/d(sample position)
    double pos_coeff = 0;        // d(sample position)/d(extent) = u'/out_size
};

inline std::vector<AxisTap> axis_taps(double center, double extent, int out_size,
                                      int feature_size) {
    std::vector<AxisTap> taps(static_cast<std::size_t>(out_size), AxisTap{});
    for (int i = 0; i < out_size; ++i) {
        const double u_prime = double(i) - double(out_size) / 2.0;
        const double s = center + (u_prime / out_size) * extent;
        AxisTap& tap = taps[std::size_t(i)];
        tap.pos_coeff = u_prime / out_size;
        const double lo = std::floor(s);
        const double frac = s - lo;
        const int c0 = int(lo), c1 = int(lo) + 1;
        if (c0 >= 0 && c0 < feature_size) {
            tap.cell[0] = c0;
            tap.weight[0] = 1.0 - frac;                       // kappa(frac)
            tap.dweight[0] = bilinear_weight_derivative(frac);  // t = s - c0 >= 0
        }
        if (frac > 0.0 && c1 >= 0 && c1 < feature_size) {
            tap.cell[1] = c1;
            tap.weight[1] = frac;                              // kappa(frac - 1)
            tap.dweight[1] = bilinear_weight_derivative(frac - 1.0);
        }
    }
    return taps;
}

}  // namespace detail

// out[c,v',u'] = sum_{u,v} g(u,u'|x,w) g(v,v'|y,h) F[c,v,u]
template <typename T>
std::vector<T> roi_warp_forward_values(const std::vector<T>& feature, int channels,
                                       int feat_h, int feat_w, const WarpSpec& spec) {
    require(spec.box.w > 0 && spec.box.h > 0, "roi warp needs positive box extents");
    require(spec.out_w >= 1 && spec.out_h >= 1, "roi warp needs positive output size");
    const auto tx = detail::axis_taps(spec.box.x, spec.box.w, spec.out_w, feat_w);
    const auto ty = detail::axis_taps(spec.box.y, spec.box.h, spec.out_h, feat_h);
    std::vector<T> out(std::size_t(channels) * std::size_t(spec.out_h) * std::size_t(spec.out_w),
                       T(0));
    for (int c = 0; c < channels; ++c) {
        const T* fc = feature.data() + std::size_t(c) * std::size_t(feat_h) * std::size_t(feat_w);
        T* oc = out.data() + std::size_t(c) * std::size_t(spec.out_h) * std::size_t(spec.out_w);
        for (int vy = 0; vy < spec.out_h; ++vy) {
            for (int vx = 0; vx < spec.out_w; ++vx) {
                double acc = 0;
                for (int a = 0; a < 2; ++a) {
                    if (ty[std::size_t(vy)].cell[a] < 0) continue;
                    const double wy = ty[std::size_t(vy)].weight[a];
                    const T* row = fc + std::size_t(ty[std::size_t(vy)].cell[a]) * std::size_t(feat_w);
                    for (int b = 0; b < 2; ++b) {
                        if (tx[std::size_t(vx)].cell[b] < 0) continue;
                        acc += wy * tx[std::size_t(vx)].weight[b] *
                               double(row[tx[std::size_t(vx)].cell[b]]);
                    }
                }
                oc[vy * spec.out_w + vx] = T(acc);
            }
        }
    }
    return out;
}

struct BoxGrad {
    double x = 0, y = 0, w = 0, h = 0;
};

// Transpose map into grad_feature plus the four box derivatives, both
// accumulated (buffers are not cleared here).
template <typename T>
BoxGrad roi_warp_backward_values(const std::vector<T>& feature, int channels, int feat_h,
                                 int feat_w, const WarpSpec& spec,
                                 const std::vector<T>& grad_out,
                                 std::vector<T>* grad_feature) {
    require_dims(grad_out.size() == std::size_t(channels) * std::size_t(spec.out_h) *
                                        std::size_t(spec.out_w),
                 "roi warp grad_out shape mismatch");
    if (grad_feature)
        require_dims(grad_feature->size() == feature.size(),
                     "roi warp grad_feature shape mismatch");
    const auto tx = detail::axis_taps(spec.box.x, spec.box.w, spec.out_w, feat_w);
    const auto ty = detail::axis_taps(spec.box.y, spec.box.h, spec.out_h, feat_h);
    BoxGrad gb;
    for (int c = 0; c < channels; ++c) {
        const T* fc = feature.data() + std::size_t(c) * std::size_t(feat_h) * std::size_t(feat_w);
        const T* go = grad_out.data() +
                      std::size_t(c) * std::size_t(spec.out_h) * std::size_t(spec.out_w);
        T* gf = grad_feature
                    ? grad_feature->data() + std::size_t(c) * std::size_t(feat_h) * std::size_t(feat_w)
                    : nullptr;
        for (int vy = 0; vy < spec.out_h; ++vy) {
            const auto& tyv = ty[std::size_t(vy)];
            for (int vx = 0; vx < spec.out_w; ++vx) {
                const auto& txv = tx[std::size_t(vx)];
                const double g = double(go[vy * spec.out_w + vx]);
                if (g == 0.0) continue;
                for (int a = 0; a < 2; ++a) {
                    if (tyv.cell[a] < 0) continue;
                    const T* row = fc + std::size_t(tyv.cell[a]) * std::size_t(feat_w);
                    T* grow = gf ? gf + std::size_t(tyv.cell[a]) * std::size_t(feat_w) : nullptr;
                    for (int b = 0; b < 2; ++b) {
                        if (txv.cell[b] < 0) continue;
                        const double f = double(row[txv.cell[b]]);
                        if (grow) grow[txv.cell[b]] += T(g * tyv.weight[a] * txv.weight[b]);
                        // d out / d x = kappa'(tx) * kappa(ty) * F, etc.
                        gb.x += g * txv.dweight[b] * tyv.weight[a] * f;
                        gb.w += g * txv.dweight[b] * txv.pos_coeff * tyv.weight[a] * f;
                        gb.y += g * tyv.dweight[a] * txv.weight[b] * f;
                        gb.h += g * tyv.dweight[a] * tyv.pos_coeff * txv.weight[b] * f;
                    }
                }
            }
        }
    }
    return gb;
}

namespace ops {

// Tape-recorded warp. `box4` is an (x, y, w, h) tensor in image coordinates;
// `feature_stride` converts it to feature-map coordinates. Gradients flow
// into both the feature map and the box tensor.
template <typename T>
Tensor<T> roi_warp(Tape<T>* tape, const Tensor<T>& feature, const Tensor<T>& box4,
                   double feature_stride, int out_h, int out_w,
                   double box_grad_scale = 1.0) {
    require_dims(feature.rank() == 3, "roi_warp feature must be [C,H,W]");
    require_dims(box4.rank() == 1 && box4.numel() == 4, "roi_warp box must have 4 entries");
    const int channels = int(feature.dim(0));
    const int fh = int(feature.dim(1)), fw = int(feature.dim(2));
    WarpSpec spec;
    spec.box = Box{double(box4.values()[0]) / feature_stride,
                   double(box4.values()[1]) / feature_stride,
                   double(box4.values()[2]) / feature_stride,
                   double(box4.values()[3]) / feature_stride};
    spec.out_w = out_w;
    spec.out_h = out_h;
    Tensor<T> out = Tensor<T>::zeros({std::size_t(channels), std::size_t(out_h), std::size_t(out_w)},
                                     track(tape, {&feature, &box4}));
    out.values() = roi_warp_forward_values(feature.values(), channels, fh, fw, spec);
    debug_check_finite(out, "roi_warp");

    if (out.requires_grad()) {
        tape->record([feature, box4, out, spec, channels, fh, fw, feature_stride,
                      box_grad_scale]() {
            std::vector<T>* gf = nullptr;
            if (feature.requires_grad()) gf = &const_cast<Tensor<T>&>(feature).grads();
            const BoxGrad gb = roi_warp_backward_values(feature.values(), channels, fh, fw,
                                                        spec, out.grads(), gf);
            if (box4.requires_grad()) {
                auto& g = const_cast<Tensor<T>&>(box4).grads();
                const double s = box_grad_scale / feature_stride;
                g[0] += T(gb.x * s);
                g[1] += T(gb.y * s);
                g[2] += T(gb.w * s);
                g[3] += T(gb.h * s);
            }
        });
    }
    return out;
}

}  // namespace ops

// Warp to the full warp resolution, then standard max pooling down to the
// stage resolution (e.g. pool 2 -> 14x14, pool 4 -> 7x7 for a 28x28 warp).
template <typename T>
Tensor<T> roi_pool(Tape<T>* tape, const Tensor<T>& feature, const Tensor<T>& box4,
                   double feature_stride, int warp_h, int warp_w, int stage_pool,
                   double box_grad_scale = 1.0) {
    require_dims(warp_h % stage_pool == 0 && warp_w % stage_pool == 0,
                 "stage pool must divide the warp resolution");
    Tensor<T> warped =
        ops::roi_warp(tape, feature, box4, feature_stride, warp_h, warp_w, box_grad_scale);
    return ops::max_pool2d(tape, warped, stage_pool);
}

}  // namespace iseg
