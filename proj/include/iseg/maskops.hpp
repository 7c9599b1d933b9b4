#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "iseg/geometry.hpp"

// Conversions between the m x m mask frame attached to a box and image-space
// pixels. Pixel (px, py) is sampled at its center (px+0.5, py+0.5); the mask
// grid covers the box with cell centers at x0 + (j+0.5) * w/m.

namespace iseg {

// Nearest-pixel rasterization of a ground-truth mask restricted to `box`,
// resampled to m x m. Cells whose sample point falls outside the image are
// background.
inline std::vector<std::uint8_t> rasterize_mask_in_box(const BinaryMask& gt, const Box& box,
                                                       int m) {
    std::vector<std::uint8_t> target(std::size_t(m) * std::size_t(m), 0);
    const double bw = box.w / m, bh = box.h / m;
    for (int i = 0; i < m; ++i) {
        const double sy = box.y0() + (i + 0.5) * bh;
        const int py = int(std::floor(sy));
        if (py < 0 || py >= gt.height) continue;
        for (int j = 0; j < m; ++j) {
            const double sx = box.x0() + (j + 0.5) * bw;
            const int px = int(std::floor(sx));
            if (px < 0 || px >= gt.width) continue;
            if (gt.at(px, py)) target[std::size_t(i) * std::size_t(m) + std::size_t(j)] = 1;
        }
    }
    return target;
}

// Bilinear value of an m x m probability grid at image point (x, y), where
// the grid is stretched over `box`. Edge cells extend to the box border;
// points outside the box read 0.
inline double sample_prob_map(const std::vector<double>& probs, int m, const Box& box,
                              double x, double y) {
    if (x < box.x0() || x >= box.x1() || y < box.y0() || y >= box.y1()) return 0.0;
    const double fx = std::clamp((x - box.x0()) / (box.w / m) - 0.5, 0.0, double(m - 1));
    const double fy = std::clamp((y - box.y0()) / (box.h / m) - 0.5, 0.0, double(m - 1));
    const int x0 = int(fx), y0 = int(fy);
    const int x1 = std::min(x0 + 1, m - 1), y1 = std::min(y0 + 1, m - 1);
    const double ax = fx - x0, ay = fy - y0;
    const double top = (1 - ax) * probs[std::size_t(y0) * std::size_t(m) + std::size_t(x0)] +
                       ax * probs[std::size_t(y0) * std::size_t(m) + std::size_t(x1)];
    const double bot = (1 - ax) * probs[std::size_t(y1) * std::size_t(m) + std::size_t(x0)] +
                       ax * probs[std::size_t(y1) * std::size_t(m) + std::size_t(x1)];
    return (1 - ay) * top + ay * bot;
}

// Renders a probability map into a full-image binary mask at `threshold`
// (inclusive).
inline BinaryMask render_mask_to_image(const std::vector<double>& probs, int m, const Box& box,
                                       int img_w, int img_h, double threshold) {
    BinaryMask out(img_w, img_h);
    const int px0 = std::max(0, int(std::floor(box.x0())));
    const int px1 = std::min(img_w, int(std::ceil(box.x1())));
    const int py0 = std::max(0, int(std::floor(box.y0())));
    const int py1 = std::min(img_h, int(std::ceil(box.y1())));
    for (int py = py0; py < py1; ++py)
        for (int px = px0; px < px1; ++px)
            if (sample_prob_map(probs, m, box, px + 0.5, py + 0.5) >= threshold)
                out.set(px, py, true);
    return out;
}

}  // namespace iseg
