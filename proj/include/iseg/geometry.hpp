#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "iseg/common.hpp"

// Boxes, binary masks, anchors, delta coding and NMS. All functions here are
// pure and operate on doubles; they carry no gradients.
//
// A box is center-parameterized and spans the half-open region
// [x - w/2, x + w/2) x [y - h/2, y + h/2).

namespace iseg {

struct Box {
    double x = 0, y = 0, w = 0, h = 0;

    double x0() const { return x - w / 2; }
    double x1() const { return x + w / 2; }
    double y0() const { return y - h / 2; }
    double y1() const { return y + h / 2; }
    double area() const { return w * h; }

    static Box from_corners(double x0, double y0, double x1, double y1) {
        return Box{(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0};
    }

    bool valid() const { return w > 0 && h > 0; }
};

struct Proposal {
    Box box;
    double objectness = 0;
};

// Normalized offsets between a base box and a target box:
//   tx = (xt-xa)/wa, ty = (yt-ya)/ha, tw = ln(wt/wa), th = ln(ht/ha)
struct BoxDelta {
    double tx = 0, ty = 0, tw = 0, th = 0;
};

// decode clamps the log-scale terms here before exponentiation
inline constexpr double kMaxLogScale = 6.907755278982137;  // ln(1000)

inline double box_iou(const Box& a, const Box& b) {
    const double ix = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
    const double iy = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
    if (ix <= 0 || iy <= 0) return 0.0;
    const double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

inline BoxDelta encode_box(const Box& base, const Box& target) {
    require(base.valid() && target.valid(), "encode_box needs positive extents");
    return BoxDelta{(target.x - base.x) / base.w, (target.y - base.y) / base.h,
                    std::log(target.w / base.w), std::log(target.h / base.h)};
}

inline Box decode_box(const Box& base, const BoxDelta& d) {
    require(base.valid(), "decode_box needs a positive-extent base");
    return Box{base.x + d.tx * base.w, base.y + d.ty * base.h,
               base.w * std::exp(std::min(d.tw, kMaxLogScale)),
               base.h * std::exp(std::min(d.th, kMaxLogScale))};
}

// Clamps a box's corners to [0,img_w) x [0,img_h); the result keeps at least
// `min_extent` in each dimension so downstream warping stays well-posed.
inline Box clip_box(const Box& b, double img_w, double img_h, double min_extent = 1e-3) {
    double x0 = std::clamp(b.x0(), 0.0, img_w);
    double x1 = std::clamp(b.x1(), 0.0, img_w);
    double y0 = std::clamp(b.y0(), 0.0, img_h);
    double y1 = std::clamp(b.y1(), 0.0, img_h);
    if (x1 - x0 < min_extent) x1 = std::min(x0 + min_extent, img_w), x0 = x1 - min_extent;
    if (y1 - y0 < min_extent) y1 = std::min(y0 + min_extent, img_h), y0 = y1 - min_extent;
    return Box::from_corners(x0, y0, x1, y1);
}

// One anchor per (position, scale, ratio), centered on the feature cell
// mapped back to image coordinates. Shapes keep the scale^2 area:
// w = scale*sqrt(ratio), h = scale/sqrt(ratio). Anchor index layout is
// position-major: a = (row * feature_w + col) * (n_scales * n_ratios) + k,
// with k = scale_index * n_ratios + ratio_index.
inline std::vector<Box> generate_anchors(int feature_h, int feature_w, double stride,
                                         const std::vector<double>& scales,
                                         const std::vector<double>& ratios) {
    require(stride >= 1 && !scales.empty() && !ratios.empty(),
            "generate_anchors needs stride >= 1 and nonempty scales/ratios");
    std::vector<Box> anchors;
    anchors.reserve(std::size_t(feature_h) * std::size_t(feature_w) * scales.size() *
                    ratios.size());
    for (int row = 0; row < feature_h; ++row) {
        for (int col = 0; col < feature_w; ++col) {
            const double cx = col * stride + stride / 2;
            const double cy = row * stride + stride / 2;
            for (double s : scales)
                for (double r : ratios)
                    anchors.push_back(Box{cx, cy, s * std::sqrt(r), s / std::sqrt(r)});
        }
    }
    return anchors;
}

// Greedy NMS. Candidates are ranked by descending score with ties broken by
// original index; every remaining candidate with IoU strictly above the
// threshold against a kept one is suppressed. Returns kept indices in rank
// order.
inline std::vector<int> nms(const std::vector<std::pair<Box, double>>& candidates,
                            double iou_threshold) {
    std::vector<int> order(candidates.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return candidates[std::size_t(a)].second > candidates[std::size_t(b)].second;
    });
    std::vector<char> suppressed(candidates.size(), 0);
    std::vector<int> kept;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const int a = order[i];
        if (suppressed[std::size_t(a)]) continue;
        kept.push_back(a);
        for (std::size_t j = i + 1; j < order.size(); ++j) {
            const int b = order[j];
            if (suppressed[std::size_t(b)]) continue;
            if (box_iou(candidates[std::size_t(a)].first, candidates[std::size_t(b)].first) >
                iou_threshold)
                suppressed[std::size_t(b)] = 1;
        }
    }
    return kept;
}

// ---------------------------------------------------------------------------
// binary masks

// Dense row-major bit array; interconvertible with a run-length encoding
// whose runs alternate background/foreground starting with background.
struct BinaryMask {
    int width = 0, height = 0;
    std::vector<std::uint8_t> bits;  // size width*height, values 0/1

    BinaryMask() = default;
    BinaryMask(int w, int h) : width(w), height(h), bits(std::size_t(w) * std::size_t(h), 0) {}

    bool at(int x, int y) const { return bits[std::size_t(y) * std::size_t(width) + std::size_t(x)] != 0; }
    void set(int x, int y, bool v) { bits[std::size_t(y) * std::size_t(width) + std::size_t(x)] = v ? 1 : 0; }

    std::size_t count() const {
        std::size_t n = 0;
        for (std::uint8_t b : bits) n += b;
        return n;
    }
    bool empty_mask() const { return count() == 0; }

    bool operator==(const BinaryMask& o) const {
        return width == o.width && height == o.height && bits == o.bits;
    }
};

inline std::vector<std::size_t> rle_encode(const BinaryMask& m) {
    std::vector<std::size_t> runs;
    std::uint8_t cur = 0;  // runs start with background
    std::size_t len = 0;
    for (std::uint8_t b : m.bits) {
        if ((b != 0) == (cur != 0)) {
            ++len;
        } else {
            runs.push_back(len);
            cur = b;
            len = 1;
        }
    }
    runs.push_back(len);
    return runs;
}

inline BinaryMask rle_decode(int width, int height, const std::vector<std::size_t>& runs) {
    BinaryMask m(width, height);
    std::size_t pos = 0;
    std::uint8_t cur = 0;
    for (std::size_t run : runs) {
        if (pos + run > m.bits.size())
            throw ParseError("RLE runs exceed mask area", pos);
        for (std::size_t i = 0; i < run; ++i) m.bits[pos + i] = cur;
        pos += run;
        cur = cur ? 0 : 1;
    }
    if (pos != m.bits.size()) throw ParseError("RLE runs do not cover mask area", pos);
    return m;
}

// text form: "w h; run0 run1 run2 ..."
inline std::string mask_to_rle_text(const BinaryMask& m) {
    std::ostringstream os;
    os << m.width << ' ' << m.height << ';';
    for (std::size_t r : rle_encode(m)) os << ' ' << r;
    return os.str();
}

inline BinaryMask mask_from_rle_text(const std::string& text) {
    std::istringstream is(text);
    int w = 0, h = 0;
    char sep = 0;
    if (!(is >> w >> h >> sep) || sep != ';')
        throw ParseError("bad RLE header, expected \"w h;\"", 0);
    std::vector<std::size_t> runs;
    std::size_t r;
    while (is >> r) runs.push_back(r);
    if (!is.eof()) throw ParseError("trailing junk in RLE text", 0);
    return rle_decode(w, h, runs);
}

inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
    require_dims(a.width == b.width && a.height == b.height, "mask_iou size mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.bits.size(); ++i) {
        const bool ba = a.bits[i] != 0, bb = b.bits[i] != 0;
        inter += (ba && bb) ? 1 : 0;
        uni += (ba || bb) ? 1 : 0;
    }
    return uni == 0 ? 0.0 : double(inter) / double(uni);
}

// Tight bounding box of the foreground in pixel units, half-open; nullopt for
// an empty mask.
inline std::optional<Box> mask_tight_box(const BinaryMask& m) {
    int minx = m.width, miny = m.height, maxx = -1, maxy = -1;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m.at(x, y)) {
                minx = std::min(minx, x);
                miny = std::min(miny, y);
                maxx = std::max(maxx, x);
                maxy = std::max(maxy, y);
            }
    if (maxx < 0) return std::nullopt;
    return Box::from_corners(minx, miny, maxx + 1, maxy + 1);
}

}  // namespace iseg
