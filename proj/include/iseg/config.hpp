#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "iseg/common.hpp"

// Cascade configuration and the "key = value" file format used for configs
// and dataset specs. Unknown keys are rejected so typos fail loudly.

namespace iseg {

namespace kv {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Parses "key = value" lines; '#' starts a comment; blank lines are skipped.
inline std::map<std::string, std::string> parse_stream(std::istream& is) {
    std::map<std::string, std::string> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        out[key] = value;
    }
    return out;
}

inline std::map<std::string, std::string> parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file: " + path);
    return parse_stream(is);
}

inline std::vector<double> parse_double_list(const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(std::stod(item));
    }
    return out;
}

inline std::string join_double_list(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += format_float(v[i]);
    }
    return s;
}

}  // namespace kv

// One learning-rate phase: `lr` held for `iterations` steps.
struct LrPhase {
    double lr = 0;
    int iterations = 0;
};

struct CascadeConfig {
    // task shape
    int num_categories = 2;       // N; background is category 0
    int image_channels = 1;

    // backbone (stride 8 total: 5x5/2, 5x5/2, 3x3/2)
    int conv1_channels = 12;
    int conv2_channels = 24;
    int conv3_channels = 24;
    int rpn_channels = 24;

    // stage geometry
    int mask_resolution = 28;     // m
    int warp_width = 28;          // W'
    int warp_height = 28;         // H'
    int stage2_pool = 2;          // 28 -> 14
    int stage3_pool = 4;          // 28 -> 7
    int stage2_fc_dim = 256;
    int stage3_fc_dim = 64;

    // proposal routing
    std::vector<double> anchor_scales{8, 16, 32};
    std::vector<double> anchor_ratios{0.5, 1, 2};
    double nms_threshold_train = 0.7;
    double nms_threshold_infer = 0.7;
    int proposal_count = 300;
    double min_box_size = 4;

    // sampling
    int anchors_per_image = 256;
    int rois_per_image = 64;
    double roi_positive_fraction = 0.25;
    double rpn_positive_iou = 0.7;
    double rpn_negative_iou = 0.3;
    bool train_add_gt_proposals = true;

    // training
    int train_stages = 5;         // 3 or 5
    std::vector<LrPhase> lr_schedule{{0.001, 32000}, {0.0001, 8000}};
    int resize_short_side = 0;    // 0 disables resizing

    // Scale applied to the gradient flowing into box coordinates through
    // the warping layer. 1 is the exact adjoint; desk-scale from-scratch
    // training may damp it to keep the per-RoI pulls from drowning the
    // stage-1 regression signal.
    double box_gradient_scale = 1.0;

    // inference post-processing
    double mask_threshold = 0.5;
    double voting_nms_iou = 0.3;
    double voting_similar_iou = 0.5;
    double score_threshold = 0.0;

    int feature_stride() const { return 8; }
    int total_iterations() const {
        int n = 0;
        for (const auto& p : lr_schedule) n += p.iterations;
        return n;
    }
    double lr_at(int iteration) const {
        int base = 0;
        for (const auto& p : lr_schedule) {
            if (iteration < base + p.iterations) return p.lr;
            base += p.iterations;
        }
        return lr_schedule.empty() ? 0.0 : lr_schedule.back().lr;
    }

    void validate() const {
        if (num_categories < 1) throw ConfigError("num_categories must be >= 1");
        if (mask_resolution < 2) throw ConfigError("mask_resolution must be >= 2");
        if (warp_width < 1 || warp_height < 1) throw ConfigError("warp size must be >= 1");
        if (warp_width % stage2_pool != 0 || warp_height % stage2_pool != 0)
            throw ConfigError("stage2_pool must divide the warp resolution");
        if (warp_width % stage3_pool != 0 || warp_height % stage3_pool != 0)
            throw ConfigError("stage3_pool must divide the warp resolution");
        if (train_stages != 3 && train_stages != 5)
            throw ConfigError("train_stages must be 3 or 5");
        if (anchor_scales.empty() || anchor_ratios.empty())
            throw ConfigError("anchor scales/ratios must be nonempty");
        if (proposal_count < 1) throw ConfigError("proposal_count must be >= 1");
        if (rois_per_image < 1) throw ConfigError("rois_per_image must be >= 1");
        if (lr_schedule.empty()) throw ConfigError("lr schedule must be nonempty");
        if (box_gradient_scale < 0) throw ConfigError("box_gradient_scale must be >= 0");
    }
};

namespace detail {

inline std::vector<LrPhase> parse_lr_schedule(const std::string& v) {
    // "0.001:32000,0.0001:8000"
    std::vector<LrPhase> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = kv::trim(item);
        if (item.empty()) continue;
        const std::size_t colon = item.find(':');
        if (colon == std::string::npos)
            throw ConfigError("lr_schedule entries must look like lr:iterations");
        LrPhase p;
        p.lr = std::stod(item.substr(0, colon));
        p.iterations = std::stoi(item.substr(colon + 1));
        out.push_back(p);
    }
    return out;
}

inline std::string format_lr_schedule(const std::vector<LrPhase>& sched) {
    std::string s;
    for (std::size_t i = 0; i < sched.size(); ++i) {
        if (i) s += ",";
        s += format_float(sched[i].lr) + ":" + std::to_string(sched[i].iterations);
    }
    return s;
}

}  // namespace detail

inline CascadeConfig cascade_config_from_kv(const std::map<std::string, std::string>& kvs) {
    CascadeConfig c;
    for (const auto& [key, value] : kvs) {
        try {
            if (key == "num_categories") c.num_categories = std::stoi(value);
            else if (key == "image_channels") c.image_channels = std::stoi(value);
            else if (key == "conv1_channels") c.conv1_channels = std::stoi(value);
            else if (key == "conv2_channels") c.conv2_channels = std::stoi(value);
            else if (key == "conv3_channels") c.conv3_channels = std::stoi(value);
            else if (key == "rpn_channels") c.rpn_channels = std::stoi(value);
            else if (key == "mask_resolution") c.mask_resolution = std::stoi(value);
            else if (key == "warp_width") c.warp_width = std::stoi(value);
            else if (key == "warp_height") c.warp_height = std::stoi(value);
            else if (key == "stage2_pool") c.stage2_pool = std::stoi(value);
            else if (key == "stage3_pool") c.stage3_pool = std::stoi(value);
            else if (key == "stage2_fc_dim") c.stage2_fc_dim = std::stoi(value);
            else if (key == "stage3_fc_dim") c.stage3_fc_dim = std::stoi(value);
            else if (key == "anchor_scales") c.anchor_scales = kv::parse_double_list(value);
            else if (key == "anchor_ratios") c.anchor_ratios = kv::parse_double_list(value);
            else if (key == "nms_threshold_train") c.nms_threshold_train = std::stod(value);
            else if (key == "nms_threshold_infer") c.nms_threshold_infer = std::stod(value);
            else if (key == "proposal_count") c.proposal_count = std::stoi(value);
            else if (key == "min_box_size") c.min_box_size = std::stod(value);
            else if (key == "anchors_per_image") c.anchors_per_image = std::stoi(value);
            else if (key == "rois_per_image") c.rois_per_image = std::stoi(value);
            else if (key == "roi_positive_fraction") c.roi_positive_fraction = std::stod(value);
            else if (key == "rpn_positive_iou") c.rpn_positive_iou = std::stod(value);
            else if (key == "rpn_negative_iou") c.rpn_negative_iou = std::stod(value);
            else if (key == "train_add_gt_proposals") c.train_add_gt_proposals = std::stoi(value) != 0;
            else if (key == "train_stages") c.train_stages = std::stoi(value);
            else if (key == "lr_schedule") c.lr_schedule = detail::parse_lr_schedule(value);
            else if (key == "resize_short_side") c.resize_short_side = std::stoi(value);
            else if (key == "box_gradient_scale") c.box_gradient_scale = std::stod(value);
            else if (key == "mask_threshold") c.mask_threshold = std::stod(value);
            else if (key == "voting_nms_iou") c.voting_nms_iou = std::stod(value);
            else if (key == "voting_similar_iou") c.voting_similar_iou = std::stod(value);
            else if (key == "score_threshold") c.score_threshold = std::stod(value);
            else throw ConfigError("unknown config key: " + key);
        } catch (const std::invalid_argument&) {
            throw ConfigError("bad value for config key " + key + ": " + value);
        } catch (const std::out_of_range&) {
            throw ConfigError("out-of-range value for config key " + key + ": " + value);
        }
    }
    c.validate();
    return c;
}

inline CascadeConfig load_cascade_config(const std::string& path) {
    return cascade_config_from_kv(kv::parse_file(path));
}

inline std::string cascade_config_to_text(const CascadeConfig& c) {
    std::ostringstream os;
    os << "num_categories = " << c.num_categories << "\n";
    os << "image_channels = " << c.image_channels << "\n";
    os << "conv1_channels = " << c.conv1_channels << "\n";
    os << "conv2_channels = " << c.conv2_channels << "\n";
    os << "conv3_channels = " << c.conv3_channels << "\n";
    os << "rpn_channels = " << c.rpn_channels << "\n";
    os << "mask_resolution = " << c.mask_resolution << "\n";
    os << "warp_width = " << c.warp_width << "\n";
    os << "warp_height = " << c.warp_height << "\n";
    os << "stage2_pool = " << c.stage2_pool << "\n";
    os << "stage3_pool = " << c.stage3_pool << "\n";
    os << "stage2_fc_dim = " << c.stage2_fc_dim << "\n";
    os << "stage3_fc_dim = " << c.stage3_fc_dim << "\n";
    os << "anchor_scales = " << kv::join_double_list(c.anchor_scales) << "\n";
    os << "anchor_ratios = " << kv::join_double_list(c.anchor_ratios) << "\n";
    os << "nms_threshold_train = " << format_float(c.nms_threshold_train) << "\n";
    os << "nms_threshold_infer = " << format_float(c.nms_threshold_infer) << "\n";
    os << "proposal_count = " << c.proposal_count << "\n";
    os << "min_box_size = " << format_float(c.min_box_size) << "\n";
    os << "anchors_per_image = " << c.anchors_per_image << "\n";
    os << "rois_per_image = " << c.rois_per_image << "\n";
    os << "roi_positive_fraction = " << format_float(c.roi_positive_fraction) << "\n";
    os << "rpn_positive_iou = " << format_float(c.rpn_positive_iou) << "\n";
    os << "rpn_negative_iou = " << format_float(c.rpn_negative_iou) << "\n";
    os << "train_add_gt_proposals = " << (c.train_add_gt_proposals ? 1 : 0) << "\n";
    os << "train_stages = " << c.train_stages << "\n";
    os << "lr_schedule = " << detail::format_lr_schedule(c.lr_schedule) << "\n";
    os << "resize_short_side = " << c.resize_short_side << "\n";
    os << "box_gradient_scale = " << format_float(c.box_gradient_scale) << "\n";
    os << "mask_threshold = " << format_float(c.mask_threshold) << "\n";
    os << "voting_nms_iou = " << format_float(c.voting_nms_iou) << "\n";
    os << "voting_similar_iou = " << format_float(c.voting_similar_iou) << "\n";
    os << "score_threshold = " << format_float(c.score_threshold) << "\n";
    return os.str();
}

inline void save_cascade_config(const CascadeConfig& c, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write config file: " + path);
    os << cascade_config_to_text(c);
}

}  // namespace iseg
