#pragma once

#include <algorithm>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "iseg/config.hpp"
#include "iseg/geometry.hpp"
#include "iseg/tensor.hpp"

// Deterministic synthetic scenes: disks and axis-aligned rectangles drawn
// back-to-front onto a grayscale canvas, with pixel-accurate visible masks.
// (seed, index) fully determines a scene, so datasets never need to be
// shipped, only their spec.

namespace iseg {

struct DatasetSpec {
    int num_scenes = 100;
    int image_width = 96;
    int image_height = 96;
    int channels = 1;
    int num_categories = 2;      // 1 = disk, 2 = rectangle
    int min_instances = 1;
    int max_instances = 4;
    double noise_amplitude = 0.02;
    double adjacency_prob = 0.25;  // chance a shape is placed touching the previous one
    std::uint64_t seed = 1;

    void validate() const {
        if (num_scenes < 0) throw ConfigError("num_scenes must be >= 0");
        if (image_width < 8 || image_height < 8)
            throw ConfigError("image size must be at least 8x8");
        if (channels != 1) throw ConfigError("only single-channel images are generated");
        if (num_categories < 1 || num_categories > 2)
            throw ConfigError("generator supports 1 (disk) or 2 (disk, rectangle) categories");
        if (min_instances < 1 || max_instances < min_instances)
            throw ConfigError("bad instances-per-scene range");
        if (noise_amplitude < 0) throw ConfigError("noise_amplitude must be >= 0");
        if (adjacency_prob < 0 || adjacency_prob > 1)
            throw ConfigError("adjacency_prob must be in [0,1]");
    }
};

inline DatasetSpec dataset_spec_from_kv(const std::map<std::string, std::string>& kvs) {
    DatasetSpec s;
    for (const auto& [key, value] : kvs) {
        try {
            if (key == "num_scenes") s.num_scenes = std::stoi(value);
            else if (key == "image_width") s.image_width = std::stoi(value);
            else if (key == "image_height") s.image_height = std::stoi(value);
            else if (key == "channels") s.channels = std::stoi(value);
            else if (key == "num_categories") s.num_categories = std::stoi(value);
            else if (key == "min_instances") s.min_instances = std::stoi(value);
            else if (key == "max_instances") s.max_instances = std::stoi(value);
            else if (key == "noise_amplitude") s.noise_amplitude = std::stod(value);
            else if (key == "adjacency_prob") s.adjacency_prob = std::stod(value);
            else if (key == "seed") s.seed = std::stoull(value);
            else throw ConfigError("unknown dataset spec key: " + key);
        } catch (const std::invalid_argument&) {
            throw ConfigError("bad value for dataset spec key " + key + ": " + value);
        }
    }
    s.validate();
    return s;
}

inline DatasetSpec load_dataset_spec(const std::string& path) {
    return dataset_spec_from_kv(kv::parse_file(path));
}

inline std::string dataset_spec_to_text(const DatasetSpec& s) {
    std::ostringstream os;
    os << "num_scenes = " << s.num_scenes << "\n";
    os << "image_width = " << s.image_width << "\n";
    os << "image_height = " << s.image_height << "\n";
    os << "channels = " << s.channels << "\n";
    os << "num_categories = " << s.num_categories << "\n";
    os << "min_instances = " << s.min_instances << "\n";
    os << "max_instances = " << s.max_instances << "\n";
    os << "noise_amplitude = " << format_float(s.noise_amplitude) << "\n";
    os << "adjacency_prob = " << format_float(s.adjacency_prob) << "\n";
    os << "seed = " << s.seed << "\n";
    return os.str();
}

struct SceneInstance {
    int category = 0;     // 1..N
    BinaryMask mask;      // visible pixels only, image resolution
    Box tight_box;        // exact bounding box of the mask
};

struct Scene {
    std::string id;
    int width = 0, height = 0, channels = 1;
    std::vector<float> image;  // [C,H,W], intensities in [0,1]
    std::vector<SceneInstance> instances;
    bool boxes_only = false;
};

struct Dataset {
    DatasetSpec spec;
    std::vector<Scene> scenes;

    std::vector<std::string> category_names() const {
        std::vector<std::string> names{"disk", "rectangle"};
        names.resize(std::size_t(spec.num_categories));
        return names;
    }
};

template <typename T>
Tensor<T> scene_image_tensor(const Scene& scene) {
    std::vector<T> data(scene.image.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = T(scene.image[i]);
    return Tensor<T>::from_data({std::size_t(scene.channels), std::size_t(scene.height),
                                 std::size_t(scene.width)},
                                std::move(data));
}

namespace detail {

struct ShapeDraw {
    int category = 0;
    // disk: center + radius; rectangle: center + half extents
    double cx = 0, cy = 0, a = 0, b = 0;
    float intensity = 0;
};

inline bool shape_covers(const ShapeDraw& s, int px, int py) {
    const double x = px + 0.5, y = py + 0.5;
    if (s.category == 1) {
        const double dx = x - s.cx, dy = y - s.cy;
        return dx * dx + dy * dy <= s.a * s.a;
    }
    return std::abs(x - s.cx) <= s.a && std::abs(y - s.cy) <= s.b;
}

inline ShapeDraw sample_shape(const DatasetSpec& spec, Rng& rng, int category) {
    ShapeDraw s;
    s.category = category;
    const double W = spec.image_width, H = spec.image_height;
    if (category == 1) {
        s.a = rng.uniform(6.0, std::min(W, H) / 5.5);
        s.b = s.a;
    } else {
        s.a = rng.uniform(5.0, W / 5.0);
        s.b = rng.uniform(5.0, H / 5.0);
    }
    s.cx = rng.uniform(s.a, W - s.a);
    s.cy = rng.uniform(s.b, H - s.b);
    return s;
}

}  // namespace detail

// Shapes are drawn back-to-front: a later shape overwrites earlier pixels and
// the earlier instances keep only their still-visible pixels. Fully occluded
// instances are dropped. Same (spec, index) always yields the same scene.
inline Scene generate_scene(const DatasetSpec& spec, int index) {
    require(index >= 0 && index < spec.num_scenes, "scene index out of range");
    Rng rng = Rng::from(spec.seed, std::uint64_t(index));

    Scene scene;
    {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "scene_%05d", index);
        scene.id = buf;
    }
    scene.width = spec.image_width;
    scene.height = spec.image_height;
    scene.channels = 1;

    const int count = rng.uniform_int(spec.min_instances, spec.max_instances);
    std::vector<detail::ShapeDraw> shapes;
    for (int i = 0; i < count; ++i) {
        int category = rng.uniform_int(1, spec.num_categories);
        detail::ShapeDraw s;
        if (i > 0 && rng.uniform() < spec.adjacency_prob) {
            // same category as the previous shape, placed so they touch
            const detail::ShapeDraw& prev = shapes.back();
            category = prev.category;
            s = detail::sample_shape(spec, rng, category);
            const double angle = rng.uniform(0.0, 2.0 * M_PI);
            const double gap = rng.uniform(-1.0, 1.0);
            const double dist = (prev.a + s.a) + gap;
            s.cx = std::clamp(prev.cx + dist * std::cos(angle), s.a, spec.image_width - s.a);
            s.cy = std::clamp(prev.cy + dist * std::sin(angle), s.b, spec.image_height - s.b);
        } else {
            s = detail::sample_shape(spec, rng, category);
        }
        // intensities stay distinct so instances are visually separable
        for (int attempt = 0; attempt < 16; ++attempt) {
            s.intensity = float(rng.uniform(0.3, 0.95));
            bool ok = true;
            for (const auto& other : shapes)
                if (std::abs(double(s.intensity) - double(other.intensity)) < 0.08) ok = false;
            if (ok) break;
        }
        shapes.push_back(s);
    }

    const std::size_t npix = std::size_t(scene.width) * std::size_t(scene.height);
    scene.image.assign(npix, 0.1f);
    std::vector<int> owner(npix, -1);
    for (std::size_t si = 0; si < shapes.size(); ++si) {
        for (int py = 0; py < scene.height; ++py)
            for (int px = 0; px < scene.width; ++px)
                if (detail::shape_covers(shapes[si], px, py)) {
                    const std::size_t p = std::size_t(py) * std::size_t(scene.width) + std::size_t(px);
                    scene.image[p] = shapes[si].intensity;
                    owner[p] = int(si);
                }
    }

    for (std::size_t si = 0; si < shapes.size(); ++si) {
        BinaryMask mask(scene.width, scene.height);
        for (std::size_t p = 0; p < npix; ++p)
            if (owner[p] == int(si)) mask.bits[p] = 1;
        auto tight = mask_tight_box(mask);
        if (!tight) continue;  // fully occluded
        scene.instances.push_back(SceneInstance{shapes[si].category, std::move(mask), *tight});
    }

    if (spec.noise_amplitude > 0) {
        for (std::size_t p = 0; p < npix; ++p) {
            const double noisy =
                double(scene.image[p]) + spec.noise_amplitude * (2.0 * rng.uniform() - 1.0);
            scene.image[p] = float(std::clamp(noisy, 0.0, 1.0));
        }
    }
    return scene;
}

inline Dataset generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.spec = spec;
    ds.scenes.reserve(std::size_t(spec.num_scenes));
    for (int i = 0; i < spec.num_scenes; ++i) ds.scenes.push_back(generate_scene(spec, i));
    return ds;
}

// ---------------------------------------------------------------------------
// dataset file: a text header (version line, spec echo), then per-scene
// records with human-readable annotations (RLE masks) and the raw float32
// image bytes. Terminated by an explicit trailer line.

namespace detail {

inline std::string read_line_at(std::istream& is, const char* what) {
    std::string line;
    if (!std::getline(is, line)) {
        const auto pos = is.tellg();
        throw ParseError(std::string("unexpected end of file, wanted ") + what,
                         pos == std::streampos(-1) ? 0u : std::uint64_t(pos));
    }
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open dataset for writing: " + path);
    os << "ISEGDATA 1\n";
    os << "scene_count = " << ds.scenes.size() << "\n";
    os << dataset_spec_to_text(ds.spec);
    os << "header_end\n";
    for (const Scene& s : ds.scenes) {
        os << "scene " << s.id << "\n";
        os << "size " << s.width << ' ' << s.height << ' ' << s.channels << "\n";
        os << "boxes_only " << (s.boxes_only ? 1 : 0) << "\n";
        os << "instances " << s.instances.size() << "\n";
        for (const SceneInstance& inst : s.instances) {
            os << "instance " << inst.category << ' ' << format_double(inst.tight_box.x) << ' '
               << format_double(inst.tight_box.y) << ' ' << format_double(inst.tight_box.w)
               << ' ' << format_double(inst.tight_box.h) << ' ' << mask_to_rle_text(inst.mask)
               << "\n";
        }
        const std::size_t nbytes = s.image.size() * sizeof(float);
        os << "image " << nbytes << "\n";
        os.write(reinterpret_cast<const char*>(s.image.data()), std::streamsize(nbytes));
        os << "\n";
    }
    os << "dataset_end\n";
    if (!os) throw IoError("dataset write failed: " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open dataset: " + path);
    auto offset = [&]() -> std::uint64_t {
        auto p = is.tellg();
        return p == std::streampos(-1) ? 0 : std::uint64_t(p);
    };

    Dataset ds;
    if (detail::read_line_at(is, "format line") != "ISEGDATA 1")
        throw ParseError("not a dataset file or unsupported version", 0);
    std::size_t scene_count = 0;
    {
        std::map<std::string, std::string> header;
        std::string line;
        while ((line = detail::read_line_at(is, "header line")) != "header_end") {
            std::istringstream ls(line);
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ParseError("bad header line: " + line, offset());
            header[kv::trim(line.substr(0, eq))] = kv::trim(line.substr(eq + 1));
        }
        auto it = header.find("scene_count");
        if (it == header.end()) throw ParseError("missing scene_count", offset());
        scene_count = std::stoul(it->second);
        header.erase(it);
        ds.spec = dataset_spec_from_kv(header);
    }

    for (std::size_t si = 0; si < scene_count; ++si) {
        Scene s;
        {
            std::istringstream ls(detail::read_line_at(is, "scene line"));
            std::string tag;
            if (!(ls >> tag >> s.id) || tag != "scene")
                throw ParseError("expected scene record", offset());
        }
        {
            std::istringstream ls(detail::read_line_at(is, "size line"));
            std::string tag;
            if (!(ls >> tag >> s.width >> s.height >> s.channels) || tag != "size")
                throw ParseError("expected size record", offset());
        }
        {
            std::istringstream ls(detail::read_line_at(is, "boxes_only line"));
            std::string tag;
            int flag = 0;
            if (!(ls >> tag >> flag) || tag != "boxes_only")
                throw ParseError("expected boxes_only record", offset());
            s.boxes_only = flag != 0;
        }
        std::size_t inst_count = 0;
        {
            std::istringstream ls(detail::read_line_at(is, "instances line"));
            std::string tag;
            if (!(ls >> tag >> inst_count) || tag != "instances")
                throw ParseError("expected instances record", offset());
        }
        for (std::size_t ii = 0; ii < inst_count; ++ii) {
            const std::string line = detail::read_line_at(is, "instance line");
            std::istringstream ls(line);
            std::string tag;
            SceneInstance inst;
            if (!(ls >> tag >> inst.category >> inst.tight_box.x >> inst.tight_box.y >>
                  inst.tight_box.w >> inst.tight_box.h) ||
                tag != "instance")
                throw ParseError("bad instance record", offset());
            std::string rle;
            std::getline(ls, rle);
            inst.mask = mask_from_rle_text(kv::trim(rle));
            s.instances.push_back(std::move(inst));
        }
        std::size_t nbytes = 0;
        {
            std::istringstream ls(detail::read_line_at(is, "image line"));
            std::string tag;
            if (!(ls >> tag >> nbytes) || tag != "image")
                throw ParseError("expected image record", offset());
        }
        if (nbytes % sizeof(float) != 0)
            throw ParseError("image byte count not a multiple of 4", offset());
        s.image.resize(nbytes / sizeof(float));
        is.read(reinterpret_cast<char*>(s.image.data()), std::streamsize(nbytes));
        if (std::size_t(is.gcount()) != nbytes)
            throw ParseError("truncated image payload", offset());
        if (is.get() != '\n') throw ParseError("missing newline after image payload", offset());
        if (s.image.size() != std::size_t(s.width) * std::size_t(s.height) * std::size_t(s.channels))
            throw ParseError("image payload does not match scene size", offset());
        ds.scenes.push_back(std::move(s));
    }
    if (detail::read_line_at(is, "trailer") != "dataset_end")
        throw ParseError("missing dataset trailer", offset());
    return ds;
}

}  // namespace iseg
