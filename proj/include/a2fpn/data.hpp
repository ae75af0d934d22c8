#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "a2fpn/labelmap.hpp"
#include "a2fpn/rng.hpp"
#include "a2fpn/tensor.hpp"

namespace a2fpn {

// ---------------------------------------------------------------------------
// Synthetic scenes: seeded procedural images of colored shapes on a dark
// background. Class 0 is background; classes >= 1 cycle through rectangle,
// ellipse and stripe geometry with distinct palettes.
// ---------------------------------------------------------------------------

struct SceneSpec {
    std::uint64_t seed = 0;
    std::size_t size = 64;          // H = W, 64 or 128
    std::size_t num_classes = 4;    // including background
    std::size_t shapes_min = 2;     // shapes drawn per scene, inclusive range
    std::size_t shapes_max = 6;
    double noise_sigma = 0.05;      // additive Gaussian noise on [0,1] intensities
};

struct Scene {
    Tensor image;     // 3 x H x W, values in [0,1]
    LabelMap labels;  // 1 x H x W
};

namespace detail {

inline std::array<double, 3> class_base_color(std::size_t c) {
    static constexpr std::array<std::array<double, 3>, 8> palette = {{
        {0.12, 0.14, 0.18},  // background
        {0.78, 0.25, 0.20},  // rectangle, red
        {0.20, 0.66, 0.30},  // ellipse, green
        {0.82, 0.76, 0.22},  // stripe, yellow
        {0.28, 0.40, 0.82},
        {0.70, 0.30, 0.72},
        {0.20, 0.70, 0.70},
        {0.90, 0.52, 0.12},
    }};
    return palette[c % palette.size()];
}

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

}  // namespace detail

inline Scene generate_scene(const SceneSpec& spec) {
    if (spec.size != 64 && spec.size != 128)
        throw ConfigError("generate_scene: size must be 64 or 128, got " +
                          std::to_string(spec.size));
    if (spec.num_classes < 1) throw ConfigError("generate_scene: need at least one class");
    if (spec.shapes_max < spec.shapes_min)
        throw ConfigError("generate_scene: shapes_max below shapes_min");

    const std::size_t h = spec.size, w = spec.size;
    Rng rng(spec.seed);
    Scene scene;
    scene.image = Tensor::zeros({3, h, w});
    scene.labels = LabelMap(1, h, w, 0);
    double* img = scene.image.mutable_data().data();

    const auto bg = detail::class_base_color(0);
    double bg_color[3];
    for (int c = 0; c < 3; ++c) bg_color[c] = detail::clamp01(bg[c] + rng.uniform(-0.05, 0.05));
    for (int c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < h * w; ++p) img[c * h * w + p] = bg_color[c];

    const std::size_t count =
        spec.num_classes < 2
            ? 0
            : static_cast<std::size_t>(rng.uniform_int(
                  static_cast<std::int64_t>(spec.shapes_min),
                  static_cast<std::int64_t>(spec.shapes_max)));
    const double dim = static_cast<double>(spec.size);

    // back-to-front: later shapes paint over earlier ones, the label map
    // keeps the topmost class per pixel
    for (std::size_t sidx = 0; sidx < count; ++sidx) {
        const std::int32_t cls =
            1 + static_cast<std::int32_t>(
                    rng.uniform_int(0, static_cast<std::int64_t>(spec.num_classes) - 2));
        const auto base = detail::class_base_color(static_cast<std::size_t>(cls));
        double color[3];
        for (int c = 0; c < 3; ++c)
            color[c] = detail::clamp01(base[c] + rng.uniform(-0.08, 0.08));

        const int kind = (cls - 1) % 3;
        std::function<bool(double, double)> covers;
        if (kind == 0) {  // rectangle
            const double cx = rng.uniform(0.15 * dim, 0.85 * dim);
            const double cy = rng.uniform(0.15 * dim, 0.85 * dim);
            const double hx = rng.uniform(dim / 10.0, dim / 3.5);
            const double hy = rng.uniform(dim / 10.0, dim / 3.5);
            covers = [=](double y, double x) {
                return std::abs(x - cx) <= hx && std::abs(y - cy) <= hy;
            };
        } else if (kind == 1) {  // ellipse
            const double cx = rng.uniform(0.15 * dim, 0.85 * dim);
            const double cy = rng.uniform(0.15 * dim, 0.85 * dim);
            const double ax = rng.uniform(dim / 10.0, dim / 3.5);
            const double ay = rng.uniform(dim / 10.0, dim / 3.5);
            covers = [=](double y, double x) {
                const double dx = (x - cx) / ax, dy = (y - cy) / ay;
                return dx * dx + dy * dy <= 1.0;
            };
        } else {  // stripe: a band of given thickness through a random point
            const double theta = rng.uniform(0.0, 3.14159265358979323846);
            const double nx = std::cos(theta), ny = std::sin(theta);
            const double px = rng.uniform(0.2 * dim, 0.8 * dim);
            const double py = rng.uniform(0.2 * dim, 0.8 * dim);
            const double half_thickness = rng.uniform(dim / 14.0, dim / 7.0);
            covers = [=](double y, double x) {
                return std::abs((x - px) * nx + (y - py) * ny) <= half_thickness;
            };
        }

        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                if (covers(static_cast<double>(i) + 0.5, static_cast<double>(j) + 0.5)) {
                    for (int c = 0; c < 3; ++c) img[c * h * w + i * w + j] = color[c];
                    scene.labels.at(0, i, j) = cls;
                }
    }

    if (spec.noise_sigma > 0.0)
        for (std::size_t p = 0; p < 3 * h * w; ++p)
            img[p] = detail::clamp01(img[p] + rng.normal(0.0, spec.noise_sigma));
    return scene;
}

// ---------------------------------------------------------------------------
// Geometric transforms shared by augmentation and TTA. All of them remap
// pixels without interpolation so the image and label grids stay aligned.
// ---------------------------------------------------------------------------

// Quarter-turn counter-clockwise rotations of a C x H x W image.
inline Tensor rotate90_image(const Tensor& image, int quarter_turns) {
    detail::require_rank(image, 3, "rotate90_image");
    Tensor cur = image;
    const int turns = ((quarter_turns % 4) + 4) % 4;
    for (int t = 0; t < turns; ++t) {
        const Shape& s = cur.shape();
        const std::size_t c = s[0], h = s[1], w = s[2];
        Tensor next = Tensor::zeros({c, w, h});
        const double* src = cur.data().data();
        double* dst = next.mutable_data().data();
        for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t i = 0; i < w; ++i)
                for (std::size_t j = 0; j < h; ++j)
                    dst[(ci * w + i) * h + j] = src[(ci * h + j) * w + (w - 1 - i)];
        cur = next;
    }
    return cur;
}

inline LabelMap rotate90_labels(const LabelMap& labels, int quarter_turns) {
    LabelMap cur = labels;
    const int turns = ((quarter_turns % 4) + 4) % 4;
    for (int t = 0; t < turns; ++t) {
        LabelMap next(cur.batch, cur.width, cur.height);
        for (std::size_t b = 0; b < cur.batch; ++b)
            for (std::size_t i = 0; i < cur.width; ++i)
                for (std::size_t j = 0; j < cur.height; ++j)
                    next.at(b, i, j) = cur.at(b, j, cur.width - 1 - i);
        cur = next;
    }
    return cur;
}

// horizontal = mirror columns; otherwise mirror rows.
inline Tensor flip_image(const Tensor& image, bool horizontal) {
    detail::require_rank(image, 3, "flip_image");
    const Shape& s = image.shape();
    const std::size_t c = s[0], h = s[1], w = s[2];
    Tensor out = Tensor::zeros(s);
    const double* src = image.data().data();
    double* dst = out.mutable_data().data();
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                const std::size_t si = horizontal ? i : h - 1 - i;
                const std::size_t sj = horizontal ? w - 1 - j : j;
                dst[(ci * h + i) * w + j] = src[(ci * h + si) * w + sj];
            }
    return out;
}

inline LabelMap flip_labels(const LabelMap& labels, bool horizontal) {
    LabelMap out(labels.batch, labels.height, labels.width);
    for (std::size_t b = 0; b < labels.batch; ++b)
        for (std::size_t i = 0; i < labels.height; ++i)
            for (std::size_t j = 0; j < labels.width; ++j) {
                const std::size_t si = horizontal ? i : labels.height - 1 - i;
                const std::size_t sj = horizontal ? labels.width - 1 - j : j;
                out.at(b, i, j) = labels.at(b, si, sj);
            }
    return out;
}

// Nearest-neighbor rescale by `factor` followed by a center crop (factor
// above 1) or center pad (below 1) back to the original extents. Labels pad
// with background class 0, images with black.
inline std::pair<Tensor, LabelMap> rescale_center(const Tensor& image, const LabelMap& labels,
                                                  double factor) {
    const Shape& s = image.shape();
    const std::size_t c = s[0], h = s[1], w = s[2];
    const std::size_t sh = std::max<std::size_t>(1, static_cast<std::size_t>(
                                                        std::llround(factor * static_cast<double>(h))));
    const std::size_t sw = std::max<std::size_t>(1, static_cast<std::size_t>(
                                                        std::llround(factor * static_cast<double>(w))));
    Tensor out = Tensor::zeros(s);
    LabelMap lout(1, h, w, 0);
    const double* src = image.data().data();
    double* dst = out.mutable_data().data();
    // offset of the output window inside the scaled grid (negative = pad)
    const std::ptrdiff_t off_y = (static_cast<std::ptrdiff_t>(sh) - static_cast<std::ptrdiff_t>(h)) / 2;
    const std::ptrdiff_t off_x = (static_cast<std::ptrdiff_t>(sw) - static_cast<std::ptrdiff_t>(w)) / 2;
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(i) + off_y;
            const std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(j) + off_x;
            if (yi < 0 || xi < 0 || yi >= static_cast<std::ptrdiff_t>(sh) ||
                xi >= static_cast<std::ptrdiff_t>(sw))
                continue;  // padded border
            const std::size_t src_y =
                std::min(h - 1, static_cast<std::size_t>(static_cast<double>(yi) / factor));
            const std::size_t src_x =
                std::min(w - 1, static_cast<std::size_t>(static_cast<double>(xi) / factor));
            for (std::size_t ci = 0; ci < c; ++ci)
                dst[(ci * h + i) * w + j] = src[(ci * h + src_y) * w + src_x];
            lout.at(0, i, j) = labels.at(0, src_y, src_x);
        }
    return {out, lout};
}

// ---------------------------------------------------------------------------
// Augmentation: one sampled configuration of rotation, flips, rescale and
// image-only noise. Label maps receive exactly the geometric transforms.
// ---------------------------------------------------------------------------

struct AugmentationPolicy {
    std::vector<int> rotations = {0, 90, 180, 270};  // degrees, multiples of 90
    bool horizontal_flip = true;
    bool vertical_flip = true;
    std::vector<double> scale_factors = {0.75, 1.0, 1.25};
    double noise_sigma = 0.02;

    static AugmentationPolicy identity() { return {{0}, false, false, {1.0}, 0.0}; }
};

inline std::pair<Tensor, LabelMap> augment(const Tensor& image, const LabelMap& labels,
                                           const AugmentationPolicy& policy, Rng& rng) {
    detail::require_rank(image, 3, "augment");
    Tensor img = image;
    LabelMap lab = labels;

    if (!policy.scale_factors.empty()) {
        const double f = policy.scale_factors[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(policy.scale_factors.size()) - 1))];
        if (f != 1.0) std::tie(img, lab) = rescale_center(img, lab, f);
    }
    if (!policy.rotations.empty()) {
        std::vector<int> usable;
        const bool square = img.shape()[1] == img.shape()[2];
        for (int deg : policy.rotations) {
            if (deg % 90 != 0) throw ConfigError("augment: rotations must be multiples of 90");
            if (square || deg % 180 == 0) usable.push_back(deg);
        }
        if (!usable.empty()) {
            const int deg = usable[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(usable.size()) - 1))];
            if (deg % 360 != 0) {
                img = rotate90_image(img, deg / 90);
                lab = rotate90_labels(lab, deg / 90);
            }
        }
    }
    if (policy.horizontal_flip && rng.bernoulli()) {
        img = flip_image(img, true);
        lab = flip_labels(lab, true);
    }
    if (policy.vertical_flip && rng.bernoulli()) {
        img = flip_image(img, false);
        lab = flip_labels(lab, false);
    }
    if (policy.noise_sigma > 0.0) {
        auto d = img.mutable_data();
        for (auto& v : d) v = detail::clamp01(v + rng.normal(0.0, policy.noise_sigma));
    }
    return {img, lab};
}

// ---------------------------------------------------------------------------
// Test-time augmentation over the 8-element dihedral group: run the model on
// every rotation/flip combination, undo the transform on the softmax output
// and average the probability maps.
// ---------------------------------------------------------------------------

// Per-pixel softmax over the class channel of a K x H x W logit map.
inline Tensor softmax_channels(const Tensor& logits) {
    detail::require_rank(logits, 3, "softmax_channels");
    const Shape& s = logits.shape();
    const std::size_t k = s[0], h = s[1], w = s[2];
    Tensor out = Tensor::zeros(s);
    const double* src = logits.data().data();
    double* dst = out.mutable_data().data();
    for (std::size_t p = 0; p < h * w; ++p) {
        double mx = src[p];
        for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, src[c * h * w + p]);
        double z = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            dst[c * h * w + p] = std::exp(src[c * h * w + p] - mx);
            z += dst[c * h * w + p];
        }
        for (std::size_t c = 0; c < k; ++c) dst[c * h * w + p] /= z;
    }
    return out;
}

// model: 3 x H x W image -> K x H x W logits
using ModelFn = std::function<Tensor(const Tensor&)>;

inline Tensor tta_predict(const ModelFn& model, const Tensor& image) {
    detail::require_rank(image, 3, "tta_predict");
    if (image.shape()[1] != image.shape()[2])
        throw ConfigError("tta_predict: dihedral transforms need a square input, got " +
                          image.shape().str());
    Tensor average;
    for (int flip = 0; flip < 2; ++flip)
        for (int rot = 0; rot < 4; ++rot) {
            Tensor transformed = flip ? flip_image(image, true) : image;
            transformed = rotate90_image(transformed, rot);
            Tensor probs = softmax_channels(model(transformed));
            // invert: rotate back first, then undo the flip
            probs = rotate90_image(probs, 4 - rot);
            if (flip) probs = flip_image(probs, true);
            average = average.defined() ? add(average, probs) : probs;
        }
    return scale(average, 1.0 / 8.0);
}

// ---------------------------------------------------------------------------
// Raster I/O: binary PPM (P6) for images, binary PGM (P5) for label maps.
// Label round-trips are exact; image round-trips are within quantization.
// ---------------------------------------------------------------------------

namespace detail {

struct PnmHeader {
    std::string magic;
    std::size_t width = 0, height = 0, maxval = 0;
    std::size_t payload_offset = 0;
};

inline PnmHeader parse_pnm_header(const std::vector<char>& bytes, const std::string& path) {
    PnmHeader h;
    std::size_t pos = 0;
    auto fail = [&](const std::string& what) {
        throw FormatError(path + ": " + what + " at byte offset " + std::to_string(pos));
    };
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else {
                break;
            }
        }
    };
    auto read_number = [&]() -> std::size_t {
        skip_space();
        if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos])))
            fail("expected decimal number");
        std::size_t v = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos])))
            v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
        return v;
    };
    if (bytes.size() < 2) fail("truncated magic");
    h.magic = {bytes[0], bytes[1]};
    pos = 2;
    h.width = read_number();
    h.height = read_number();
    h.maxval = read_number();
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        fail("expected single whitespace after maxval");
    ++pos;
    h.payload_offset = pos;
    return h;
}

inline std::vector<char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open file: " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline void write_ppm(const std::string& path, const Tensor& image) {
    detail::require_rank(image, 3, "write_ppm");
    const Shape& s = image.shape();
    if (s[0] != 3) throw ShapeError("write_ppm: expected 3 channels, got " + s.str());
    const std::size_t h = s[1], w = s[2];
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open file for writing: " + path);
    out << "P6\n" << w << " " << h << "\n255\n";
    const double* p = image.data().data();
    std::vector<unsigned char> row(3 * w);
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j)
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = p[(c * h + i) * w + j];
                const long q = std::lround(detail::clamp01(v) * 255.0);
                row[3 * j + c] = static_cast<unsigned char>(q);
            }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw FormatError("short write: " + path);
}

inline Tensor read_ppm(const std::string& path) {
    const std::vector<char> bytes = detail::read_file_bytes(path);
    const detail::PnmHeader h = detail::parse_pnm_header(bytes, path);
    if (h.magic != "P6")
        throw FormatError(path + ": expected P6 magic, got '" + h.magic + "' at byte offset 0");
    if (h.maxval != 255) throw FormatError(path + ": unsupported maxval " + std::to_string(h.maxval));
    const std::size_t need = h.payload_offset + 3 * h.width * h.height;
    if (bytes.size() < need)
        throw FormatError(path + ": payload truncated at byte offset " +
                          std::to_string(bytes.size()) + " (need " + std::to_string(need) + ")");
    Tensor image = Tensor::zeros({3, h.height, h.width});
    double* dst = image.mutable_data().data();
    const unsigned char* src =
        reinterpret_cast<const unsigned char*>(bytes.data()) + h.payload_offset;
    for (std::size_t i = 0; i < h.height; ++i)
        for (std::size_t j = 0; j < h.width; ++j)
            for (std::size_t c = 0; c < 3; ++c)
                dst[(c * h.height + i) * h.width + j] =
                    static_cast<double>(src[(i * h.width + j) * 3 + c]) / 255.0;
    return image;
}

inline void write_pgm(const std::string& path, const LabelMap& labels) {
    if (labels.batch != 1) throw ShapeError("write_pgm: expected a single-image label map");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open file for writing: " + path);
    out << "P5\n" << labels.width << " " << labels.height << "\n255\n";
    std::vector<unsigned char> row(labels.width);
    for (std::size_t i = 0; i < labels.height; ++i) {
        for (std::size_t j = 0; j < labels.width; ++j) {
            const std::int32_t v = labels.at(0, i, j);
            if (v < 0 || v > 255)
                throw DataError("write_pgm: class index " + std::to_string(v) +
                                " not representable as a gray level");
            row[j] = static_cast<unsigned char>(v);
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw FormatError("short write: " + path);
}

inline LabelMap read_pgm(const std::string& path) {
    const std::vector<char> bytes = detail::read_file_bytes(path);
    const detail::PnmHeader h = detail::parse_pnm_header(bytes, path);
    if (h.magic != "P5")
        throw FormatError(path + ": expected P5 magic, got '" + h.magic + "' at byte offset 0");
    const std::size_t need = h.payload_offset + h.width * h.height;
    if (bytes.size() < need)
        throw FormatError(path + ": payload truncated at byte offset " +
                          std::to_string(bytes.size()) + " (need " + std::to_string(need) + ")");
    LabelMap labels(1, h.height, h.width);
    const unsigned char* src =
        reinterpret_cast<const unsigned char*>(bytes.data()) + h.payload_offset;
    for (std::size_t i = 0; i < h.height; ++i)
        for (std::size_t j = 0; j < h.width; ++j)
            labels.at(0, i, j) = static_cast<std::int32_t>(src[i * h.width + j]);
    return labels;
}

// ---------------------------------------------------------------------------
// Corpus generation: disjoint seed ranges per split, a tab-separated
// manifest, and an FNV-1a checksum over the generated bytes for
// reproducibility checks.
// ---------------------------------------------------------------------------

struct CorpusCounts {
    std::size_t train = 200;
    std::size_t val = 20;
    std::size_t test = 80;
};

struct ManifestEntry {
    std::string split;
    std::uint64_t seed = 0;
    std::string image_path;  // relative to the manifest directory
    std::string label_path;
};

struct CorpusManifest {
    std::vector<ManifestEntry> entries;
    std::string directory;  // where the manifest lives

    std::vector<ManifestEntry> split(const std::string& name) const {
        std::vector<ManifestEntry> out;
        for (const ManifestEntry& e : entries)
            if (e.split == name) out.push_back(e);
        return out;
    }
};

inline void save_manifest(const CorpusManifest& manifest, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open manifest for writing: " + path);
    for (const ManifestEntry& e : manifest.entries)
        out << e.split << '\t' << e.seed << '\t' << e.image_path << '\t' << e.label_path << '\n';
    if (!out) throw FormatError("short write: " + path);
}

inline CorpusManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open manifest: " + path);
    CorpusManifest manifest;
    manifest.directory = std::filesystem::path(path).parent_path().string();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream is(line);
        ManifestEntry e;
        std::string seed_str;
        if (!std::getline(is, e.split, '\t') || !std::getline(is, seed_str, '\t') ||
            !std::getline(is, e.image_path, '\t') || !std::getline(is, e.label_path))
            throw FormatError(path + ": malformed manifest line " + std::to_string(lineno));
        e.seed = std::stoull(seed_str);
        manifest.entries.push_back(std::move(e));
    }
    return manifest;
}

struct SplitSeeds {
    std::uint64_t train = 0, val = 0, test = 0;  // start seeds per split
};

inline CorpusManifest make_corpus(const SceneSpec& base, const CorpusCounts& counts,
                                  const std::string& out_dir,
                                  std::optional<SplitSeeds> custom_seeds = std::nullopt) {
    if (counts.train < 1 || counts.val < 1 || counts.test < 1)
        throw ConfigError("make_corpus: each split needs at least one sample");
    SplitSeeds seeds;
    if (custom_seeds.has_value()) {
        seeds = *custom_seeds;
        struct Range {
            std::uint64_t lo, hi;
        };
        const Range ranges[3] = {{seeds.train, seeds.train + counts.train},
                                 {seeds.val, seeds.val + counts.val},
                                 {seeds.test, seeds.test + counts.test}};
        for (int i = 0; i < 3; ++i)
            for (int j = i + 1; j < 3; ++j)
                if (ranges[i].lo < ranges[j].hi && ranges[j].lo < ranges[i].hi)
                    throw ConfigError("make_corpus: seed ranges overlap between splits");
    } else {
        seeds.train = base.seed;
        seeds.val = base.seed + counts.train;
        seeds.test = base.seed + counts.train + counts.val;
    }

    std::filesystem::create_directories(out_dir);
    CorpusManifest manifest;
    manifest.directory = out_dir;

    auto emit_split = [&](const std::string& name, std::uint64_t start, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            SceneSpec spec = base;
            spec.seed = start + i;
            const Scene scene = generate_scene(spec);
            char stem[64];
            std::snprintf(stem, sizeof(stem), "%s_%04zu", name.c_str(), i);
            ManifestEntry e;
            e.split = name;
            e.seed = spec.seed;
            e.image_path = std::string(stem) + ".ppm";
            e.label_path = std::string(stem) + ".pgm";
            write_ppm((std::filesystem::path(out_dir) / e.image_path).string(), scene.image);
            write_pgm((std::filesystem::path(out_dir) / e.label_path).string(), scene.labels);
            manifest.entries.push_back(std::move(e));
        }
    };
    emit_split("train", seeds.train, counts.train);
    emit_split("val", seeds.val, counts.val);
    emit_split("test", seeds.test, counts.test);
    save_manifest(manifest, (std::filesystem::path(out_dir) / "manifest.tsv").string());
    return manifest;
}

// FNV-1a over every raster in manifest order.
inline std::uint64_t corpus_checksum(const CorpusManifest& manifest) {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    auto mix_file = [&](const std::string& rel) {
        const std::string full = (std::filesystem::path(manifest.directory) / rel).string();
        for (char byte : detail::read_file_bytes(full)) {
            hash ^= static_cast<unsigned char>(byte);
            hash *= 0x100000001b3ULL;
        }
    };
    for (const ManifestEntry& e : manifest.entries) {
        mix_file(e.image_path);
        mix_file(e.label_path);
    }
    return hash;
}

}  // namespace a2fpn
