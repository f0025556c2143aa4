#include "srseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>
#include <zlib.h>

namespace srseg {

namespace {

struct BaseColor {
    float r, g, b;
};

// solid fill colors; nearly isoluminant with small per-class channel tilts on
// the order of the pixel noise, so a single pixel is ambiguous and class
// identity must be pooled from context, while presence stays learnable from
// region statistics
constexpr BaseColor kBackground = {0.42f, 0.42f, 0.44f};
constexpr BaseColor kShapeColors[] = {
    {0.52f, 0.46f, 0.46f},  // circle
    {0.46f, 0.52f, 0.46f},  // square
    {0.46f, 0.46f, 0.54f},  // triangle
};

float quantize8(float v) { return std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f; }

// circumradius of a shape with the given area, used for in-bounds placement
double shape_extent(ShapeClass c, double area) {
    switch (c) {
        case ShapeClass::kCircle: return std::sqrt(area / 3.14159265358979323846);
        case ShapeClass::kSquare: return std::sqrt(area) / 2.0 * std::sqrt(2.0);
        case ShapeClass::kTriangle: return std::sqrt(area / 1.2990381056766578);  // 3*sqrt(3)/4 * s^2
    }
    throw std::logic_error("shape_extent: bad class");
}

double edge_side(double px, double py, double ax, double ay, double bx, double by) {
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

bool point_in_shape(ShapeClass c, double px, double py, double cx, double cy, double area) {
    switch (c) {
        case ShapeClass::kCircle: {
            const double r2 = area / 3.14159265358979323846;
            const double dx = px - cx, dy = py - cy;
            return dx * dx + dy * dy <= r2;
        }
        case ShapeClass::kSquare: {
            const double s = std::sqrt(area) / 2.0;
            return std::abs(px - cx) <= s && std::abs(py - cy) <= s;
        }
        case ShapeClass::kTriangle: {
            const double s = std::sqrt(area / 1.2990381056766578);
            const double ax = cx, ay = cy - s;
            const double bx = cx - 0.8660254037844386 * s, by = cy + 0.5 * s;
            const double ex = cx + 0.8660254037844386 * s, ey = cy + 0.5 * s;
            const double d1 = edge_side(px, py, ax, ay, bx, by);
            const double d2 = edge_side(px, py, bx, by, ex, ey);
            const double d3 = edge_side(px, py, ex, ey, ax, ay);
            const bool has_neg = d1 < 0 || d2 < 0 || d3 < 0;
            const bool has_pos = d1 > 0 || d2 > 0 || d3 > 0;
            return !(has_neg && has_pos);
        }
    }
    throw std::logic_error("point_in_shape: bad class");
}

}  // namespace

const char* shape_class_name(ShapeClass c) {
    switch (c) {
        case ShapeClass::kCircle: return "circle";
        case ShapeClass::kSquare: return "square";
        case ShapeClass::kTriangle: return "triangle";
    }
    throw std::logic_error("shape_class_name: bad class");
}

ShapeClass shape_class_from_name(const std::string& name) {
    if (name == "circle") return ShapeClass::kCircle;
    if (name == "square") return ShapeClass::kSquare;
    if (name == "triangle") return ShapeClass::kTriangle;
    throw std::invalid_argument("unknown shape class '" + name + "' (expected circle, square or triangle)");
}

void DatasetConfig::validate() const {
    if (count < 1) throw std::invalid_argument("dataset: count must be >= 1, got " + std::to_string(count));
    if (h < 16 || w < 16)
        throw std::invalid_argument("dataset: image size must be at least 16x16, got " + std::to_string(h) + "x" +
                                    std::to_string(w));
    if (classes.empty()) throw std::invalid_argument("dataset: classes must not be empty");
    for (std::size_t i = 0; i < classes.size(); ++i)
        for (std::size_t j = i + 1; j < classes.size(); ++j)
            if (classes[i] == classes[j])
                throw std::invalid_argument(std::string("dataset: duplicate class '") + shape_class_name(classes[i]) +
                                            "'");
    if (objects_min < 0 || objects_max < objects_min)
        throw std::invalid_argument("dataset: objects range [" + std::to_string(objects_min) + ", " +
                                    std::to_string(objects_max) + "] is not a valid range");
    if (!(min_object_fraction > 0) || min_object_fraction > max_object_fraction)
        throw std::invalid_argument("dataset: object fractions must satisfy 0 < min <= max");
    if (!(noise_sigma >= 0)) throw std::invalid_argument("dataset: noise_sigma must be >= 0");
    const double worst = shape_extent(ShapeClass::kTriangle, max_object_fraction * static_cast<double>(h * w));
    const double half = static_cast<double>(std::min(h, w)) / 2.0;
    if (worst >= half - 1.0)
        throw std::invalid_argument("dataset: max_object_fraction " + std::to_string(max_object_fraction) +
                                    " gives shapes of extent " + std::to_string(worst) +
                                    " that cannot fit inside " + std::to_string(h) + "x" + std::to_string(w));
}

std::vector<float> derive_image_labels(const std::vector<std::int32_t>& mask, std::int64_t num_foreground) {
    std::vector<float> labels(static_cast<std::size_t>(num_foreground), 0.0f);
    for (const std::int32_t v : mask) {
        if (v < 0 || v > num_foreground)
            throw std::invalid_argument("derive_image_labels: mask value " + std::to_string(v) + " outside [0, " +
                                        std::to_string(num_foreground) + "]");
        if (v > 0) labels[static_cast<std::size_t>(v - 1)] = 1.0f;
    }
    return labels;
}

Sample generate_sample(std::uint64_t global_seed, std::int64_t index, const DatasetConfig& config) {
    config.validate();
    if (index < 0 || index >= config.count)
        throw std::invalid_argument("generate_sample: index " + std::to_string(index) + " outside dataset of " +
                                    std::to_string(config.count));
    Rng rng(mix_seed(global_seed, static_cast<std::uint64_t>(index)));

    const std::int64_t h = config.h, w = config.w;
    Sample s;
    s.h = h;
    s.w = w;
    s.image.assign(static_cast<std::size_t>(3 * h * w), 0.0f);
    s.mask.assign(static_cast<std::size_t>(h * w), 0);
    for (std::int64_t i = 0; i < h * w; ++i) {
        s.image[static_cast<std::size_t>(i)] = kBackground.r;
        s.image[static_cast<std::size_t>(h * w + i)] = kBackground.g;
        s.image[static_cast<std::size_t>(2 * h * w + i)] = kBackground.b;
    }

    const std::int64_t n_objects =
        config.objects_min + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(
                                 config.objects_max - config.objects_min + 1)));
    for (std::int64_t obj = 0; obj < n_objects; ++obj) {
        const std::size_t class_idx = static_cast<std::size_t>(rng.below(config.classes.size()));
        const ShapeClass cls = config.classes[class_idx];
        const double fraction = rng.uniform(config.min_object_fraction, config.max_object_fraction);
        const double area = fraction * static_cast<double>(h * w);
        const double extent = shape_extent(cls, area);

        // bounded retries keep the object center outside every existing
        // shape; persistent collisions drop the object instead of failing
        bool placed = false;
        double cx = 0, cy = 0;
        for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
            cx = rng.uniform(extent, static_cast<double>(w) - extent);
            cy = rng.uniform(extent, static_cast<double>(h) - extent);
            const std::int64_t mx = static_cast<std::int64_t>(cx);
            const std::int64_t my = static_cast<std::int64_t>(cy);
            placed = s.mask[static_cast<std::size_t>(my * w + mx)] == 0;
        }
        if (!placed) continue;

        const std::int32_t id = static_cast<std::int32_t>(class_idx) + 1;
        const BaseColor color = kShapeColors[static_cast<int>(cls)];
        const std::int64_t x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(cx - extent)));
        const std::int64_t x1 = std::min<std::int64_t>(w - 1, static_cast<std::int64_t>(std::ceil(cx + extent)));
        const std::int64_t y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(cy - extent)));
        const std::int64_t y1 = std::min<std::int64_t>(h - 1, static_cast<std::int64_t>(std::ceil(cy + extent)));
        for (std::int64_t y = y0; y <= y1; ++y)
            for (std::int64_t x = x0; x <= x1; ++x) {
                if (!point_in_shape(cls, x + 0.5, y + 0.5, cx, cy, area)) continue;
                const std::size_t p = static_cast<std::size_t>(y * w + x);
                s.mask[p] = id;
                s.image[p] = color.r;
                s.image[static_cast<std::size_t>(h * w) + p] = color.g;
                s.image[static_cast<std::size_t>(2 * h * w) + p] = color.b;
            }
    }

    for (auto& v : s.image) v = quantize8(v + static_cast<float>(config.noise_sigma * rng.normal()));
    s.labels = derive_image_labels(s.mask, config.num_foreground());
    return s;
}

// ============================================================================
// Augmentation
// ============================================================================

AugmentParams draw_augment_params(Rng& rng) {
    AugmentParams p;
    p.flip = rng.coin();
    p.angle_deg = rng.uniform(-10.0, 10.0);
    p.scale = rng.uniform(0.5, 2.0);
    p.brightness = rng.uniform(0.9, 1.1);
    return p;
}

namespace {

// bilinear tap with zero fill outside the source
float sample_bilinear(const std::vector<float>& plane, std::int64_t h, std::int64_t w, std::int64_t plane_off,
                      double sy, double sx) {
    const std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
    const double fx = sx - static_cast<double>(x0);
    const double fy = sy - static_cast<double>(y0);
    auto at = [&](std::int64_t y, std::int64_t x) -> double {
        if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
        return plane[static_cast<std::size_t>(plane_off + y * w + x)];
    };
    const double top = at(y0, x0) * (1 - fx) + at(y0, x0 + 1) * fx;
    const double bot = at(y0 + 1, x0) * (1 - fx) + at(y0 + 1, x0 + 1) * fx;
    return static_cast<float>(top * (1 - fy) + bot * fy);
}

std::int32_t sample_nearest(const std::vector<std::int32_t>& mask, std::int64_t h, std::int64_t w, double sy,
                            double sx) {
    const std::int64_t x = static_cast<std::int64_t>(std::lround(sx));
    const std::int64_t y = static_cast<std::int64_t>(std::lround(sy));
    if (y < 0 || y >= h || x < 0 || x >= w) return 0;
    return mask[static_cast<std::size_t>(y * w + x)];
}

}  // namespace

Sample augment_with(const Sample& sample, const AugmentParams& params) {
    const std::int64_t h = sample.h, w = sample.w;
    Sample cur = sample;

    if (params.flip) {
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t y = 0; y < h; ++y)
                for (std::int64_t x = 0; x < w; ++x)
                    cur.image[static_cast<std::size_t>((c * h + y) * w + x)] =
                        sample.image[static_cast<std::size_t>((c * h + y) * w + (w - 1 - x))];
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
                cur.mask[static_cast<std::size_t>(y * w + x)] =
                    sample.mask[static_cast<std::size_t>(y * w + (w - 1 - x))];
    }

    if (params.angle_deg != 0.0) {
        const double rad = params.angle_deg * 3.14159265358979323846 / 180.0;
        const double c = std::cos(rad), s = std::sin(rad);
        const double cx = (static_cast<double>(w) - 1) / 2.0;
        const double cy = (static_cast<double>(h) - 1) / 2.0;
        Sample rot = cur;
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                const double dx = static_cast<double>(x) - cx;
                const double dy = static_cast<double>(y) - cy;
                const double sx = cx + c * dx + s * dy;
                const double sy = cy - s * dx + c * dy;
                for (std::int64_t ch = 0; ch < 3; ++ch)
                    rot.image[static_cast<std::size_t>((ch * h + y) * w + x)] =
                        sample_bilinear(cur.image, h, w, ch * h * w, sy, sx);
                rot.mask[static_cast<std::size_t>(y * w + x)] = sample_nearest(cur.mask, h, w, sy, sx);
            }
        cur = std::move(rot);
    }

    if (params.scale != 1.0) {
        if (!(params.scale > 0)) throw std::invalid_argument("augment: scale must be positive");
        const std::int64_t sh = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(h * params.scale)));
        const std::int64_t sw = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(w * params.scale)));
        std::vector<float> scaled_img(static_cast<std::size_t>(3 * sh * sw));
        std::vector<std::int32_t> scaled_mask(static_cast<std::size_t>(sh * sw));
        const double ry = static_cast<double>(h) / static_cast<double>(sh);
        const double rx = static_cast<double>(w) / static_cast<double>(sw);
        for (std::int64_t y = 0; y < sh; ++y)
            for (std::int64_t x = 0; x < sw; ++x) {
                const double sy = (static_cast<double>(y) + 0.5) * ry - 0.5;
                const double sx = (static_cast<double>(x) + 0.5) * rx - 0.5;
                for (std::int64_t ch = 0; ch < 3; ++ch)
                    scaled_img[static_cast<std::size_t>((ch * sh + y) * sw + x)] =
                        sample_bilinear(cur.image, h, w, ch * h * w, sy, sx);
                scaled_mask[static_cast<std::size_t>(y * sw + x)] = sample_nearest(cur.mask, h, w, sy, sx);
            }
        // center crop back down, or center zero-pad back up
        Sample out = cur;
        std::fill(out.image.begin(), out.image.end(), 0.0f);
        std::fill(out.mask.begin(), out.mask.end(), 0);
        const std::int64_t oy = (sh - h) / 2;
        const std::int64_t ox = (sw - w) / 2;
        for (std::int64_t y = 0; y < h; ++y) {
            const std::int64_t yy = y + oy;
            if (yy < 0 || yy >= sh) continue;
            for (std::int64_t x = 0; x < w; ++x) {
                const std::int64_t xx = x + ox;
                if (xx < 0 || xx >= sw) continue;
                for (std::int64_t ch = 0; ch < 3; ++ch)
                    out.image[static_cast<std::size_t>((ch * h + y) * w + x)] =
                        scaled_img[static_cast<std::size_t>((ch * sh + yy) * sw + xx)];
                out.mask[static_cast<std::size_t>(y * w + x)] = scaled_mask[static_cast<std::size_t>(yy * sw + xx)];
            }
        }
        cur = std::move(out);
    }

    if (params.brightness != 1.0) {
        for (auto& v : cur.image) v = std::clamp(v * static_cast<float>(params.brightness), 0.0f, 1.0f);
    }

    cur.labels = derive_image_labels(cur.mask, static_cast<std::int64_t>(sample.labels.size()));
    return cur;
}

Sample augment(const Sample& sample, std::uint64_t seed) {
    Rng rng(seed);
    return augment_with(sample, draw_augment_params(rng));
}

// ============================================================================
// PPM / PGM / manifest IO
// ============================================================================

namespace {

[[noreturn]] void malformed(const std::string& path, std::size_t offset, const std::string& what) {
    throw std::runtime_error(path + ": " + what + " at byte " + std::to_string(offset));
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open for reading");
    std::ostringstream buf;
    buf << in.rdbuf();
    return std::move(buf).str();
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error(path + ": write failed");
}

// parses "P6\n<w> <h>\n255\n"-style netpbm headers: magic, then three
// whitespace-separated decimal fields, then exactly one whitespace byte
std::size_t parse_netpbm_header(const std::string& path, const std::string& bytes, const char* magic,
                                std::int64_t& out_w, std::int64_t& out_h) {
    std::size_t pos = 0;
    for (const char* m = magic; *m; ++m, ++pos) {
        if (pos >= bytes.size() || bytes[pos] != *m)
            malformed(path, pos, std::string("expected magic '") + magic + "'");
    }
    std::int64_t fields[3];
    for (int f = 0; f < 3; ++f) {
        while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos])))
            malformed(path, pos, "expected decimal header field");
        std::int64_t v = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + (bytes[pos] - '0');
            if (v > 1'000'000'000) malformed(path, pos, "header field out of range");
            ++pos;
        }
        fields[f] = v;
    }
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        malformed(path, pos, "expected single whitespace before pixel data");
    ++pos;
    if (fields[2] != 255) malformed(path, pos, "maxval must be 255");
    out_w = fields[0];
    out_h = fields[1];
    if (out_w < 1 || out_h < 1) malformed(path, pos, "image dimensions must be positive");
    return pos;
}

}  // namespace

void write_ppm(const std::string& path, const Sample& sample) {
    std::string bytes = "P6\n" + std::to_string(sample.w) + " " + std::to_string(sample.h) + "\n255\n";
    bytes.reserve(bytes.size() + static_cast<std::size_t>(3 * sample.h * sample.w));
    const std::int64_t plane = sample.h * sample.w;
    for (std::int64_t i = 0; i < plane; ++i)
        for (std::int64_t c = 0; c < 3; ++c) {
            const float v = sample.image[static_cast<std::size_t>(c * plane + i)];
            bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
        }
    write_file(path, bytes);
}

void write_pgm(const std::string& path, const Sample& sample) {
    std::string bytes = "P5\n" + std::to_string(sample.w) + " " + std::to_string(sample.h) + "\n255\n";
    bytes.reserve(bytes.size() + static_cast<std::size_t>(sample.h * sample.w));
    for (const std::int32_t v : sample.mask) {
        if (v < 0 || v > 255) throw std::invalid_argument(path + ": mask value " + std::to_string(v) + " not a byte");
        bytes.push_back(static_cast<char>(static_cast<unsigned char>(v)));
    }
    write_file(path, bytes);
}

void read_ppm(const std::string& path, Sample& sample) {
    const std::string bytes = read_file(path);
    std::int64_t w = 0, h = 0;
    const std::size_t data_at = parse_netpbm_header(path, bytes, "P6", w, h);
    const std::size_t expected = static_cast<std::size_t>(3 * w * h);
    if (bytes.size() - data_at != expected)
        malformed(path, bytes.size(),
                  "expected " + std::to_string(expected) + " pixel bytes (total file length " +
                      std::to_string(data_at + expected) + "), got " + std::to_string(bytes.size() - data_at));
    sample.h = h;
    sample.w = w;
    sample.image.assign(expected, 0.0f);
    const std::int64_t plane = h * w;
    for (std::int64_t i = 0; i < plane; ++i)
        for (std::int64_t c = 0; c < 3; ++c)
            sample.image[static_cast<std::size_t>(c * plane + i)] =
                static_cast<float>(static_cast<unsigned char>(bytes[data_at + static_cast<std::size_t>(3 * i + c)])) /
                255.0f;
}

void read_pgm(const std::string& path, Sample& sample) {
    const std::string bytes = read_file(path);
    std::int64_t w = 0, h = 0;
    const std::size_t data_at = parse_netpbm_header(path, bytes, "P5", w, h);
    if (sample.h != 0 && (h != sample.h || w != sample.w))
        throw std::runtime_error(path + ": mask is " + std::to_string(w) + "x" + std::to_string(h) +
                                 " but image is " + std::to_string(sample.w) + "x" + std::to_string(sample.h));
    const std::size_t expected = static_cast<std::size_t>(h * w);
    if (bytes.size() - data_at != expected)
        malformed(path, bytes.size(),
                  "expected " + std::to_string(expected) + " mask bytes (total file length " +
                      std::to_string(data_at + expected) + "), got " + std::to_string(bytes.size() - data_at));
    sample.h = h;
    sample.w = w;
    sample.mask.assign(expected, 0);
    for (std::size_t i = 0; i < expected; ++i)
        sample.mask[i] = static_cast<std::int32_t>(static_cast<unsigned char>(bytes[data_at + i]));
}

std::uint32_t file_crc32(const std::string& path) {
    const std::string bytes = read_file(path);
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

// ============================================================================
// Dataset directory
// ============================================================================

namespace {

std::string sample_stem(std::int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%05lld", static_cast<long long>(index));
    return buf;
}

nlohmann::json config_to_json(const DatasetConfig& c) {
    nlohmann::json classes = nlohmann::json::array();
    for (const ShapeClass s : c.classes) classes.push_back(shape_class_name(s));
    return {
        {"seed", c.seed},
        {"count", c.count},
        {"height", c.h},
        {"width", c.w},
        {"classes", classes},
        {"objects_min", c.objects_min},
        {"objects_max", c.objects_max},
        {"min_object_fraction", c.min_object_fraction},
        {"max_object_fraction", c.max_object_fraction},
        {"noise_sigma", c.noise_sigma},
    };
}

DatasetConfig config_from_json(const nlohmann::json& j, const std::string& where) {
    DatasetConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.count = j.at("count").get<std::int64_t>();
    c.h = j.at("height").get<std::int64_t>();
    c.w = j.at("width").get<std::int64_t>();
    c.classes.clear();
    for (const auto& name : j.at("classes")) c.classes.push_back(shape_class_from_name(name.get<std::string>()));
    c.objects_min = j.at("objects_min").get<std::int64_t>();
    c.objects_max = j.at("objects_max").get<std::int64_t>();
    c.min_object_fraction = j.at("min_object_fraction").get<double>();
    c.max_object_fraction = j.at("max_object_fraction").get<double>();
    c.noise_sigma = j.at("noise_sigma").get<double>();
    for (const auto& [key, value] : j.items()) {
        (void)value;
        static const char* known[] = {"seed",        "count",       "height",
                                      "width",       "classes",     "objects_min",
                                      "objects_max", "min_object_fraction", "max_object_fraction",
                                      "noise_sigma"};
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw std::runtime_error(where + ": unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

}  // namespace

void write_dataset(const std::string& dir, const DatasetConfig& config) {
    config.validate();
    std::filesystem::create_directories(dir);
    nlohmann::json samples = nlohmann::json::array();
    for (std::int64_t i = 0; i < config.count; ++i) {
        const Sample s = generate_sample(config.seed, i, config);
        const std::string stem = sample_stem(i);
        const std::string img_name = stem + ".ppm";
        const std::string mask_name = stem + "_mask.pgm";
        write_ppm(dir + "/" + img_name, s);
        write_pgm(dir + "/" + mask_name, s);
        samples.push_back({
            {"image", img_name},
            {"mask", mask_name},
            {"labels", s.labels},
            {"image_crc32", file_crc32(dir + "/" + img_name)},
            {"mask_crc32", file_crc32(dir + "/" + mask_name)},
        });
    }
    nlohmann::json manifest = {{"config", config_to_json(config)}, {"samples", samples}};
    write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
}

Dataset read_dataset(const std::string& dir) {
    const std::string manifest_path = dir + "/manifest.json";
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_file(manifest_path));
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(manifest_path + ": " + e.what() + " at byte " + std::to_string(e.byte));
    }
    for (const auto& [key, value] : manifest.items()) {
        (void)value;
        if (key != "config" && key != "samples")
            throw std::runtime_error(manifest_path + ": unknown key '" + key + "'");
    }

    Dataset ds;
    ds.config = config_from_json(manifest.at("config"), manifest_path + ": config");
    const auto& samples = manifest.at("samples");
    if (static_cast<std::int64_t>(samples.size()) != ds.config.count)
        throw std::runtime_error(manifest_path + ": manifest lists " + std::to_string(samples.size()) +
                                 " samples but config.count is " + std::to_string(ds.config.count));

    ds.samples.reserve(samples.size());
    for (const auto& entry : samples) {
        const std::string img_path = dir + "/" + entry.at("image").get<std::string>();
        const std::string mask_path = dir + "/" + entry.at("mask").get<std::string>();
        const std::uint32_t img_crc = entry.at("image_crc32").get<std::uint32_t>();
        const std::uint32_t mask_crc = entry.at("mask_crc32").get<std::uint32_t>();
        if (file_crc32(img_path) != img_crc)
            throw std::runtime_error(img_path + ": CRC32 mismatch against manifest");
        if (file_crc32(mask_path) != mask_crc)
            throw std::runtime_error(mask_path + ": CRC32 mismatch against manifest");

        Sample s;
        read_ppm(img_path, s);
        read_pgm(mask_path, s);
        if (s.h != ds.config.h || s.w != ds.config.w)
            throw std::runtime_error(img_path + ": sample is " + std::to_string(s.w) + "x" + std::to_string(s.h) +
                                     " but dataset config says " + std::to_string(ds.config.w) + "x" +
                                     std::to_string(ds.config.h));
        s.labels = entry.at("labels").get<std::vector<float>>();
        const std::vector<float> derived = derive_image_labels(s.mask, ds.config.num_foreground());
        if (s.labels != derived)
            throw std::runtime_error(mask_path + ": manifest labels disagree with the mask contents");
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace srseg
