#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "srseg/rng.hpp"

namespace srseg {

// ============================================================================
// Synthetic shape dataset
// ============================================================================
//
// Images are geometric shapes (circle, square, triangle) in solid per-class
// colors on a dark background, both perturbed by Gaussian pixel noise, with
// a per-pixel class mask and image-level presence labels derived from it.
// Every sample is generated from its own seed stream, so regeneration of
// sample k never depends on any other sample.

enum class ShapeClass { kCircle, kSquare, kTriangle };

const char* shape_class_name(ShapeClass c);
ShapeClass shape_class_from_name(const std::string& name);

struct DatasetConfig {
    std::uint64_t seed = 0;
    std::int64_t count = 512;
    std::int64_t h = 64, w = 64;
    // enabled shape classes; mask ids are assigned 1..K in this canonical
    // order, so the id space stays dense for any subset
    std::vector<ShapeClass> classes = {ShapeClass::kCircle, ShapeClass::kSquare, ShapeClass::kTriangle};
    std::int64_t objects_min = 1, objects_max = 3;
    double min_object_fraction = 0.005;  // smallest shape area / image area
    double max_object_fraction = 0.08;
    double noise_sigma = 0.05;

    std::int64_t num_foreground() const { return static_cast<std::int64_t>(classes.size()); }
    void validate() const;
};

struct Sample {
    std::int64_t h = 0, w = 0;
    std::vector<float> image;         // 3 x h x w planes, values in [0,1]
    std::vector<std::int32_t> mask;   // h x w, 0 background, 1..K foreground
    std::vector<float> labels;        // K entries, 1 where the class appears

    bool operator==(const Sample&) const = default;
};

// presence indicator per foreground class, read off the mask
std::vector<float> derive_image_labels(const std::vector<std::int32_t>& mask, std::int64_t num_foreground);

// Deterministic generation: the sample's stream is seeded by
// mix_seed(global_seed, index) alone. Pixel values are quantized to the
// 8-bit grid at generation time so file round-trips are bit-exact.
Sample generate_sample(std::uint64_t global_seed, std::int64_t index, const DatasetConfig& config);

// ============================================================================
// Augmentation
// ============================================================================

// One drawn augmentation: horizontal flip, small rotation, rescale with
// center crop / zero padding back to the original size, brightness jitter,
// applied in that order. Images resample bilinearly, masks nearest-neighbor.
struct AugmentParams {
    bool flip = false;
    double angle_deg = 0.0;    // [-10, 10]
    double scale = 1.0;        // [0.5, 2]
    double brightness = 1.0;   // [0.9, 1.1]
};

AugmentParams draw_augment_params(Rng& rng);
Sample augment_with(const Sample& sample, const AugmentParams& params);
Sample augment(const Sample& sample, std::uint64_t seed);

// ============================================================================
// Dataset files
// ============================================================================
//
// Layout under a dataset directory: one binary PPM (P6) per image, one
// binary PGM (P5) per mask (pixel value = class id), and manifest.json
// listing the config, per-sample file names, label vectors, and a CRC32
// per file. Readers verify structure and checksums and report the byte
// offset of the first malformed location.

void write_dataset(const std::string& dir, const DatasetConfig& config);

struct Dataset {
    DatasetConfig config;
    std::vector<Sample> samples;
};

Dataset read_dataset(const std::string& dir);

// single-file primitives, exposed for tests and tooling
void write_ppm(const std::string& path, const Sample& sample);
void write_pgm(const std::string& path, const Sample& sample);
void read_ppm(const std::string& path, Sample& sample);   // fills h, w, image
void read_pgm(const std::string& path, Sample& sample);   // fills mask, checks h/w
std::uint32_t file_crc32(const std::string& path);

}  // namespace srseg
