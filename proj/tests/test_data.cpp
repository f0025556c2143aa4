// Synthetic dataset tests: deterministic generation, per-sample stream
// independence, label derivation, augmentation invariants, and the PPM/PGM
// plus manifest round trip with checksum and structure verification.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "srseg/data.hpp"
#include "srseg/rng.hpp"

using namespace srseg;
namespace fs = std::filesystem;

namespace {

DatasetConfig small_config() {
    DatasetConfig c;
    c.seed = 41;
    c.count = 6;
    c.h = 24;
    c.w = 24;
    return c;
}

// fresh scratch directory per test, removed on destruction
struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("srseg_data_test_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(static_cast<bool>(in));
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void dump(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    REQUIRE(static_cast<bool>(out));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

bool on_u8_grid(float v) {
    const float scaled = v * 255.0f;
    return v >= 0.0f && v <= 1.0f && scaled == std::round(scaled);
}

}  // namespace

// ============================================================================
// Config validation
// ============================================================================

TEST_CASE("dataset config rejects out-of-domain values") {
    auto bad = [](auto&& tweak, const char* needle) {
        DatasetConfig c = small_config();
        tweak(c);
        CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains(needle), std::invalid_argument);
    };
    bad([](DatasetConfig& c) { c.count = 0; }, "count must be >= 1");
    bad([](DatasetConfig& c) { c.h = 15; }, "at least 16x16");
    bad([](DatasetConfig& c) { c.w = 8; }, "at least 16x16");
    bad([](DatasetConfig& c) { c.classes.clear(); }, "classes must not be empty");
    bad([](DatasetConfig& c) { c.classes = {ShapeClass::kSquare, ShapeClass::kSquare}; }, "duplicate class 'square'");
    bad([](DatasetConfig& c) { c.objects_min = 3, c.objects_max = 1; }, "not a valid range");
    bad([](DatasetConfig& c) { c.objects_min = -1; }, "not a valid range");
    bad([](DatasetConfig& c) { c.min_object_fraction = 0.0; }, "0 < min <= max");
    bad([](DatasetConfig& c) { c.min_object_fraction = 0.1, c.max_object_fraction = 0.05; }, "0 < min <= max");
    bad([](DatasetConfig& c) { c.noise_sigma = -0.1; }, "noise_sigma must be >= 0");
    bad([](DatasetConfig& c) { c.max_object_fraction = 0.9; }, "cannot fit");
    CHECK_NOTHROW(small_config().validate());
}

TEST_CASE("shape class names round-trip and reject unknowns") {
    for (const ShapeClass c : {ShapeClass::kCircle, ShapeClass::kSquare, ShapeClass::kTriangle})
        CHECK(shape_class_from_name(shape_class_name(c)) == c);
    CHECK(std::string(shape_class_name(ShapeClass::kCircle)) == "circle");
    CHECK_THROWS_WITH_AS(shape_class_from_name("hexagon"), doctest::Contains("unknown shape class 'hexagon'"),
                         std::invalid_argument);
}

// ============================================================================
// Generation
// ============================================================================

TEST_CASE("generation is deterministic and quantized to the 8-bit grid") {
    const DatasetConfig c = small_config();
    const Sample a = generate_sample(c.seed, 3, c);
    const Sample b = generate_sample(c.seed, 3, c);
    CHECK(a == b);

    CHECK(a.h == c.h);
    CHECK(a.w == c.w);
    CHECK(a.image.size() == static_cast<std::size_t>(3 * c.h * c.w));
    CHECK(a.mask.size() == static_cast<std::size_t>(c.h * c.w));
    for (const float v : a.image) REQUIRE(on_u8_grid(v));
    for (const std::int32_t v : a.mask) {
        REQUIRE(v >= 0);
        REQUIRE(v <= c.num_foreground());
    }
}

TEST_CASE("samples differ across indices and across global seeds") {
    const DatasetConfig c = small_config();
    const Sample s0 = generate_sample(c.seed, 0, c);
    const Sample s1 = generate_sample(c.seed, 1, c);
    CHECK(s0 != s1);

    const Sample other_seed = generate_sample(c.seed + 1, 0, c);
    CHECK(s0 != other_seed);
}

TEST_CASE("sample k does not depend on dataset count") {
    // each sample draws only from its own seed stream, so shrinking or
    // growing the dataset must not change earlier samples
    DatasetConfig c = small_config();
    const Sample in_six = generate_sample(c.seed, 2, c);
    c.count = 100;
    const Sample in_hundred = generate_sample(c.seed, 2, c);
    CHECK(in_six == in_hundred);
}

TEST_CASE("generate_sample rejects out-of-range indices") {
    const DatasetConfig c = small_config();
    CHECK_THROWS_WITH_AS(generate_sample(c.seed, -1, c), doctest::Contains("index -1"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(generate_sample(c.seed, c.count, c), doctest::Contains("outside dataset"),
                         std::invalid_argument);
}

TEST_CASE("labels flag exactly the classes present in the mask") {
    DatasetConfig c = small_config();
    c.count = 32;
    for (std::int64_t i = 0; i < c.count; ++i) {
        const Sample s = generate_sample(c.seed, i, c);
        REQUIRE(s.labels.size() == static_cast<std::size_t>(c.num_foreground()));
        std::set<std::int32_t> present(s.mask.begin(), s.mask.end());
        for (std::int64_t k = 1; k <= c.num_foreground(); ++k) {
            const bool in_mask = present.count(static_cast<std::int32_t>(k)) > 0;
            CHECK(s.labels[static_cast<std::size_t>(k - 1)] == (in_mask ? 1.0f : 0.0f));
        }
        CHECK(s.labels == derive_image_labels(s.mask, c.num_foreground()));
    }
}

TEST_CASE("derive_image_labels rejects ids outside the class range") {
    CHECK_THROWS_WITH_AS(derive_image_labels({0, 1, 4}, 3), doctest::Contains("mask value 4"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(derive_image_labels({-1}, 3), doctest::Contains("mask value -1"), std::invalid_argument);
    CHECK(derive_image_labels({0, 0, 2}, 3) == std::vector<float>{0.0f, 1.0f, 0.0f});
}

TEST_CASE("subset class lists keep mask ids dense") {
    DatasetConfig c = small_config();
    c.classes = {ShapeClass::kTriangle};
    c.count = 16;
    bool saw_foreground = false;
    for (std::int64_t i = 0; i < c.count; ++i) {
        const Sample s = generate_sample(c.seed, i, c);
        for (const std::int32_t v : s.mask) {
            REQUIRE(v >= 0);
            REQUIRE(v <= 1);
            saw_foreground = saw_foreground || v == 1;
        }
        REQUIRE(s.labels.size() == 1);
    }
    CHECK(saw_foreground);
}

TEST_CASE("every foreground class appears somewhere in a default dataset") {
    DatasetConfig c = small_config();
    c.count = 48;
    std::set<std::int32_t> seen;
    for (std::int64_t i = 0; i < c.count; ++i) {
        const Sample s = generate_sample(c.seed, i, c);
        seen.insert(s.mask.begin(), s.mask.end());
    }
    for (std::int32_t k = 0; k <= 3; ++k) CHECK(seen.count(k) == 1);
}

// ============================================================================
// Augmentation
// ============================================================================

TEST_CASE("identity augment parameters reproduce the sample exactly") {
    const DatasetConfig c = small_config();
    const Sample s = generate_sample(c.seed, 0, c);
    const AugmentParams id{};  // flip=false, angle 0, scale 1, brightness 1
    CHECK(augment_with(s, id) == s);
}

TEST_CASE("horizontal flip is an involution and preserves labels") {
    const DatasetConfig c = small_config();
    const Sample s = generate_sample(c.seed, 1, c);
    AugmentParams p{};
    p.flip = true;
    const Sample once = augment_with(s, p);
    CHECK(once != s);
    CHECK(once.labels == s.labels);
    CHECK(augment_with(once, p) == s);
}

TEST_CASE("augmentation keeps samples structurally valid") {
    const DatasetConfig c = small_config();
    Rng rng(2026);
    for (int trial = 0; trial < 20; ++trial) {
        const Sample s = generate_sample(c.seed, trial % c.count, c);
        const AugmentParams p = draw_augment_params(rng);
        CHECK(p.angle_deg >= -10.0);
        CHECK(p.angle_deg <= 10.0);
        CHECK(p.scale >= 0.5);
        CHECK(p.scale <= 2.0);
        CHECK(p.brightness >= 0.9);
        CHECK(p.brightness <= 1.1);

        const Sample out = augment_with(s, p);
        REQUIRE(out.h == s.h);
        REQUIRE(out.w == s.w);
        REQUIRE(out.image.size() == s.image.size());
        REQUIRE(out.mask.size() == s.mask.size());
        for (const float v : out.image) {
            REQUIRE(v >= 0.0f);
            REQUIRE(v <= 1.0f);
        }
        // nearest-neighbor resampling can only reuse existing mask ids
        const std::set<std::int32_t> in_ids(s.mask.begin(), s.mask.end());
        for (const std::int32_t v : out.mask) REQUIRE(in_ids.count(v) == 1);
        CHECK(out.labels == derive_image_labels(out.mask, c.num_foreground()));
    }
}

TEST_CASE("seeded augment is deterministic and rejects non-positive scale") {
    const DatasetConfig c = small_config();
    const Sample s = generate_sample(c.seed, 2, c);
    CHECK(augment(s, 7) == augment(s, 7));
    AugmentParams p{};
    p.scale = 0.0;
    CHECK_THROWS_WITH_AS(augment_with(s, p), doctest::Contains("scale must be positive"), std::invalid_argument);
}

TEST_CASE("brightness scales pixel values with clamping") {
    const DatasetConfig c = small_config();
    const Sample s = generate_sample(c.seed, 4, c);
    AugmentParams p{};
    p.brightness = 1.1;
    const Sample out = augment_with(s, p);
    for (std::size_t i = 0; i < s.image.size(); ++i) {
        const float want = std::min(1.0f, s.image[i] * 1.1f);
        REQUIRE(out.image[i] == doctest::Approx(want).epsilon(1e-6));
    }
    CHECK(out.mask == s.mask);
}

// ============================================================================
// Single-file round trips
// ============================================================================

TEST_CASE("ppm and pgm round-trip a sample bit-exactly") {
    TempDir dir("pnm_roundtrip");
    const DatasetConfig c = small_config();
    const Sample s = generate_sample(c.seed, 0, c);
    write_ppm(dir.str() + "/img.ppm", s);
    write_pgm(dir.str() + "/mask.pgm", s);

    Sample back;
    read_ppm(dir.str() + "/img.ppm", back);
    read_pgm(dir.str() + "/mask.pgm", back);
    back.labels = derive_image_labels(back.mask, c.num_foreground());
    CHECK(back == s);
}

TEST_CASE("pgm reader rejects a mask whose size disagrees with the image") {
    TempDir dir("pnm_mismatch");
    const DatasetConfig c = small_config();
    const Sample s = generate_sample(c.seed, 0, c);
    DatasetConfig c2 = small_config();
    c2.h = 32;
    c2.w = 32;
    const Sample bigger = generate_sample(c2.seed, 0, c2);
    write_ppm(dir.str() + "/img.ppm", s);
    write_pgm(dir.str() + "/mask.pgm", bigger);

    Sample back;
    read_ppm(dir.str() + "/img.ppm", back);
    CHECK_THROWS_WITH_AS(read_pgm(dir.str() + "/mask.pgm", back), doctest::Contains("but image is"),
                         std::runtime_error);
}

TEST_CASE("netpbm reader reports the byte offset of the first malformed location") {
    TempDir dir("pnm_malformed");
    const std::string path = dir.str() + "/bad.ppm";
    Sample s;

    dump(path, "P5\n2 2\n255\n....");  // wrong magic for a ppm
    CHECK_THROWS_WITH_AS(read_ppm(path, s), doctest::Contains("expected magic 'P6' at byte 1"), std::runtime_error);

    dump(path, "P6\nx 2\n255\n");  // non-numeric width at byte 3
    CHECK_THROWS_WITH_AS(read_ppm(path, s), doctest::Contains("expected decimal header field at byte 3"),
                         std::runtime_error);

    dump(path, "P6\n2 2\n254\n" + std::string(12, '\0'));  // wrong maxval
    CHECK_THROWS_WITH_AS(read_ppm(path, s), doctest::Contains("maxval must be 255"), std::runtime_error);

    dump(path, "P6\n2 2\n255");  // header ends at EOF, no whitespace separator
    CHECK_THROWS_WITH_AS(read_ppm(path, s), doctest::Contains("expected single whitespace"), std::runtime_error);
}

TEST_CASE("truncated pixel data is reported with byte counts") {
    TempDir dir("pnm_truncated");
    const DatasetConfig c = small_config();
    const Sample s = generate_sample(c.seed, 0, c);
    const std::string path = dir.str() + "/img.ppm";
    write_ppm(path, s);
    const std::string full = slurp(path);
    dump(path, full.substr(0, full.size() - 5));

    Sample back;
    CHECK_THROWS_WITH_AS(read_ppm(path, back), doctest::Contains("byte"), std::runtime_error);
    CHECK_THROWS_WITH_AS(read_ppm(path, back), doctest::Contains("expected 1728 pixel bytes"), std::runtime_error);

    const std::string mask_path = dir.str() + "/mask.pgm";
    write_pgm(mask_path, s);
    const std::string mask_full = slurp(mask_path);
    dump(mask_path, mask_full + "x");  // trailing junk is also a length error
    CHECK_THROWS_WITH_AS(read_pgm(mask_path, back), doctest::Contains("expected 576 mask bytes"), std::runtime_error);
}

// ============================================================================
// Dataset directory round trip
// ============================================================================

TEST_CASE("write_dataset / read_dataset round-trips config and samples bit-exactly") {
    TempDir dir("roundtrip");
    const DatasetConfig c = small_config();
    write_dataset(dir.str(), c);

    const Dataset ds = read_dataset(dir.str());
    CHECK(ds.config.seed == c.seed);
    CHECK(ds.config.count == c.count);
    CHECK(ds.config.h == c.h);
    CHECK(ds.config.w == c.w);
    CHECK(ds.config.classes == c.classes);
    CHECK(ds.config.objects_min == c.objects_min);
    CHECK(ds.config.objects_max == c.objects_max);
    CHECK(ds.config.min_object_fraction == c.min_object_fraction);
    CHECK(ds.config.max_object_fraction == c.max_object_fraction);
    CHECK(ds.config.noise_sigma == c.noise_sigma);

    REQUIRE(ds.samples.size() == static_cast<std::size_t>(c.count));
    for (std::int64_t i = 0; i < c.count; ++i) {
        const Sample want = generate_sample(c.seed, i, c);
        REQUIRE(ds.samples[static_cast<std::size_t>(i)] == want);
    }
}

TEST_CASE("a corrupted pixel is caught by the manifest checksum") {
    TempDir dir("crc");
    write_dataset(dir.str(), small_config());

    const std::string victim = dir.str() + "/00002.ppm";
    std::string bytes = slurp(victim);
    bytes[bytes.size() / 2] = static_cast<char>(static_cast<unsigned char>(bytes[bytes.size() / 2]) ^ 0x01);
    dump(victim, bytes);

    CHECK_THROWS_WITH_AS(read_dataset(dir.str()), doctest::Contains("00002.ppm: CRC32 mismatch"), std::runtime_error);
}

TEST_CASE("a corrupted mask is caught by the manifest checksum") {
    TempDir dir("crc_mask");
    write_dataset(dir.str(), small_config());

    const std::string victim = dir.str() + "/00001_mask.pgm";
    std::string bytes = slurp(victim);
    bytes.back() = static_cast<char>(static_cast<unsigned char>(bytes.back()) ^ 0xFF);
    dump(victim, bytes);

    CHECK_THROWS_WITH_AS(read_dataset(dir.str()), doctest::Contains("00001_mask.pgm: CRC32 mismatch"),
                         std::runtime_error);
}

TEST_CASE("manifest label rows must match the mask contents") {
    TempDir dir("labels");
    write_dataset(dir.str(), small_config());

    // rewrite one file with a blanked mask while keeping the CRC entry fresh,
    // so only the label/mask consistency check can catch the edit
    const std::string manifest_path = dir.str() + "/manifest.json";
    std::string manifest = slurp(manifest_path);

    Sample s;
    read_ppm(dir.str() + "/00000.ppm", s);
    read_pgm(dir.str() + "/00000_mask.pgm", s);
    std::fill(s.mask.begin(), s.mask.end(), 0);
    write_pgm(dir.str() + "/00000_mask.pgm", s);

    const std::string old_crc = std::to_string(file_crc32(dir.str() + "/00000_mask.pgm"));
    // splice the fresh CRC into the first sample's mask_crc32 entry
    const std::string key = "\"mask_crc32\": ";
    const std::size_t at = manifest.find(key);
    REQUIRE(at != std::string::npos);
    std::size_t end = at + key.size();
    while (end < manifest.size() && std::isdigit(static_cast<unsigned char>(manifest[end]))) ++end;
    manifest = manifest.substr(0, at + key.size()) + old_crc + manifest.substr(end);
    dump(manifest_path, manifest);

    CHECK_THROWS_WITH_AS(read_dataset(dir.str()), doctest::Contains("manifest labels disagree"), std::runtime_error);
}

TEST_CASE("manifest structure errors are reported by path") {
    TempDir dir("manifest_errors");
    write_dataset(dir.str(), small_config());
    const std::string manifest_path = dir.str() + "/manifest.json";
    const std::string good = slurp(manifest_path);

    dump(manifest_path, "{ not json");
    CHECK_THROWS_WITH_AS(read_dataset(dir.str()), doctest::Contains("manifest.json:"), std::runtime_error);
    CHECK_THROWS_WITH_AS(read_dataset(dir.str()), doctest::Contains("byte"), std::runtime_error);

    std::string extra = good;
    const std::size_t brace = extra.find('{');
    REQUIRE(brace != std::string::npos);
    extra.insert(brace + 1, "\"extra\": 1,");
    dump(manifest_path, extra);
    CHECK_THROWS_WITH_AS(read_dataset(dir.str()), doctest::Contains("unknown key 'extra'"), std::runtime_error);

    std::string wrong_count = good;
    const std::string count_key = "\"count\": 6";
    const std::size_t cat = wrong_count.find(count_key);
    REQUIRE(cat != std::string::npos);
    wrong_count.replace(cat, count_key.size(), "\"count\": 7");
    dump(manifest_path, wrong_count);
    CHECK_THROWS_WITH_AS(read_dataset(dir.str()), doctest::Contains("manifest lists 6 samples but config.count is 7"),
                         std::runtime_error);

    dump(manifest_path, good);
    CHECK_NOTHROW(read_dataset(dir.str()));
}

TEST_CASE("file_crc32 matches a known zlib vector") {
    TempDir dir("crc_vector");
    const std::string path = dir.str() + "/vec.bin";
    dump(path, "123456789");
    CHECK(file_crc32(path) == 0xCBF43926u);  // standard CRC-32 check value
}
