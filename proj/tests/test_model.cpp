#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "srseg/model.hpp"
#include "srseg/rng.hpp"
#include "srseg/serialize.hpp"
#include "srseg/tensor.hpp"

using namespace srseg;

namespace {

void clear_tape() {
    Tape<double>::active().clear();
    Tape<float>::active().clear();
}

ModelConfig tiny_conv() {
    ModelConfig c;
    c.arch = ArchKind::kConv;
    c.num_blocks = 2;
    c.channels = {2, 3};
    c.adapter_dim = 2;
    c.input_h = 8;
    c.input_w = 8;
    return c;
}

ModelConfig small_ushape() {
    ModelConfig c;
    c.arch = ArchKind::kUShape;
    c.num_blocks = 2;
    c.channels = {4, 6};
    c.adapter_dim = 3;
    c.input_h = 16;
    c.input_w = 16;
    return c;
}

// Gives every batch-norm a non-trivial eval behavior.
template <typename T>
void randomize_running_stats(Model<T>& m, std::uint64_t seed) {
    Rng rng(seed);
    m.visit_state([&](const std::string&, std::vector<T>& buf) {
        for (auto& v : buf) v = static_cast<T>(rng.uniform(0.3, 2.0));
    });
}

// Eval-mode batchnorm on a plain buffer.
void bn_eval_ref(std::vector<double>& x, std::int64_t B, std::int64_t C, std::int64_t plane,
                 const std::vector<double>& gamma, const std::vector<double>& beta,
                 const std::vector<double>& rm, const std::vector<double>& rv) {
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t j = 0; j < plane; ++j) {
                auto& v = x[static_cast<std::size_t>((b * C + c) * plane + j)];
                v = gamma[static_cast<std::size_t>(c)] * (v - rm[static_cast<std::size_t>(c)]) /
                        std::sqrt(rv[static_cast<std::size_t>(c)] + kBatchNormEps) +
                    beta[static_cast<std::size_t>(c)];
            }
}

void relu_ref(std::vector<double>& x) {
    for (auto& v : x) v = std::max(v, 0.0);
}

std::int64_t flat_params(Model<double>& m, const std::string& prefix) {
    std::int64_t n = 0;
    m.visit_params([&](const std::string& name, Tensor<double>& t) {
        if (name.rfind(prefix, 0) == 0) n += t.numel();
    });
    return n;
}

}  // namespace

// ============================================================================
// Configuration validation
// ============================================================================

TEST_CASE("model configuration rejects malformed setups") {
    ModelConfig c = tiny_conv();
    c.num_blocks = 1;
    c.channels = {2};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = tiny_conv();
    c.channels = {2, 3, 4};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = tiny_conv();
    c.seg_classes = 5;  // must be cls_classes + 1
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = tiny_conv();
    c.input_h = 10;  // not divisible by 2^num_blocks
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("forward validates the input tensor against the configuration") {
    clear_tape();
    Model<float> m = build_model<float>(tiny_conv(), 3);
    CHECK_THROWS_AS(m.forward(Tensor<float>::zeros({1, 2, 8, 8}), Mode::kEval), std::invalid_argument);
    CHECK_THROWS_AS(m.forward(Tensor<float>::zeros({1, 3, 4, 8}), Mode::kEval), std::invalid_argument);
    CHECK_THROWS_AS(m.forward(Tensor<float>::zeros({3, 8, 8}), Mode::kEval), std::invalid_argument);
    clear_tape();
}

// ============================================================================
// Forward pass against a straight-line reimplementation
// ============================================================================

TEST_CASE("the final exit reproduces a straight-line reimplementation of its math") {
    clear_tape();
    const ModelConfig cfg = tiny_conv();
    Model<double> m = build_model<double>(cfg, 17);
    randomize_running_stats(m, 55);

    Rng rng(91);
    Tensor<double> x = Tensor<double>::uniform({2, 3, 8, 8}, -1.0, 1.0, rng);
    NoGradGuard<double> guard;
    auto bundles = m.forward(x, Mode::kEval);
    REQUIRE(bundles.size() == 2);
    REQUIRE(bundles[1].adapted_features.has_value());
    REQUIRE(bundles[1].seg_logits.has_value());
    REQUIRE(bundles[1].cls_logits.has_value());

    // Recompute the whole final-exit path with the reference kernels.
    const std::int64_t B = 2;
    std::int64_t oh = 0, ow = 0;
    auto conv_of = [&](const std::vector<double>& in, std::int64_t cin, std::int64_t h, std::int64_t w,
                       const layers::Conv<double>& c, std::int64_t& out_h, std::int64_t& out_w) {
        const std::int64_t cout = c.w.dim(0), k = c.w.dim(2);
        return oracle::conv2d_ref(in, B, cin, h, w, c.w.data(), cout, k, c.b.data(), c.stride, c.padding,
                                  out_h, out_w);
    };

    // Encoder block 1.
    std::vector<double> h = conv_of(x.data(), 3, 8, 8, m.encoder[0].c1, oh, ow);
    bn_eval_ref(h, B, 2, oh * ow, m.encoder[0].bn1.gamma.data(), m.encoder[0].bn1.beta.data(),
                m.encoder[0].bn1.state.running_mean, m.encoder[0].bn1.state.running_var);
    relu_ref(h);
    h = conv_of(h, 2, oh, ow, m.encoder[0].c2, oh, ow);
    bn_eval_ref(h, B, 2, oh * ow, m.encoder[0].bn2.gamma.data(), m.encoder[0].bn2.beta.data(),
                m.encoder[0].bn2.state.running_mean, m.encoder[0].bn2.state.running_var);
    relu_ref(h);

    // Encoder block 2.
    h = conv_of(h, 2, oh, ow, m.encoder[1].c1, oh, ow);
    bn_eval_ref(h, B, 3, oh * ow, m.encoder[1].bn1.gamma.data(), m.encoder[1].bn1.beta.data(),
                m.encoder[1].bn1.state.running_mean, m.encoder[1].bn1.state.running_var);
    relu_ref(h);
    h = conv_of(h, 3, oh, ow, m.encoder[1].c2, oh, ow);
    bn_eval_ref(h, B, 3, oh * ow, m.encoder[1].bn2.gamma.data(), m.encoder[1].bn2.beta.data(),
                m.encoder[1].bn2.state.running_mean, m.encoder[1].bn2.state.running_var);
    relu_ref(h);
    REQUIRE(oh == 2);

    // Final exit: adapter to the first-block resolution, then the heads.
    const auto& ex = m.exits[1];
    std::vector<double> a = conv_of(h, 3, 2, 2, ex.adapter->c1, oh, ow);
    a = conv_of(a, 2, oh, ow, ex.adapter->c2, oh, ow);
    bn_eval_ref(a, B, 2, oh * ow, ex.adapter->bn.gamma.data(), ex.adapter->bn.beta.data(),
                ex.adapter->bn.state.running_mean, ex.adapter->bn.state.running_var);
    std::vector<double> af = oracle::bilinear_ref(a, B, 2, 2, 2, 4, 4);
    for (std::size_t i = 0; i < af.size(); ++i)
        CHECK(bundles[1].adapted_features->data()[i] == doctest::Approx(af[i]).epsilon(1e-12));

    std::vector<double> s = conv_of(af, 2, 4, 4, ex.seg->c, oh, ow);
    std::vector<double> seg = oracle::bilinear_ref(s, B, 4, 4, 4, 8, 8);
    for (std::size_t i = 0; i < seg.size(); ++i)
        CHECK(bundles[1].seg_logits->data()[i] == doctest::Approx(seg[i]).epsilon(1e-12));

    // Classification head: global average pool then linear.
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t co = 0; co < 3; ++co) {
            double acc = ex.cls->b.data()[static_cast<std::size_t>(co)];
            for (std::int64_t ci = 0; ci < 2; ++ci) {
                double pool = 0.0;
                for (std::int64_t j = 0; j < 16; ++j)
                    pool += af[static_cast<std::size_t>((b * 2 + ci) * 16 + j)];
                acc += ex.cls->w.data()[static_cast<std::size_t>(co * 2 + ci)] * (pool / 16.0);
            }
            CHECK(bundles[1].cls_logits->data()[static_cast<std::size_t>(b * 3 + co)] ==
                  doctest::Approx(acc).epsilon(1e-12));
        }
    clear_tape();
}

// ============================================================================
// Side branches never touch the prediction path
// ============================================================================

TEST_CASE("corrupting or removing early exits leaves the final prediction bit-identical") {
    clear_tape();
    ModelConfig cfg;  // default 3-block conv stack
    cfg.adapter_dim = 8;
    Model<float> m = build_model<float>(cfg, 5);
    randomize_running_stats(m, 6);
    Rng rng(7);
    Tensor<float> x = Tensor<float>::uniform({1, 3, 64, 64}, -1.0, 1.0, rng);
    NoGradGuard<float> guard;

    const auto full = m.forward(x, Mode::kEval);
    const std::vector<float> want = full.back().seg_logits->data();

    // Garbage in every early-exit parameter.
    m.visit_params([&](const std::string& name, Tensor<float>& t) {
        if (name.rfind("exit3.", 0) == 0 || name.rfind("enc", 0) == 0) return;
        for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-100.0, 100.0));
    });
    const auto corrupted = m.forward(x, Mode::kEval);
    CHECK(corrupted.back().seg_logits->data() == want);

    // Dropping the branches entirely changes nothing either.
    m.strip_exits();
    const auto stripped = m.forward(x, Mode::kEval);
    CHECK(stripped.back().seg_logits->data() == want);
    CHECK(!stripped[0].adapted_features.has_value());
    CHECK(!stripped[0].seg_logits.has_value());
    CHECK(!stripped[1].adapted_features.has_value());
    // After stripping, everything that remains is the deployment path.
    CHECK(m.count_exit_overhead_params() == 0);
    clear_tape();
}

TEST_CASE("demand flags skip branch computation and batch-norm updates") {
    clear_tape();
    Model<float> m = build_model<float>(tiny_conv(), 21);
    Rng rng(3);
    Tensor<float> x = Tensor<float>::uniform({2, 3, 8, 8}, -1.0, 1.0, rng);

    ExitNeeds none;
    none.early_features = false;
    none.early_seg = false;
    none.early_cls = false;
    none.final_cls = false;

    const auto before_mean = m.exits[0].adapter->bn.state.running_mean;
    auto bundles = m.forward(x, Mode::kTrain, none);
    // Early exit: nothing computed; final exit: segmentation only.
    CHECK(!bundles[0].adapted_features.has_value());
    CHECK(!bundles[0].seg_logits.has_value());
    CHECK(!bundles[0].cls_logits.has_value());
    CHECK(bundles[1].seg_logits.has_value());
    CHECK(!bundles[1].cls_logits.has_value());
    // The skipped adapter's batch norm saw no data even in train mode.
    CHECK(m.exits[0].adapter->bn.state.running_mean == before_mean);

    Tape<float>::active().clear();
    m.forward(x, Mode::kTrain, none);
    const std::size_t lean_ops = Tape<float>::active().size();
    Tape<float>::active().clear();
    m.forward(x, Mode::kTrain, ExitNeeds::all());
    CHECK(Tape<float>::active().size() > lean_ops);
    clear_tape();
}

// ============================================================================
// Parameter accounting
// ============================================================================

namespace {

// Closed-form parameter counts, written independently of the model code.
std::int64_t conv_params(std::int64_t cin, std::int64_t cout, std::int64_t k) { return cout * cin * k * k + cout; }
std::int64_t bn_params(std::int64_t c) { return 2 * c; }

std::int64_t encoder_params(const std::vector<int>& ch, std::int64_t cin) {
    std::int64_t n = 0;
    for (int c : ch) {
        n += conv_params(cin, c, 3) + bn_params(c) + conv_params(c, c, 3) + bn_params(c);
        cin = c;
    }
    return n;
}

std::int64_t adapter_params(std::int64_t cin, std::int64_t a) {
    return conv_params(cin, a, 3) + conv_params(a, a, 3) + bn_params(a);
}

std::int64_t head_params(std::int64_t cin, std::int64_t seg, std::int64_t cls) {
    return conv_params(cin, seg, 1) + (cls * cin + cls);
}

}  // namespace

TEST_CASE("parameter counts match the closed form and the frozen shipped-config numbers") {
    ModelConfig c;  // conv, {16,32,64}
    c.adapter_dim = 8;
    Model<double> m = build_model<double>(c, 1);

    const std::int64_t backbone = encoder_params(c.channels, c.in_channels);
    std::int64_t exits_total = 0;
    for (int ch : c.channels) exits_total += adapter_params(ch, 8) + head_params(8, 4, 3);
    const std::int64_t early = exits_total - (adapter_params(64, 8) + head_params(8, 4, 3));

    CHECK(flat_params(m, "enc") == backbone);
    CHECK(m.count_params(true) == backbone + exits_total);
    CHECK(m.count_params(false) == backbone + exits_total - early);
    CHECK(m.count_exit_overhead_params() == early);

    // Frozen values for the shipped three-block stack.
    CHECK(backbone == 72528);
    CHECK(early == 4798);
    CHECK(m.count_params(false) == 77807);
    CHECK(m.count_params(true) == 82605);
    // Auxiliary overhead must stay well under a tenth of the backbone.
    CHECK(static_cast<double>(early) < 0.10 * static_cast<double>(backbone));
}

TEST_CASE("u-shaped parameter accounting matches the closed form") {
    ModelConfig c;
    c.arch = ArchKind::kUShape;
    c.adapter_dim = 8;
    Model<double> m = build_model<double>(c, 1);

    std::int64_t backbone = encoder_params(c.channels, c.in_channels);
    // Decoder: mirrored widths ending at channels[0].
    std::int64_t cin = 64;
    for (int i = 0; i < 3; ++i) {
        const std::int64_t cout = (i + 1 < 3) ? c.channels[static_cast<std::size_t>(1 - i)] : c.channels[0];
        backbone += conv_params(cin, cout, 3) + bn_params(cout) + conv_params(cout, cout, 3) + bn_params(cout);
        cin = cout;
    }
    std::int64_t exits_total = 0;
    for (int ch : c.channels) exits_total += adapter_params(ch, 8);  // encoder taps
    exits_total += head_params(32, 4, 3) + head_params(16, 4, 3) + head_params(16, 4, 3);
    const std::int64_t early = exits_total - head_params(16, 4, 3);

    CHECK(flat_params(m, "enc") + flat_params(m, "dec") == backbone);
    CHECK(m.count_params(true) == backbone + exits_total);
    CHECK(m.count_exit_overhead_params() == early);

    CHECK(backbone == 112080);
    CHECK(early == 10238);
    CHECK(m.count_params(false) == 112199);
    CHECK(m.count_params(true) == 122437);
    CHECK(static_cast<double>(early) < 0.10 * static_cast<double>(backbone));
}

TEST_CASE("analytic flop estimate matches an independent recount on the tiny stack") {
    Model<double> m = build_model<double>(tiny_conv(), 1);
    auto conv_f = [](std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t h, std::int64_t w) {
        return 2 * cin * cout * k * k * h * w + cout * h * w;
    };
    // Backbone: two blocks at 4x4 and 2x2.
    std::int64_t want = 0;
    want += conv_f(3, 2, 3, 4, 4) + 2 * 2 * 16 + 2 * 16;  // c1 + bn + relu
    want += conv_f(2, 2, 3, 4, 4) + 2 * 2 * 16 + 2 * 16;
    want += conv_f(2, 3, 3, 2, 2) + 2 * 3 * 4 + 3 * 4;
    want += conv_f(3, 3, 3, 2, 2) + 2 * 3 * 4 + 3 * 4;
    auto exit_f = [&](std::int64_t cin, std::int64_t h, std::int64_t w) {
        std::int64_t f = conv_f(cin, 2, 3, h, w) + conv_f(2, 2, 3, h, w) + 2 * 2 * h * w;
        f += 9 * 2 * 4 * 4;              // resize features to 4x4
        f += conv_f(2, 4, 1, 4, 4) + 9 * 4 * 8 * 8;  // seg head + resize to input
        f += 2 * 16 + 2 + (2 * 2 * 3 + 3);           // pool + linear
        return f;
    };
    want += exit_f(2, 4, 4) + exit_f(3, 2, 2);
    CHECK(m.estimate_flops(true) == want);
    CHECK(m.estimate_flops(false) == want - exit_f(2, 4, 4));
}

// ============================================================================
// Naming, determinism, and the u-shaped variant
// ============================================================================

TEST_CASE("parameter walk order is frozen") {
    Model<double> m = build_model<double>(tiny_conv(), 1);
    std::vector<std::string> names;
    m.visit_params([&](const std::string& n, Tensor<double>&) { names.push_back(n); });
    const std::vector<std::string> want = {
        "enc1.conv1.w", "enc1.conv1.b", "enc1.bn1.gamma", "enc1.bn1.beta",
        "enc1.conv2.w", "enc1.conv2.b", "enc1.bn2.gamma", "enc1.bn2.beta",
        "enc2.conv1.w", "enc2.conv1.b", "enc2.bn1.gamma", "enc2.bn1.beta",
        "enc2.conv2.w", "enc2.conv2.b", "enc2.bn2.gamma", "enc2.bn2.beta",
        "exit1.adapter.conv1.w", "exit1.adapter.conv1.b",
        "exit1.adapter.conv2.w", "exit1.adapter.conv2.b",
        "exit1.adapter.bn.gamma", "exit1.adapter.bn.beta",
        "exit1.seg.conv.w", "exit1.seg.conv.b", "exit1.cls.w", "exit1.cls.b",
        "exit2.adapter.conv1.w", "exit2.adapter.conv1.b",
        "exit2.adapter.conv2.w", "exit2.adapter.conv2.b",
        "exit2.adapter.bn.gamma", "exit2.adapter.bn.beta",
        "exit2.seg.conv.w", "exit2.seg.conv.b", "exit2.cls.w", "exit2.cls.b",
    };
    CHECK(names == want);

    std::vector<std::string> state_names;
    m.visit_state([&](const std::string& n, std::vector<double>&) { state_names.push_back(n); });
    const std::vector<std::string> want_state = {
        "enc1.bn1.running_mean", "enc1.bn1.running_var", "enc1.bn2.running_mean", "enc1.bn2.running_var",
        "enc2.bn1.running_mean", "enc2.bn1.running_var", "enc2.bn2.running_mean", "enc2.bn2.running_var",
        "exit1.adapter.bn.running_mean", "exit1.adapter.bn.running_var",
        "exit2.adapter.bn.running_mean", "exit2.adapter.bn.running_var",
    };
    CHECK(state_names == want_state);
}

TEST_CASE("construction is seed-deterministic") {
    Model<float> a = build_model<float>(tiny_conv(), 42);
    Model<float> b = build_model<float>(tiny_conv(), 42);
    Model<float> c = build_model<float>(tiny_conv(), 43);
    bool same = true, differs = false;
    a.visit_params([&](const std::string& n, Tensor<float>& t) {
        b.visit_params([&](const std::string& n2, Tensor<float>& t2) {
            if (n == n2 && t.data() != t2.data()) same = false;
        });
        c.visit_params([&](const std::string& n2, Tensor<float>& t2) {
            if (n == n2 && t.data() != t2.data()) differs = true;
        });
    });
    CHECK(same);
    CHECK(differs);
}

TEST_CASE("the u-shaped variant wires feature taps on the way down and heads on the way up") {
    clear_tape();
    Model<float> m = build_model<float>(small_ushape(), 9);
    Rng rng(1);
    Tensor<float> x = Tensor<float>::uniform({1, 3, 16, 16}, -1.0, 1.0, rng);
    NoGradGuard<float> guard;
    auto bundles = m.forward(x, Mode::kEval);
    REQUIRE(bundles.size() == 4);
    // Encoder taps carry features only.
    CHECK(bundles[0].adapted_features.has_value());
    CHECK(!bundles[0].seg_logits.has_value());
    CHECK(!bundles[0].cls_logits.has_value());
    CHECK(bundles[1].adapted_features.has_value());
    // Decoder exits carry heads only.
    CHECK(!bundles[2].adapted_features.has_value());
    CHECK(bundles[2].seg_logits.has_value());
    CHECK(bundles[2].cls_logits.has_value());
    CHECK(bundles[3].seg_logits.has_value());
    // All adapted features land on the common first-block resolution.
    CHECK(bundles[0].adapted_features->dim(2) == 8);
    CHECK(bundles[1].adapted_features->dim(2) == 8);
    // The prediction is at input resolution.
    CHECK(bundles[3].seg_logits->dim(2) == 16);
    CHECK(bundles[3].seg_logits->dim(3) == 16);
    clear_tape();
}

// ============================================================================
// Persistence
// ============================================================================

TEST_CASE("save and load restore every parameter and running statistic bit-exactly") {
    clear_tape();
    const std::string path = "/tmp/srseg_test_model.srtn";
    Model<float> m = build_model<float>(tiny_conv(), 77);
    randomize_running_stats(m, 78);
    save_model(path, m);

    // Start from a differently-seeded model and load back.
    Model<float> other = build_model<float>(tiny_conv(), 99);
    load_model(path, other);

    bool params_equal = true;
    std::vector<std::pair<std::string, std::vector<float>>> want;
    m.visit_params([&](const std::string& n, Tensor<float>& t) { want.emplace_back(n, t.data()); });
    std::size_t k = 0;
    other.visit_params([&](const std::string& n, Tensor<float>& t) {
        if (want[k].first != n || want[k].second != t.data()) params_equal = false;
        ++k;
    });
    CHECK(params_equal);

    bool state_equal = true;
    std::vector<std::vector<float>> want_state;
    m.visit_state([&](const std::string&, std::vector<float>& s) { want_state.push_back(s); });
    k = 0;
    other.visit_state([&](const std::string&, std::vector<float>& s) {
        if (want_state[k] != s) state_equal = false;
        ++k;
    });
    CHECK(state_equal);
    std::remove(path.c_str());
}

TEST_CASE("loading rejects mismatched shapes, missing records, and truncation") {
    clear_tape();
    const std::string path = "/tmp/srseg_test_model2.srtn";
    Model<float> m = build_model<float>(tiny_conv(), 1);
    save_model(path, m);

    // Shape mismatch: same names, different widths.
    ModelConfig wide = tiny_conv();
    wide.channels = {3, 3};
    Model<float> w = build_model<float>(wide, 1);
    CHECK_THROWS_WITH_AS(load_model(path, w), doctest::Contains("enc1.conv1.w"), std::runtime_error);

    // Missing records: the file lacks decoder entries a u-shaped model needs.
    ModelConfig us = small_ushape();
    Model<float> u = build_model<float>(us, 1);
    CHECK_THROWS_AS(load_model(path, u), std::runtime_error);

    // Truncated payload reports the byte offset where reading failed.
    std::vector<TensorRecord> recs = read_records(path);
    CHECK(!recs.empty());
    {
        std::FILE* f = std::fopen(path.c_str(), "rb");
        REQUIRE(f != nullptr);
        std::fseek(f, 0, SEEK_END);
        const long size = std::ftell(f);
        std::fseek(f, 0, SEEK_SET);
        std::vector<char> bytes(static_cast<std::size_t>(size));
        REQUIRE(std::fread(bytes.data(), 1, bytes.size(), f) == bytes.size());
        std::fclose(f);
        bytes.resize(bytes.size() / 2);
        std::FILE* g = std::fopen(path.c_str(), "wb");
        REQUIRE(g != nullptr);
        REQUIRE(std::fwrite(bytes.data(), 1, bytes.size(), g) == bytes.size());
        std::fclose(g);
    }
    CHECK_THROWS_WITH_AS(read_records(path), doctest::Contains("byte"), std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("the architecture is recoverable from a parameter file alone") {
    clear_tape();
    for (const ModelConfig& cfg : {tiny_conv(), small_ushape()}) {
        const std::string path = "/tmp/srseg_test_model3.srtn";
        Model<float> m = build_model<float>(cfg, 31);
        randomize_running_stats(m, 32);
        save_model(path, m);

        const ModelConfig got = infer_model_config(read_records(path), cfg.input_h, cfg.input_w);
        CHECK(got.arch == cfg.arch);
        CHECK(got.num_blocks == cfg.num_blocks);
        CHECK(got.channels == cfg.channels);
        CHECK(got.in_channels == cfg.in_channels);
        CHECK(got.adapter_dim == cfg.adapter_dim);
        CHECK(got.seg_classes == cfg.seg_classes);
        CHECK(got.cls_classes == cfg.cls_classes);

        // The auto-loader reproduces the saved model's behavior exactly.
        Model<float> re = load_model_auto<float>(path, cfg.input_h, cfg.input_w);
        Rng rng(2);
        Tensor<float> x =
            Tensor<float>::uniform({1, 3, cfg.input_h, cfg.input_w}, -1.0, 1.0, rng);
        NoGradGuard<float> guard;
        const auto a = m.forward(x, Mode::kEval);
        const auto b = re.forward(x, Mode::kEval);
        CHECK(a.back().seg_logits->data() == b.back().seg_logits->data());
        std::remove(path.c_str());
    }
    clear_tape();
}
