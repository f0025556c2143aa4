#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "srseg/rng.hpp"
#include "srseg/tensor.hpp"

namespace srseg {

// ============================================================================
// Architecture configuration
// ============================================================================

enum class ArchKind { kConv, kUShape };

struct ModelConfig {
    ArchKind arch = ArchKind::kConv;
    int num_blocks = 3;
    std::vector<int> channels = {16, 32, 64};  // one entry per encoder block
    int in_channels = 3;
    int seg_classes = 4;   // foreground classes + background
    int cls_classes = 3;   // multi-label presence bits, background excluded
    int adapter_dim = 16;
    std::int64_t input_h = 64, input_w = 64;

    void validate() const {
        if (num_blocks < 2)
            throw std::invalid_argument("model: num_blocks must be >= 2 to form teacher/student pairs, got " +
                                        std::to_string(num_blocks));
        if (static_cast<int>(channels.size()) != num_blocks)
            throw std::invalid_argument("model: channels lists " + std::to_string(channels.size()) +
                                        " entries for " + std::to_string(num_blocks) + " blocks");
        for (int c : channels)
            if (c < 1) throw std::invalid_argument("model: channel count must be >= 1, got " + std::to_string(c));
        if (in_channels < 1 || adapter_dim < 1)
            throw std::invalid_argument("model: channel dims must be positive");
        if (seg_classes != cls_classes + 1)
            throw std::invalid_argument("model: seg_classes (" + std::to_string(seg_classes) +
                                        ") must be cls_classes + 1 (" + std::to_string(cls_classes + 1) + ")");
        const std::int64_t total_stride = std::int64_t(1) << num_blocks;
        if (input_h % total_stride != 0 || input_w % total_stride != 0)
            throw std::invalid_argument("model: input size " + std::to_string(input_h) + "x" +
                                        std::to_string(input_w) + " is not divisible by the total stride " +
                                        std::to_string(total_stride));
    }
};

// One exit's view of the network. Encoder-side exits of the u-shape carry
// only adapted features (the feature-distillation span); decoder-side exits
// carry only prediction heads. The plain conv stack fills all three.
template <typename T>
struct ExitBundle {
    int block_index = 0;  // 1-based position in the bundle list
    std::optional<Tensor<T>> adapted_features;  // B x A x h1 x w1, common resolution
    std::optional<Tensor<T>> seg_logits;        // B x seg_classes x H x W, input resolution
    std::optional<Tensor<T>> cls_logits;        // B x cls_classes
};

// Which auxiliary branches a forward pass must compute. The final
// prediction path (last exit's segmentation) is always on; everything else
// is demand-driven so disabled loss terms truly vanish from the graph.
struct ExitNeeds {
    bool early_features = true;
    bool early_seg = true;
    bool early_cls = true;
    bool final_cls = true;

    static ExitNeeds all() { return ExitNeeds{}; }
};

// ============================================================================
// Layers
// ============================================================================

namespace layers {

template <typename T>
struct Conv {
    Tensor<T> w, b;
    int stride = 1, padding = 1;

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, stride, padding); }
};

template <typename T>
struct BatchNorm {
    Tensor<T> gamma, beta;
    BatchNormState<T> state;

    Tensor<T> forward(const Tensor<T>& x, Mode mode) { return batchnorm2d(x, gamma, beta, state, mode); }
};

// encoder block: two conv+BN+ReLU stages, the first at stride 2
template <typename T>
struct EncoderBlock {
    Conv<T> c1, c2;
    BatchNorm<T> bn1, bn2;

    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        Tensor<T> h = relu(bn1.forward(c1.forward(x), mode));
        return relu(bn2.forward(c2.forward(h), mode));
    }
};

// decoder block: 2x bilinear upsample, then two conv+BN+ReLU stages
template <typename T>
struct DecoderBlock {
    Conv<T> c1, c2;
    BatchNorm<T> bn1, bn2;

    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        Tensor<T> h = bilinear_upsample(x, x.dim(2) * 2, x.dim(3) * 2);
        h = relu(bn1.forward(c1.forward(h), mode));
        return relu(bn2.forward(c2.forward(h), mode));
    }
};

// projects block features to the shared adapter width at native resolution,
// then resizes to the common (first-block) resolution so every exit's
// features are directly comparable
template <typename T>
struct Adapter {
    Conv<T> c1, c2;
    BatchNorm<T> bn;

    Tensor<T> forward(const Tensor<T>& x, Mode mode, std::int64_t out_h, std::int64_t out_w) {
        Tensor<T> h = bn.forward(c2.forward(c1.forward(x)), mode);
        return bilinear_upsample(h, out_h, out_w);
    }
};

// 1x1 conv to class planes, then resize to input resolution
template <typename T>
struct SegHead {
    Conv<T> c;

    Tensor<T> forward(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w) const {
        return bilinear_upsample(c.forward(x), out_h, out_w);
    }
};

// global average pool + linear to per-class presence logits
template <typename T>
struct ClsHead {
    Tensor<T> w, b;

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> p = global_avg_pool(x);
        return linear(reshape(p, {p.dim(0), p.dim(1)}), w, b);
    }
};

template <typename T>
struct Exit {
    std::optional<Adapter<T>> adapter;
    std::optional<SegHead<T>> seg;
    std::optional<ClsHead<T>> cls;
};

}  // namespace layers

// ============================================================================
// Model
// ============================================================================

template <typename T>
class Model {
public:
    ModelConfig config;
    std::vector<layers::EncoderBlock<T>> encoder;
    std::vector<layers::DecoderBlock<T>> decoder;  // empty for the conv arch
    std::vector<layers::Exit<T>> exits;            // one per block (encoder + decoder)

    // Walks every trainable tensor in construction order. The order is the
    // serialization order and the optimizer-state order, so it must stay
    // stable across runs.
    void visit_params(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
        auto conv = [&](const std::string& p, layers::Conv<T>& c) {
            fn(p + ".w", c.w);
            fn(p + ".b", c.b);
        };
        auto bn = [&](const std::string& p, layers::BatchNorm<T>& n) {
            fn(p + ".gamma", n.gamma);
            fn(p + ".beta", n.beta);
        };
        for (std::size_t i = 0; i < encoder.size(); ++i) {
            const std::string p = "enc" + std::to_string(i + 1);
            conv(p + ".conv1", encoder[i].c1);
            bn(p + ".bn1", encoder[i].bn1);
            conv(p + ".conv2", encoder[i].c2);
            bn(p + ".bn2", encoder[i].bn2);
        }
        for (std::size_t i = 0; i < decoder.size(); ++i) {
            const std::string p = "dec" + std::to_string(i + 1);
            conv(p + ".conv1", decoder[i].c1);
            bn(p + ".bn1", decoder[i].bn1);
            conv(p + ".conv2", decoder[i].c2);
            bn(p + ".bn2", decoder[i].bn2);
        }
        for (std::size_t i = 0; i < exits.size(); ++i) {
            const std::string p = "exit" + std::to_string(i + 1);
            auto& e = exits[i];
            if (e.adapter) {
                conv(p + ".adapter.conv1", e.adapter->c1);
                conv(p + ".adapter.conv2", e.adapter->c2);
                bn(p + ".adapter.bn", e.adapter->bn);
            }
            if (e.seg) conv(p + ".seg.conv", e.seg->c);
            if (e.cls) {
                fn(p + ".cls.w", e.cls->w);
                fn(p + ".cls.b", e.cls->b);
            }
        }
    }

    // batch-norm running statistics: model state that is saved and restored
    // but never differentiated
    void visit_state(const std::function<void(const std::string&, std::vector<T>&)>& fn) {
        auto bn = [&](const std::string& p, layers::BatchNorm<T>& n) {
            fn(p + ".running_mean", n.state.running_mean);
            fn(p + ".running_var", n.state.running_var);
        };
        for (std::size_t i = 0; i < encoder.size(); ++i) {
            const std::string p = "enc" + std::to_string(i + 1);
            bn(p + ".bn1", encoder[i].bn1);
            bn(p + ".bn2", encoder[i].bn2);
        }
        for (std::size_t i = 0; i < decoder.size(); ++i) {
            const std::string p = "dec" + std::to_string(i + 1);
            bn(p + ".bn1", decoder[i].bn1);
            bn(p + ".bn2", decoder[i].bn2);
        }
        for (std::size_t i = 0; i < exits.size(); ++i) {
            auto& e = exits[i];
            if (e.adapter) bn("exit" + std::to_string(i + 1) + ".adapter.bn", e.adapter->bn);
        }
    }

    // include_exits=false counts only the deployment path: backbone blocks
    // plus whatever the final exit needs to produce its prediction
    std::int64_t count_params(bool include_exits = true) {
        std::int64_t n = 0;
        const std::string final_prefix = "exit" + std::to_string(exits.size()) + ".";
        visit_params([&](const std::string& name, Tensor<T>& t) {
            if (!include_exits && name.rfind("exit", 0) == 0 && name.rfind(final_prefix, 0) != 0) return;
            n += t.numel();
        });
        return n;
    }

    std::int64_t count_exit_overhead_params() { return count_params(true) - count_params(false); }

    // Runs the multi-exit forward pass. Bundles are ordered encoder first,
    // then decoder; the last bundle's seg_logits is the network's
    // prediction. Branches switched off in `needs` are skipped entirely and
    // leave empty optionals.
    std::vector<ExitBundle<T>> forward(const Tensor<T>& x, Mode mode, const ExitNeeds& needs = ExitNeeds::all()) {
        if (x.rank() != 4)
            throw std::invalid_argument("model: input must be 4-d, got " + shape_str(x.shape()));
        if (x.dim(1) != config.in_channels)
            throw std::invalid_argument("model: input has " + std::to_string(x.dim(1)) + " channels, expected " +
                                        std::to_string(config.in_channels));
        if (x.dim(2) != config.input_h || x.dim(3) != config.input_w)
            throw std::invalid_argument("model: input is " + std::to_string(x.dim(2)) + "x" +
                                        std::to_string(x.dim(3)) + ", config expects " +
                                        std::to_string(config.input_h) + "x" + std::to_string(config.input_w));
        const std::int64_t in_h = x.dim(2), in_w = x.dim(3);
        const std::int64_t h1 = in_h / 2, w1 = in_w / 2;  // first-block resolution

        std::vector<ExitBundle<T>> bundles;
        bundles.reserve(exits.size());
        Tensor<T> h = x;
        for (std::size_t i = 0; i < encoder.size(); ++i) {
            h = encoder[i].forward(h, mode);
            auto& e = exits[i];
            const bool is_final = (config.arch == ArchKind::kConv) && (i + 1 == exits.size());
            ExitBundle<T> bundle;
            bundle.block_index = static_cast<int>(i + 1);
            const bool want_features = is_final || needs.early_features;
            if (e.adapter && want_features) bundle.adapted_features = e.adapter->forward(h, mode, h1, w1);
            if (bundle.adapted_features) {
                if (e.seg && (is_final || needs.early_seg))
                    bundle.seg_logits = e.seg->forward(*bundle.adapted_features, in_h, in_w);
                if (e.cls && (is_final ? needs.final_cls : needs.early_cls))
                    bundle.cls_logits = e.cls->forward(*bundle.adapted_features);
            }
            bundles.push_back(std::move(bundle));
        }
        for (std::size_t i = 0; i < decoder.size(); ++i) {
            h = decoder[i].forward(h, mode);
            auto& e = exits[encoder.size() + i];
            const bool is_final = (i + 1 == decoder.size());
            ExitBundle<T> bundle;
            bundle.block_index = static_cast<int>(encoder.size() + i + 1);
            if (e.seg && (is_final || needs.early_seg)) bundle.seg_logits = e.seg->forward(h, in_h, in_w);
            if (e.cls && (is_final ? needs.final_cls : needs.early_cls)) bundle.cls_logits = e.cls->forward(h);
            bundles.push_back(std::move(bundle));
        }
        return bundles;
    }

    // Drops every auxiliary branch, keeping only what the final prediction
    // needs. The surviving forward pass computes exactly the same backbone
    // and final-exit operations as before.
    void strip_exits() {
        for (std::size_t i = 0; i + 1 < exits.size(); ++i) exits[i] = layers::Exit<T>{};
    }

    // Analytic FLOP count for one sample at the configured input size.
    // Convolutions and linear layers count 2 FLOPs per multiply-accumulate
    // plus one add per bias application; batchnorm counts 2 per element
    // (scale, shift), relu 1 per element, bilinear resize 9 per output
    // element (6 multiplies, 3 adds), global average pooling 1 add per
    // element plus 1 divide per channel.
    std::int64_t estimate_flops(bool include_exits = true) {
        const std::int64_t in_h = config.input_h, in_w = config.input_w;
        const std::int64_t h1 = in_h / 2, w1 = in_w / 2;
        std::int64_t flops = 0;
        auto conv_flops = [&](std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t h, std::int64_t w) {
            flops += 2 * cin * cout * k * k * h * w + cout * h * w;
        };
        auto bn_flops = [&](std::int64_t c, std::int64_t h, std::int64_t w) { flops += 2 * c * h * w; };
        auto relu_flops = [&](std::int64_t c, std::int64_t h, std::int64_t w) { flops += c * h * w; };
        auto resize_flops = [&](std::int64_t c, std::int64_t h, std::int64_t w) { flops += 9 * c * h * w; };

        std::int64_t h = in_h, w = in_w, cin = config.in_channels;
        // per-exit tap geometry: (channels, height, width) where the exit
        // reads the backbone
        std::vector<std::array<std::int64_t, 3>> taps;
        for (int i = 0; i < config.num_blocks; ++i) {
            h /= 2;
            w /= 2;
            conv_flops(cin, config.channels[i], 3, h, w);
            bn_flops(config.channels[i], h, w);
            relu_flops(config.channels[i], h, w);
            conv_flops(config.channels[i], config.channels[i], 3, h, w);
            bn_flops(config.channels[i], h, w);
            relu_flops(config.channels[i], h, w);
            cin = config.channels[i];
            taps.push_back({cin, h, w});
        }
        if (config.arch == ArchKind::kUShape) {
            for (int i = 0; i < config.num_blocks; ++i) {
                const int cout = (i + 1 < config.num_blocks) ? config.channels[config.num_blocks - 2 - i]
                                                             : config.channels[0];
                resize_flops(cin, h * 2, w * 2);
                h *= 2;
                w *= 2;
                conv_flops(cin, cout, 3, h, w);
                bn_flops(cout, h, w);
                relu_flops(cout, h, w);
                conv_flops(cout, cout, 3, h, w);
                bn_flops(cout, h, w);
                relu_flops(cout, h, w);
                cin = cout;
                taps.push_back({cin, h, w});
            }
        }
        for (std::size_t i = 0; i < exits.size(); ++i) {
            const auto& e = exits[i];
            const bool is_final = (i + 1 == exits.size());
            if (!include_exits && !is_final) continue;
            auto [tc, th, tw] = taps[i];
            if (e.adapter) {
                conv_flops(tc, config.adapter_dim, 3, th, tw);
                conv_flops(config.adapter_dim, config.adapter_dim, 3, th, tw);
                bn_flops(config.adapter_dim, th, tw);
                resize_flops(config.adapter_dim, h1, w1);
                tc = config.adapter_dim;
                th = h1;
                tw = w1;
            }
            if (e.seg) {
                conv_flops(tc, config.seg_classes, 1, th, tw);
                resize_flops(config.seg_classes, in_h, in_w);
            }
            if (e.cls) {
                flops += tc * th * tw + tc;                                // global average pool
                flops += 2 * tc * config.cls_classes + config.cls_classes;  // linear
            }
        }
        return flops;
    }
};

// ============================================================================
// Construction
// ============================================================================

namespace detail {

// zero-mean uniform with bound sqrt(1/fan_in), one independent stream per
// tensor so values never depend on construction-order changes elsewhere
template <typename T>
void init_fan_in(Tensor<T>& t, std::int64_t fan_in, Rng& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace detail

template <typename T>
Model<T> build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model<T> m;
    m.config = config;

    std::uint64_t stream = 0;
    auto make_conv = [&](int cin, int cout, int k, int stride) {
        layers::Conv<T> c;
        c.stride = stride;
        c.padding = k / 2;
        c.w = Tensor<T>::zeros({cout, cin, k, k}, true);
        c.b = Tensor<T>::zeros({cout}, true);
        Rng rng(mix_seed(seed, 0x6d6f64ul, stream++));
        detail::init_fan_in(c.w, static_cast<std::int64_t>(cin) * k * k, rng);
        return c;
    };
    auto make_bn = [&](int ch) {
        layers::BatchNorm<T> n;
        n.gamma = Tensor<T>::full({ch}, T(1), true);
        n.beta = Tensor<T>::zeros({ch}, true);
        n.state = BatchNormState<T>(ch);
        return n;
    };

    int cin = config.in_channels;
    for (int i = 0; i < config.num_blocks; ++i) {
        layers::EncoderBlock<T> blk;
        blk.c1 = make_conv(cin, config.channels[i], 3, 2);
        blk.bn1 = make_bn(config.channels[i]);
        blk.c2 = make_conv(config.channels[i], config.channels[i], 3, 1);
        blk.bn2 = make_bn(config.channels[i]);
        m.encoder.push_back(std::move(blk));
        cin = config.channels[i];
    }
    if (config.arch == ArchKind::kUShape) {
        for (int i = 0; i < config.num_blocks; ++i) {
            const int cout =
                (i + 1 < config.num_blocks) ? config.channels[config.num_blocks - 2 - i] : config.channels[0];
            layers::DecoderBlock<T> blk;
            blk.c1 = make_conv(cin, cout, 3, 1);
            blk.bn1 = make_bn(cout);
            blk.c2 = make_conv(cout, cout, 3, 1);
            blk.bn2 = make_bn(cout);
            m.decoder.push_back(std::move(blk));
            cin = cout;
        }
    }

    auto make_adapter = [&](int ch) {
        layers::Adapter<T> a;
        a.c1 = make_conv(ch, config.adapter_dim, 3, 1);
        a.c2 = make_conv(config.adapter_dim, config.adapter_dim, 3, 1);
        a.bn = make_bn(config.adapter_dim);
        return a;
    };
    auto make_seg = [&](int ch) {
        layers::SegHead<T> s;
        s.c = make_conv(ch, config.seg_classes, 1, 1);
        return s;
    };
    auto make_cls = [&](int ch) {
        layers::ClsHead<T> c;
        c.w = Tensor<T>::zeros({config.cls_classes, ch}, true);
        c.b = Tensor<T>::zeros({config.cls_classes}, true);
        Rng rng(mix_seed(seed, 0x6d6f64ul, stream++));
        detail::init_fan_in(c.w, ch, rng);
        return c;
    };

    if (config.arch == ArchKind::kConv) {
        for (int i = 0; i < config.num_blocks; ++i) {
            layers::Exit<T> e;
            e.adapter = make_adapter(config.channels[i]);
            e.seg = make_seg(config.adapter_dim);
            e.cls = make_cls(config.adapter_dim);
            m.exits.push_back(std::move(e));
        }
    } else {
        for (int i = 0; i < config.num_blocks; ++i) {
            layers::Exit<T> e;
            e.adapter = make_adapter(config.channels[i]);
            m.exits.push_back(std::move(e));
        }
        for (int i = 0; i < config.num_blocks; ++i) {
            const int cout =
                (i + 1 < config.num_blocks) ? config.channels[config.num_blocks - 2 - i] : config.channels[0];
            layers::Exit<T> e;
            e.seg = make_seg(cout);
            e.cls = make_cls(cout);
            m.exits.push_back(std::move(e));
        }
    }
    return m;
}

}  // namespace srseg
