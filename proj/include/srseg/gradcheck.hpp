#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "srseg/losses.hpp"
#include "srseg/model.hpp"
#include "srseg/rng.hpp"
#include "srseg/tensor.hpp"

namespace srseg {

// ============================================================================
// Central-difference gradient verification
// ============================================================================
//
// Independent oracle for every backward rule: perturb each input element by
// +/-h, re-run the forward closure, and compare (f+ - f-)/(2h) against the
// tape's analytic gradient. Relative error uses max(|analytic|, |numeric|,
// floor) as the denominator so near-zero gradients do not blow up the ratio.

struct GradCheckStats {
    double max_rel_err = 0.0;
    std::int64_t elements = 0;
    std::string worst;  // "input 1 at flat index 17" style location
};

// zero_floor is the denominator floor: elements whose analytic and numeric
// gradients both sit below it are compared against the floor instead of
// against each other, so finite-difference roundoff on mathematically-zero
// gradients does not register as error. Composed graphs need a higher floor
// than single ops because their objective magnitude amplifies that noise.
template <typename T>
GradCheckStats grad_check(const std::function<Tensor<T>()>& forward, std::vector<Tensor<T>> inputs,
                          double h = 1e-5, double zero_floor = 1e-8) {
    auto& tape = Tape<T>::active();
    tape.clear();
    for (auto& in : inputs) in.zero_grad();
    Tensor<T> loss = forward();
    backward(loss);
    std::vector<std::vector<T>> analytic;
    analytic.reserve(inputs.size());
    for (auto& in : inputs) analytic.push_back(in.grad());
    tape.clear();

    GradCheckStats stats;
    NoGradGuard<T> guard;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& data = inputs[k].data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const T saved = data[i];
            data[i] = saved + static_cast<T>(h);
            const double f_plus = static_cast<double>(forward().item());
            data[i] = saved - static_cast<T>(h);
            const double f_minus = static_cast<double>(forward().item());
            data[i] = saved;
            const double numeric = (f_plus - f_minus) / (2.0 * h);
            const double a = static_cast<double>(analytic[k][i]);
            const double denom = std::max({std::abs(a), std::abs(numeric), zero_floor});
            const double rel = std::abs(a - numeric) / denom;
            ++stats.elements;
            if (rel > stats.max_rel_err) {
                stats.max_rel_err = rel;
                stats.worst = "input " + std::to_string(k) + " at flat index " + std::to_string(i);
            }
        }
    }
    return stats;
}

// ============================================================================
// Per-operation case suite
// ============================================================================

template <typename T>
struct OpCase {
    std::string label;
    std::function<Tensor<T>()> forward;
    std::vector<Tensor<T>> inputs;
};

struct OpReport {
    std::string op;
    int cases = 0;
    std::int64_t elements = 0;
    double max_rel_err = 0.0;
    std::string worst_case;
    bool passed = false;
};

namespace detail {

// random tensor away from zero so kinked ops (relu) are never sampled at
// their non-differentiable point
template <typename T>
Tensor<T> rand_offzero(Shape shape, Rng& rng, bool requires_grad = true) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) {
        const double mag = rng.uniform(0.2, 1.2);
        v = static_cast<T>(rng.coin() ? mag : -mag);
    }
    return t;
}

template <typename T>
Tensor<T> rand_uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = true) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

// fixed random projection to a scalar; position-sensitive so transposed or
// shifted outputs cannot cancel out
template <typename T>
std::function<Tensor<T>(const Tensor<T>&)> make_probe(const Shape& shape, Rng& rng) {
    Tensor<T> w = rand_uniform<T>(shape, -1.0, 1.0, rng, false);
    return [w](const Tensor<T>& y) { return sum(mul(y, w)); };
}

}  // namespace detail

// Builds the randomized cases for one named operation. Shapes stay small:
// the numeric oracle re-runs the forward pass twice per input element.
template <typename T>
std::vector<OpCase<T>> make_op_cases(const std::string& op, std::uint64_t seed, int n_cases) {
    using detail::make_probe;
    using detail::rand_offzero;
    using detail::rand_uniform;
    std::vector<OpCase<T>> cases;
    for (int ci = 0; ci < n_cases; ++ci) {
        Rng rng(mix_seed(seed, std::hash<std::string>{}(op), static_cast<std::uint64_t>(ci)));
        const std::int64_t B = 1 + static_cast<std::int64_t>(rng.below(2));
        const std::int64_t C = 2 + static_cast<std::int64_t>(rng.below(3));
        const std::int64_t H = 3 + static_cast<std::int64_t>(rng.below(4));
        const std::int64_t W = 3 + static_cast<std::int64_t>(rng.below(4));
        OpCase<T> c;
        c.label = op + "#" + std::to_string(ci);

        if (op == "relu") {
            Tensor<T> x = rand_offzero<T>({B, C, H, W}, rng);
            auto probe = make_probe<T>(x.shape(), rng);
            c.inputs = {x};
            c.forward = [x, probe] { return probe(relu(x)); };
        } else if (op == "add") {
            Tensor<T> a = rand_offzero<T>({B, C, H, W}, rng);
            Tensor<T> b = rand_offzero<T>(a.shape(), rng);
            auto probe = make_probe<T>(a.shape(), rng);
            c.inputs = {a, b};
            c.forward = [a, b, probe] { return probe(add(a, b)); };
        } else if (op == "mul") {
            Tensor<T> a = rand_offzero<T>({B, C, H, W}, rng);
            Tensor<T> b = rand_offzero<T>(a.shape(), rng);
            auto probe = make_probe<T>(a.shape(), rng);
            c.inputs = {a, b};
            c.forward = [a, b, probe] { return probe(mul(a, b)); };
        } else if (op == "scale") {
            Tensor<T> x = rand_offzero<T>({B, C, H, W}, rng);
            const T k = static_cast<T>(rng.uniform(-2.0, 2.0));
            auto probe = make_probe<T>(x.shape(), rng);
            c.inputs = {x};
            c.forward = [x, k, probe] { return probe(scale(x, k)); };
        } else if (op == "log") {
            Tensor<T> x = rand_uniform<T>({B, C, H, W}, 0.3, 3.0, rng);
            auto probe = make_probe<T>(x.shape(), rng);
            c.inputs = {x};
            c.forward = [x, probe] { return probe(log_elem(x)); };
        } else if (op == "sum") {
            Tensor<T> x = rand_offzero<T>({B, C, H, W}, rng);
            c.inputs = {x};
            c.forward = [x] { return sum(x); };
        } else if (op == "mean") {
            Tensor<T> x = rand_offzero<T>({B, C, H, W}, rng);
            c.inputs = {x};
            c.forward = [x] { return mean(x); };
        } else if (op == "reshape") {
            Tensor<T> x = rand_offzero<T>({B, C, H, W}, rng);
            auto probe = make_probe<T>({B * C, H * W}, rng);
            c.inputs = {x};
            c.forward = [x, probe, B, C, H, W] { return probe(reshape(x, {B * C, H * W})); };
        } else if (op == "conv2d") {
            const std::int64_t K = 1 + 2 * static_cast<std::int64_t>(rng.below(3));  // 1, 3, 5
            const int stride = 1 + static_cast<int>(rng.below(2));
            const int padding = static_cast<int>(rng.below(static_cast<std::uint64_t>(K / 2 + 1)));
            const std::int64_t HH = std::max<std::int64_t>(H, K), WW = std::max<std::int64_t>(W, K);
            const std::int64_t O = 1 + static_cast<std::int64_t>(rng.below(3));
            Tensor<T> x = rand_offzero<T>({B, C, HH, WW}, rng);
            Tensor<T> w = rand_offzero<T>({O, C, K, K}, rng);
            Tensor<T> b = rand_offzero<T>({O}, rng);
            const std::int64_t OH = (HH + 2 * padding - K) / stride + 1;
            const std::int64_t OW = (WW + 2 * padding - K) / stride + 1;
            auto probe = make_probe<T>({B, O, OH, OW}, rng);
            c.inputs = {x, w, b};
            c.forward = [x, w, b, stride, padding, probe] { return probe(conv2d(x, w, b, stride, padding)); };
        } else if (op == "bilinear_upsample") {
            const std::int64_t OH = 1 + static_cast<std::int64_t>(rng.below(12));
            const std::int64_t OW = 1 + static_cast<std::int64_t>(rng.below(12));
            Tensor<T> x = rand_offzero<T>({B, C, H, W}, rng);
            auto probe = make_probe<T>({B, C, OH, OW}, rng);
            c.inputs = {x};
            c.forward = [x, OH, OW, probe] { return probe(bilinear_upsample(x, OH, OW)); };
        } else if (op == "batchnorm2d") {
            Tensor<T> x = rand_offzero<T>({2, C, H, W}, rng);
            Tensor<T> gamma = rand_uniform<T>({C}, 0.5, 1.5, rng);
            Tensor<T> beta = rand_uniform<T>({C}, -0.5, 0.5, rng);
            const Mode mode = (ci % 2 == 0) ? Mode::kTrain : Mode::kEval;
            auto state = std::make_shared<BatchNormState<T>>(C);
            for (auto& v : state->running_mean) v = static_cast<T>(rng.uniform(-0.3, 0.3));
            for (auto& v : state->running_var) v = static_cast<T>(rng.uniform(0.5, 1.5));
            auto probe = make_probe<T>(x.shape(), rng);
            c.label += (mode == Mode::kTrain) ? "/train" : "/eval";
            c.inputs = {x, gamma, beta};
            c.forward = [x, gamma, beta, state, mode, probe] {
                return probe(batchnorm2d(x, gamma, beta, *state, mode));
            };
        } else if (op == "channel_softmax") {
            Tensor<T> x = rand_uniform<T>({B, C, H, W}, -2.0, 2.0, rng);
            auto probe = make_probe<T>(x.shape(), rng);
            c.inputs = {x};
            c.forward = [x, probe] { return probe(channel_softmax(x)); };
        } else if (op == "channel_log_softmax") {
            Tensor<T> x = rand_uniform<T>({B, C, H, W}, -2.0, 2.0, rng);
            auto probe = make_probe<T>(x.shape(), rng);
            c.inputs = {x};
            c.forward = [x, probe] { return probe(channel_log_softmax(x)); };
        } else if (op == "linear") {
            const std::int64_t I = 2 + static_cast<std::int64_t>(rng.below(5));
            const std::int64_t O = 1 + static_cast<std::int64_t>(rng.below(4));
            Tensor<T> x = rand_offzero<T>({B, I}, rng);
            Tensor<T> w = rand_offzero<T>({O, I}, rng);
            Tensor<T> b = rand_offzero<T>({O}, rng);
            auto probe = make_probe<T>({B, O}, rng);
            c.inputs = {x, w, b};
            c.forward = [x, w, b, probe] { return probe(linear(x, w, b)); };
        } else if (op == "global_avg_pool") {
            Tensor<T> x = rand_offzero<T>({B, C, H, W}, rng);
            auto probe = make_probe<T>({B, C, 1, 1}, rng);
            c.inputs = {x};
            c.forward = [x, probe] { return probe(global_avg_pool(x)); };
        } else if (op == "masked_nll_mean") {
            Tensor<T> x = rand_uniform<T>({B, C, H, W}, -2.0, 2.0, rng);
            std::vector<std::int32_t> mask(static_cast<std::size_t>(B * H * W));
            for (auto& v : mask) v = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(C)));
            c.inputs = {x};
            c.forward = [x, mask] { return masked_nll_mean(channel_log_softmax(x), mask); };
        } else if (op == "bce_with_logits_mean") {
            Tensor<T> x = rand_uniform<T>({B, C}, -3.0, 3.0, rng);
            std::vector<T> targets(static_cast<std::size_t>(B * C));
            for (auto& v : targets) v = static_cast<T>(rng.coin() ? 1 : 0);
            c.inputs = {x};
            c.forward = [x, targets] { return bce_with_logits_mean(x, targets); };
        } else if (op == "feature_distill_ce") {
            const double tau = (ci % 2 == 0) ? 1.0 : rng.uniform(1.2, 3.0);
            Tensor<T> s = rand_uniform<T>({B, C, H, W}, -2.0, 2.0, rng);
            Tensor<T> t = rand_uniform<T>({B, C, H, W}, -2.0, 2.0, rng);
            // only the student is perturbed: the teacher side is defined as a
            // constant, so its true derivative intentionally differs from the
            // (zero) analytic one
            c.inputs = {s};
            c.forward = [s, t, tau] { return feature_distill_ce(t, s, tau); };
        } else if (op == "logit_distill_ce") {
            const double tau = (ci % 2 == 0) ? 1.0 : rng.uniform(1.2, 3.0);
            Tensor<T> s = rand_uniform<T>({B, C}, -2.0, 2.0, rng);
            Tensor<T> t = rand_uniform<T>({B, C}, -2.0, 2.0, rng);
            c.inputs = {s};
            c.forward = [s, t, tau] { return logit_distill_ce(t, s, tau); };
        } else if (op == "full_graph") {
            // The complete combined objective on a 2-block model: every
            // parameter and the input image are checked through the whole
            // forward/loss composition.
            //
            // The distillation teachers are stop-gradients, i.e. the
            // objective's gradient is defined with them held constant. A
            // naive numeric oracle would re-derive the teachers from the
            // perturbed parameters and so differentiate a different
            // function; to compare like with like, the teacher tensors are
            // captured on the first (unperturbed) evaluation and reused for
            // every finite-difference probe. That the live objective really
            // sends no gradient into the teacher branches is covered by the
            // dedicated stop-gradient tests.
            ModelConfig mc;
            mc.arch = ArchKind::kConv;
            mc.num_blocks = 2;
            mc.channels = {4, 6};
            mc.adapter_dim = 3;
            mc.seg_classes = 4;
            mc.cls_classes = 3;
            mc.input_h = 16;
            mc.input_w = 16;
            auto model = std::make_shared<Model<T>>(build_model<T>(mc, mix_seed(seed, 0x67726166ul, ci)));
            Tensor<T> x = rand_uniform<T>({2, 3, 16, 16}, 0.05, 0.95, rng, true);
            std::vector<std::int32_t> mask(2 * 16 * 16);
            for (auto& v : mask) v = static_cast<std::int32_t>(rng.below(4));
            std::vector<T> labels(2 * 3);
            for (auto& v : labels) v = static_cast<T>(rng.coin() ? 1 : 0);
            const double tau = (ci % 2 == 0) ? 1.0 : 1.7;
            const LossWeights weights;
            c.inputs = {x};
            model->visit_params([&](const std::string&, Tensor<T>& t) { c.inputs.push_back(t); });
            auto frozen = std::make_shared<std::vector<Tensor<T>>>();
            c.forward = [model, x, mask, labels, weights, tau, frozen] {
                auto bundles = model->forward(x, Mode::kTrain);
                if (frozen->empty()) {
                    frozen->push_back(detach(*bundles.front().adapted_features));
                    frozen->push_back(detach(*bundles.back().cls_logits));
                }
                // same assembly as the combined objective, with the frozen
                // teachers standing in on the distillation terms
                const T n = static_cast<T>(bundles.size());
                Tensor<T> seg = Tensor<T>::scalar(T(0));
                Tensor<T> cls = Tensor<T>::scalar(T(0));
                for (const auto& b : bundles) {
                    seg = add(seg, seg_ce_loss(*b.seg_logits, mask));
                    cls = add(cls, cls_bce_loss(*b.cls_logits, labels));
                }
                Tensor<T> total = add(scale(seg, static_cast<T>(weights.lambda2) / n),
                                      scale(cls, static_cast<T>(weights.lambda1) / n));
                for (std::size_t i = 1; i < bundles.size(); ++i)
                    total = add(total, scale(feature_distill_ce((*frozen)[0], *bundles[i].adapted_features, tau),
                                             static_cast<T>(weights.lambda3)));
                for (std::size_t i = 0; i + 1 < bundles.size(); ++i)
                    total = add(total, logit_distill_ce((*frozen)[1], *bundles[i].cls_logits, tau));
                return total;
            };
        } else {
            throw std::invalid_argument("gradcheck: unknown op '" + op + "'");
        }
        cases.push_back(std::move(c));
    }
    return cases;
}

inline const std::vector<std::string>& gradcheck_op_names() {
    static const std::vector<std::string> names = {
        "relu",           "add",
        "mul",            "scale",
        "log",            "sum",
        "mean",           "reshape",
        "conv2d",         "bilinear_upsample",
        "batchnorm2d",    "channel_softmax",
        "channel_log_softmax", "linear",
        "global_avg_pool", "masked_nll_mean",
        "bce_with_logits_mean", "feature_distill_ce",
        "logit_distill_ce",     "full_graph",
    };
    return names;
}

// the composed graph re-runs a whole model forward per perturbed element,
// so it gets fewer randomized instances than the single-op checks
inline int gradcheck_default_cases(const std::string& op) { return op == "full_graph" ? 2 : 20; }

// The composed-graph check runs at 64 bits only: through a whole model,
// float central differences carry more rounding than the tolerances they
// are meant to certify, at every usable step width.
template <typename T>
bool gradcheck_op_enabled(const std::string& op) {
    return sizeof(T) == 8 || op != "full_graph";
}

// Near-zero denominator floor. Single ops use probe losses of magnitude
// ~1, where finite-difference noise stays near 1e-12; the composed model
// objective is larger and deeper, so its noise on mathematically-zero
// gradients (e.g. a conv bias whose shift the following train-mode
// batchnorm removes exactly) reaches ~1e-9 and needs a floor safely above
// that. At 32 bits central differences resolve only ~1e-4 absolute, so the
// floor rises accordingly; 64-bit is the authoritative verification mode.
template <typename T>
double gradcheck_zero_floor(const std::string& op) {
    if (sizeof(T) == 4) return 2e-2;
    return op == "full_graph" ? 1e-5 : 1e-8;
}

template <typename T>
OpReport run_gradcheck_op(const std::string& op, std::uint64_t seed, int n_cases, double tol, double h) {
    OpReport report;
    report.op = op;
    for (auto& c : make_op_cases<T>(op, seed, n_cases)) {
        GradCheckStats stats = grad_check<T>(c.forward, c.inputs, h, gradcheck_zero_floor<T>(op));
        ++report.cases;
        report.elements += stats.elements;
        if (stats.max_rel_err > report.max_rel_err) {
            report.max_rel_err = stats.max_rel_err;
            report.worst_case = c.label + ", " + stats.worst;
        }
    }
    report.passed = report.max_rel_err <= tol;
    return report;
}

// suite defaults: tolerance and step width per precision
template <typename T>
constexpr double gradcheck_default_tol() {
    return sizeof(T) == 8 ? 1e-4 : 5e-2;
}

template <typename T>
constexpr double gradcheck_default_step() {
    return sizeof(T) == 8 ? 1e-5 : 1e-2;
}

}  // namespace srseg
