#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "srseg/rng.hpp"

namespace srseg {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ")";
    return os.str();
}

// ============================================================================
// Tensor
// ============================================================================
//
// Dense n-d array in batch x channels x height x width layout (for 4-d data),
// participating in tape-recorded reverse-mode differentiation. The scalar
// type T is the run-wide precision switch: double for gradient verification,
// float for training.

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated iff requires_grad
    bool requires_grad = false;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        std::int64_t n = shape_numel(shape);
        if (n < 0) throw std::invalid_argument("Tensor: negative extent in " + shape_str(shape));
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(static_cast<std::size_t>(n), T(0));
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.data().begin(), t.data().end(), value);
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
            throw std::invalid_argument("Tensor::from_data: " + shape_str(shape) + " does not hold " +
                                        std::to_string(values.size()) + " values");
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(values);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    static Tensor uniform(Shape shape, T lo, T hi, Rng& rng, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::int64_t numel() const { return impl_->numel(); }

    std::vector<T>& data() { return impl_->data; }
    const std::vector<T>& data() const { return impl_->data; }
    std::vector<T>& grad() { return impl_->grad; }
    const std::vector<T>& grad() const { return impl_->grad; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool rg) {
        impl_->requires_grad = rg;
        if (rg) impl_->ensure_grad();
        else impl_->grad.clear();
    }

    void zero_grad() {
        if (impl_->requires_grad) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
        return impl_->data[0];
    }

    // deep copy of shape+data, gradient state reset
    Tensor clone_detached() const {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        return t;
    }

    bool same_shape(const Tensor& o) const { return impl_->shape == o.impl_->shape; }

    std::shared_ptr<TensorImpl<T>>& impl() { return impl_; }
    const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

// ============================================================================
// Tape
// ============================================================================
//
// Ordered record of executed operations. Invariant: inputs of every entry
// were recorded (or are leaves) before the entry itself, so one reverse
// sweep visits each operation exactly once with its output gradient ready.
// One tape per thread; independent model instances on distinct threads
// never share tape state.

template <typename T>
struct TapeEntry {
    const char* op_name;
    std::function<void()> backward;
};

template <typename T>
class Tape {
public:
    static Tape& active() {
        thread_local Tape tape;
        return tape;
    }

    bool recording() const { return recording_; }
    void set_recording(bool r) { recording_ = r; }

    void record(const char* op_name, std::function<void()> backward) {
        entries_.push_back(TapeEntry<T>{op_name, std::move(backward)});
    }

    std::size_t size() const { return entries_.size(); }

    std::size_t count_ops(const char* op_name) const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (std::strcmp(e.op_name, op_name) == 0) ++n;
        return n;
    }

    void clear() { entries_.clear(); }

    void replay_backward() {
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
    }

private:
    std::vector<TapeEntry<T>> entries_;
    bool recording_ = true;
};

// Disables tape recording for the current thread while alive (evaluation,
// temperature bookkeeping).
template <typename T>
class NoGradGuard {
public:
    NoGradGuard() : prev_(Tape<T>::active().recording()) { Tape<T>::active().set_recording(false); }
    ~NoGradGuard() { Tape<T>::active().set_recording(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

namespace detail {

template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
    if (!Tape<T>::active().recording()) return false;
    for (const Tensor<T>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <typename T>
void mark_output(Tensor<T>& out) {
    out.set_requires_grad(true);
}

}  // namespace detail

// Seeds d(loss)/d(loss) = 1 and sweeps the active tape in reverse record
// order. Gradients accumulate additively into every requires_grad tensor
// reachable from the loss; stop-gradient (detached) tensors receive none.
template <typename T>
void backward(Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
    auto& tape = Tape<T>::active();
    if (tape.size() == 0)
        throw std::runtime_error("backward: tape is empty");
    if (!loss.requires_grad())
        throw std::runtime_error("backward: loss does not depend on any differentiable input");
    loss.grad()[0] += T(1);
    tape.replay_backward();
}

// ============================================================================
// Elementwise and reduction operations
// ============================================================================

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    const auto& xd = x.data();
    auto& yd = y.data();
    for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = xd[i] > T(0) ? xd[i] : T(0);
    if (detail::should_record<T>({&x})) {
        detail::mark_output(y);
        Tape<T>::active().record("relu", [xi = x.impl(), yi = y.impl()] {
            if (!xi->requires_grad) return;
            for (std::size_t i = 0; i < xi->data.size(); ++i)
                if (xi->data[i] > T(0)) xi->grad[i] += yi->grad[i];
        });
    }
    return y;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> y = Tensor<T>::zeros(a.shape());
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& yd = y.data();
    for (std::size_t i = 0; i < ad.size(); ++i) yd[i] = ad[i] + bd[i];
    if (detail::should_record<T>({&a, &b})) {
        detail::mark_output(y);
        Tape<T>::active().record("add", [ai = a.impl(), bi = b.impl(), yi = y.impl()] {
            if (ai->requires_grad)
                for (std::size_t i = 0; i < ai->data.size(); ++i) ai->grad[i] += yi->grad[i];
            if (bi->requires_grad)
                for (std::size_t i = 0; i < bi->data.size(); ++i) bi->grad[i] += yi->grad[i];
        });
    }
    return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> y = Tensor<T>::zeros(a.shape());
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& yd = y.data();
    for (std::size_t i = 0; i < ad.size(); ++i) yd[i] = ad[i] * bd[i];
    if (detail::should_record<T>({&a, &b})) {
        detail::mark_output(y);
        Tape<T>::active().record("mul", [ai = a.impl(), bi = b.impl(), yi = y.impl()] {
            if (ai->requires_grad)
                for (std::size_t i = 0; i < ai->data.size(); ++i) ai->grad[i] += yi->grad[i] * bi->data[i];
            if (bi->requires_grad)
                for (std::size_t i = 0; i < bi->data.size(); ++i) bi->grad[i] += yi->grad[i] * ai->data[i];
        });
    }
    return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T k) {
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    const auto& xd = x.data();
    auto& yd = y.data();
    for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = xd[i] * k;
    if (detail::should_record<T>({&x})) {
        detail::mark_output(y);
        Tape<T>::active().record("scale", [xi = x.impl(), yi = y.impl(), k] {
            if (!xi->requires_grad) return;
            for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += yi->grad[i] * k;
        });
    }
    return y;
}

// elementwise natural log; rejects non-positive input so forward outputs
// stay finite
template <typename T>
Tensor<T> log_elem(const Tensor<T>& x) {
    Tensor<T> y = Tensor<T>::zeros(x.shape());
    const auto& xd = x.data();
    auto& yd = y.data();
    for (std::size_t i = 0; i < xd.size(); ++i) {
        if (!(xd[i] > T(0)))
            throw std::invalid_argument("log: non-positive element at flat index " + std::to_string(i));
        yd[i] = std::log(xd[i]);
    }
    if (detail::should_record<T>({&x})) {
        detail::mark_output(y);
        Tape<T>::active().record("log", [xi = x.impl(), yi = y.impl()] {
            if (!xi->requires_grad) return;
            for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += yi->grad[i] / xi->data[i];
        });
    }
    return y;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = 0;
    for (T v : x.data()) acc += v;
    Tensor<T> y = Tensor<T>::scalar(acc);
    if (detail::should_record<T>({&x})) {
        detail::mark_output(y);
        Tape<T>::active().record("sum", [xi = x.impl(), yi = y.impl()] {
            if (!xi->requires_grad) return;
            const T g = yi->grad[0];
            for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += g;
        });
    }
    return y;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    const T inv = T(1) / static_cast<T>(x.numel());
    T acc = 0;
    for (T v : x.data()) acc += v;
    Tensor<T> y = Tensor<T>::scalar(acc * inv);
    if (detail::should_record<T>({&x})) {
        detail::mark_output(y);
        Tape<T>::active().record("mean", [xi = x.impl(), yi = y.impl(), inv] {
            if (!xi->requires_grad) return;
            const T g = yi->grad[0] * inv;
            for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += g;
        });
    }
    return y;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
    Tensor<T> y = Tensor<T>::from_data(std::move(new_shape), x.data());
    if (detail::should_record<T>({&x})) {
        detail::mark_output(y);
        Tape<T>::active().record("reshape", [xi = x.impl(), yi = y.impl()] {
            if (!xi->requires_grad) return;
            for (std::size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += yi->grad[i];
        });
    }
    return y;
}

// stop-gradient: same values, no tape link
template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
    return x.clone_detached();
}

// ============================================================================
// Convolution
// ============================================================================

// Direct 2-d convolution, NCHW. weight is OxCxKxK with K odd; output
// H' = floor((H + 2p - K)/stride) + 1 and likewise for W'.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding) {
    if (input.rank() != 4)
        throw std::invalid_argument("conv2d: input must be 4-d, got " + shape_str(input.shape()));
    if (weight.rank() != 4)
        throw std::invalid_argument("conv2d: weight must be 4-d, got " + shape_str(weight.shape()));
    const std::int64_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::int64_t O = weight.dim(0), K = weight.dim(2);
    if (weight.dim(1) != C)
        throw std::invalid_argument("conv2d: input channel dim " + std::to_string(C) +
                                    " does not match weight channel dim " + std::to_string(weight.dim(1)));
    if (weight.dim(3) != K)
        throw std::invalid_argument("conv2d: kernel must be square, got " + std::to_string(K) + "x" +
                                    std::to_string(weight.dim(3)));
    if (K % 2 == 0) throw std::invalid_argument("conv2d: kernel size " + std::to_string(K) + " must be odd");
    if (bias.rank() != 1 || bias.dim(0) != O)
        throw std::invalid_argument("conv2d: bias dim " + shape_str(bias.shape()) + " must be (" +
                                    std::to_string(O) + ")");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
    const std::int64_t OH = (H + 2 * padding - K) / stride + 1;
    const std::int64_t OW = (W + 2 * padding - K) / stride + 1;
    if (OH < 1 || OW < 1)
        throw std::invalid_argument("conv2d: output spatial size would be " + std::to_string(OH) + "x" +
                                    std::to_string(OW));

    Tensor<T> out = Tensor<T>::zeros({B, O, OH, OW});
    const T* in = input.data().data();
    const T* w = weight.data().data();
    const T* bs = bias.data().data();
    T* y = out.data().data();

    const std::int64_t in_plane = H * W, out_plane = OH * OW;
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t o = 0; o < O; ++o) {
            T* yp = y + (b * O + o) * out_plane;
            std::fill(yp, yp + out_plane, bs[o]);
            for (std::int64_t c = 0; c < C; ++c) {
                const T* xp = in + (b * C + c) * in_plane;
                const T* wp = w + (o * C + c) * K * K;
                for (std::int64_t ky = 0; ky < K; ++ky) {
                    for (std::int64_t kx = 0; kx < K; ++kx) {
                        const T wv = wp[ky * K + kx];
                        for (std::int64_t oy = 0; oy < OH; ++oy) {
                            const std::int64_t iy = oy * stride - padding + ky;
                            if (iy < 0 || iy >= H) continue;
                            // ox range keeping ix = ox*stride - padding + kx inside [0, W)
                            std::int64_t ox0 = 0;
                            if (kx < padding) ox0 = (padding - kx + stride - 1) / stride;
                            std::int64_t ox1 = OW - 1;
                            const std::int64_t ix_max = W - 1 + padding - kx;
                            if (ix_max < ox1 * stride) ox1 = ix_max / stride;
                            const T* xrow = xp + iy * W - padding + kx;
                            T* yrow = yp + oy * OW;
                            if (stride == 1) {
                                for (std::int64_t ox = ox0; ox <= ox1; ++ox) yrow[ox] += wv * xrow[ox];
                            } else {
                                for (std::int64_t ox = ox0; ox <= ox1; ++ox) yrow[ox] += wv * xrow[ox * stride];
                            }
                        }
                    }
                }
            }
        }
    }

    if (detail::should_record<T>({&input, &weight, &bias})) {
        detail::mark_output(out);
        Tape<T>::active().record("conv2d", [xi = input.impl(), wi = weight.impl(), bi = bias.impl(),
                                            yi = out.impl(), stride, padding, B, C, H, W, O, K, OH, OW] {
            const T* g = yi->grad.data();
            const std::int64_t in_plane = H * W, out_plane = OH * OW;
            if (bi->requires_grad) {
                T* db = bi->grad.data();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t o = 0; o < O; ++o) {
                        const T* gp = g + (b * O + o) * out_plane;
                        T acc = 0;
                        for (std::int64_t i = 0; i < out_plane; ++i) acc += gp[i];
                        db[o] += acc;
                    }
            }
            if (wi->requires_grad) {
                const T* in = xi->data.data();
                T* dw = wi->grad.data();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t o = 0; o < O; ++o) {
                        const T* gp = g + (b * O + o) * out_plane;
                        for (std::int64_t c = 0; c < C; ++c) {
                            const T* xp = in + (b * C + c) * in_plane;
                            T* dwp = dw + (o * C + c) * K * K;
                            for (std::int64_t ky = 0; ky < K; ++ky)
                                for (std::int64_t kx = 0; kx < K; ++kx) {
                                    T acc = 0;
                                    for (std::int64_t oy = 0; oy < OH; ++oy) {
                                        const std::int64_t iy = oy * stride - padding + ky;
                                        if (iy < 0 || iy >= H) continue;
                                        std::int64_t ox0 = 0;
                                        if (kx < padding) ox0 = (padding - kx + stride - 1) / stride;
                                        std::int64_t ox1 = OW - 1;
                                        const std::int64_t ix_max = W - 1 + padding - kx;
                                        if (ix_max < ox1 * stride) ox1 = ix_max / stride;
                                        const T* xrow = xp + iy * W - padding + kx;
                                        const T* grow = gp + oy * OW;
                                        if (stride == 1) {
                                            for (std::int64_t ox = ox0; ox <= ox1; ++ox) acc += grow[ox] * xrow[ox];
                                        } else {
                                            for (std::int64_t ox = ox0; ox <= ox1; ++ox)
                                                acc += grow[ox] * xrow[ox * stride];
                                        }
                                    }
                                    dwp[ky * K + kx] += acc;
                                }
                        }
                    }
            }
            if (xi->requires_grad) {
                const T* w = wi->data.data();
                T* dx = xi->grad.data();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t o = 0; o < O; ++o) {
                        const T* gp = g + (b * O + o) * out_plane;
                        for (std::int64_t c = 0; c < C; ++c) {
                            T* dxp = dx + (b * C + c) * in_plane;
                            const T* wp = w + (o * C + c) * K * K;
                            for (std::int64_t ky = 0; ky < K; ++ky)
                                for (std::int64_t kx = 0; kx < K; ++kx) {
                                    const T wv = wp[ky * K + kx];
                                    for (std::int64_t oy = 0; oy < OH; ++oy) {
                                        const std::int64_t iy = oy * stride - padding + ky;
                                        if (iy < 0 || iy >= H) continue;
                                        std::int64_t ox0 = 0;
                                        if (kx < padding) ox0 = (padding - kx + stride - 1) / stride;
                                        std::int64_t ox1 = OW - 1;
                                        const std::int64_t ix_max = W - 1 + padding - kx;
                                        if (ix_max < ox1 * stride) ox1 = ix_max / stride;
                                        T* dxrow = dxp + iy * W - padding + kx;
                                        const T* grow = gp + oy * OW;
                                        if (stride == 1) {
                                            for (std::int64_t ox = ox0; ox <= ox1; ++ox) dxrow[ox] += wv * grow[ox];
                                        } else {
                                            for (std::int64_t ox = ox0; ox <= ox1; ++ox)
                                                dxrow[ox * stride] += wv * grow[ox];
                                        }
                                    }
                                }
                        }
                    }
            }
        });
    }
    return out;
}

// ============================================================================
// Bilinear resize
// ============================================================================

namespace detail {

// align-corners-false source coordinate: (dst + 0.5) * scale - 0.5, clamped
inline void bilinear_taps(std::int64_t n_out, std::int64_t n_in, std::vector<std::int64_t>& i0,
                          std::vector<std::int64_t>& i1, std::vector<double>& frac) {
    i0.resize(n_out);
    i1.resize(n_out);
    frac.resize(n_out);
    const double s = static_cast<double>(n_in) / static_cast<double>(n_out);
    for (std::int64_t d = 0; d < n_out; ++d) {
        double src = (static_cast<double>(d) + 0.5) * s - 0.5;
        if (src < 0.0) src = 0.0;
        const double hi = static_cast<double>(n_in - 1);
        if (src > hi) src = hi;
        const std::int64_t lo = static_cast<std::int64_t>(src);
        i0[d] = lo;
        i1[d] = std::min(lo + 1, n_in - 1);
        frac[d] = src - static_cast<double>(lo);
    }
}

}  // namespace detail

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, std::int64_t out_h, std::int64_t out_w) {
    if (input.rank() != 4)
        throw std::invalid_argument("bilinear_upsample: input must be 4-d, got " + shape_str(input.shape()));
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("bilinear_upsample: target size must be >= 1");
    const std::int64_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);

    std::vector<std::int64_t> y0, y1, x0, x1;
    std::vector<double> fy, fx;
    detail::bilinear_taps(out_h, H, y0, y1, fy);
    detail::bilinear_taps(out_w, W, x0, x1, fx);

    Tensor<T> out = Tensor<T>::zeros({B, C, out_h, out_w});
    const T* in = input.data().data();
    T* yp = out.data().data();
    const std::int64_t in_plane = H * W, out_plane = out_h * out_w;
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const T* src = in + bc * in_plane;
        T* dst = yp + bc * out_plane;
        for (std::int64_t oy = 0; oy < out_h; ++oy) {
            const T wy1 = static_cast<T>(fy[oy]);
            const T wy0 = T(1) - wy1;
            const T* r0 = src + y0[oy] * W;
            const T* r1 = src + y1[oy] * W;
            T* drow = dst + oy * out_w;
            for (std::int64_t ox = 0; ox < out_w; ++ox) {
                const T wx1 = static_cast<T>(fx[ox]);
                const T wx0 = T(1) - wx1;
                drow[ox] = wy0 * (wx0 * r0[x0[ox]] + wx1 * r0[x1[ox]]) +
                           wy1 * (wx0 * r1[x0[ox]] + wx1 * r1[x1[ox]]);
            }
        }
    }

    if (detail::should_record<T>({&input})) {
        detail::mark_output(out);
        Tape<T>::active().record("bilinear_upsample",
                                 [xi = input.impl(), yi = out.impl(), y0, y1, x0, x1, fy, fx, B, C, H, W,
                                  out_h, out_w] {
            if (!xi->requires_grad) return;
            const T* g = yi->grad.data();
            T* dx = xi->grad.data();
            const std::int64_t in_plane = H * W, out_plane = out_h * out_w;
            for (std::int64_t bc = 0; bc < B * C; ++bc) {
                T* dsrc = dx + bc * in_plane;
                const T* gdst = g + bc * out_plane;
                for (std::int64_t oy = 0; oy < out_h; ++oy) {
                    const T wy1 = static_cast<T>(fy[oy]);
                    const T wy0 = T(1) - wy1;
                    T* d0 = dsrc + y0[oy] * W;
                    T* d1 = dsrc + y1[oy] * W;
                    const T* grow = gdst + oy * out_w;
                    for (std::int64_t ox = 0; ox < out_w; ++ox) {
                        const T wx1 = static_cast<T>(fx[ox]);
                        const T wx0 = T(1) - wx1;
                        const T gv = grow[ox];
                        d0[x0[ox]] += wy0 * wx0 * gv;
                        d0[x1[ox]] += wy0 * wx1 * gv;
                        d1[x0[ox]] += wy1 * wx0 * gv;
                        d1[x1[ox]] += wy1 * wx1 * gv;
                    }
                }
            }
        });
    }
    return out;
}

// ============================================================================
// Batch normalization
// ============================================================================

template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;

    explicit BatchNormState(std::int64_t channels = 0)
        : running_mean(static_cast<std::size_t>(channels), T(0)),
          running_var(static_cast<std::size_t>(channels), T(1)) {}
};

enum class Mode { kTrain, kEval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Per-channel normalization over batch and spatial dims. Train mode uses
// biased batch statistics and updates running stats in place (momentum 0.1,
// unbiased variance in the running buffer); eval mode uses the running stats.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, Mode mode) {
    if (input.rank() != 4)
        throw std::invalid_argument("batchnorm2d: input must be 4-d, got " + shape_str(input.shape()));
    const std::int64_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (gamma.rank() != 1 || gamma.dim(0) != C)
        throw std::invalid_argument("batchnorm2d: gamma dim " + shape_str(gamma.shape()) + " must be (" +
                                    std::to_string(C) + ")");
    if (beta.rank() != 1 || beta.dim(0) != C)
        throw std::invalid_argument("batchnorm2d: beta dim " + shape_str(beta.shape()) + " must be (" +
                                    std::to_string(C) + ")");
    if (static_cast<std::int64_t>(state.running_mean.size()) != C)
        throw std::invalid_argument("batchnorm2d: state holds " + std::to_string(state.running_mean.size()) +
                                    " channels, input has " + std::to_string(C));
    const std::int64_t m = B * H * W;
    if (mode == Mode::kTrain && m < 2)
        throw std::invalid_argument("batchnorm2d: train mode needs batch*spatial population >= 2, got " +
                                    std::to_string(m));

    const T eps = static_cast<T>(kBatchNormEps);
    std::vector<T> mean_c(static_cast<std::size_t>(C)), invstd_c(static_cast<std::size_t>(C));
    if (mode == Mode::kTrain) {
        const T* x = input.data().data();
        for (std::int64_t c = 0; c < C; ++c) {
            double acc = 0;
            for (std::int64_t b = 0; b < B; ++b) {
                const T* xp = x + (b * C + c) * H * W;
                for (std::int64_t i = 0; i < H * W; ++i) acc += xp[i];
            }
            const double mu = acc / static_cast<double>(m);
            double var = 0;
            for (std::int64_t b = 0; b < B; ++b) {
                const T* xp = x + (b * C + c) * H * W;
                for (std::int64_t i = 0; i < H * W; ++i) {
                    const double d = xp[i] - mu;
                    var += d * d;
                }
            }
            var /= static_cast<double>(m);
            mean_c[c] = static_cast<T>(mu);
            invstd_c[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            const double mom = kBatchNormMomentum;
            const double unbiased = var * static_cast<double>(m) / static_cast<double>(m - 1);
            state.running_mean[c] = static_cast<T>((1.0 - mom) * state.running_mean[c] + mom * mu);
            state.running_var[c] = static_cast<T>((1.0 - mom) * state.running_var[c] + mom * unbiased);
        }
    } else {
        for (std::int64_t c = 0; c < C; ++c) {
            mean_c[c] = state.running_mean[c];
            invstd_c[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.running_var[c]) +
                                                         static_cast<double>(eps)));
        }
    }

    Tensor<T> out = Tensor<T>::zeros(input.shape());
    {
        const T* x = input.data().data();
        const T* gm = gamma.data().data();
        const T* bt = beta.data().data();
        T* y = out.data().data();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c) {
                const T* xp = x + (b * C + c) * H * W;
                T* yp = y + (b * C + c) * H * W;
                const T a = gm[c] * invstd_c[c];
                const T o = bt[c] - a * mean_c[c];
                for (std::int64_t i = 0; i < H * W; ++i) yp[i] = a * xp[i] + o;
            }
    }

    if (detail::should_record<T>({&input, &gamma, &beta})) {
        detail::mark_output(out);
        const bool train = (mode == Mode::kTrain);
        Tape<T>::active().record("batchnorm2d", [xi = input.impl(), gi = gamma.impl(), bi = beta.impl(),
                                                 yi = out.impl(), mean_c, invstd_c, B, C, H, W, train] {
            const std::int64_t plane = H * W;
            const std::int64_t m = B * plane;
            const T* x = xi->data.data();
            const T* g = yi->grad.data();
            for (std::int64_t c = 0; c < C; ++c) {
                const T mu = mean_c[c];
                const T is = invstd_c[c];
                double sum_g = 0, sum_gx = 0;  // sum of grad and grad*xhat
                for (std::int64_t b = 0; b < B; ++b) {
                    const T* xp = x + (b * C + c) * plane;
                    const T* gp = g + (b * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        sum_g += gp[i];
                        sum_gx += gp[i] * (xp[i] - mu) * is;
                    }
                }
                if (bi->requires_grad) bi->grad[c] += static_cast<T>(sum_g);
                if (gi->requires_grad) gi->grad[c] += static_cast<T>(sum_gx);
                if (xi->requires_grad) {
                    const T gamma_is = gi->data[c] * is;
                    if (train) {
                        const T mean_g = static_cast<T>(sum_g / static_cast<double>(m));
                        const T mean_gx = static_cast<T>(sum_gx / static_cast<double>(m));
                        for (std::int64_t b = 0; b < B; ++b) {
                            const T* xp = x + (b * C + c) * plane;
                            const T* gp = g + (b * C + c) * plane;
                            T* dxp = xi->grad.data() + (b * C + c) * plane;
                            for (std::int64_t i = 0; i < plane; ++i) {
                                const T xhat = (xp[i] - mu) * is;
                                dxp[i] += gamma_is * (gp[i] - mean_g - xhat * mean_gx);
                            }
                        }
                    } else {
                        // eval mode is an affine map per channel
                        for (std::int64_t b = 0; b < B; ++b) {
                            const T* gp = g + (b * C + c) * plane;
                            T* dxp = xi->grad.data() + (b * C + c) * plane;
                            for (std::int64_t i = 0; i < plane; ++i) dxp[i] += gamma_is * gp[i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ============================================================================
// Channel softmax family
// ============================================================================

// softmax over the channel dim at every (b, h, w) position, max-subtracted
template <typename T>
Tensor<T> channel_softmax(const Tensor<T>& x) {
    if (x.rank() != 4)
        throw std::invalid_argument("channel_softmax: input must be 4-d, got " + shape_str(x.shape()));
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t plane = H * W;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* in = x.data().data();
    T* y = out.data().data();
    for (std::int64_t b = 0; b < B; ++b) {
        const T* xb = in + b * C * plane;
        T* yb = y + b * C * plane;
        for (std::int64_t j = 0; j < plane; ++j) {
            T mx = xb[j];
            for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, xb[c * plane + j]);
            T denom = 0;
            for (std::int64_t c = 0; c < C; ++c) {
                const T e = std::exp(xb[c * plane + j] - mx);
                yb[c * plane + j] = e;
                denom += e;
            }
            const T inv = T(1) / denom;
            for (std::int64_t c = 0; c < C; ++c) yb[c * plane + j] *= inv;
        }
    }
    if (detail::should_record<T>({&x})) {
        detail::mark_output(out);
        Tape<T>::active().record("channel_softmax", [xi = x.impl(), yi = out.impl(), B, C, plane] {
            if (!xi->requires_grad) return;
            const T* y = yi->data.data();
            const T* g = yi->grad.data();
            T* dx = xi->grad.data();
            for (std::int64_t b = 0; b < B; ++b) {
                const std::int64_t base = b * C * plane;
                for (std::int64_t j = 0; j < plane; ++j) {
                    T dot = 0;
                    for (std::int64_t c = 0; c < C; ++c) {
                        const std::int64_t k = base + c * plane + j;
                        dot += g[k] * y[k];
                    }
                    for (std::int64_t c = 0; c < C; ++c) {
                        const std::int64_t k = base + c * plane + j;
                        dx[k] += y[k] * (g[k] - dot);
                    }
                }
            }
        });
    }
    return out;
}

// fused log(softmax) over channels; the stable form used by every
// cross-entropy in this project
template <typename T>
Tensor<T> channel_log_softmax(const Tensor<T>& x) {
    if (x.rank() != 4)
        throw std::invalid_argument("channel_log_softmax: input must be 4-d, got " + shape_str(x.shape()));
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t plane = H * W;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* in = x.data().data();
    T* y = out.data().data();
    for (std::int64_t b = 0; b < B; ++b) {
        const T* xb = in + b * C * plane;
        T* yb = y + b * C * plane;
        for (std::int64_t j = 0; j < plane; ++j) {
            T mx = xb[j];
            for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, xb[c * plane + j]);
            T denom = 0;
            for (std::int64_t c = 0; c < C; ++c) denom += std::exp(xb[c * plane + j] - mx);
            const T lse = mx + std::log(denom);
            for (std::int64_t c = 0; c < C; ++c) yb[c * plane + j] = xb[c * plane + j] - lse;
        }
    }
    if (detail::should_record<T>({&x})) {
        detail::mark_output(out);
        Tape<T>::active().record("channel_log_softmax", [xi = x.impl(), yi = out.impl(), B, C, plane] {
            if (!xi->requires_grad) return;
            const T* y = yi->data.data();
            const T* g = yi->grad.data();
            T* dx = xi->grad.data();
            for (std::int64_t b = 0; b < B; ++b) {
                const std::int64_t base = b * C * plane;
                for (std::int64_t j = 0; j < plane; ++j) {
                    T gsum = 0;
                    for (std::int64_t c = 0; c < C; ++c) gsum += g[base + c * plane + j];
                    for (std::int64_t c = 0; c < C; ++c) {
                        const std::int64_t k = base + c * plane + j;
                        dx[k] += g[k] - std::exp(y[k]) * gsum;
                    }
                }
            }
        });
    }
    return out;
}

// ============================================================================
// Dense / pooling
// ============================================================================

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (input.rank() != 2)
        throw std::invalid_argument("linear: input must be 2-d, got " + shape_str(input.shape()));
    if (weight.rank() != 2)
        throw std::invalid_argument("linear: weight must be 2-d, got " + shape_str(weight.shape()));
    const std::int64_t B = input.dim(0), I = input.dim(1), O = weight.dim(0);
    if (weight.dim(1) != I)
        throw std::invalid_argument("linear: input feature dim " + std::to_string(I) +
                                    " does not match weight dim " + std::to_string(weight.dim(1)));
    if (bias.rank() != 1 || bias.dim(0) != O)
        throw std::invalid_argument("linear: bias dim " + shape_str(bias.shape()) + " must be (" +
                                    std::to_string(O) + ")");
    Tensor<T> out = Tensor<T>::zeros({B, O});
    const T* x = input.data().data();
    const T* w = weight.data().data();
    const T* bs = bias.data().data();
    T* y = out.data().data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t o = 0; o < O; ++o) {
            T acc = bs[o];
            const T* xr = x + b * I;
            const T* wr = w + o * I;
            for (std::int64_t i = 0; i < I; ++i) acc += xr[i] * wr[i];
            y[b * O + o] = acc;
        }
    if (detail::should_record<T>({&input, &weight, &bias})) {
        detail::mark_output(out);
        Tape<T>::active().record("linear",
                                 [xi = input.impl(), wi = weight.impl(), bi = bias.impl(), yi = out.impl(), B, I, O] {
            const T* g = yi->grad.data();
            if (bi->requires_grad)
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t o = 0; o < O; ++o) bi->grad[o] += g[b * O + o];
            if (wi->requires_grad) {
                const T* x = xi->data.data();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t o = 0; o < O; ++o) {
                        const T gv = g[b * O + o];
                        T* dwr = wi->grad.data() + o * I;
                        const T* xr = x + b * I;
                        for (std::int64_t i = 0; i < I; ++i) dwr[i] += gv * xr[i];
                    }
            }
            if (xi->requires_grad) {
                const T* w = wi->data.data();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t o = 0; o < O; ++o) {
                        const T gv = g[b * O + o];
                        T* dxr = xi->grad.data() + b * I;
                        const T* wr = w + o * I;
                        for (std::int64_t i = 0; i < I; ++i) dxr[i] += gv * wr[i];
                    }
            }
        });
    }
    return out;
}

// mean over H and W, keeping B x C x 1 x 1
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.rank() != 4)
        throw std::invalid_argument("global_avg_pool: input must be 4-d, got " + shape_str(x.shape()));
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t plane = H * W;
    Tensor<T> out = Tensor<T>::zeros({B, C, 1, 1});
    const T* in = x.data().data();
    T* y = out.data().data();
    const T inv = T(1) / static_cast<T>(plane);
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const T* xp = in + bc * plane;
        T acc = 0;
        for (std::int64_t i = 0; i < plane; ++i) acc += xp[i];
        y[bc] = acc * inv;
    }
    if (detail::should_record<T>({&x})) {
        detail::mark_output(out);
        Tape<T>::active().record("global_avg_pool", [xi = x.impl(), yi = out.impl(), B, C, plane, inv] {
            if (!xi->requires_grad) return;
            for (std::int64_t bc = 0; bc < B * C; ++bc) {
                const T gv = yi->grad[bc] * inv;
                T* dxp = xi->grad.data() + bc * plane;
                for (std::int64_t i = 0; i < plane; ++i) dxp[i] += gv;
            }
        });
    }
    return out;
}

// ============================================================================
// Loss primitives
// ============================================================================

// mean over all pixels of -logp at the true class; logp is B x C x H x W
// channel-log-probabilities, mask is B*H*W class indices
template <typename T>
Tensor<T> masked_nll_mean(const Tensor<T>& logp, const std::vector<std::int32_t>& mask) {
    if (logp.rank() != 4)
        throw std::invalid_argument("masked_nll_mean: logp must be 4-d, got " + shape_str(logp.shape()));
    const std::int64_t B = logp.dim(0), C = logp.dim(1), H = logp.dim(2), W = logp.dim(3);
    const std::int64_t plane = H * W;
    if (static_cast<std::int64_t>(mask.size()) != B * plane)
        throw std::invalid_argument("masked_nll_mean: mask has " + std::to_string(mask.size()) +
                                    " entries, expected " + std::to_string(B * plane));
    const T inv = T(1) / static_cast<T>(B * plane);
    const T* lp = logp.data().data();
    double acc = 0;
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t j = 0; j < plane; ++j) {
            const std::int32_t cls = mask[b * plane + j];
            if (cls < 0 || cls >= C)
                throw std::invalid_argument("masked_nll_mean: mask value " + std::to_string(cls) +
                                            " outside [0, " + std::to_string(C) + ") at pixel " +
                                            std::to_string(b * plane + j));
            acc -= lp[(b * C + cls) * plane + j];
        }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc) * inv);
    if (detail::should_record<T>({&logp})) {
        detail::mark_output(out);
        Tape<T>::active().record("masked_nll_mean", [xi = logp.impl(), yi = out.impl(), mask, B, C, plane, inv] {
            if (!xi->requires_grad) return;
            const T g = yi->grad[0] * inv;
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t j = 0; j < plane; ++j)
                    xi->grad[(b * C + mask[b * plane + j]) * plane + j] -= g;
        });
    }
    return out;
}

// mean over all B*C elements of the stable binary cross-entropy on
// sigmoid(logit): max(x,0) - x*t + log1p(exp(-|x|))
template <typename T>
Tensor<T> bce_with_logits_mean(const Tensor<T>& logits, const std::vector<T>& targets) {
    if (static_cast<std::int64_t>(targets.size()) != logits.numel())
        throw std::invalid_argument("bce_with_logits_mean: " + std::to_string(targets.size()) +
                                    " targets for " + std::to_string(logits.numel()) + " logits");
    for (std::size_t i = 0; i < targets.size(); ++i)
        if (targets[i] != T(0) && targets[i] != T(1))
            throw std::invalid_argument("bce_with_logits_mean: non-binary label " + std::to_string(targets[i]) +
                                        " at flat index " + std::to_string(i));
    const T inv = T(1) / static_cast<T>(logits.numel());
    const T* x = logits.data().data();
    double acc = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const double xv = x[i];
        acc += std::max(xv, 0.0) - xv * static_cast<double>(targets[i]) + std::log1p(std::exp(-std::abs(xv)));
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc) * inv);
    if (detail::should_record<T>({&logits})) {
        detail::mark_output(out);
        Tape<T>::active().record("bce_with_logits_mean", [xi = logits.impl(), yi = out.impl(), targets, inv] {
            if (!xi->requires_grad) return;
            const T g = yi->grad[0] * inv;
            for (std::size_t i = 0; i < targets.size(); ++i) {
                const T s = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(xi->data[i]))));
                xi->grad[i] += g * (s - targets[i]);
            }
        });
    }
    return out;
}

}  // namespace srseg
