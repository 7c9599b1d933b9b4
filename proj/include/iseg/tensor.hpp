#pragma once

#include <algorithm>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "iseg/common.hpp"

// Dense tensors with a recorded operation tape for reverse-mode
// differentiation. Ops are eager: values are computed immediately and, when a
// tape is supplied and an input requires gradients, a backward closure is
// recorded. Scalar type is a template parameter; gradient checks run in
// double, training may run in float.
//
// Conventions:
//   - images / feature maps are [C, H, W], row-major within a channel
//   - kernels are [C_out, C_in, kh, kw]
//   - a "scalar" tensor has numel() == 1
// Tensors are immutable once produced by an op; gradients accumulate until
// explicitly zeroed.

namespace iseg {

namespace detail {

template <typename T>
struct Storage {
    std::vector<std::size_t> shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty unless requires_grad
    bool requires_grad = false;
};

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

}  // namespace detail

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        Tensor t;
        t.s_ = std::make_shared<detail::Storage<T>>();
        t.s_->shape = std::move(shape);
        t.s_->value.assign(detail::shape_numel(t.s_->shape), T(0));
        t.s_->requires_grad = requires_grad;
        if (requires_grad) t.s_->grad.assign(t.s_->value.size(), T(0));
        return t;
    }

    static Tensor full(std::vector<std::size_t> shape, T v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.s_->value.begin(), t.s_->value.end(), v);
        return t;
    }

    static Tensor from_data(std::vector<std::size_t> shape, std::vector<T> data,
                            bool requires_grad = false) {
        require_dims(detail::shape_numel(shape) == data.size(),
                     "tensor data length does not match shape");
        Tensor t;
        t.s_ = std::make_shared<detail::Storage<T>>();
        t.s_->shape = std::move(shape);
        t.s_->value = std::move(data);
        t.s_->requires_grad = requires_grad;
        if (requires_grad) t.s_->grad.assign(t.s_->value.size(), T(0));
        return t;
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    bool defined() const { return s_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return s_->shape; }
    std::size_t rank() const { return s_->shape.size(); }
    std::size_t dim(std::size_t i) const { return s_->shape[i]; }
    std::size_t numel() const { return s_->value.size(); }
    bool requires_grad() const { return s_ && s_->requires_grad; }

    std::vector<T>& values() { return s_->value; }
    const std::vector<T>& values() const { return s_->value; }

    std::vector<T>& grads() {
        require(requires_grad(), "tensor has no gradient buffer");
        return s_->grad;
    }
    const std::vector<T>& grads() const {
        require(requires_grad(), "tensor has no gradient buffer");
        return s_->grad;
    }

    void zero_grad() {
        if (requires_grad()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
    }

    T item() const {
        require(numel() == 1, "item() requires a scalar tensor");
        return s_->value[0];
    }
    T grad_item() const {
        require(numel() == 1, "grad_item() requires a scalar tensor");
        return grads()[0];
    }

    // identity of the underlying buffer; used by tests
    const void* storage_id() const { return s_.get(); }

private:
    std::shared_ptr<detail::Storage<T>> s_;
};

#ifndef NDEBUG
template <typename T>
inline void debug_check_finite(const Tensor<T>& t, const char* op) {
    for (T v : t.values())
        if (!std::isfinite(double(v)))
            throw ContractError(std::string("non-finite value produced by ") + op);
}
#else
template <typename T>
inline void debug_check_finite(const Tensor<T>&, const char*) {}
#endif

// Ordered record of operations of one forward pass. Nodes are appended in
// execution order, which is a topological order, so a single reverse sweep
// propagates all gradients.
template <typename T>
class Tape {
public:
    void record(std::function<void()> backward) {
        nodes_.push_back(std::move(backward));
    }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss) = seed and sweeps the tape once, newest node
    // first. Gradients accumulate into every requires_grad tensor reachable
    // from the loss.
    void backward(const Tensor<T>& loss, T seed = T(1)) {
        require(loss.numel() == 1, "backward requires a scalar loss");
        require(loss.requires_grad(), "loss is not connected to the tape");
        const_cast<Tensor<T>&>(loss).grads()[0] += seed;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> nodes_;
};

// Named trainable tensors plus their accumulated gradients. Iteration order
// is the lexicographic name order of std::map, which keeps updates and
// checkpoints deterministic.
template <typename T>
class ParameterStore {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        require(t.requires_grad(), "parameters must require gradients: " + name);
        auto [it, inserted] = params_.emplace(name, std::move(t));
        require(inserted, "duplicate parameter name: " + name);
        return it->second;
    }

    Tensor<T>& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }
    const Tensor<T>& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    const std::map<std::string, Tensor<T>>& entries() const { return params_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
        grads_ready_ = false;
    }

    void mark_grads_ready() { grads_ready_ = true; }
    bool grads_ready() const { return grads_ready_; }

    // p <- p - lr * dp, then gradients are cleared.
    void sgd_step(T lr) {
        require(grads_ready_, "sgd_step called before gradients were populated");
        for (auto& [name, t] : params_) {
            auto& v = t.values();
            auto& g = t.grads();
            for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
            std::fill(g.begin(), g.end(), T(0));
        }
        grads_ready_ = false;
    }

private:
    std::map<std::string, Tensor<T>> params_;
    bool grads_ready_ = false;
};

// Propagates into `params` and flags the store so sgd_step knows gradients
// are live. Parameters not reachable from the loss keep their (zero) grads.
template <typename T>
inline void backward(Tape<T>& tape, const Tensor<T>& loss, ParameterStore<T>& params,
                     T seed = T(1)) {
    tape.backward(loss, seed);
    params.mark_grads_ready();
}

// ---------------------------------------------------------------------------
// operations

namespace ops {

template <typename T>
inline bool track(Tape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
    if (!tape) return false;
    for (const Tensor<T>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <typename T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& input, const Tensor<T>& kernels,
                 int stride, int pad) {
    require_dims(input.rank() == 3, "conv2d input must be [C,H,W]");
    require_dims(kernels.rank() == 4, "conv2d kernels must be [Cout,Cin,kh,kw]");
    require(stride >= 1 && pad >= 0, "conv2d needs stride >= 1 and pad >= 0");
    const long cin = long(input.dim(0)), h = long(input.dim(1)), w = long(input.dim(2));
    const long cout = long(kernels.dim(0)), kh = long(kernels.dim(2)), kw = long(kernels.dim(3));
    require_dims(long(kernels.dim(1)) == cin, "conv2d channel mismatch");
    const long oh = (h + 2 * pad - kh) / stride + 1;
    const long ow = (w + 2 * pad - kw) / stride + 1;
    require_dims(kh <= h + 2 * pad && kw <= w + 2 * pad, "conv2d kernel larger than padded input");

    Tensor<T> out = Tensor<T>::zeros({std::size_t(cout), std::size_t(oh), std::size_t(ow)},
                                     track(tape, {&input, &kernels}));
    const T* x = input.values().data();
    const T* k = kernels.values().data();
    T* y = out.values().data();
    for (long co = 0; co < cout; ++co) {
        for (long oy = 0; oy < oh; ++oy) {
            for (long ox = 0; ox < ow; ++ox) {
                T acc = 0;
                for (long ci = 0; ci < cin; ++ci) {
                    const T* xc = x + ci * h * w;
                    const T* kc = k + ((co * cin + ci) * kh) * kw;
                    for (long ky = 0; ky < kh; ++ky) {
                        const long iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (long kx = 0; kx < kw; ++kx) {
                            const long ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= w) continue;
                            acc += xc[iy * w + ix] * kc[ky * kw + kx];
                        }
                    }
                }
                y[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    debug_check_finite(out, "conv2d");

    if (out.requires_grad()) {
        tape->record([input, kernels, out, stride, pad, cin, h, w, cout, kh, kw, oh, ow]() {
            const T* go = out.grads().data();
            const T* x = input.values().data();
            const T* k = kernels.values().data();
            T* gx = input.requires_grad() ? const_cast<Tensor<T>&>(input).grads().data() : nullptr;
            T* gk = kernels.requires_grad() ? const_cast<Tensor<T>&>(kernels).grads().data() : nullptr;
            for (long co = 0; co < cout; ++co) {
                for (long oy = 0; oy < oh; ++oy) {
                    for (long ox = 0; ox < ow; ++ox) {
                        const T g = go[(co * oh + oy) * ow + ox];
                        if (g == T(0)) continue;
                        for (long ci = 0; ci < cin; ++ci) {
                            const T* xc = x + ci * h * w;
                            const T* kc = k + ((co * cin + ci) * kh) * kw;
                            T* gxc = gx ? gx + ci * h * w : nullptr;
                            T* gkc = gk ? gk + ((co * cin + ci) * kh) * kw : nullptr;
                            for (long ky = 0; ky < kh; ++ky) {
                                const long iy = oy * stride - pad + ky;
                                if (iy < 0 || iy >= h) continue;
                                for (long kx = 0; kx < kw; ++kx) {
                                    const long ix = ox * stride - pad + kx;
                                    if (ix < 0 || ix >= w) continue;
                                    if (gxc) gxc[iy * w + ix] += g * kc[ky * kw + kx];
                                    if (gkc) gkc[ky * kw + kx] += g * xc[iy * w + ix];
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

// out[c,h,w] = in[c,h,w] + bias[c]
template <typename T>
Tensor<T> channel_bias(Tape<T>* tape, const Tensor<T>& input, const Tensor<T>& bias) {
    require_dims(input.rank() == 3, "channel_bias input must be [C,H,W]");
    require_dims(bias.rank() == 1 && bias.dim(0) == input.dim(0),
                 "channel_bias size mismatch");
    const std::size_t c = input.dim(0), hw = input.dim(1) * input.dim(2);
    Tensor<T> out = Tensor<T>::zeros(input.shape(), track(tape, {&input, &bias}));
    for (std::size_t ci = 0; ci < c; ++ci) {
        const T b = bias.values()[ci];
        for (std::size_t i = 0; i < hw; ++i)
            out.values()[ci * hw + i] = input.values()[ci * hw + i] + b;
    }
    if (out.requires_grad()) {
        tape->record([input, bias, out, c, hw]() {
            const T* go = out.grads().data();
            if (input.requires_grad()) {
                T* gx = const_cast<Tensor<T>&>(input).grads().data();
                for (std::size_t i = 0; i < c * hw; ++i) gx[i] += go[i];
            }
            if (bias.requires_grad()) {
                T* gb = const_cast<Tensor<T>&>(bias).grads().data();
                for (std::size_t ci = 0; ci < c; ++ci) {
                    T acc = 0;
                    for (std::size_t i = 0; i < hw; ++i) acc += go[ci * hw + i];
                    gb[ci] += acc;
                }
            }
        });
    }
    return out;
}

// out = weight * input + bias, for vector input [n], weight [m,n], bias [m]
template <typename T>
Tensor<T> affine(Tape<T>* tape, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
    require_dims(input.rank() == 1, "affine input must be a vector");
    require_dims(weight.rank() == 2 && weight.dim(1) == input.dim(0),
                 "affine weight shape mismatch");
    require_dims(bias.rank() == 1 && bias.dim(0) == weight.dim(0),
                 "affine bias shape mismatch");
    const std::size_t m = weight.dim(0), n = input.dim(0);
    Tensor<T> out = Tensor<T>::zeros({m}, track(tape, {&input, &weight, &bias}));
    const T* x = input.values().data();
    const T* wt = weight.values().data();
    T* y = out.values().data();
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = wt + i * n;
        T acc = bias.values()[i];
        for (std::size_t j = 0; j < n; ++j) acc += row[j] * x[j];
        y[i] = acc;
    }
    debug_check_finite(out, "affine");

    if (out.requires_grad()) {
        tape->record([input, weight, bias, out, m, n]() {
            const T* go = out.grads().data();
            const T* x = input.values().data();
            const T* wt = weight.values().data();
            if (input.requires_grad()) {
                T* gx = const_cast<Tensor<T>&>(input).grads().data();
                for (std::size_t i = 0; i < m; ++i) {
                    const T g = go[i];
                    if (g == T(0)) continue;
                    const T* row = wt + i * n;
                    for (std::size_t j = 0; j < n; ++j) gx[j] += g * row[j];
                }
            }
            if (weight.requires_grad()) {
                T* gw = const_cast<Tensor<T>&>(weight).grads().data();
                for (std::size_t i = 0; i < m; ++i) {
                    const T g = go[i];
                    if (g == T(0)) continue;
                    T* row = gw + i * n;
                    for (std::size_t j = 0; j < n; ++j) row[j] += g * x[j];
                }
            }
            if (bias.requires_grad()) {
                T* gb = const_cast<Tensor<T>&>(bias).grads().data();
                for (std::size_t i = 0; i < m; ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

// subgradient 0 at x == 0
template <typename T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& input) {
    Tensor<T> out = Tensor<T>::zeros(input.shape(), track(tape, {&input}));
    for (std::size_t i = 0; i < input.numel(); ++i)
        out.values()[i] = input.values()[i] > T(0) ? input.values()[i] : T(0);
    if (out.requires_grad()) {
        tape->record([input, out]() {
            T* gx = const_cast<Tensor<T>&>(input).grads().data();
            const T* go = out.grads().data();
            const T* x = input.values().data();
            for (std::size_t i = 0; i < input.numel(); ++i)
                if (x[i] > T(0)) gx[i] += go[i];
        });
    }
    return out;
}

template <typename T>
inline T sigmoid_value(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& input) {
    Tensor<T> out = Tensor<T>::zeros(input.shape(), track(tape, {&input}));
    for (std::size_t i = 0; i < input.numel(); ++i)
        out.values()[i] = sigmoid_value(input.values()[i]);
    if (out.requires_grad()) {
        tape->record([input, out]() {
            T* gx = const_cast<Tensor<T>&>(input).grads().data();
            const T* go = out.grads().data();
            const T* y = out.values().data();
            for (std::size_t i = 0; i < input.numel(); ++i)
                gx[i] += go[i] * y[i] * (T(1) - y[i]);
        });
    }
    return out;
}

// vector softmax, numerically stabilized by max subtraction
template <typename T>
Tensor<T> softmax(Tape<T>* tape, const Tensor<T>& input) {
    require_dims(input.rank() == 1, "softmax input must be a vector");
    const std::size_t n = input.dim(0);
    require(n >= 1, "softmax of empty vector");
    Tensor<T> out = Tensor<T>::zeros(input.shape(), track(tape, {&input}));
    T mx = input.values()[0];
    for (T v : input.values()) mx = std::max(mx, v);
    T denom = 0;
    for (std::size_t i = 0; i < n; ++i) {
        out.values()[i] = std::exp(input.values()[i] - mx);
        denom += out.values()[i];
    }
    for (std::size_t i = 0; i < n; ++i) out.values()[i] /= denom;
    if (out.requires_grad()) {
        tape->record([input, out, n]() {
            T* gx = const_cast<Tensor<T>&>(input).grads().data();
            const T* go = out.grads().data();
            const T* p = out.values().data();
            T dot = 0;
            for (std::size_t i = 0; i < n; ++i) dot += go[i] * p[i];
            for (std::size_t i = 0; i < n; ++i) gx[i] += p[i] * (go[i] - dot);
        });
    }
    return out;
}

template <typename T>
Tensor<T> elementwise_mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    require_dims(a.shape() == b.shape(), "elementwise_mul shape mismatch");
    Tensor<T> out = Tensor<T>::zeros(a.shape(), track(tape, {&a, &b}));
    for (std::size_t i = 0; i < a.numel(); ++i)
        out.values()[i] = a.values()[i] * b.values()[i];
    if (out.requires_grad()) {
        tape->record([a, b, out]() {
            const T* go = out.grads().data();
            if (a.requires_grad()) {
                T* ga = const_cast<Tensor<T>&>(a).grads().data();
                for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += go[i] * b.values()[i];
            }
            if (b.requires_grad()) {
                T* gb = const_cast<Tensor<T>&>(b).grads().data();
                for (std::size_t i = 0; i < a.numel(); ++i) gb[i] += go[i] * a.values()[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    require_dims(a.shape() == b.shape(), "add shape mismatch");
    Tensor<T> out = Tensor<T>::zeros(a.shape(), track(tape, {&a, &b}));
    for (std::size_t i = 0; i < a.numel(); ++i)
        out.values()[i] = a.values()[i] + b.values()[i];
    if (out.requires_grad()) {
        tape->record([a, b, out]() {
            const T* go = out.grads().data();
            if (a.requires_grad()) {
                T* ga = const_cast<Tensor<T>&>(a).grads().data();
                for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                T* gb = const_cast<Tensor<T>&>(b).grads().data();
                for (std::size_t i = 0; i < a.numel(); ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape(), track(tape, {&a}));
    for (std::size_t i = 0; i < a.numel(); ++i) out.values()[i] = a.values()[i] * c;
    if (out.requires_grad()) {
        tape->record([a, out, c]() {
            T* ga = const_cast<Tensor<T>&>(a).grads().data();
            const T* go = out.grads().data();
            for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += go[i] * c;
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros({1}, track(tape, {&a}));
    T acc = 0;
    for (T v : a.values()) acc += v;
    out.values()[0] = acc;
    if (out.requires_grad()) {
        tape->record([a, out]() {
            T* ga = const_cast<Tensor<T>&>(a).grads().data();
            const T g = out.grads()[0];
            for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> add_all(Tape<T>* tape, const std::vector<Tensor<T>>& terms) {
    require(!terms.empty(), "add_all of empty list");
    Tensor<T> acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = add(tape, acc, terms[i]);
    return acc;
}

// gradient goes to the argmax cell only; first index wins ties
template <typename T>
Tensor<T> max_pool2d(Tape<T>* tape, const Tensor<T>& input, int window) {
    require_dims(input.rank() == 3, "max_pool2d input must be [C,H,W]");
    require(window >= 1, "max_pool2d window must be >= 1");
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    require_dims(h % std::size_t(window) == 0 && w % std::size_t(window) == 0,
                 "max_pool2d window must divide input size");
    const std::size_t oh = h / std::size_t(window), ow = w / std::size_t(window);
    Tensor<T> out = Tensor<T>::zeros({c, oh, ow}, track(tape, {&input}));
    std::vector<std::size_t> argmax(out.numel());
    const T* x = input.values().data();
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = (ci * h + oy * std::size_t(window)) * w + ox * std::size_t(window);
                T bv = x[best];
                for (std::size_t ky = 0; ky < std::size_t(window); ++ky)
                    for (std::size_t kx = 0; kx < std::size_t(window); ++kx) {
                        const std::size_t idx =
                            (ci * h + oy * std::size_t(window) + ky) * w + ox * std::size_t(window) + kx;
                        if (x[idx] > bv) { bv = x[idx]; best = idx; }
                    }
                const std::size_t o = (ci * oh + oy) * ow + ox;
                out.values()[o] = bv;
                argmax[o] = best;
            }
        }
    }
    if (out.requires_grad()) {
        tape->record([input, out, argmax]() {
            T* gx = const_cast<Tensor<T>&>(input).grads().data();
            const T* go = out.grads().data();
            for (std::size_t o = 0; o < out.numel(); ++o) gx[argmax[o]] += go[o];
        });
    }
    return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& input, std::vector<std::size_t> shape) {
    require_dims(detail::shape_numel(shape) == input.numel(), "reshape numel mismatch");
    Tensor<T> out = Tensor<T>::zeros(std::move(shape), track(tape, {&input}));
    out.values() = input.values();
    if (out.requires_grad()) {
        tape->record([input, out]() {
            T* gx = const_cast<Tensor<T>&>(input).grads().data();
            const T* go = out.grads().data();
            for (std::size_t i = 0; i < input.numel(); ++i) gx[i] += go[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    require_dims(a.rank() == 1 && b.rank() == 1, "concat expects vectors");
    Tensor<T> out = Tensor<T>::zeros({a.numel() + b.numel()}, track(tape, {&a, &b}));
    std::copy(a.values().begin(), a.values().end(), out.values().begin());
    std::copy(b.values().begin(), b.values().end(), out.values().begin() + long(a.numel()));
    if (out.requires_grad()) {
        tape->record([a, b, out]() {
            const T* go = out.grads().data();
            if (a.requires_grad()) {
                T* ga = const_cast<Tensor<T>&>(a).grads().data();
                for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                T* gb = const_cast<Tensor<T>&>(b).grads().data();
                for (std::size_t i = 0; i < b.numel(); ++i) gb[i] += go[a.numel() + i];
            }
        });
    }
    return out;
}

// picks flat indices; backward scatter-adds
template <typename T>
Tensor<T> gather(Tape<T>* tape, const Tensor<T>& input, std::vector<std::size_t> indices) {
    for (std::size_t idx : indices)
        require(idx < input.numel(), "gather index out of range");
    Tensor<T> out = Tensor<T>::zeros({indices.size()}, track(tape, {&input}));
    for (std::size_t i = 0; i < indices.size(); ++i)
        out.values()[i] = input.values()[indices[i]];
    if (out.requires_grad()) {
        tape->record([input, out, indices]() {
            T* gx = const_cast<Tensor<T>&>(input).grads().data();
            const T* go = out.grads().data();
            for (std::size_t i = 0; i < indices.size(); ++i) gx[indices[i]] += go[i];
        });
    }
    return out;
}

// [H,W] -> [C,H,W] by repetition; backward sums over channels
template <typename T>
Tensor<T> broadcast_channels(Tape<T>* tape, const Tensor<T>& input, std::size_t channels) {
    require_dims(input.rank() == 2, "broadcast_channels input must be [H,W]");
    const std::size_t hw = input.numel();
    Tensor<T> out = Tensor<T>::zeros({channels, input.dim(0), input.dim(1)},
                                     track(tape, {&input}));
    for (std::size_t c = 0; c < channels; ++c)
        std::copy(input.values().begin(), input.values().end(),
                  out.values().begin() + long(c * hw));
    if (out.requires_grad()) {
        tape->record([input, out, channels, hw]() {
            T* gx = const_cast<Tensor<T>&>(input).grads().data();
            const T* go = out.grads().data();
            for (std::size_t c = 0; c < channels; ++c)
                for (std::size_t i = 0; i < hw; ++i) gx[i] += go[c * hw + i];
        });
    }
    return out;
}

// Bilinear resize [h,w] -> [oh,ow] with half-cell alignment and edge clamp.
// The map is linear in the input, so backward is its transpose.
template <typename T>
Tensor<T> resize_bilinear(Tape<T>* tape, const Tensor<T>& input, std::size_t oh,
                          std::size_t ow) {
    require_dims(input.rank() == 2, "resize_bilinear input must be [H,W]");
    require(oh >= 1 && ow >= 1, "resize_bilinear target must be nonempty");
    const std::size_t h = input.dim(0), w = input.dim(1);
    struct Tap { std::size_t lo, hi; T wlo, whi; };
    auto axis = [](std::size_t in, std::size_t out) {
        std::vector<Tap> taps(out);
        for (std::size_t i = 0; i < out; ++i) {
            double s = (double(i) + 0.5) * double(in) / double(out) - 0.5;
            s = std::min(std::max(s, 0.0), double(in - 1));
            std::size_t lo = std::size_t(s);
            std::size_t hi = std::min(lo + 1, in - 1);
            T f = T(s - double(lo));
            taps[i] = {lo, hi, T(1) - f, f};
        }
        return taps;
    };
    const auto ty = axis(h, oh);
    const auto tx = axis(w, ow);
    Tensor<T> out = Tensor<T>::zeros({oh, ow}, track(tape, {&input}));
    const T* x = input.values().data();
    for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j)
            out.values()[i * ow + j] =
                ty[i].wlo * (tx[j].wlo * x[ty[i].lo * w + tx[j].lo] +
                             tx[j].whi * x[ty[i].lo * w + tx[j].hi]) +
                ty[i].whi * (tx[j].wlo * x[ty[i].hi * w + tx[j].lo] +
                             tx[j].whi * x[ty[i].hi * w + tx[j].hi]);
    if (out.requires_grad()) {
        tape->record([input, out, ty, tx, w, oh, ow]() {
            T* gx = const_cast<Tensor<T>&>(input).grads().data();
            const T* go = out.grads().data();
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    const T g = go[i * ow + j];
                    gx[ty[i].lo * w + tx[j].lo] += g * ty[i].wlo * tx[j].wlo;
                    gx[ty[i].lo * w + tx[j].hi] += g * ty[i].wlo * tx[j].whi;
                    gx[ty[i].hi * w + tx[j].lo] += g * ty[i].whi * tx[j].wlo;
                    gx[ty[i].hi * w + tx[j].hi] += g * ty[i].whi * tx[j].whi;
                }
        });
    }
    return out;
}

}  // namespace ops

// ---------------------------------------------------------------------------
// checkpoint format: 8-byte tag "ISEGCKP1", u32 scalar width, u64 count,
// then per parameter: u32 name length, name bytes, u32 rank, u64 dims[rank],
// raw little-endian scalar data. Round trip is bit-exact for matching width.

namespace detail {

inline void write_bytes(std::ofstream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), std::streamsize(n));
}

inline void read_bytes(std::ifstream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), std::streamsize(n));
    if (std::size_t(is.gcount()) != n) throw IoError("checkpoint truncated");
}

}  // namespace detail

template <typename T>
void save_checkpoint(const ParameterStore<T>& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    const char tag[8] = {'I', 'S', 'E', 'G', 'C', 'K', 'P', '1'};
    detail::write_bytes(os, tag, 8);
    std::uint32_t width = sizeof(T);
    detail::write_bytes(os, &width, 4);
    std::uint64_t count = params.entries().size();
    detail::write_bytes(os, &count, 8);
    for (const auto& [name, t] : params.entries()) {
        std::uint32_t nl = std::uint32_t(name.size());
        detail::write_bytes(os, &nl, 4);
        detail::write_bytes(os, name.data(), name.size());
        std::uint32_t rank = std::uint32_t(t.rank());
        detail::write_bytes(os, &rank, 4);
        for (std::size_t d : t.shape()) {
            std::uint64_t dim = d;
            detail::write_bytes(os, &dim, 8);
        }
        detail::write_bytes(os, t.values().data(), t.numel() * sizeof(T));
    }
    if (!os) throw IoError("checkpoint write failed: " + path);
}

// Loads values into an existing store; every stored name must exist with the
// same shape. Data saved at a different scalar width is converted.
template <typename T>
void load_checkpoint(ParameterStore<T>& params, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char tag[8];
    detail::read_bytes(is, tag, 8);
    if (std::memcmp(tag, "ISEGCKP1", 8) != 0)
        throw ConfigError("not a checkpoint file: " + path);
    std::uint32_t width = 0;
    detail::read_bytes(is, &width, 4);
    if (width != 4 && width != 8) throw ConfigError("unsupported checkpoint scalar width");
    std::uint64_t count = 0;
    detail::read_bytes(is, &count, 8);
    for (std::uint64_t p = 0; p < count; ++p) {
        std::uint32_t nl = 0;
        detail::read_bytes(is, &nl, 4);
        std::string name(nl, '\0');
        detail::read_bytes(is, name.data(), nl);
        std::uint32_t rank = 0;
        detail::read_bytes(is, &rank, 4);
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) {
            std::uint64_t dim = 0;
            detail::read_bytes(is, &dim, 8);
            d = std::size_t(dim);
        }
        Tensor<T>& t = params.get(name);
        if (t.shape() != shape)
            throw ConfigError("checkpoint shape mismatch for parameter: " + name);
        if (width == sizeof(T)) {
            detail::read_bytes(is, t.values().data(), t.numel() * sizeof(T));
        } else if (width == 4) {
            std::vector<float> tmp(t.numel());
            detail::read_bytes(is, tmp.data(), tmp.size() * 4);
            for (std::size_t i = 0; i < tmp.size(); ++i) t.values()[i] = T(tmp[i]);
        } else {
            std::vector<double> tmp(t.numel());
            detail::read_bytes(is, tmp.data(), tmp.size() * 8);
            for (std::size_t i = 0; i < tmp.size(); ++i) t.values()[i] = T(tmp[i]);
        }
    }
}

}  // namespace iseg
