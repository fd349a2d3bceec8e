#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "noforge/error.hpp"
#include "noforge/rng.hpp"
#include "noforge/tensor.hpp"

namespace noforge {

// ---------------------------------------------------------------------------
// Parameters

// One named tensor with its gradient accumulator. Non-trainable entries
// (batchnorm running statistics) have no gradient buffer and are skipped by
// the optimizer but still serialized with checkpoints.
template <typename T>
struct Param {
    std::string name;
    TensorT<T> value;
    TensorT<T> grad;
    bool trainable = true;
};

template <typename T>
class ParamStore {
public:
    Param<T>& add(std::string name, Shape shape, bool trainable = true) {
        for (const auto& p : items_)
            if (p->name == name) throw InvalidConfig("duplicate parameter name " + name);
        auto p = std::make_unique<Param<T>>();
        p->name = std::move(name);
        p->value = TensorT<T>(shape);
        if (trainable) p->grad = TensorT<T>(shape);
        p->trainable = trainable;
        items_.push_back(std::move(p));
        return *items_.back();
    }

    Param<T>* find(std::string_view name) {
        for (const auto& p : items_)
            if (p->name == name) return p.get();
        return nullptr;
    }

    void zero_grad() {
        for (const auto& p : items_)
            if (p->trainable) p->grad.fill(T(0));
    }

    // Exact count of trainable scalars; each complex weight contributes its
    // two real planes.
    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& p : items_)
            if (p->trainable) n += p->value.size();
        return n;
    }

    std::span<const std::unique_ptr<Param<T>>> items() const { return items_; }

private:
    std::vector<std::unique_ptr<Param<T>>> items_;
};

// Uniform init scaled by 1/sqrt(fan_in); biases stay zero.
template <typename T>
void init_fan_in(Param<T>& p, std::int64_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : p.value.data) v = static_cast<T>(rng.uniform(-bound, bound));
}

// ---------------------------------------------------------------------------
// Activations

// Exact GELU x*Phi(x); the erfc form avoids cancellation in the tails.
template <typename T>
T gelu_scalar(T x) {
    const double xd = static_cast<double>(x);
    return static_cast<T>(xd * 0.5 * std::erfc(-xd / std::numbers::sqrt2));
}

// d/dx of the exact GELU: Phi(x) + x*phi(x).
template <typename T>
T gelu_derivative_scalar(T x) {
    const double xd = static_cast<double>(x);
    const double cdf = 0.5 * std::erfc(-xd / std::numbers::sqrt2);
    const double pdf = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * std::numbers::pi);
    return static_cast<T>(cdf + xd * pdf);
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
    TensorT<T> out(x.shape);
    for (std::int64_t i = 0; i < x.size(); ++i) out[i] = gelu_scalar(x[i]);
    return out;
}

// grad_in = grad_out * gelu'(pre_activation)
template <typename T>
TensorT<T> gelu_backward(const TensorT<T>& grad_out, const TensorT<T>& pre_activation) {
    detail::require_same_shape(grad_out, pre_activation, "gelu_backward");
    TensorT<T> out(grad_out.shape);
    for (std::int64_t i = 0; i < grad_out.size(); ++i)
        out[i] = grad_out[i] * gelu_derivative_scalar(pre_activation[i]);
    return out;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
    TensorT<T> out(x.shape);
    for (std::int64_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    return out;
}

// Subgradient at 0 is taken as 0.
template <typename T>
TensorT<T> relu_backward(const TensorT<T>& grad_out, const TensorT<T>& pre_activation) {
    detail::require_same_shape(grad_out, pre_activation, "relu_backward");
    TensorT<T> out(grad_out.shape);
    for (std::int64_t i = 0; i < grad_out.size(); ++i)
        out[i] = pre_activation[i] > T(0) ? grad_out[i] : T(0);
    return out;
}

// ---------------------------------------------------------------------------
// Dropout (inverted): survivors are scaled by 1/(1-rate) at training time so
// evaluation is the identity.

template <typename T>
struct DropoutCache {
    std::vector<T> scale; // per-element multiplier applied in forward
};

template <typename T>
TensorT<T> dropout_forward(const TensorT<T>& x, double rate, Rng& rng, bool training,
                           DropoutCache<T>* cache) {
    if (rate < 0.0 || rate >= 1.0) throw InvalidConfig("dropout rate must lie in [0, 1)");
    if (!training || rate == 0.0) {
        if (cache) cache->scale.assign(static_cast<std::size_t>(x.size()), T(1));
        return x;
    }
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    TensorT<T> out(x.shape);
    if (cache) cache->scale.resize(static_cast<std::size_t>(x.size()));
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const T s = rng.bernoulli(rate) ? T(0) : keep_scale;
        out[i] = x[i] * s;
        if (cache) cache->scale[static_cast<std::size_t>(i)] = s;
    }
    return out;
}

template <typename T>
TensorT<T> dropout_backward(const TensorT<T>& grad_out, const DropoutCache<T>& cache) {
    if (static_cast<std::size_t>(grad_out.size()) != cache.scale.size())
        throw ContractViolation("dropout backward called with a stale cache");
    TensorT<T> out(grad_out.shape);
    for (std::int64_t i = 0; i < grad_out.size(); ++i)
        out[i] = grad_out[i] * cache.scale[static_cast<std::size_t>(i)];
    return out;
}

// ---------------------------------------------------------------------------
// Pointwise (1x1x...) linear layer: out[c,p] = b[c] + sum_i W[c,i]*x[i,p] for
// every spatial position p. Works on any rank >= 1 with channels first.

template <typename T>
struct PointwiseCache {
    TensorT<T> input;
};

template <typename T>
class PointwiseLinear {
public:
    PointwiseLinear() = default;
    PointwiseLinear(ParamStore<T>& store, const std::string& prefix, std::int64_t in_channels,
                    std::int64_t out_channels)
        : cin_(in_channels), cout_(out_channels) {
        weight_ = &store.add(prefix + ".weight", {out_channels, in_channels});
        bias_ = &store.add(prefix + ".bias", {out_channels});
    }

    void init(Rng& rng) { init_fan_in(*weight_, cin_, rng); }

    std::int64_t in_channels() const { return cin_; }
    std::int64_t out_channels() const { return cout_; }

    TensorT<T> forward(const TensorT<T>& x, PointwiseCache<T>* cache) const {
        if (x.rank() < 1 || x.shape[0] != cin_)
            throw ShapeMismatch("pointwise expects " + std::to_string(cin_) + " channels, got " +
                                shape_str(x.shape));
        Shape out_shape = x.shape;
        out_shape[0] = cout_;
        TensorT<T> out(std::move(out_shape));
        const std::int64_t spatial = x.size() / cin_;
        const T* w = weight_->value.data.data();
        for (std::int64_t co = 0; co < cout_; ++co) {
            T* dst = out.data.data() + co * spatial;
            const T b = bias_->value[co];
            for (std::int64_t p = 0; p < spatial; ++p) dst[p] = b;
            for (std::int64_t ci = 0; ci < cin_; ++ci) {
                const T wv = w[co * cin_ + ci];
                const T* src = x.data.data() + ci * spatial;
                for (std::int64_t p = 0; p < spatial; ++p) dst[p] += wv * src[p];
            }
        }
        if (cache) cache->input = x;
        return out;
    }

    TensorT<T> backward(const TensorT<T>& grad_out, const PointwiseCache<T>& cache) {
        if (cache.input.size() == 0 || cache.input.shape[0] != cin_)
            throw ContractViolation("pointwise backward called with a stale cache");
        if (grad_out.shape[0] != cout_ || grad_out.size() / cout_ != cache.input.size() / cin_)
            throw ShapeMismatch("pointwise grad shape mismatch");
        const std::int64_t spatial = cache.input.size() / cin_;
        TensorT<T> grad_in(cache.input.shape);
        const T* w = weight_->value.data.data();
        T* dw = weight_->grad.data.data();
        for (std::int64_t co = 0; co < cout_; ++co) {
            const T* g = grad_out.data.data() + co * spatial;
            T gb = T(0);
            for (std::int64_t p = 0; p < spatial; ++p) gb += g[p];
            bias_->grad[co] += gb;
            for (std::int64_t ci = 0; ci < cin_; ++ci) {
                const T* xin = cache.input.data.data() + ci * spatial;
                T* gi = grad_in.data.data() + ci * spatial;
                const T wv = w[co * cin_ + ci];
                T acc = T(0);
                for (std::int64_t p = 0; p < spatial; ++p) {
                    acc += g[p] * xin[p];
                    gi[p] += wv * g[p];
                }
                dw[co * cin_ + ci] += acc;
            }
        }
        return grad_in;
    }

private:
    Param<T>* weight_ = nullptr;
    Param<T>* bias_ = nullptr;
    std::int64_t cin_ = 0;
    std::int64_t cout_ = 0;
};

// ---------------------------------------------------------------------------
// 3D convolution with odd kernel, stride 1, zero "same" padding. Kernel 1
// degenerates to the pointwise bypass used alongside spectral convolutions.

template <typename T>
struct Conv3dCache {
    TensorT<T> input;
};

template <typename T>
class Conv3d {
public:
    Conv3d() = default;
    Conv3d(ParamStore<T>& store, const std::string& prefix, std::int64_t in_channels,
           std::int64_t out_channels, std::int64_t kernel)
        : cin_(in_channels), cout_(out_channels), k_(kernel) {
        if (kernel < 1 || kernel % 2 == 0) throw InvalidConfig("conv3d kernel must be odd and >= 1");
        weight_ = &store.add(prefix + ".weight", {out_channels, in_channels, kernel, kernel, kernel});
        bias_ = &store.add(prefix + ".bias", {out_channels});
    }

    void init(Rng& rng) { init_fan_in(*weight_, cin_ * k_ * k_ * k_, rng); }

    TensorT<T> forward(const TensorT<T>& x, Conv3dCache<T>* cache) const {
        if (x.rank() != 4 || x.shape[0] != cin_) throw ShapeMismatch("conv3d input shape " + shape_str(x.shape));
        const std::int64_t w = x.shape[1], h = x.shape[2], d = x.shape[3], pad = k_ / 2;
        TensorT<T> out({cout_, w, h, d});
        for (std::int64_t co = 0; co < cout_; ++co)
            for (std::int64_t ix = 0; ix < w; ++ix)
                for (std::int64_t iy = 0; iy < h; ++iy)
                    for (std::int64_t iz = 0; iz < d; ++iz) {
                        T acc = bias_->value[co];
                        for (std::int64_t ci = 0; ci < cin_; ++ci)
                            for (std::int64_t u = 0; u < k_; ++u) {
                                const std::int64_t sx = ix + u - pad;
                                if (sx < 0 || sx >= w) continue;
                                for (std::int64_t v = 0; v < k_; ++v) {
                                    const std::int64_t sy = iy + v - pad;
                                    if (sy < 0 || sy >= h) continue;
                                    for (std::int64_t t = 0; t < k_; ++t) {
                                        const std::int64_t sz = iz + t - pad;
                                        if (sz < 0 || sz >= d) continue;
                                        acc += weight_->value[(((co * cin_ + ci) * k_ + u) * k_ + v) * k_ + t] *
                                               x[((ci * w + sx) * h + sy) * d + sz];
                                    }
                                }
                            }
                        out[((co * w + ix) * h + iy) * d + iz] = acc;
                    }
        if (cache) cache->input = x;
        return out;
    }

    TensorT<T> backward(const TensorT<T>& grad_out, const Conv3dCache<T>& cache) {
        const TensorT<T>& x = cache.input;
        if (x.size() == 0) throw ContractViolation("conv3d backward called with a stale cache");
        const std::int64_t w = x.shape[1], h = x.shape[2], d = x.shape[3], pad = k_ / 2;
        if (grad_out.shape != Shape{cout_, w, h, d}) throw ShapeMismatch("conv3d grad shape mismatch");
        TensorT<T> grad_in(x.shape);
        for (std::int64_t co = 0; co < cout_; ++co)
            for (std::int64_t ix = 0; ix < w; ++ix)
                for (std::int64_t iy = 0; iy < h; ++iy)
                    for (std::int64_t iz = 0; iz < d; ++iz) {
                        const T g = grad_out[((co * w + ix) * h + iy) * d + iz];
                        bias_->grad[co] += g;
                        for (std::int64_t ci = 0; ci < cin_; ++ci)
                            for (std::int64_t u = 0; u < k_; ++u) {
                                const std::int64_t sx = ix + u - pad;
                                if (sx < 0 || sx >= w) continue;
                                for (std::int64_t v = 0; v < k_; ++v) {
                                    const std::int64_t sy = iy + v - pad;
                                    if (sy < 0 || sy >= h) continue;
                                    for (std::int64_t t = 0; t < k_; ++t) {
                                        const std::int64_t sz = iz + t - pad;
                                        if (sz < 0 || sz >= d) continue;
                                        const std::int64_t wi = (((co * cin_ + ci) * k_ + u) * k_ + v) * k_ + t;
                                        const std::int64_t xi = ((ci * w + sx) * h + sy) * d + sz;
                                        weight_->grad[wi] += g * x[xi];
                                        grad_in[xi] += weight_->value[wi] * g;
                                    }
                                }
                            }
                    }
        return grad_in;
    }

private:
    Param<T>* weight_ = nullptr;
    Param<T>* bias_ = nullptr;
    std::int64_t cin_ = 0;
    std::int64_t cout_ = 0;
    std::int64_t k_ = 1;
};

// ---------------------------------------------------------------------------
// Batched 2D layers for the CNN branch: tensors are [N, C, H, W].

template <typename T>
struct Conv2dCache {
    TensorT<T> input;
};

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(ParamStore<T>& store, const std::string& prefix, std::int64_t in_channels,
           std::int64_t out_channels, std::int64_t kernel = 3)
        : cin_(in_channels), cout_(out_channels), k_(kernel) {
        if (kernel < 1 || kernel % 2 == 0) throw InvalidConfig("conv2d kernel must be odd and >= 1");
        weight_ = &store.add(prefix + ".weight", {out_channels, in_channels, kernel, kernel});
        bias_ = &store.add(prefix + ".bias", {out_channels});
    }

    void init(Rng& rng) { init_fan_in(*weight_, cin_ * k_ * k_, rng); }

    TensorT<T> forward(const TensorT<T>& x, Conv2dCache<T>* cache) const {
        if (x.rank() != 4 || x.shape[1] != cin_) throw ShapeMismatch("conv2d input shape " + shape_str(x.shape));
        const std::int64_t n = x.shape[0], h = x.shape[2], w = x.shape[3], pad = k_ / 2;
        TensorT<T> out({n, cout_, h, w});
        for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t co = 0; co < cout_; ++co)
                for (std::int64_t iy = 0; iy < h; ++iy)
                    for (std::int64_t ix = 0; ix < w; ++ix) {
                        T acc = bias_->value[co];
                        for (std::int64_t ci = 0; ci < cin_; ++ci)
                            for (std::int64_t u = 0; u < k_; ++u) {
                                const std::int64_t sy = iy + u - pad;
                                if (sy < 0 || sy >= h) continue;
                                for (std::int64_t v = 0; v < k_; ++v) {
                                    const std::int64_t sx = ix + v - pad;
                                    if (sx < 0 || sx >= w) continue;
                                    acc += weight_->value[((co * cin_ + ci) * k_ + u) * k_ + v] *
                                           x[((b * cin_ + ci) * h + sy) * w + sx];
                                }
                            }
                        out[((b * cout_ + co) * h + iy) * w + ix] = acc;
                    }
        if (cache) cache->input = x;
        return out;
    }

    TensorT<T> backward(const TensorT<T>& grad_out, const Conv2dCache<T>& cache) {
        const TensorT<T>& x = cache.input;
        if (x.size() == 0) throw ContractViolation("conv2d backward called with a stale cache");
        const std::int64_t n = x.shape[0], h = x.shape[2], w = x.shape[3], pad = k_ / 2;
        if (grad_out.shape != Shape{n, cout_, h, w}) throw ShapeMismatch("conv2d grad shape mismatch");
        TensorT<T> grad_in(x.shape);
        for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t co = 0; co < cout_; ++co)
                for (std::int64_t iy = 0; iy < h; ++iy)
                    for (std::int64_t ix = 0; ix < w; ++ix) {
                        const T g = grad_out[((b * cout_ + co) * h + iy) * w + ix];
                        bias_->grad[co] += g;
                        for (std::int64_t ci = 0; ci < cin_; ++ci)
                            for (std::int64_t u = 0; u < k_; ++u) {
                                const std::int64_t sy = iy + u - pad;
                                if (sy < 0 || sy >= h) continue;
                                for (std::int64_t v = 0; v < k_; ++v) {
                                    const std::int64_t sx = ix + v - pad;
                                    if (sx < 0 || sx >= w) continue;
                                    const std::int64_t wi = ((co * cin_ + ci) * k_ + u) * k_ + v;
                                    const std::int64_t xi = ((b * cin_ + ci) * h + sy) * w + sx;
                                    weight_->grad[wi] += g * x[xi];
                                    grad_in[xi] += weight_->value[wi] * g;
                                }
                            }
                    }
        return grad_in;
    }

private:
    Param<T>* weight_ = nullptr;
    Param<T>* bias_ = nullptr;
    std::int64_t cin_ = 0;
    std::int64_t cout_ = 0;
    std::int64_t k_ = 3;
};

// 2x2 stride-2 pooling; trailing odd rows/columns are dropped.

template <typename T>
struct MaxPool2dCache {
    Shape in_shape;
    std::vector<std::int64_t> argmax;
};

template <typename T>
TensorT<T> maxpool2d_forward(const TensorT<T>& x, MaxPool2dCache<T>* cache) {
    if (x.rank() != 4) throw ShapeMismatch("maxpool2d expects [N,C,H,W]");
    const std::int64_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    const std::int64_t oh = h / 2, ow = w / 2;
    if (oh < 1 || ow < 1) throw ShapeMismatch("maxpool2d input too small");
    TensorT<T> out({n, c, oh, ow});
    if (cache) {
        cache->in_shape = x.shape;
        cache->argmax.assign(static_cast<std::size_t>(out.size()), 0);
    }
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t iy = 0; iy < oh; ++iy)
                for (std::int64_t ix = 0; ix < ow; ++ix) {
                    T best = x[((b * c + ci) * h + iy * 2) * w + ix * 2];
                    std::int64_t best_idx = ((b * c + ci) * h + iy * 2) * w + ix * 2;
                    for (std::int64_t u = 0; u < 2; ++u)
                        for (std::int64_t v = 0; v < 2; ++v) {
                            const std::int64_t xi = ((b * c + ci) * h + iy * 2 + u) * w + ix * 2 + v;
                            if (x[xi] > best) {
                                best = x[xi];
                                best_idx = xi;
                            }
                        }
                    const std::int64_t oi = ((b * c + ci) * oh + iy) * ow + ix;
                    out[oi] = best;
                    if (cache) cache->argmax[static_cast<std::size_t>(oi)] = best_idx;
                }
    return out;
}

template <typename T>
TensorT<T> maxpool2d_backward(const TensorT<T>& grad_out, const MaxPool2dCache<T>& cache) {
    if (cache.in_shape.empty()) throw ContractViolation("maxpool2d backward with a stale cache");
    TensorT<T> grad_in(cache.in_shape);
    for (std::int64_t i = 0; i < grad_out.size(); ++i)
        grad_in[cache.argmax[static_cast<std::size_t>(i)]] += grad_out[i];
    return grad_in;
}

template <typename T>
struct AvgPool2dCache {
    Shape in_shape;
};

template <typename T>
TensorT<T> avgpool2d_forward(const TensorT<T>& x, AvgPool2dCache<T>* cache) {
    if (x.rank() != 4) throw ShapeMismatch("avgpool2d expects [N,C,H,W]");
    const std::int64_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    const std::int64_t oh = h / 2, ow = w / 2;
    if (oh < 1 || ow < 1) throw ShapeMismatch("avgpool2d input too small");
    TensorT<T> out({n, c, oh, ow});
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t iy = 0; iy < oh; ++iy)
                for (std::int64_t ix = 0; ix < ow; ++ix) {
                    T acc = T(0);
                    for (std::int64_t u = 0; u < 2; ++u)
                        for (std::int64_t v = 0; v < 2; ++v)
                            acc += x[((b * c + ci) * h + iy * 2 + u) * w + ix * 2 + v];
                    out[((b * c + ci) * oh + iy) * ow + ix] = acc * T(0.25);
                }
    if (cache) cache->in_shape = x.shape;
    return out;
}

template <typename T>
TensorT<T> avgpool2d_backward(const TensorT<T>& grad_out, const AvgPool2dCache<T>& cache) {
    if (cache.in_shape.empty()) throw ContractViolation("avgpool2d backward with a stale cache");
    const std::int64_t n = cache.in_shape[0], c = cache.in_shape[1], h = cache.in_shape[2],
                       w = cache.in_shape[3];
    const std::int64_t oh = h / 2, ow = w / 2;
    TensorT<T> grad_in(cache.in_shape);
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t iy = 0; iy < oh; ++iy)
                for (std::int64_t ix = 0; ix < ow; ++ix) {
                    const T g = grad_out[((b * c + ci) * oh + iy) * ow + ix] * T(0.25);
                    for (std::int64_t u = 0; u < 2; ++u)
                        for (std::int64_t v = 0; v < 2; ++v)
                            grad_in[((b * c + ci) * h + iy * 2 + u) * w + ix * 2 + v] += g;
                }
    return grad_in;
}

// ---------------------------------------------------------------------------
// Batch normalization over [N, C, H, W]: batch statistics in training mode
// (N >= 2 required), running statistics in eval mode.

template <typename T>
struct BatchNorm2dCache {
    TensorT<T> normalized; // x-hat
    std::vector<T> inv_std;
    Shape in_shape;
};

template <typename T>
class BatchNorm2d {
public:
    BatchNorm2d() = default;
    BatchNorm2d(ParamStore<T>& store, const std::string& prefix, std::int64_t channels,
                double momentum = 0.1, double eps = 1e-5)
        : c_(channels), momentum_(momentum), eps_(eps) {
        gamma_ = &store.add(prefix + ".gamma", {channels});
        beta_ = &store.add(prefix + ".beta", {channels});
        running_mean_ = &store.add(prefix + ".running_mean", {channels}, /*trainable=*/false);
        running_var_ = &store.add(prefix + ".running_var", {channels}, /*trainable=*/false);
        gamma_->value.fill(T(1));
        running_var_->value.fill(T(1));
    }

    TensorT<T> forward(const TensorT<T>& x, bool training, BatchNorm2dCache<T>* cache) {
        if (x.rank() != 4 || x.shape[1] != c_) throw ShapeMismatch("batchnorm2d input shape " + shape_str(x.shape));
        const std::int64_t n = x.shape[0], h = x.shape[2], w = x.shape[3];
        if (training && n < 2) throw InvalidConfig("batchnorm2d training mode needs batch size >= 2");
        const std::int64_t m = n * h * w;
        TensorT<T> out(x.shape);
        if (cache) {
            cache->normalized = TensorT<T>(x.shape);
            cache->inv_std.assign(static_cast<std::size_t>(c_), T(0));
            cache->in_shape = x.shape;
        }
        for (std::int64_t ci = 0; ci < c_; ++ci) {
            double mean, var;
            if (training) {
                double acc = 0.0;
                for (std::int64_t b = 0; b < n; ++b)
                    for (std::int64_t p = 0; p < h * w; ++p) acc += x[(b * c_ + ci) * h * w + p];
                mean = acc / static_cast<double>(m);
                double vacc = 0.0;
                for (std::int64_t b = 0; b < n; ++b)
                    for (std::int64_t p = 0; p < h * w; ++p) {
                        const double dv = x[(b * c_ + ci) * h * w + p] - mean;
                        vacc += dv * dv;
                    }
                var = vacc / static_cast<double>(m); // biased, matching the normalization
                running_mean_->value[ci] =
                    static_cast<T>((1.0 - momentum_) * running_mean_->value[ci] + momentum_ * mean);
                running_var_->value[ci] =
                    static_cast<T>((1.0 - momentum_) * running_var_->value[ci] + momentum_ * var);
            } else {
                mean = running_mean_->value[ci];
                var = running_var_->value[ci];
            }
            const double inv = 1.0 / std::sqrt(var + eps_);
            if (cache) cache->inv_std[static_cast<std::size_t>(ci)] = static_cast<T>(inv);
            const T g = gamma_->value[ci], bta = beta_->value[ci];
            for (std::int64_t b = 0; b < n; ++b)
                for (std::int64_t p = 0; p < h * w; ++p) {
                    const std::int64_t i = (b * c_ + ci) * h * w + p;
                    const T xhat = static_cast<T>((x[i] - mean) * inv);
                    if (cache) cache->normalized[i] = xhat;
                    out[i] = g * xhat + bta;
                }
        }
        return out;
    }

    // Training-mode backward through the batch statistics.
    TensorT<T> backward(const TensorT<T>& grad_out, const BatchNorm2dCache<T>& cache) {
        if (cache.in_shape.empty()) throw ContractViolation("batchnorm2d backward with a stale cache");
        if (grad_out.shape != cache.in_shape) throw ShapeMismatch("batchnorm2d grad shape mismatch");
        const std::int64_t n = cache.in_shape[0], h = cache.in_shape[2], w = cache.in_shape[3];
        const std::int64_t m = n * h * w;
        TensorT<T> grad_in(cache.in_shape);
        for (std::int64_t ci = 0; ci < c_; ++ci) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::int64_t b = 0; b < n; ++b)
                for (std::int64_t p = 0; p < h * w; ++p) {
                    const std::int64_t i = (b * c_ + ci) * h * w + p;
                    sum_g += grad_out[i];
                    sum_gx += static_cast<double>(grad_out[i]) * cache.normalized[i];
                }
            gamma_->grad[ci] += static_cast<T>(sum_gx);
            beta_->grad[ci] += static_cast<T>(sum_g);
            const double inv = cache.inv_std[static_cast<std::size_t>(ci)];
            const double g = gamma_->value[ci];
            const double mean_g = sum_g / static_cast<double>(m);
            const double mean_gx = sum_gx / static_cast<double>(m);
            for (std::int64_t b = 0; b < n; ++b)
                for (std::int64_t p = 0; p < h * w; ++p) {
                    const std::int64_t i = (b * c_ + ci) * h * w + p;
                    grad_in[i] = static_cast<T>(
                        g * inv * (grad_out[i] - mean_g - cache.normalized[i] * mean_gx));
                }
        }
        return grad_in;
    }

private:
    Param<T>* gamma_ = nullptr;
    Param<T>* beta_ = nullptr;
    Param<T>* running_mean_ = nullptr;
    Param<T>* running_var_ = nullptr;
    std::int64_t c_ = 0;
    double momentum_ = 0.1;
    double eps_ = 1e-5;
};

// ---------------------------------------------------------------------------
// Dense layer on batched rows [N, Fin] -> [N, Fout].

template <typename T>
struct DenseCache {
    TensorT<T> input;
};

template <typename T>
class Dense {
public:
    Dense() = default;
    Dense(ParamStore<T>& store, const std::string& prefix, std::int64_t in_features,
          std::int64_t out_features)
        : fin_(in_features), fout_(out_features) {
        weight_ = &store.add(prefix + ".weight", {out_features, in_features});
        bias_ = &store.add(prefix + ".bias", {out_features});
    }

    void init(Rng& rng) { init_fan_in(*weight_, fin_, rng); }

    std::int64_t in_features() const { return fin_; }
    std::int64_t out_features() const { return fout_; }

    TensorT<T> forward(const TensorT<T>& x, DenseCache<T>* cache) const {
        if (x.rank() != 2 || x.shape[1] != fin_) throw ShapeMismatch("dense input shape " + shape_str(x.shape));
        const std::int64_t n = x.shape[0];
        TensorT<T> out({n, fout_});
        for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t fo = 0; fo < fout_; ++fo) {
                T acc = bias_->value[fo];
                const T* w = weight_->value.data.data() + fo * fin_;
                const T* xin = x.data.data() + b * fin_;
                for (std::int64_t fi = 0; fi < fin_; ++fi) acc += w[fi] * xin[fi];
                out[b * fout_ + fo] = acc;
            }
        if (cache) cache->input = x;
        return out;
    }

    TensorT<T> backward(const TensorT<T>& grad_out, const DenseCache<T>& cache) {
        const TensorT<T>& x = cache.input;
        if (x.size() == 0) throw ContractViolation("dense backward called with a stale cache");
        const std::int64_t n = x.shape[0];
        if (grad_out.shape != Shape{n, fout_}) throw ShapeMismatch("dense grad shape mismatch");
        TensorT<T> grad_in(x.shape);
        for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t fo = 0; fo < fout_; ++fo) {
                const T g = grad_out[b * fout_ + fo];
                bias_->grad[fo] += g;
                const T* w = weight_->value.data.data() + fo * fin_;
                T* dw = weight_->grad.data.data() + fo * fin_;
                const T* xin = x.data.data() + b * fin_;
                T* gi = grad_in.data.data() + b * fin_;
                for (std::int64_t fi = 0; fi < fin_; ++fi) {
                    dw[fi] += g * xin[fi];
                    gi[fi] += w[fi] * g;
                }
            }
        return grad_in;
    }

private:
    Param<T>* weight_ = nullptr;
    Param<T>* bias_ = nullptr;
    std::int64_t fin_ = 0;
    std::int64_t fout_ = 0;
};

} // namespace noforge
