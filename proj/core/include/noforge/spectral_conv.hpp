#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "noforge/fft.hpp"
#include "noforge/layers.hpp"

namespace noforge {

// ---------------------------------------------------------------------------
// 3D spectral convolution.
//
// Complex channel-mixing weights are stored on the nonnegative-frequency
// octant only, [Cout, Cin, kx, ky, kz] (2*C^2*kx*ky*kz real scalars). A
// retained mode with signed frequencies (fx, fy, fz) uses the octant entry at
// (|fx|, |fy|, fz), conjugated when the mode is the negative member of its
// conjugate pair, so the output spectrum of a real field stays Hermitian and
// the inverse transform is exactly real.

namespace detail {

struct Spectral3dPlan {
    ModeSpec used;                  // clamped against the grid
    std::int64_t sx = 0, sy = 0, sz = 0;
    std::vector<std::int64_t> oct;  // per slot: flat octant weight index
    std::vector<std::uint8_t> neg;  // per slot: use conj(weight)
    std::vector<std::uint8_t> mult; // per slot: Hermitian multiplicity (1 or 2)
};

inline Spectral3dPlan make_spectral3d_plan(ModeSpec configured, std::int64_t w, std::int64_t h,
                                           std::int64_t d) {
    Spectral3dPlan plan;
    plan.used = clamp_modes(configured, w, h, d);
    const AxisModeMap mx = make_axis_map(w, plan.used.kx, false);
    const AxisModeMap my = make_axis_map(h, plan.used.ky, false);
    plan.sx = static_cast<std::int64_t>(mx.src.size());
    plan.sy = static_cast<std::int64_t>(my.src.size());
    plan.sz = plan.used.kz;
    const std::int64_t n_slots = plan.sx * plan.sy * plan.sz;
    plan.oct.resize(static_cast<std::size_t>(n_slots));
    plan.neg.resize(static_cast<std::size_t>(n_slots));
    plan.mult.resize(static_cast<std::size_t>(n_slots));
    for (std::int64_t ix = 0; ix < plan.sx; ++ix)
        for (std::int64_t iy = 0; iy < plan.sy; ++iy)
            for (std::int64_t iz = 0; iz < plan.sz; ++iz) {
                const std::int64_t fx = mx.freq[static_cast<std::size_t>(ix)];
                const std::int64_t fy = my.freq[static_cast<std::size_t>(iy)];
                const std::int64_t fz = iz;
                const bool canonical = fz > 0 || (fz == 0 && (fy > 0 || (fy == 0 && fx >= 0)));
                const std::int64_t s = (ix * plan.sy + iy) * plan.sz + iz;
                plan.oct[static_cast<std::size_t>(s)] =
                    (std::abs(fx) * configured.ky + std::abs(fy)) * configured.kz + fz;
                plan.neg[static_cast<std::size_t>(s)] = canonical ? 0 : 1;
                plan.mult[static_cast<std::size_t>(s)] =
                    static_cast<std::uint8_t>(hermitian_multiplicity(iz, d));
            }
    return plan;
}

} // namespace detail

template <typename T>
struct SpectralConv3dCache {
    ComplexTensorT<T> input_spectrum; // truncated fft3 of the input
    Shape spatial;                    // {W, H, D}
};

template <typename T>
class SpectralConv3d {
public:
    SpectralConv3d() = default;
    SpectralConv3d(ParamStore<T>& store, const std::string& prefix, std::int64_t in_channels,
                   std::int64_t out_channels, ModeSpec modes)
        : cin_(in_channels), cout_(out_channels), modes_(modes) {
        const Shape wshape{out_channels, in_channels, modes.kx, modes.ky, modes.kz};
        weight_re_ = &store.add(prefix + ".weight_re", wshape);
        weight_im_ = &store.add(prefix + ".weight_im", wshape);
    }

    // Complex-uniform init scaled by 1/(Cin*Cout).
    void init(Rng& rng) {
        const double s = 1.0 / static_cast<double>(cin_ * cout_);
        for (std::int64_t i = 0; i < weight_re_->value.size(); ++i) {
            weight_re_->value[i] = static_cast<T>(rng.uniform(-s, s));
            weight_im_->value[i] = static_cast<T>(rng.uniform(-s, s));
        }
    }

    ModeSpec modes() const { return modes_; }

    TensorT<T> forward(const TensorT<T>& x, SpectralConv3dCache<T>* cache) const {
        if (x.rank() != 4 || x.shape[0] != cin_)
            throw ShapeMismatch("spectral_conv3d input shape " + shape_str(x.shape));
        const std::int64_t w = x.shape[1], h = x.shape[2], d = x.shape[3];
        const auto& plan = plan_for(w, h, d);
        const ComplexTensorT<T> zt = truncate_modes(fft3(x), plan.used);
        const std::int64_t n_slots = plan.sx * plan.sy * plan.sz;
        const std::int64_t block = modes_.kx * modes_.ky * modes_.kz;

        ComplexTensorT<T> yt({cout_, plan.sx, plan.sy, plan.sz});
        const T* wre = weight_re_->value.data.data();
        const T* wim = weight_im_->value.data.data();
        for (std::int64_t s = 0; s < n_slots; ++s) {
            const std::int64_t ox = plan.oct[static_cast<std::size_t>(s)];
            const T sign = plan.neg[static_cast<std::size_t>(s)] ? T(-1) : T(1);
            for (std::int64_t co = 0; co < cout_; ++co) {
                std::complex<T> acc(0, 0);
                for (std::int64_t ci = 0; ci < cin_; ++ci) {
                    const std::int64_t wi = (co * cin_ + ci) * block + ox;
                    const std::complex<T> a(wre[wi], sign * wim[wi]);
                    acc += a * zt[ci * n_slots + s];
                }
                yt[co * n_slots + s] = acc;
            }
        }
        const std::int64_t dh = d / 2 + 1;
        const Shape full{cout_, w, h, dh};
        const std::span<const std::int64_t> spatial(x.shape.data() + 1, 3);
        TensorT<T> out = ifft3(pad_modes(yt, plan.used, full), spatial);
        if (cache) {
            cache->input_spectrum = zt;
            cache->spatial = {w, h, d};
        }
        return out;
    }

    TensorT<T> backward(const TensorT<T>& grad_out, const SpectralConv3dCache<T>& cache) {
        if (cache.spatial.size() != 3) throw ContractViolation("spectral_conv3d backward with a stale cache");
        const std::int64_t w = cache.spatial[0], h = cache.spatial[1], d = cache.spatial[2];
        if (grad_out.shape != Shape{cout_, w, h, d})
            throw ShapeMismatch("spectral_conv3d grad shape mismatch");
        const auto& plan = plan_for(w, h, d);
        const ComplexTensorT<T>& zt = cache.input_spectrum;
        const std::int64_t n_slots = plan.sx * plan.sy * plan.sz;
        if (zt.size() != cin_ * n_slots) throw ContractViolation("spectral_conv3d cache shape mismatch");
        const std::int64_t block = modes_.kx * modes_.ky * modes_.kz;

        const ComplexTensorT<T> gt = truncate_modes(fft3(grad_out), plan.used);
        const T* wre = weight_re_->value.data.data();
        const T* wim = weight_im_->value.data.data();
        T* dre = weight_re_->grad.data.data();
        T* dim = weight_im_->grad.data.data();
        const T inv_n = T(1) / static_cast<T>(w * h * d);

        ComplexTensorT<T> gzt({cin_, plan.sx, plan.sy, plan.sz});
        for (std::int64_t s = 0; s < n_slots; ++s) {
            const std::int64_t ox = plan.oct[static_cast<std::size_t>(s)];
            const T sign = plan.neg[static_cast<std::size_t>(s)] ? T(-1) : T(1);
            const T gscale = static_cast<T>(plan.mult[static_cast<std::size_t>(s)]) * inv_n;
            for (std::int64_t co = 0; co < cout_; ++co) {
                const std::complex<T> g = gt[co * n_slots + s];
                const std::complex<T> gs = g * gscale;
                for (std::int64_t ci = 0; ci < cin_; ++ci) {
                    const std::int64_t wi = (co * cin_ + ci) * block + ox;
                    // dL/d(applied weight) = gY * conj(z); a negative-pair slot
                    // applied conj(V), so its contribution is conjugated back.
                    const std::complex<T> c = gs * std::conj(zt[ci * n_slots + s]);
                    dre[wi] += c.real();
                    dim[wi] += sign * c.imag();
                    // grad wrt input spectrum uses the conjugate transpose mix.
                    const std::complex<T> a_conj(wre[wi], -sign * wim[wi]);
                    gzt[ci * n_slots + s] += a_conj * g;
                }
            }
        }
        const std::int64_t dh = d / 2 + 1;
        const Shape full{cin_, w, h, dh};
        return ifft3(pad_modes(gzt, plan.used, full), cache.spatial);
    }

private:
    // Per-grid slot plans, built lazily and read-only afterwards; boxed so
    // the layer stays movable despite the mutex.
    struct PlanCache {
        std::map<std::array<std::int64_t, 3>, detail::Spectral3dPlan> plans;
        std::mutex mutex;
    };

    const detail::Spectral3dPlan& plan_for(std::int64_t w, std::int64_t h, std::int64_t d) const {
        const std::array<std::int64_t, 3> key{w, h, d};
        std::lock_guard<std::mutex> lock(plan_cache_->mutex);
        auto it = plan_cache_->plans.find(key);
        if (it == plan_cache_->plans.end())
            it = plan_cache_->plans.emplace(key, detail::make_spectral3d_plan(modes_, w, h, d)).first;
        return it->second;
    }

    Param<T>* weight_re_ = nullptr;
    Param<T>* weight_im_ = nullptr;
    std::int64_t cin_ = 0;
    std::int64_t cout_ = 0;
    ModeSpec modes_;
    std::shared_ptr<PlanCache> plan_cache_ = std::make_shared<PlanCache>();
};

// ---------------------------------------------------------------------------
// Factorized spectral convolution: one 1D spectral transform per spatial
// axis, each with weights [C, C, m_j] on the nonnegative frequencies (the
// negative-frequency partner of mode f applies conj(weight[f])), branches
// summed in the spatial domain.

template <typename T>
struct FactorizedSpectralCache {
    TensorT<T> input;
};

template <typename T>
class FactorizedSpectralConv {
public:
    FactorizedSpectralConv() = default;
    FactorizedSpectralConv(ParamStore<T>& store, const std::string& prefix, std::int64_t channels,
                           std::array<std::int64_t, 3> modes)
        : c_(channels), modes_(modes) {
        static const char* axis_names[3] = {"x", "y", "z"};
        for (int j = 0; j < 3; ++j) {
            const Shape ws{channels, channels, modes[static_cast<std::size_t>(j)]};
            weight_re_[j] = &store.add(prefix + ".weight_" + axis_names[j] + "_re", ws);
            weight_im_[j] = &store.add(prefix + ".weight_" + axis_names[j] + "_im", ws);
        }
    }

    void init(Rng& rng) {
        const double s = 1.0 / static_cast<double>(c_ * c_);
        for (int j = 0; j < 3; ++j)
            for (std::int64_t i = 0; i < weight_re_[j]->value.size(); ++i) {
                weight_re_[j]->value[i] = static_cast<T>(rng.uniform(-s, s));
                weight_im_[j]->value[i] = static_cast<T>(rng.uniform(-s, s));
            }
    }

    std::array<std::int64_t, 3> modes() const { return modes_; }

    TensorT<T> forward(const TensorT<T>& x, FactorizedSpectralCache<T>* cache) const {
        if (x.rank() != 4 || x.shape[0] != c_)
            throw ShapeMismatch("factorized_spectral_conv input shape " + shape_str(x.shape));
        TensorT<T> out(Shape{c_, x.shape[1], x.shape[2], x.shape[3]});
        for (std::int64_t axis = 0; axis < 3; ++axis) {
            const ComplexTensorT<T> z = fft1(x, axis);
            ComplexTensorT<T> y(z.shape);
            mix_axis(z, axis, /*conj_transpose=*/false, y);
            const TensorT<T> branch = ifft1(y, axis);
            for (std::int64_t i = 0; i < out.size(); ++i) out[i] += branch[i];
        }
        if (cache) cache->input = x;
        return out;
    }

    TensorT<T> backward(const TensorT<T>& grad_out, const FactorizedSpectralCache<T>& cache) {
        const TensorT<T>& x = cache.input;
        if (x.size() == 0) throw ContractViolation("factorized_spectral_conv backward with a stale cache");
        if (grad_out.shape != x.shape) throw ShapeMismatch("factorized_spectral_conv grad shape mismatch");
        TensorT<T> grad_in(x.shape);
        for (std::int64_t axis = 0; axis < 3; ++axis) {
            const ComplexTensorT<T> g = fft1(grad_out, axis);
            const ComplexTensorT<T> z = fft1(x, axis);
            accumulate_weight_grads(g, z, axis);
            ComplexTensorT<T> gz(g.shape);
            mix_axis(g, axis, /*conj_transpose=*/true, gz);
            const TensorT<T> branch = ifft1(gz, axis);
            for (std::int64_t i = 0; i < grad_in.size(); ++i) grad_in[i] += branch[i];
        }
        return grad_in;
    }

private:
    struct AxisPlan {
        std::int64_t extent, stride, channel_stride;
        std::vector<std::int64_t> line_bases; // spatial offsets with axis index 0
        AxisModeMap map;
    };

    AxisPlan axis_plan(std::span<const std::int64_t> shape, std::int64_t axis) const {
        AxisPlan p;
        const std::int64_t w = shape[1], h = shape[2], d = shape[3];
        const std::int64_t strides[3] = {h * d, d, 1};
        const std::int64_t extents[3] = {w, h, d};
        p.extent = extents[axis];
        p.stride = strides[axis];
        p.channel_stride = w * h * d;
        const std::int64_t m_used =
            std::min(modes_[static_cast<std::size_t>(axis)], k_max(p.extent));
        if (m_used < modes_[static_cast<std::size_t>(axis)] && !warned_[static_cast<std::size_t>(axis)]) {
            warn_clamped_modes("factorized axis", modes_[static_cast<std::size_t>(axis)], k_max(p.extent));
            warned_[static_cast<std::size_t>(axis)] = true;
        }
        p.map = make_axis_map(p.extent, m_used, false);
        for (std::int64_t a = 0; a < extents[(axis + 1) % 3]; ++a)
            for (std::int64_t b = 0; b < extents[(axis + 2) % 3]; ++b)
                p.line_bases.push_back(a * strides[(axis + 1) % 3] + b * strides[(axis + 2) % 3]);
        return p;
    }

    // y[co, bin] = sum_ci A[co,ci] z[ci, bin] per retained bin of each line;
    // with conj_transpose the adjoint mix A^H is applied instead.
    void mix_axis(const ComplexTensorT<T>& z, std::int64_t axis, bool conj_transpose,
                  ComplexTensorT<T>& y) const {
        const AxisPlan plan = axis_plan(z.shape, axis);
        const T* wre = weight_re_[axis]->value.data.data();
        const T* wim = weight_im_[axis]->value.data.data();
        std::vector<std::complex<T>> zin(static_cast<std::size_t>(c_));
        for (std::size_t s = 0; s < plan.map.src.size(); ++s) {
            const std::int64_t bin_off = plan.map.src[s] * plan.stride;
            const std::int64_t f = plan.map.freq[s];
            const std::int64_t widx = std::abs(f);
            const T sign = (f < 0) ? T(-1) : T(1);
            for (const std::int64_t base : plan.line_bases) {
                for (std::int64_t ci = 0; ci < c_; ++ci)
                    zin[static_cast<std::size_t>(ci)] = z[ci * plan.channel_stride + base + bin_off];
                for (std::int64_t co = 0; co < c_; ++co) {
                    std::complex<T> acc(0, 0);
                    for (std::int64_t ci = 0; ci < c_; ++ci) {
                        const std::int64_t wi =
                            conj_transpose ? (ci * c_ + co) * modes_[static_cast<std::size_t>(axis)] + widx
                                           : (co * c_ + ci) * modes_[static_cast<std::size_t>(axis)] + widx;
                        const T im = conj_transpose ? -sign * wim[wi] : sign * wim[wi];
                        acc += std::complex<T>(wre[wi], im) * zin[static_cast<std::size_t>(ci)];
                    }
                    y[co * plan.channel_stride + base + bin_off] = acc;
                }
            }
        }
    }

    // dTheta[f] += (1/N) gY(bin) (x) conj(z(bin)), conjugated for the
    // negative-frequency partner bins.
    void accumulate_weight_grads(const ComplexTensorT<T>& g, const ComplexTensorT<T>& z,
                                 std::int64_t axis) {
        const AxisPlan plan = axis_plan(z.shape, axis);
        T* dre = weight_re_[axis]->grad.data.data();
        T* dim = weight_im_[axis]->grad.data.data();
        const T inv_n = T(1) / static_cast<T>(plan.extent);
        for (std::size_t s = 0; s < plan.map.src.size(); ++s) {
            const std::int64_t bin_off = plan.map.src[s] * plan.stride;
            const std::int64_t f = plan.map.freq[s];
            const std::int64_t widx = std::abs(f);
            const T sign = (f < 0) ? T(-1) : T(1);
            for (const std::int64_t base : plan.line_bases) {
                for (std::int64_t co = 0; co < c_; ++co) {
                    const std::complex<T> gs = g[co * plan.channel_stride + base + bin_off] * inv_n;
                    for (std::int64_t ci = 0; ci < c_; ++ci) {
                        const std::complex<T> c =
                            gs * std::conj(z[ci * plan.channel_stride + base + bin_off]);
                        const std::int64_t wi =
                            (co * c_ + ci) * modes_[static_cast<std::size_t>(axis)] + widx;
                        dre[wi] += c.real();
                        dim[wi] += sign * c.imag();
                    }
                }
            }
        }
    }

    Param<T>* weight_re_[3] = {nullptr, nullptr, nullptr};
    Param<T>* weight_im_[3] = {nullptr, nullptr, nullptr};
    std::int64_t c_ = 0;
    std::array<std::int64_t, 3> modes_{1, 1, 1};
    mutable std::array<bool, 3> warned_{false, false, false};
};

// ---------------------------------------------------------------------------
// One factorized spectral layer with pointwise mixing and a residual path:
// v + gelu(W2 gelu(W1 spectral_sum(v))).

template <typename T>
struct FfnoLayerCache {
    FactorizedSpectralCache<T> spectral;
    PointwiseCache<T> w1, w2;
    TensorT<T> pre1, pre2; // pre-activation values for the two GELUs
};

template <typename T>
class FfnoLayer {
public:
    FfnoLayer() = default;
    FfnoLayer(ParamStore<T>& store, const std::string& prefix, std::int64_t d_model,
              std::array<std::int64_t, 3> modes)
        : spectral_(store, prefix + ".spectral", d_model, modes),
          w1_(store, prefix + ".mix1", d_model, d_model),
          w2_(store, prefix + ".mix2", d_model, d_model) {}

    void init(Rng& rng) {
        spectral_.init(rng);
        w1_.init(rng);
        w2_.init(rng);
    }

    TensorT<T> forward(const TensorT<T>& v, FfnoLayerCache<T>* cache) const {
        const TensorT<T> s = spectral_.forward(v, cache ? &cache->spectral : nullptr);
        TensorT<T> pre1 = w1_.forward(s, cache ? &cache->w1 : nullptr);
        const TensorT<T> g1 = gelu(pre1);
        TensorT<T> pre2 = w2_.forward(g1, cache ? &cache->w2 : nullptr);
        const TensorT<T> g2 = gelu(pre2);
        if (cache) {
            cache->pre1 = std::move(pre1);
            cache->pre2 = std::move(pre2);
        }
        TensorT<T> out(v.shape);
        for (std::int64_t i = 0; i < v.size(); ++i)
            out[i] = v[i] + (cache ? gelu_scalar(cache->pre2[i]) : g2[i]);
        return out;
    }

    TensorT<T> backward(const TensorT<T>& grad_out, FfnoLayerCache<T>& cache) {
        const TensorT<T> g_pre2 = gelu_backward(grad_out, cache.pre2);
        const TensorT<T> g_g1 = w2_.backward(g_pre2, cache.w2);
        const TensorT<T> g_pre1 = gelu_backward(g_g1, cache.pre1);
        const TensorT<T> g_s = w1_.backward(g_pre1, cache.w1);
        const TensorT<T> g_v = spectral_.backward(g_s, cache.spectral);
        TensorT<T> grad_in(grad_out.shape);
        for (std::int64_t i = 0; i < grad_in.size(); ++i) grad_in[i] = grad_out[i] + g_v[i];
        return grad_in;
    }

private:
    FactorizedSpectralConv<T> spectral_;
    PointwiseLinear<T> w1_;
    PointwiseLinear<T> w2_;
};

} // namespace noforge
