#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <vector>

#include "noforge/error.hpp"
#include "noforge/tensor.hpp"

namespace noforge {

// Retained mode counts per spatial axis of a 3D spectral convolution.
struct ModeSpec {
    std::int64_t kx = 1;
    std::int64_t ky = 1;
    std::int64_t kz = 1;

    bool operator==(const ModeSpec&) const = default;
};

// Maximum number of independent modes along an axis of extent n.
inline std::int64_t k_max(std::int64_t n) { return n / 2 + 1; }

inline void warn_clamped_modes(const char* what, std::int64_t requested, std::int64_t kmax) {
    std::fprintf(stderr, "noforge: warning: %s mode count %lld exceeds k_max %lld, clamping\n", what,
                 static_cast<long long>(requested), static_cast<long long>(kmax));
}

// Clamp a mode request against the per-axis k_max of a grid, warning once per
// call site when a clamp happens. Requests below 1 are invalid.
inline ModeSpec clamp_modes(ModeSpec m, std::int64_t w, std::int64_t h, std::int64_t d) {
    if (m.kx < 1 || m.ky < 1 || m.kz < 1) throw InvalidConfig("mode counts must be >= 1");
    ModeSpec out = m;
    if (out.kx > k_max(w)) {
        warn_clamped_modes("x", out.kx, k_max(w));
        out.kx = k_max(w);
    }
    if (out.ky > k_max(h)) {
        warn_clamped_modes("y", out.ky, k_max(h));
        out.ky = k_max(h);
    }
    if (out.kz > k_max(d)) {
        warn_clamped_modes("z", out.kz, k_max(d));
        out.kz = k_max(d);
    }
    return out;
}

// ---------------------------------------------------------------------------
// 1D complex DFT plan: mixed-radix Cooley-Tukey over the prime factorization,
// with a naive O(p^2) leaf for prime factors. A length that is itself prime
// falls back to the exact O(n^2) DFT. Twiddle tables are read-only after
// construction, so one plan may serve concurrent calls.

template <typename T>
class DftPlan {
public:
    explicit DftPlan(std::int64_t n) : n_(n) {
        if (n < 1) throw InvalidShape("DFT length must be >= 1");
        twiddle_fwd_.resize(static_cast<std::size_t>(n));
        twiddle_inv_.resize(static_cast<std::size_t>(n));
        for (std::int64_t j = 0; j < n; ++j) {
            const double angle = -2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n);
            twiddle_fwd_[static_cast<std::size_t>(j)] =
                std::complex<T>(static_cast<T>(std::cos(angle)), static_cast<T>(std::sin(angle)));
            twiddle_inv_[static_cast<std::size_t>(j)] =
                std::complex<T>(static_cast<T>(std::cos(angle)), static_cast<T>(-std::sin(angle)));
        }
        std::int64_t rem = n;
        for (std::int64_t p = 2; p * p <= rem; ++p) {
            while (rem % p == 0) {
                factors_.push_back(p);
                rem /= p;
            }
        }
        if (rem > 1) factors_.push_back(rem);
        // Workspace per transform: n at the top level plus the recursive tail.
        std::int64_t ws = 0, len = n;
        for (std::size_t i = 0; i + 1 < factors_.size(); ++i) {
            ws += len;
            len /= factors_[i];
        }
        workspace_ = ws;
    }

    std::int64_t length() const { return n_; }
    std::int64_t workspace_size() const { return workspace_; }

    // out[k] = sum_j in[j*stride] * e^{-2*pi*i*j*k/n}   (unnormalized forward)
    void forward(const std::complex<T>* in, std::int64_t stride, std::complex<T>* out,
                 std::complex<T>* workspace) const {
        transform(in, stride, out, n_, 1, 0, twiddle_fwd_.data(), workspace);
    }

    // out[k] = sum_j in[j*stride] * e^{+2*pi*i*j*k/n}   (unnormalized inverse)
    void inverse(const std::complex<T>* in, std::int64_t stride, std::complex<T>* out,
                 std::complex<T>* workspace) const {
        transform(in, stride, out, n_, 1, 0, twiddle_inv_.data(), workspace);
    }

private:
    void transform(const std::complex<T>* in, std::int64_t stride, std::complex<T>* out,
                   std::int64_t n, std::int64_t tw_step, std::size_t factor_idx,
                   const std::complex<T>* tw, std::complex<T>* ws) const {
        if (n == 1) {
            out[0] = in[0];
            return;
        }
        const std::int64_t p = factors_[factor_idx];
        const std::int64_t m = n / p;
        if (m == 1) {
            // Prime leaf: exact naive DFT.
            for (std::int64_t k = 0; k < n; ++k) {
                std::complex<T> acc(0, 0);
                for (std::int64_t j = 0; j < n; ++j)
                    acc += tw[static_cast<std::size_t>((tw_step * j * k) % n_)] * in[j * stride];
                out[k] = acc;
            }
            return;
        }
        // Decimation in time: p interleaved subsequences of length m.
        std::complex<T>* const sub = ws;
        std::complex<T>* const child_ws = ws + n;
        for (std::int64_t s = 0; s < p; ++s)
            transform(in + s * stride, stride * p, sub + s * m, m, tw_step * p, factor_idx + 1, tw, child_ws);
        for (std::int64_t r = 0; r < m; ++r) {
            for (std::int64_t q = 0; q < p; ++q) {
                const std::int64_t k = q * m + r;
                std::complex<T> acc(0, 0);
                for (std::int64_t s = 0; s < p; ++s)
                    acc += tw[static_cast<std::size_t>((tw_step * s * k) % n_)] * sub[s * m + r];
                out[k] = acc;
            }
        }
    }

    std::int64_t n_ = 0;
    std::int64_t workspace_ = 0;
    std::vector<std::int64_t> factors_;
    std::vector<std::complex<T>> twiddle_fwd_;
    std::vector<std::complex<T>> twiddle_inv_;
};

// Process-wide plan cache keyed by length; plans are immutable once built.
template <typename T>
const DftPlan<T>& dft_plan(std::int64_t n) {
    static std::map<std::int64_t, std::unique_ptr<DftPlan<T>>> cache;
    static std::mutex mutex;
    std::lock_guard<std::mutex> lock(mutex);
    auto it = cache.find(n);
    if (it == cache.end()) it = cache.emplace(n, std::make_unique<DftPlan<T>>(n)).first;
    return *it->second;
}

namespace detail {

// Scratch buffers for one 1D transform of length n.
template <typename T>
struct LineBuffers {
    std::vector<std::complex<T>> in, out, ws;
    explicit LineBuffers(const DftPlan<T>& plan)
        : in(static_cast<std::size_t>(plan.length())),
          out(static_cast<std::size_t>(plan.length())),
          ws(static_cast<std::size_t>(std::max<std::int64_t>(1, plan.workspace_size()))) {}
};

// Invoke fn(base_offset, stride) for every 1D line along `axis` of a rank-4
// [C, W, H, D]-style tensor shape.
inline void for_each_line(std::span<const std::int64_t> shape, std::int64_t axis, auto&& fn) {
    std::int64_t strides[4];
    std::int64_t s = 1;
    for (std::int64_t a = 3; a >= 0; --a) {
        strides[a] = s;
        s *= shape[static_cast<std::size_t>(a)];
    }
    const std::int64_t stride = strides[axis];
    std::int64_t outer[4];
    for (std::int64_t a = 0; a < 4; ++a) outer[a] = (a == axis) ? 1 : shape[static_cast<std::size_t>(a)];
    for (std::int64_t c = 0; c < outer[0]; ++c)
        for (std::int64_t x = 0; x < outer[1]; ++x)
            for (std::int64_t y = 0; y < outer[2]; ++y)
                for (std::int64_t z = 0; z < outer[3]; ++z)
                    fn(c * strides[0] + x * strides[1] + y * strides[2] + z * strides[3], stride);
}

} // namespace detail

// ---------------------------------------------------------------------------
// 3D real-to-complex transform over the spatial axes of a [C, W, H, D] field.
// The last axis is stored in half-spectrum form of length floor(D/2)+1; the
// forward is unnormalized and the inverse carries the 1/(W*H*D) factor.

template <typename T>
ComplexTensorT<T> fft3(const TensorT<T>& x) {
    if (x.rank() != 4) throw InvalidShape("fft3 expects [C,W,H,D], got " + shape_str(x.shape));
    const std::int64_t c = x.shape[0], w = x.shape[1], h = x.shape[2], d = x.shape[3];
    if (w < 2 || h < 2 || d < 2) throw InvalidShape("fft3 spatial extents must be >= 2");
    const std::int64_t dh = d / 2 + 1;
    ComplexTensorT<T> z({c, w, h, dh});

    // Axis D: real-to-complex, keep the nonredundant half.
    {
        const auto& plan = dft_plan<T>(d);
        detail::LineBuffers<T> buf(plan);
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t xi = 0; xi < w; ++xi)
                for (std::int64_t yi = 0; yi < h; ++yi) {
                    const std::int64_t base = ((ci * w + xi) * h + yi) * d;
                    for (std::int64_t zi = 0; zi < d; ++zi)
                        buf.in[static_cast<std::size_t>(zi)] = std::complex<T>(x[base + zi], T(0));
                    plan.forward(buf.in.data(), 1, buf.out.data(), buf.ws.data());
                    const std::int64_t zbase = ((ci * w + xi) * h + yi) * dh;
                    for (std::int64_t k = 0; k < dh; ++k) z[zbase + k] = buf.out[static_cast<std::size_t>(k)];
                }
    }
    // Axes H then W: complex-to-complex in place.
    for (const std::int64_t axis : {2LL, 1LL}) {
        const std::int64_t n = z.extent(axis);
        const auto& plan = dft_plan<T>(n);
        detail::LineBuffers<T> buf(plan);
        detail::for_each_line(z.shape, axis, [&](std::int64_t base, std::int64_t stride) {
            plan.forward(z.data.data() + base, stride, buf.out.data(), buf.ws.data());
            for (std::int64_t k = 0; k < n; ++k) z[base + k * stride] = buf.out[static_cast<std::size_t>(k)];
        });
    }
    return z;
}

// Inverse of fft3. The spatial shape must be declared because the half
// spectrum does not distinguish even from odd D.
template <typename T>
TensorT<T> ifft3(const ComplexTensorT<T>& z, std::span<const std::int64_t> spatial_shape) {
    if (z.rank() != 4) throw InvalidShape("ifft3 expects [C,W,H,Dh]");
    if (spatial_shape.size() != 3) throw InvalidShape("ifft3 spatial shape must have 3 extents");
    const std::int64_t c = z.shape[0], w = spatial_shape[0], h = spatial_shape[1], d = spatial_shape[2];
    const std::int64_t dh = d / 2 + 1;
    if (z.shape[1] != w || z.shape[2] != h || z.shape[3] != dh)
        throw ShapeMismatch("ifft3 spectrum shape " + shape_str(z.shape) +
                            " inconsistent with spatial shape " + shape_str(spatial_shape));

    ComplexTensorT<T> work = z;
    for (const std::int64_t axis : {1LL, 2LL}) {
        const std::int64_t n = work.extent(axis);
        const auto& plan = dft_plan<T>(n);
        detail::LineBuffers<T> buf(plan);
        detail::for_each_line(work.shape, axis, [&](std::int64_t base, std::int64_t stride) {
            plan.inverse(work.data.data() + base, stride, buf.out.data(), buf.ws.data());
            for (std::int64_t k = 0; k < n; ++k) work[base + k * stride] = buf.out[static_cast<std::size_t>(k)];
        });
    }
    // Axis D: rebuild the full spectrum by Hermitian symmetry, invert, keep
    // the real part, and apply the single 1/(W*H*D) factor.
    TensorT<T> out({c, w, h, d});
    const T norm = T(1) / static_cast<T>(w * h * d);
    const auto& plan = dft_plan<T>(d);
    detail::LineBuffers<T> buf(plan);
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t xi = 0; xi < w; ++xi)
            for (std::int64_t yi = 0; yi < h; ++yi) {
                const std::int64_t zbase = ((ci * w + xi) * h + yi) * dh;
                for (std::int64_t k = 0; k < dh; ++k) buf.in[static_cast<std::size_t>(k)] = work[zbase + k];
                for (std::int64_t k = dh; k < d; ++k)
                    buf.in[static_cast<std::size_t>(k)] = std::conj(work[zbase + (d - k)]);
                plan.inverse(buf.in.data(), 1, buf.out.data(), buf.ws.data());
                const std::int64_t obase = ((ci * w + xi) * h + yi) * d;
                for (std::int64_t zi = 0; zi < d; ++zi)
                    out[obase + zi] = buf.out[static_cast<std::size_t>(zi)].real() * norm;
            }
    return out;
}

// ---------------------------------------------------------------------------
// Single-axis transforms of a real [C, W, H, D] field. Full complex spectrum
// along the chosen spatial axis (0 = W, 1 = H, 2 = D); the inverse returns
// the real part.

template <typename T>
ComplexTensorT<T> fft1(const TensorT<T>& x, std::int64_t spatial_axis) {
    if (x.rank() != 4) throw InvalidShape("fft1 expects [C,W,H,D]");
    if (spatial_axis < 0 || spatial_axis > 2) throw InvalidShape("fft1 axis must be 0, 1, or 2");
    const std::int64_t axis = spatial_axis + 1;
    const std::int64_t n = x.shape[static_cast<std::size_t>(axis)];
    ComplexTensorT<T> z(x.shape);
    for (std::int64_t i = 0; i < x.size(); ++i) z[i] = std::complex<T>(x[i], T(0));
    const auto& plan = dft_plan<T>(n);
    detail::LineBuffers<T> buf(plan);
    detail::for_each_line(z.shape, axis, [&](std::int64_t base, std::int64_t stride) {
        plan.forward(z.data.data() + base, stride, buf.out.data(), buf.ws.data());
        for (std::int64_t k = 0; k < n; ++k) z[base + k * stride] = buf.out[static_cast<std::size_t>(k)];
    });
    return z;
}

template <typename T>
TensorT<T> ifft1(const ComplexTensorT<T>& z, std::int64_t spatial_axis) {
    if (z.rank() != 4) throw InvalidShape("ifft1 expects [C,W,H,D]");
    if (spatial_axis < 0 || spatial_axis > 2) throw InvalidShape("ifft1 axis must be 0, 1, or 2");
    const std::int64_t axis = spatial_axis + 1;
    const std::int64_t n = z.shape[static_cast<std::size_t>(axis)];
    TensorT<T> out(z.shape);
    const T norm = T(1) / static_cast<T>(n);
    const auto& plan = dft_plan<T>(n);
    detail::LineBuffers<T> buf(plan);
    detail::for_each_line(z.shape, axis, [&](std::int64_t base, std::int64_t stride) {
        plan.inverse(z.data.data() + base, stride, buf.out.data(), buf.ws.data());
        for (std::int64_t k = 0; k < n; ++k)
            out[base + k * stride] = buf.out[static_cast<std::size_t>(k)].real() * norm;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Mode truncation and zero-padding.
//
// On a full-spectrum axis of extent n, a request of k modes keeps the lowest
// k nonnegative frequencies and the highest k-1 negative frequencies (their
// conjugate pairs); the two ranges are deduplicated at full bandwidth. On the
// half-spectrum axis the first k entries are kept.

struct AxisModeMap {
    std::vector<std::int64_t> src;  // retained bin index along the axis
    std::vector<std::int64_t> freq; // signed frequency of the bin (Nyquist counted positive)
};

inline AxisModeMap make_axis_map(std::int64_t n, std::int64_t k, bool half_axis) {
    AxisModeMap map;
    if (half_axis) {
        for (std::int64_t s = 0; s < k; ++s) {
            map.src.push_back(s);
            map.freq.push_back(s);
        }
        return map;
    }
    const std::int64_t count = std::min(2 * k - 1, n);
    for (std::int64_t s = 0; s < count; ++s) {
        if (s < k) {
            map.src.push_back(s);
            map.freq.push_back(s);
        } else {
            const std::int64_t neg = count - s; // 1 .. k-1
            map.src.push_back(n - neg);
            map.freq.push_back(-neg);
        }
    }
    return map;
}

// Truncate a half-spectrum [C, W, H, Dh] tensor to the retained modes.
template <typename T>
ComplexTensorT<T> truncate_modes(const ComplexTensorT<T>& z, ModeSpec modes) {
    if (z.rank() != 4) throw InvalidShape("truncate_modes expects [C,W,H,Dh]");
    const std::int64_t c = z.shape[0], w = z.shape[1], h = z.shape[2], dh = z.shape[3];
    if (modes.kx > k_max(w) || modes.ky > k_max(h) || modes.kz > dh)
        throw InvalidConfig("truncate_modes request exceeds spectrum bounds (clamp first)");
    const AxisModeMap mx = make_axis_map(w, modes.kx, false);
    const AxisModeMap my = make_axis_map(h, modes.ky, false);
    const std::int64_t sx = static_cast<std::int64_t>(mx.src.size());
    const std::int64_t sy = static_cast<std::int64_t>(my.src.size());
    const std::int64_t sz = modes.kz;
    ComplexTensorT<T> out({c, sx, sy, sz});
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t ix = 0; ix < sx; ++ix)
            for (std::int64_t iy = 0; iy < sy; ++iy) {
                const std::int64_t src_base = ((ci * w + mx.src[static_cast<std::size_t>(ix)]) * h +
                                               my.src[static_cast<std::size_t>(iy)]) *
                                              dh;
                const std::int64_t dst_base = ((ci * sx + ix) * sy + iy) * sz;
                for (std::int64_t iz = 0; iz < sz; ++iz) out[dst_base + iz] = z[src_base + iz];
            }
    return out;
}

// Scatter retained modes back into a zeroed full-size half spectrum.
template <typename T>
ComplexTensorT<T> pad_modes(const ComplexTensorT<T>& zt, ModeSpec modes,
                            std::span<const std::int64_t> full_shape) {
    if (zt.rank() != 4) throw InvalidShape("pad_modes expects [C,sx,sy,sz]");
    if (full_shape.size() != 4) throw InvalidShape("pad_modes full shape must be [C,W,H,Dh]");
    const std::int64_t c = full_shape[0], w = full_shape[1], h = full_shape[2], dh = full_shape[3];
    const AxisModeMap mx = make_axis_map(w, modes.kx, false);
    const AxisModeMap my = make_axis_map(h, modes.ky, false);
    const std::int64_t sx = static_cast<std::int64_t>(mx.src.size());
    const std::int64_t sy = static_cast<std::int64_t>(my.src.size());
    const std::int64_t sz = modes.kz;
    if (zt.shape[0] != c || zt.shape[1] != sx || zt.shape[2] != sy || zt.shape[3] != sz)
        throw ShapeMismatch("pad_modes truncated shape inconsistent with mode spec");
    ComplexTensorT<T> out({c, w, h, dh});
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t ix = 0; ix < sx; ++ix)
            for (std::int64_t iy = 0; iy < sy; ++iy) {
                const std::int64_t dst_base = ((ci * w + mx.src[static_cast<std::size_t>(ix)]) * h +
                                               my.src[static_cast<std::size_t>(iy)]) *
                                              dh;
                const std::int64_t src_base = ((ci * sx + ix) * sy + iy) * sz;
                for (std::int64_t iz = 0; iz < sz; ++iz) out[dst_base + iz] = zt[src_base + iz];
            }
    return out;
}

// Multiplicity of a half-spectrum bin when summing |Z|^2 over the implied
// full spectrum: bins on the kz = 0 (and kz = D/2 for even D) planes appear
// once, every other stored bin stands for a conjugate pair.
inline std::int64_t hermitian_multiplicity(std::int64_t kz, std::int64_t d) {
    if (kz == 0) return 1;
    if (d % 2 == 0 && kz == d / 2) return 1;
    return 2;
}

} // namespace noforge
