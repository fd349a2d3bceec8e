#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "noforge/error.hpp"

namespace noforge {

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(std::span<const std::int64_t> s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::int64_t shape_numel(std::span<const std::int64_t> shape) {
    std::int64_t n = 1;
    for (const auto e : shape) {
        if (e < 1) throw InvalidShape("extent must be >= 1, got shape " + shape_str(shape));
        n *= e;
    }
    return n;
}

// Dense N-dimensional real array, C-order (row-major, last axis fastest).
// Contiguous everywhere; no strided views cross module boundaries.
template <typename T>
struct TensorT {
    Shape shape;
    std::vector<T> data;

    TensorT() = default;
    explicit TensorT(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), T(0)) {}
    TensorT(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
            throw InvalidShape("data length does not match shape " + shape_str(shape));
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }
    std::int64_t extent(std::int64_t axis) const { return shape[static_cast<std::size_t>(axis)]; }

    T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    // Bounds-checked multi-index access. An out-of-range index is a defect in
    // the caller, reported loudly instead of wrapping around.
    std::int64_t flat_index(std::initializer_list<std::int64_t> idx) const {
        if (static_cast<std::int64_t>(idx.size()) != rank())
            throw InvalidShape("index rank mismatch for shape " + shape_str(shape));
        std::int64_t flat = 0;
        std::int64_t axis = 0;
        for (const auto i : idx) {
            const std::int64_t e = shape[static_cast<std::size_t>(axis)];
            if (i < 0 || i >= e)
                throw InvalidShape("index " + std::to_string(i) + " out of range for axis " +
                                   std::to_string(axis) + " of shape " + shape_str(shape));
            flat = flat * e + i;
            ++axis;
        }
        return flat;
    }
    T& at(std::initializer_list<std::int64_t> idx) { return data[static_cast<std::size_t>(flat_index(idx))]; }
    const T& at(std::initializer_list<std::int64_t> idx) const {
        return data[static_cast<std::size_t>(flat_index(idx))];
    }

    bool same_shape(const TensorT& other) const { return shape == other.shape; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

using Tensor = TensorT<float>;

// Complex-valued frequency-domain tensor. Stored interleaved; serialization
// (where it happens at all) is split-plane via separate re/im parameters.
template <typename T>
struct ComplexTensorT {
    Shape shape;
    std::vector<std::complex<T>> data;

    ComplexTensorT() = default;
    explicit ComplexTensorT(Shape s)
        : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), std::complex<T>(0, 0)) {}

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }
    std::int64_t extent(std::int64_t axis) const { return shape[static_cast<std::size_t>(axis)]; }

    std::complex<T>& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const std::complex<T>& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }
};

using ComplexTensor = ComplexTensorT<float>;

// ---------------------------------------------------------------------------
// Constructors

template <typename T = float>
TensorT<T> zeros(Shape shape) {
    return TensorT<T>(std::move(shape));
}

template <typename T = float>
TensorT<T> ones(Shape shape) {
    TensorT<T> t(std::move(shape));
    t.fill(T(1));
    return t;
}

template <typename T = float>
TensorT<T> full(Shape shape, T value) {
    TensorT<T> t(std::move(shape));
    t.fill(value);
    return t;
}

// n evenly spaced values from lo to hi inclusive. The endpoints are exact.
template <typename T = float>
TensorT<T> linspace_grid(std::int64_t n, T lo, T hi) {
    if (n < 2) throw InvalidShape("linspace_grid requires n >= 2, got " + std::to_string(n));
    TensorT<T> t({n});
    const T span = hi - lo;
    for (std::int64_t i = 0; i < n; ++i)
        t[i] = lo + span * (static_cast<T>(i) / static_cast<T>(n - 1));
    t[n - 1] = hi;
    return t;
}

// ---------------------------------------------------------------------------
// Channel-axis assembly

// Concatenate along axis 0 (the channel axis). All inputs must share the
// trailing shape.
template <typename T>
TensorT<T> concat_channels(std::span<const TensorT<T>> ts) {
    if (ts.empty()) throw InvalidShape("concat_channels of zero tensors");
    const auto& first = ts[0];
    if (first.rank() < 1) throw InvalidShape("concat_channels needs a channel axis");
    std::int64_t channels = 0;
    for (const auto& t : ts) {
        if (t.rank() != first.rank() ||
            !std::equal(t.shape.begin() + 1, t.shape.end(), first.shape.begin() + 1))
            throw ShapeMismatch("concat_channels trailing shape mismatch: " + shape_str(t.shape) +
                                " vs " + shape_str(first.shape));
        channels += t.shape[0];
    }
    Shape out_shape = first.shape;
    out_shape[0] = channels;
    TensorT<T> out(std::move(out_shape));
    std::int64_t offset = 0;
    for (const auto& t : ts) {
        std::copy(t.data.begin(), t.data.end(), out.data.begin() + offset);
        offset += t.size();
    }
    return out;
}

template <typename T>
TensorT<T> concat_channels(std::initializer_list<TensorT<T>> ts) {
    std::vector<TensorT<T>> v(ts);
    return concat_channels(std::span<const TensorT<T>>(v));
}

// Slice channels [c0, c1) out of a tensor with a leading channel axis.
template <typename T>
TensorT<T> channel_slice(const TensorT<T>& t, std::int64_t c0, std::int64_t c1) {
    if (t.rank() < 1 || c0 < 0 || c1 > t.shape[0] || c0 >= c1)
        throw InvalidShape("channel_slice range invalid for shape " + shape_str(t.shape));
    Shape out_shape = t.shape;
    out_shape[0] = c1 - c0;
    TensorT<T> out(std::move(out_shape));
    const std::int64_t per_channel = t.size() / t.shape[0];
    std::copy(t.data.begin() + c0 * per_channel, t.data.begin() + c1 * per_channel, out.data.begin());
    return out;
}

// Scalar value projected onto a [1, W, H, D] field.
template <typename T>
TensorT<T> broadcast_scalar_to_grid(T value, std::span<const std::int64_t> spatial_shape) {
    if (spatial_shape.size() != 3)
        throw InvalidShape("broadcast_scalar_to_grid expects 3 spatial extents, got " +
                           shape_str(spatial_shape));
    Shape s{1, spatial_shape[0], spatial_shape[1], spatial_shape[2]};
    return full<T>(std::move(s), value);
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

namespace detail {
template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeMismatch(std::string(what) + ": " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}
} // namespace detail

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "add");
    TensorT<T> out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "sub");
    TensorT<T> out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "mul");
    TensorT<T> out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T c) {
    TensorT<T> out(a.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] * c;
    return out;
}

// In-place accumulate: a += c * b.
template <typename T>
void axpy(TensorT<T>& a, T c, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "axpy");
    for (std::int64_t i = 0; i < a.size(); ++i) a[i] += c * b[i];
}

// ---------------------------------------------------------------------------
// Reductions. Masked variants ignore elements where mask == 0; the mask must
// match the operand shape exactly.

template <typename T>
double reduce_sum(const TensorT<T>& a, const TensorT<T>* mask = nullptr) {
    if (mask) detail::require_same_shape(a, *mask, "reduce mask");
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i)
        if (!mask || (*mask)[i] != T(0)) acc += static_cast<double>(a[i]);
    return acc;
}

template <typename T>
double reduce_mean(const TensorT<T>& a, const TensorT<T>* mask = nullptr) {
    if (mask) detail::require_same_shape(a, *mask, "reduce mask");
    double acc = 0.0;
    std::int64_t n = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        if (!mask || (*mask)[i] != T(0)) {
            acc += static_cast<double>(a[i]);
            ++n;
        }
    }
    if (n == 0) throw EmptyMask("mean over an empty mask is undefined");
    return acc / static_cast<double>(n);
}

template <typename T>
double reduce_max(const TensorT<T>& a, const TensorT<T>* mask = nullptr) {
    if (mask) detail::require_same_shape(a, *mask, "reduce mask");
    bool seen = false;
    double best = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        if (mask && (*mask)[i] == T(0)) continue;
        const double v = static_cast<double>(a[i]);
        if (!seen || v > best) best = v;
        seen = true;
    }
    if (!seen) throw EmptyMask("max over an empty mask is undefined");
    return best;
}

template <typename T>
double reduce_min(const TensorT<T>& a, const TensorT<T>* mask = nullptr) {
    if (mask) detail::require_same_shape(a, *mask, "reduce mask");
    bool seen = false;
    double best = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        if (mask && (*mask)[i] == T(0)) continue;
        const double v = static_cast<double>(a[i]);
        if (!seen || v < best) best = v;
        seen = true;
    }
    if (!seen) throw EmptyMask("min over an empty mask is undefined");
    return best;
}

} // namespace noforge
