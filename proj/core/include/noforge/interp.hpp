#pragma once

#include <cmath>
#include <cstdint>

#include "noforge/tensor.hpp"

namespace noforge {

namespace detail {

struct AxisSample {
    std::int64_t i0, i1;
    double w1; // weight of i1; i0 gets 1 - w1
};

// Align-corners mapping: output index i samples input coordinate
// i*(n_in-1)/(n_out-1). Exact on affine fields, endpoints included.
inline AxisSample axis_sample(std::int64_t i, std::int64_t n_out, std::int64_t n_in) {
    if (n_out == 1 || n_in == 1) return {0, 0, 0.0};
    const double src = static_cast<double>(i) * static_cast<double>(n_in - 1) /
                       static_cast<double>(n_out - 1);
    std::int64_t i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > n_in - 2) i0 = n_in - 2;
    const double w1 = src - static_cast<double>(i0);
    return {i0, i0 + 1, w1};
}

} // namespace detail

// Trilinear resize of a [C, W, H, D] field to a new spatial shape.
template <typename T>
TensorT<T> resize_trilinear(const TensorT<T>& x, std::span<const std::int64_t> out_spatial) {
    if (x.rank() != 4) throw InvalidShape("resize_trilinear expects [C,W,H,D]");
    if (out_spatial.size() != 3) throw InvalidShape("resize_trilinear needs 3 output extents");
    const std::int64_t c = x.shape[0], w = x.shape[1], h = x.shape[2], d = x.shape[3];
    const std::int64_t ow = out_spatial[0], oh = out_spatial[1], od = out_spatial[2];
    TensorT<T> out({c, ow, oh, od});
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t ix = 0; ix < ow; ++ix) {
            const auto ax = detail::axis_sample(ix, ow, w);
            for (std::int64_t iy = 0; iy < oh; ++iy) {
                const auto ay = detail::axis_sample(iy, oh, h);
                for (std::int64_t iz = 0; iz < od; ++iz) {
                    const auto az = detail::axis_sample(iz, od, d);
                    double acc = 0.0;
                    for (int bx = 0; bx < 2; ++bx)
                        for (int by = 0; by < 2; ++by)
                            for (int bz = 0; bz < 2; ++bz) {
                                const double wgt = (bx ? ax.w1 : 1.0 - ax.w1) *
                                                   (by ? ay.w1 : 1.0 - ay.w1) *
                                                   (bz ? az.w1 : 1.0 - az.w1);
                                if (wgt == 0.0) continue;
                                acc += wgt * x[((ci * w + (bx ? ax.i1 : ax.i0)) * h +
                                                (by ? ay.i1 : ay.i0)) * d + (bz ? az.i1 : az.i0)];
                            }
                    out[((ci * ow + ix) * oh + iy) * od + iz] = static_cast<T>(acc);
                }
            }
        }
    return out;
}

// Adjoint of resize_trilinear: scatter gradients back through the same
// interpolation weights.
template <typename T>
TensorT<T> resize_trilinear_adjoint(const TensorT<T>& grad_out,
                                    std::span<const std::int64_t> in_spatial) {
    if (grad_out.rank() != 4) throw InvalidShape("resize adjoint expects [C,W,H,D]");
    const std::int64_t c = grad_out.shape[0], ow = grad_out.shape[1], oh = grad_out.shape[2],
                       od = grad_out.shape[3];
    const std::int64_t w = in_spatial[0], h = in_spatial[1], d = in_spatial[2];
    TensorT<T> grad_in({c, w, h, d});
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t ix = 0; ix < ow; ++ix) {
            const auto ax = detail::axis_sample(ix, ow, w);
            for (std::int64_t iy = 0; iy < oh; ++iy) {
                const auto ay = detail::axis_sample(iy, oh, h);
                for (std::int64_t iz = 0; iz < od; ++iz) {
                    const auto az = detail::axis_sample(iz, od, d);
                    const double g = grad_out[((ci * ow + ix) * oh + iy) * od + iz];
                    for (int bx = 0; bx < 2; ++bx)
                        for (int by = 0; by < 2; ++by)
                            for (int bz = 0; bz < 2; ++bz) {
                                const double wgt = (bx ? ax.w1 : 1.0 - ax.w1) *
                                                   (by ? ay.w1 : 1.0 - ay.w1) *
                                                   (bz ? az.w1 : 1.0 - az.w1);
                                if (wgt == 0.0) continue;
                                grad_in[((ci * w + (bx ? ax.i1 : ax.i0)) * h +
                                         (by ? ay.i1 : ay.i0)) * d + (bz ? az.i1 : az.i0)] +=
                                    static_cast<T>(wgt * g);
                            }
                }
            }
        }
    return grad_in;
}

} // namespace noforge
