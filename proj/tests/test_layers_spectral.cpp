#include <doctest.h>

#include <cmath>
#include <complex>
#include <functional>

#include <noforge/rng.hpp>
#include <noforge/spectral_conv.hpp>

#include "gradcheck.hpp"
#include "oracle_dft.hpp"

using namespace noforge;

namespace {

TensorT<double> random_tensor(Shape shape, Rng& rng) {
    TensorT<double> t(std::move(shape));
    for (auto& v : t.data) v = rng.normal();
    return t;
}

std::int64_t signed_freq(std::int64_t bin, std::int64_t n) {
    // Nyquist counted positive, matching the layer's weight convention.
    return bin <= n / 2 ? bin : bin - n;
}

// Independent spectral-conv oracle: dense full-spectrum DFT, an explicit loop
// over retained modes applying the octant weights (conjugated on the negative
// member of each conjugate pair), then a dense inverse sum with the real part
// taken at the end.
TensorT<double> oracle_spectral_forward(const TensorT<double>& x, const TensorT<double>& wre,
                                        const TensorT<double>& wim, ModeSpec modes) {
    const std::int64_t cin = x.shape[0], w = x.shape[1], h = x.shape[2], d = x.shape[3];
    const std::int64_t cout = wre.shape[0];
    const std::int64_t kx = modes.kx, ky = modes.ky, kz = modes.kz;

    std::vector<std::vector<std::complex<double>>> zfull(static_cast<std::size_t>(cin));
    for (std::int64_t c = 0; c < cin; ++c) zfull[static_cast<std::size_t>(c)] = oracle::dft3_full(x, c);

    TensorT<double> out({cout, w, h, d});
    const double norm = 1.0 / static_cast<double>(w * h * d);
    for (std::int64_t bx = 0; bx < w; ++bx)
        for (std::int64_t by = 0; by < h; ++by)
            for (std::int64_t bz = 0; bz < d; ++bz) {
                const std::int64_t fx = signed_freq(bx, w);
                const std::int64_t fy = signed_freq(by, h);
                const std::int64_t fz = signed_freq(bz, d);
                if (std::abs(fx) >= kx || std::abs(fy) >= ky || std::abs(fz) >= kz) continue;
                const bool canonical = fz > 0 || (fz == 0 && (fy > 0 || (fy == 0 && fx >= 0)));
                const std::int64_t oct = (std::abs(fx) * ky + std::abs(fy)) * kz + std::abs(fz);
                const std::int64_t sidx = (bx * h + by) * d + bz;
                for (std::int64_t co = 0; co < cout; ++co) {
                    std::complex<double> yk(0, 0);
                    for (std::int64_t ci = 0; ci < cin; ++ci) {
                        const std::int64_t wi = (co * cin + ci) * (kx * ky * kz) + oct;
                        const std::complex<double> a(wre[wi], canonical ? wim[wi] : -wim[wi]);
                        yk += a * zfull[static_cast<std::size_t>(ci)][static_cast<std::size_t>(sidx)];
                    }
                    // Accumulate this mode's contribution to every sample point.
                    for (std::int64_t px = 0; px < w; ++px)
                        for (std::int64_t py = 0; py < h; ++py)
                            for (std::int64_t pz = 0; pz < d; ++pz) {
                                const double phase =
                                    2.0 * std::numbers::pi *
                                    (static_cast<double>(fx * px) / w + static_cast<double>(fy * py) / h +
                                     static_cast<double>(fz * pz) / d);
                                out[((co * w + px) * h + py) * d + pz] +=
                                    norm * (yk * std::complex<double>(std::cos(phase), std::sin(phase)))
                                               .real();
                            }
                }
            }
    return out;
}

} // namespace

TEST_CASE("spectral_conv3d identity at full bandwidth") {
    ParamStore<double> store;
    const ModeSpec full{3, 3, 3}; // k_max(4) = 3
    SpectralConv3d<double> layer(store, "spec", 2, 2, full);
    auto* wre = store.find("spec.weight_re");
    const std::int64_t block = 27;
    for (std::int64_t m = 0; m < block; ++m)
        for (std::int64_t c = 0; c < 2; ++c) wre->value[(c * 2 + c) * block + m] = 1.0;
    Rng rng(1);
    const auto x = random_tensor({2, 4, 4, 4}, rng);
    const auto y = layer.forward(x, nullptr);
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-12));
}

TEST_CASE("spectral_conv3d zero weights give the zero field") {
    ParamStore<double> store;
    SpectralConv3d<double> layer(store, "spec", 3, 2, ModeSpec{2, 2, 2});
    Rng rng(2);
    const auto x = random_tensor({3, 6, 6, 6}, rng);
    const auto y = layer.forward(x, nullptr);
    for (std::int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0);
}

TEST_CASE("spectral_conv3d matches the dense per-mode oracle") {
    Rng rng(3);
    ParamStore<double> store;
    const ModeSpec modes{2, 2, 2};
    SpectralConv3d<double> layer(store, "spec", 2, 2, modes);
    layer.init(rng);
    const auto x = random_tensor({2, 6, 6, 6}, rng);
    const auto got = layer.forward(x, nullptr);
    const auto want = oracle_spectral_forward(x, store.find("spec.weight_re")->value,
                                              store.find("spec.weight_im")->value, modes);
    REQUIRE(got.shape == want.shape);
    for (std::int64_t i = 0; i < got.size(); ++i)
        CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-10));
}

TEST_CASE("spectral_conv3d oracle agreement on asymmetric grid with clamping") {
    Rng rng(4);
    ParamStore<double> store;
    // ky exceeds k_max(4) = 3 and gets clamped inside the layer; the oracle
    // uses the clamped spec directly.
    SpectralConv3d<double> layer(store, "spec", 2, 3, ModeSpec{3, 5, 2});
    layer.init(rng);
    const auto x = random_tensor({2, 5, 4, 6}, rng);
    const auto got = layer.forward(x, nullptr);

    // Rebuild clamped-octant weights from the configured block.
    const ModeSpec clamped{3, 3, 2};
    TensorT<double> wre({3, 2, 3, 3, 2}), wim({3, 2, 3, 3, 2});
    const auto& cre = store.find("spec.weight_re")->value;
    const auto& cim = store.find("spec.weight_im")->value;
    for (std::int64_t co = 0; co < 3; ++co)
        for (std::int64_t ci = 0; ci < 2; ++ci)
            for (std::int64_t ax = 0; ax < 3; ++ax)
                for (std::int64_t ay = 0; ay < 3; ++ay)
                    for (std::int64_t az = 0; az < 2; ++az) {
                        const std::int64_t src = (((co * 2 + ci) * 3 + ax) * 5 + ay) * 2 + az;
                        const std::int64_t dst = (((co * 2 + ci) * 3 + ax) * 3 + ay) * 2 + az;
                        wre[dst] = cre[src];
                        wim[dst] = cim[src];
                    }
    const auto want = oracle_spectral_forward(x, wre, wim, clamped);
    for (std::int64_t i = 0; i < got.size(); ++i)
        CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-10));
}

TEST_CASE("spectral_conv3d gradients match finite differences") {
    gradcheck::Result res;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(7000 + seed);
        ParamStore<double> store;
        SpectralConv3d<double> layer(store, "spec", 2, 2, ModeSpec{2, 2, 2});
        layer.init(rng);
        auto x = random_tensor({2, 4, 4, 4}, rng);
        const auto probe = gradcheck::make_probe({2, 4, 4, 4}, rng);
        std::function<double()> loss = [&] {
            return gradcheck::probe_loss(layer.forward(x, nullptr), probe);
        };
        store.zero_grad();
        SpectralConv3dCache<double> cache;
        layer.forward(x, &cache);
        const auto grad_in = layer.backward(probe, cache);
        gradcheck::check_params(store, loss, res, 1e-3);
        gradcheck::check_tensor(x, grad_in, loss, res, "input", 1e-3);
    }
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("spectral_conv3d backward is linear and zero-preserving") {
    Rng rng(11);
    ParamStore<double> store;
    SpectralConv3d<double> layer(store, "spec", 2, 2, ModeSpec{2, 2, 2});
    layer.init(rng);
    const auto x = random_tensor({2, 4, 4, 4}, rng);
    SpectralConv3dCache<double> cache;
    layer.forward(x, &cache);

    store.zero_grad();
    const auto gzero = layer.backward(zeros<double>({2, 4, 4, 4}), cache);
    for (std::int64_t i = 0; i < gzero.size(); ++i) CHECK(gzero[i] == 0.0);
    for (const auto& p : store.items())
        for (std::int64_t i = 0; i < p->grad.size(); ++i) CHECK(p->grad[i] == 0.0);

    const auto g1 = random_tensor({2, 4, 4, 4}, rng);
    const auto g2 = random_tensor({2, 4, 4, 4}, rng);
    const double a = 0.7, b = -1.3;
    TensorT<double> combo({2, 4, 4, 4});
    for (std::int64_t i = 0; i < combo.size(); ++i) combo[i] = a * g1[i] + b * g2[i];
    store.zero_grad();
    const auto gc = layer.backward(combo, cache);
    store.zero_grad();
    const auto ga = layer.backward(g1, cache);
    store.zero_grad();
    const auto gb = layer.backward(g2, cache);
    for (std::int64_t i = 0; i < gc.size(); ++i)
        CHECK(gc[i] == doctest::Approx(a * ga[i] + b * gb[i]).epsilon(1e-10));
}

TEST_CASE("spectral_conv3d is translation-equivariant and linear in its input") {
    Rng rng(12);
    ParamStore<double> store;
    SpectralConv3d<double> layer(store, "spec", 2, 2, ModeSpec{2, 2, 2});
    layer.init(rng);
    const std::int64_t w = 4, h = 4, d = 4;
    const auto x = random_tensor({2, w, h, d}, rng);
    const auto y = layer.forward(x, nullptr);
    for (std::int64_t sx = 0; sx < w; ++sx)
        for (std::int64_t sy = 0; sy < h; ++sy)
            for (std::int64_t sz = 0; sz < d; ++sz) {
                TensorT<double> xs(x.shape);
                for (std::int64_t c = 0; c < 2; ++c)
                    for (std::int64_t ix = 0; ix < w; ++ix)
                        for (std::int64_t iy = 0; iy < h; ++iy)
                            for (std::int64_t iz = 0; iz < d; ++iz)
                                xs[((c * w + (ix + sx) % w) * h + (iy + sy) % h) * d + (iz + sz) % d] =
                                    x[((c * w + ix) * h + iy) * d + iz];
                const auto ys = layer.forward(xs, nullptr);
                for (std::int64_t c = 0; c < 2; ++c)
                    for (std::int64_t ix = 0; ix < w; ++ix)
                        for (std::int64_t iy = 0; iy < h; ++iy)
                            for (std::int64_t iz = 0; iz < d; ++iz) {
                                const double want =
                                    y[((c * w + ix) * h + iy) * d + iz];
                                const double got =
                                    ys[((c * w + (ix + sx) % w) * h + (iy + sy) % h) * d +
                                       (iz + sz) % d];
                                CHECK(std::abs(got - want) < 1e-5);
                            }
            }

    const auto x2 = random_tensor({2, w, h, d}, rng);
    TensorT<double> mix_in(x.shape);
    const double a = 1.9, b = -0.4;
    for (std::int64_t i = 0; i < x.size(); ++i) mix_in[i] = a * x[i] + b * x2[i];
    const auto ymix = layer.forward(mix_in, nullptr);
    const auto y2 = layer.forward(x2, nullptr);
    for (std::int64_t i = 0; i < ymix.size(); ++i)
        CHECK(ymix[i] == doctest::Approx(a * y[i] + b * y2[i]).epsilon(1e-9));
}

TEST_CASE("spectral_conv3d is consistent across resolutions on band-limited input") {
    Rng rng(13);
    ParamStore<double> store;
    const ModeSpec modes{3, 3, 3};
    SpectralConv3d<double> layer(store, "spec", 2, 2, modes);
    layer.init(rng);

    // Band-limited continuous field: take the truncated spectrum of a random
    // coarse field as the shared coefficient set.
    const std::int64_t n_lo = 16, n_hi = 32;
    const auto base = random_tensor({2, n_lo, n_lo, n_lo}, rng);
    const auto zt = truncate_modes(fft3(base), modes);

    const Shape full_lo{2, n_lo, n_lo, n_lo / 2 + 1};
    const std::int64_t sp_lo[3] = {n_lo, n_lo, n_lo};
    const auto x_lo = ifft3(pad_modes(zt, modes, full_lo), std::span<const std::int64_t>(sp_lo));

    // Same continuous field sampled at 32^3: unnormalized-forward spectra
    // scale with the number of samples.
    ComplexTensorT<double> zt_hi = zt;
    const double ratio = std::pow(static_cast<double>(n_hi) / n_lo, 3);
    for (auto& v : zt_hi.data) v *= ratio;
    const Shape full_hi{2, n_hi, n_hi, n_hi / 2 + 1};
    const std::int64_t sp_hi[3] = {n_hi, n_hi, n_hi};
    const auto x_hi = ifft3(pad_modes(zt_hi, modes, full_hi), std::span<const std::int64_t>(sp_hi));

    // The two samplings agree at shared points by construction.
    for (std::int64_t c = 0; c < 2; ++c)
        for (std::int64_t ix = 0; ix < n_lo; ++ix)
            for (std::int64_t iy = 0; iy < n_lo; ++iy)
                for (std::int64_t iz = 0; iz < n_lo; ++iz)
                    CHECK(std::abs(x_hi[((c * n_hi + 2 * ix) * n_hi + 2 * iy) * n_hi + 2 * iz] -
                                   x_lo[((c * n_lo + ix) * n_lo + iy) * n_lo + iz]) < 1e-10);

    const auto y_lo = layer.forward(x_lo, nullptr);
    const auto y_hi = layer.forward(x_hi, nullptr);
    double worst = 0.0;
    for (std::int64_t c = 0; c < 2; ++c)
        for (std::int64_t ix = 0; ix < n_lo; ++ix)
            for (std::int64_t iy = 0; iy < n_lo; ++iy)
                for (std::int64_t iz = 0; iz < n_lo; ++iz)
                    worst = std::max(worst,
                                     std::abs(y_hi[((c * n_hi + 2 * ix) * n_hi + 2 * iy) * n_hi + 2 * iz] -
                                              y_lo[((c * n_lo + ix) * n_lo + iy) * n_lo + iz]));
    CHECK(worst < 1e-4);
}

TEST_CASE("factorized spectral conv zero weights give zero") {
    ParamStore<double> store;
    FactorizedSpectralConv<double> layer(store, "fs", 3, {2, 2, 2});
    Rng rng(21);
    const auto x = random_tensor({3, 5, 4, 3}, rng);
    const auto y = layer.forward(x, nullptr);
    for (std::int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0);
}

TEST_CASE("factorized spectral conv matches a dense per-axis oracle") {
    Rng rng(22);
    ParamStore<double> store;
    const std::array<std::int64_t, 3> modes{2, 2, 2};
    FactorizedSpectralConv<double> layer(store, "fs", 2, modes);
    layer.init(rng);
    const auto x = random_tensor({2, 5, 4, 3}, rng);
    const auto got = layer.forward(x, nullptr);

    const std::int64_t c = 2, w = 5, h = 4, d = 3;
    TensorT<double> want({c, w, h, d});
    const std::int64_t extents[3] = {w, h, d};
    const char* names[3] = {"x", "y", "z"};
    for (int axis = 0; axis < 3; ++axis) {
        const auto& wre = store.find(std::string("fs.weight_") + names[axis] + "_re")->value;
        const auto& wim = store.find(std::string("fs.weight_") + names[axis] + "_im")->value;
        const std::int64_t n = extents[axis];
        const std::int64_t m = modes[static_cast<std::size_t>(axis)];
        // Iterate every 1D line along `axis`.
        const std::int64_t strides[3] = {h * d, d, 1};
        for (std::int64_t a = 0; a < extents[(axis + 1) % 3]; ++a)
            for (std::int64_t b = 0; b < extents[(axis + 2) % 3]; ++b) {
                const std::int64_t base = a * strides[(axis + 1) % 3] + b * strides[(axis + 2) % 3];
                // Dense DFT of each channel's line.
                std::vector<std::vector<std::complex<double>>> spec(2);
                for (std::int64_t ci = 0; ci < c; ++ci) {
                    std::vector<std::complex<double>> line(static_cast<std::size_t>(n));
                    for (std::int64_t t = 0; t < n; ++t)
                        line[static_cast<std::size_t>(t)] = x[ci * w * h * d + base + t * strides[axis]];
                    spec[static_cast<std::size_t>(ci)] = oracle::dft1(line);
                }
                for (std::int64_t co = 0; co < c; ++co)
                    for (std::int64_t t = 0; t < n; ++t) {
                        std::complex<double> acc(0, 0);
                        for (std::int64_t bin = 0; bin < n; ++bin) {
                            const std::int64_t f = signed_freq(bin, n);
                            if (std::abs(f) >= m) continue;
                            for (std::int64_t ci = 0; ci < c; ++ci) {
                                const std::int64_t wi = (co * c + ci) * m + std::abs(f);
                                const std::complex<double> aw(wre[wi], f < 0 ? -wim[wi] : wim[wi]);
                                const double phase = 2.0 * std::numbers::pi *
                                                     static_cast<double>(bin * t) / static_cast<double>(n);
                                acc += aw * spec[static_cast<std::size_t>(ci)][static_cast<std::size_t>(bin)] *
                                       std::complex<double>(std::cos(phase), std::sin(phase));
                            }
                        }
                        want[co * w * h * d + base + t * strides[axis]] +=
                            acc.real() / static_cast<double>(n);
                    }
            }
    }
    for (std::int64_t i = 0; i < got.size(); ++i)
        CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-10));
}

TEST_CASE("factorized spectral conv gradients match finite differences") {
    gradcheck::Result res;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(8000 + seed);
        ParamStore<double> store;
        FactorizedSpectralConv<double> layer(store, "fs", 2, {2, 2, 2});
        layer.init(rng);
        auto x = random_tensor({2, 4, 3, 4}, rng);
        const auto probe = gradcheck::make_probe({2, 4, 3, 4}, rng);
        std::function<double()> loss = [&] {
            return gradcheck::probe_loss(layer.forward(x, nullptr), probe);
        };
        store.zero_grad();
        FactorizedSpectralCache<double> cache;
        layer.forward(x, &cache);
        const auto grad_in = layer.backward(probe, cache);
        // The map is linear in every entry, so the larger step has no
        // truncation error and less cancellation noise.
        gradcheck::check_params(store, loss, res, 1e-3);
        gradcheck::check_tensor(x, grad_in, loss, res, "input", 1e-3);
    }
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("ffno layer residual identity and gradients") {
    // All parameters zero: gelu(0) = 0, so the layer is the identity.
    ParamStore<double> store;
    FfnoLayer<double> layer(store, "layer", 3, {2, 2, 2});
    Rng rng(31);
    const auto v = random_tensor({3, 4, 4, 4}, rng);
    const auto out = layer.forward(v, nullptr);
    for (std::int64_t i = 0; i < v.size(); ++i) CHECK(out[i] == v[i]);

    gradcheck::Result res;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng r(9000 + seed);
        ParamStore<double> s;
        FfnoLayer<double> l(s, "layer", 2, {2, 2, 2});
        l.init(r);
        auto x = random_tensor({2, 4, 3, 4}, r);
        const auto probe = gradcheck::make_probe({2, 4, 3, 4}, r);
        std::function<double()> loss = [&] { return gradcheck::probe_loss(l.forward(x, nullptr), probe); };
        s.zero_grad();
        FfnoLayerCache<double> cache;
        l.forward(x, &cache);
        const auto grad_in = l.backward(probe, cache);
        gradcheck::check_params(s, loss, res);
        gradcheck::check_tensor(x, grad_in, loss, res, "input");
    }
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("spectral weight closed-form parameter counts") {
    // 2 * C^2 * kx * ky * kz for the dense 3D kernel.
    ParamStore<float> s1;
    SpectralConv3d<float> dense3d(s1, "s", 3, 3, ModeSpec{4, 3, 2});
    CHECK(s1.param_count() == 2 * 3 * 3 * 4 * 3 * 2);

    // 2 * C^2 * (m1 + m2 + m3) for the factorized kernel.
    ParamStore<float> s2;
    FactorizedSpectralConv<float> fact(s2, "f", 3, {4, 3, 2});
    CHECK(s2.param_count() == 2 * 3 * 3 * (4 + 3 + 2));

    // Paper-scale closed forms (no allocation): ratio of spectral weights per
    // layer at width 64, modes [40,40,12].
    const double fno_per_layer = 2.0 * 64 * 64 * 40 * 40 * 12;
    const double ffno_per_layer = 2.0 * 64 * 64 * (40 + 40 + 12);
    CHECK(fno_per_layer == 157286400.0);
    CHECK(ffno_per_layer == 753664.0);
    CHECK(fno_per_layer / ffno_per_layer == doctest::Approx(208.6957).epsilon(1e-4));
}
