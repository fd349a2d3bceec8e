#include <doctest.h>

#include <cmath>
#include <complex>

#include <noforge/fft.hpp>
#include <noforge/rng.hpp>
#include <noforge/tensor.hpp>

#include "oracle_dft.hpp"

using namespace noforge;

namespace {

TensorT<double> random_field(Shape shape, std::uint64_t seed) {
    TensorT<double> t(std::move(shape));
    Rng rng(seed);
    for (auto& v : t.data) v = rng.normal();
    return t;
}

double max_abs_diff_vs_oracle(const TensorT<double>& x) {
    const auto z = fft3(x);
    const std::int64_t w = x.shape[1], h = x.shape[2], d = x.shape[3], dh = d / 2 + 1;
    double worst = 0.0;
    for (std::int64_t c = 0; c < x.shape[0]; ++c) {
        const auto ref = oracle::dft3_full(x, c);
        for (std::int64_t kx = 0; kx < w; ++kx)
            for (std::int64_t ky = 0; ky < h; ++ky)
                for (std::int64_t kz = 0; kz < dh; ++kz) {
                    const auto got = z[((c * w + kx) * h + ky) * dh + kz];
                    const auto want = ref[static_cast<std::size_t>((kx * h + ky) * d + kz)];
                    worst = std::max(worst, std::abs(got - std::complex<double>(want)));
                }
    }
    return worst;
}

} // namespace

TEST_CASE("fft3 of constants and zeros") {
    const auto ones_field = ones<double>({1, 4, 4, 4});
    const auto z = fft3(ones_field);
    CHECK(z.shape == Shape{1, 4, 4, 3});
    CHECK(z[0].real() == doctest::Approx(64.0).epsilon(1e-14));
    CHECK(z[0].imag() == doctest::Approx(0.0).epsilon(1e-14));
    for (std::int64_t i = 1; i < z.size(); ++i) CHECK(std::abs(z[i]) < 1e-12);

    const auto zf = fft3(zeros<double>({2, 4, 4, 4}));
    for (std::int64_t i = 0; i < zf.size(); ++i) CHECK(std::abs(zf[i]) == 0.0);
}

TEST_CASE("fft3 matches the brute-force DFT oracle") {
    CHECK(max_abs_diff_vs_oracle(random_field({1, 6, 6, 6}, 11)) < 1e-10);
    CHECK(max_abs_diff_vs_oracle(random_field({2, 5, 4, 3}, 12)) < 1e-10);
    CHECK(max_abs_diff_vs_oracle(random_field({1, 4, 4, 4}, 13)) < 1e-10);
    // Prime extent exercises the O(n^2) fallback leaf.
    CHECK(max_abs_diff_vs_oracle(random_field({1, 7, 5, 11}, 14)) < 1e-10);
}

TEST_CASE("ifft3 round trip and DC inversion") {
    const auto x = random_field({2, 6, 5, 8}, 21);
    const std::int64_t spatial[3] = {6, 5, 8};
    const auto back = ifft3(fft3(x), std::span<const std::int64_t>(spatial));
    double worst = 0.0;
    for (std::int64_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(back[i] - x[i]));
    CHECK(worst < 1e-12);

    // Pure DC bin of value W*H*D inverts to the all-ones field.
    ComplexTensorT<double> dc({1, 4, 4, 3});
    dc[0] = std::complex<double>(64.0, 0.0);
    const std::int64_t sp[3] = {4, 4, 4};
    const auto field = ifft3(dc, std::span<const std::int64_t>(sp));
    for (std::int64_t i = 0; i < field.size(); ++i) CHECK(field[i] == doctest::Approx(1.0).epsilon(1e-13));

    ComplexTensorT<double> wrong({1, 4, 4, 4});
    CHECK_THROWS_AS(ifft3(wrong, std::span<const std::int64_t>(sp)), ShapeMismatch);
}

TEST_CASE("fft3 round trip in f32 stays within 1e-6 relative") {
    TensorT<float> x({1, 8, 6, 4});
    Rng rng(31);
    for (auto& v : x.data) v = static_cast<float>(rng.normal());
    const std::int64_t spatial[3] = {8, 6, 4};
    const auto back = ifft3(fft3(x), std::span<const std::int64_t>(spatial));
    double num = 0.0, den = 0.0;
    for (std::int64_t i = 0; i < x.size(); ++i) {
        num += (back[i] - x[i]) * (back[i] - x[i]);
        den += x[i] * x[i];
    }
    CHECK(std::sqrt(num / den) < 1e-6);
}

TEST_CASE("Parseval with Hermitian double counting") {
    const auto x = random_field({1, 6, 6, 6}, 41);
    const auto z = fft3(x);
    const std::int64_t w = 6, h = 6, d = 6, dh = 4;
    double spatial_energy = 0.0;
    for (const double v : x.data) spatial_energy += v * v;
    double spectral_energy = 0.0;
    for (std::int64_t kx = 0; kx < w; ++kx)
        for (std::int64_t ky = 0; ky < h; ++ky)
            for (std::int64_t kz = 0; kz < dh; ++kz) {
                const auto v = z[((0 * w + kx) * h + ky) * dh + kz];
                spectral_energy +=
                    static_cast<double>(hermitian_multiplicity(kz, d)) * std::norm(v);
            }
    spectral_energy /= static_cast<double>(w * h * d);
    CHECK(spatial_energy == doctest::Approx(spectral_energy).epsilon(1e-12));
}

TEST_CASE("fft3 linearity") {
    const auto x = random_field({1, 5, 4, 6}, 51);
    const auto y = random_field({1, 5, 4, 6}, 52);
    const double a = 1.7, b = -0.3;
    TensorT<double> combo(x.shape);
    for (std::int64_t i = 0; i < x.size(); ++i) combo[i] = a * x[i] + b * y[i];
    const auto zc = fft3(combo);
    const auto zx = fft3(x);
    const auto zy = fft3(y);
    for (std::int64_t i = 0; i < zc.size(); ++i)
        CHECK(std::abs(zc[i] - (a * zx[i] + b * zy[i])) < 1e-11);
}

TEST_CASE("circular shift theorem") {
    const std::int64_t w = 6, h = 4, d = 5;
    const auto x = random_field({1, w, h, d}, 61);
    Rng rng(62);
    for (int trial = 0; trial < 4; ++trial) {
        const std::int64_t sx = rng.uniform_int(w), sy = rng.uniform_int(h), sz = rng.uniform_int(d);
        TensorT<double> shifted(x.shape);
        for (std::int64_t ix = 0; ix < w; ++ix)
            for (std::int64_t iy = 0; iy < h; ++iy)
                for (std::int64_t iz = 0; iz < d; ++iz)
                    shifted[(((ix + sx) % w) * h + (iy + sy) % h) * d + (iz + sz) % d] =
                        x[(ix * h + iy) * d + iz];
        const auto zs = fft3(shifted);
        const auto z = fft3(x);
        const std::int64_t dh = d / 2 + 1;
        for (std::int64_t kx = 0; kx < w; ++kx)
            for (std::int64_t ky = 0; ky < h; ++ky)
                for (std::int64_t kz = 0; kz < dh; ++kz) {
                    const double phase =
                        -2.0 * std::numbers::pi *
                        (static_cast<double>(kx * sx) / w + static_cast<double>(ky * sy) / h +
                         static_cast<double>(kz * sz) / d);
                    const std::complex<double> factor(std::cos(phase), std::sin(phase));
                    const auto want = z[(kx * h + ky) * dh + kz] * factor;
                    CHECK(std::abs(zs[(kx * h + ky) * dh + kz] - want) < 1e-10);
                }
    }
}

TEST_CASE("fft1/ifft1 round trip and constant-axis energy") {
    const auto x = random_field({2, 6, 7, 4}, 71);
    for (std::int64_t axis = 0; axis < 3; ++axis) {
        const auto back = ifft1(fft1(x, axis), axis);
        for (std::int64_t i = 0; i < x.size(); ++i) CHECK(back[i] == doctest::Approx(x[i]).epsilon(1e-12));
    }

    // Constant along axis 1 (H): spectrum supported on that axis's DC bin only.
    TensorT<double> cfield({1, 4, 6, 3});
    Rng rng(72);
    for (std::int64_t ix = 0; ix < 4; ++ix)
        for (std::int64_t iz = 0; iz < 3; ++iz) {
            const double v = rng.normal();
            for (std::int64_t iy = 0; iy < 6; ++iy) cfield[(ix * 6 + iy) * 3 + iz] = v;
        }
    const auto z = fft1(cfield, 1);
    for (std::int64_t ix = 0; ix < 4; ++ix)
        for (std::int64_t iy = 1; iy < 6; ++iy)
            for (std::int64_t iz = 0; iz < 3; ++iz) CHECK(std::abs(z[(ix * 6 + iy) * 3 + iz]) < 1e-12);
}

TEST_CASE("fft1 matches the brute-force oracle on a length-7 axis") {
    const auto x = random_field({1, 3, 7, 2}, 81);
    const auto z = fft1(x, 1);
    for (std::int64_t ix = 0; ix < 3; ++ix)
        for (std::int64_t iz = 0; iz < 2; ++iz) {
            std::vector<std::complex<double>> line(7);
            for (std::int64_t iy = 0; iy < 7; ++iy) line[static_cast<std::size_t>(iy)] = x[(ix * 7 + iy) * 2 + iz];
            const auto ref = oracle::dft1(line);
            for (std::int64_t k = 0; k < 7; ++k)
                CHECK(std::abs(z[(ix * 7 + k) * 2 + iz] - ref[static_cast<std::size_t>(k)]) < 1e-10);
        }
}

TEST_CASE("k_max and mode clamping") {
    CHECK(k_max(44) == 23);
    CHECK(k_max(80) == 41);
    CHECK(k_max(20) == 11);
    CHECK(k_max(5) == 3);

    // The stated full-FNO request fits the paper grid without clamping.
    const ModeSpec full_fno{40, 40, 12};
    const ModeSpec clamped = clamp_modes(full_fno, 80, 80, 44);
    CHECK(clamped == full_fno);

    // The patch-size request clamps on x and y.
    const ModeSpec patch = clamp_modes(ModeSpec{20, 20, 12}, 20, 20, 22);
    CHECK(patch.kx == 11);
    CHECK(patch.ky == 11);
    CHECK(patch.kz == 12);

    CHECK_THROWS_AS(clamp_modes(ModeSpec{0, 1, 1}, 8, 8, 8), InvalidConfig);
}

TEST_CASE("truncate/pad round trip at full bandwidth is the identity") {
    for (const Shape& shape : {Shape{1, 6, 6, 6}, Shape{2, 5, 4, 3}, Shape{1, 8, 6, 4}}) {
        const auto x = random_field(shape, 91 + shape[1]);
        const auto z = fft3(x);
        const ModeSpec full{k_max(shape[1]), k_max(shape[2]), k_max(shape[3])};
        const auto t = truncate_modes(z, full);
        const auto padded = pad_modes(t, full, z.shape);
        REQUIRE(padded.shape == z.shape);
        for (std::int64_t i = 0; i < z.size(); ++i) CHECK(std::abs(padded[i] - z[i]) == 0.0);
    }
}

TEST_CASE("truncate keeps conjugate-paired frequency bins") {
    const auto x = random_field({1, 8, 8, 8}, 101);
    const auto z = fft3(x);
    const ModeSpec modes{3, 2, 4};
    const auto t = truncate_modes(z, modes);
    CHECK(t.shape == Shape{1, 5, 3, 4});
    const auto mx = make_axis_map(8, 3, false);
    const auto my = make_axis_map(8, 2, false);
    for (std::size_t ix = 0; ix < mx.src.size(); ++ix)
        for (std::size_t iy = 0; iy < my.src.size(); ++iy)
            for (std::int64_t kz = 0; kz < 4; ++kz) {
                const auto got = t[((0 * 5 + static_cast<std::int64_t>(ix)) * 3 +
                                    static_cast<std::int64_t>(iy)) * 4 + kz];
                const auto want = z[((0 * 8 + mx.src[ix]) * 8 + my.src[iy]) * 5 + kz];
                CHECK(got == want);
            }
}

TEST_CASE("truncate of pad is idempotent") {
    const auto x = random_field({2, 6, 6, 6}, 111);
    const auto z = fft3(x);
    const ModeSpec modes{2, 3, 2};
    const auto t = truncate_modes(z, modes);
    const auto again = truncate_modes(pad_modes(t, modes, z.shape), modes);
    REQUIRE(again.shape == t.shape);
    for (std::int64_t i = 0; i < t.size(); ++i) CHECK(again[i] == t[i]);
}
