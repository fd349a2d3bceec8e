#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "noforge/error.hpp"
#include "noforge/rng.hpp"
#include "noforge/tensor.hpp"

namespace noforge {

// Scan orientation of an acquisition.
enum class Direction { AP, LR };

inline std::string direction_name(Direction d) { return d == Direction::AP ? "AP" : "LR"; }
inline Direction direction_from_name(const std::string& s) {
    if (s == "AP") return Direction::AP;
    if (s == "LR") return Direction::LR;
    throw InvalidInput("unknown direction '" + s + "' (expected AP or LR)");
}

// Which displacement component set a model is trained against.
enum class TargetField { Real, Imag };

inline std::string target_name(TargetField t) { return t == TargetField::Real ? "real" : "imag"; }
inline TargetField target_from_name(const std::string& s) {
    if (s == "real") return TargetField::Real;
    if (s == "imag") return TargetField::Imag;
    throw InvalidInput("unknown target '" + s + "' (expected real or imag)");
}

// One subject-frequency acquisition.
template <typename T>
struct SampleRecordT {
    std::string subject_id;
    TensorT<T> t1;        // [1,W,H,D], masked
    TensorT<T> mask;      // [1,W,H,D], binary
    TensorT<T> disp_real; // [3,W,H,D], mm
    TensorT<T> disp_imag; // [3,W,H,D], mm
    double age = 0.0;     // years; <= 0 means missing (sentinel path)
    int sex = 0;          // {0,1}
    double brain_volume_cm3 = 0.0;
    double frequency_hz = 0.0; // acquisition band [20, 90]
    Direction direction = Direction::AP;
};
using SampleRecord = SampleRecordT<float>;

// Min/max normalization state. Computed on the training split only and
// frozen for the lifetime of a run.
template <typename T>
struct ScalingStatsT {
    TensorT<T> t1_voxel_min; // [1,W,H,D]
    TensorT<T> t1_voxel_max; // [1,W,H,D]
    double disp_min = 0.0, disp_max = 1.0;
    double age_min = 0.0, age_max = 1.0;
    double vol_min = 0.0, vol_max = 1.0;
    double freq_min = 0.0, freq_max = 1.0;
};
using ScalingStats = ScalingStatsT<float>;

inline constexpr double kAgeSentinel = -1.0;

// ---------------------------------------------------------------------------
// Masking

// Elementwise multiply by a binary [1,W,H,D] mask, broadcast over channels.
template <typename T>
TensorT<T> apply_mask(const TensorT<T>& field, const TensorT<T>& mask) {
    if (field.rank() != 4 || mask.rank() != 4 || mask.shape[0] != 1 ||
        !std::equal(field.shape.begin() + 1, field.shape.end(), mask.shape.begin() + 1))
        throw ShapeMismatch("apply_mask shapes " + shape_str(field.shape) + " vs " + shape_str(mask.shape));
    for (const T m : mask.data)
        if (m != T(0) && m != T(1)) throw InvalidInput("mask must be binary");
    TensorT<T> out(field.shape);
    const std::int64_t per_channel = mask.size();
    for (std::int64_t c = 0; c < field.shape[0]; ++c)
        for (std::int64_t i = 0; i < per_channel; ++i)
            out[c * per_channel + i] = field[c * per_channel + i] * mask[i];
    return out;
}

// ---------------------------------------------------------------------------
// Scaling stats and the per-modality scaling maps

template <typename T>
ScalingStatsT<T> compute_scaling_stats(std::span<const SampleRecordT<T>> train_records) {
    if (train_records.empty()) throw InvalidConfig("cannot compute scaling stats on an empty split");
    const auto& first = train_records[0];
    ScalingStatsT<T> stats;
    stats.t1_voxel_min = first.t1;
    stats.t1_voxel_max = first.t1;
    bool disp_seen = false, age_seen = false;
    for (std::size_t r = 0; r < train_records.size(); ++r) {
        const auto& rec = train_records[r];
        if (!rec.t1.same_shape(first.t1))
            throw ShapeMismatch("inconsistent grid shapes across records");
        for (std::int64_t i = 0; i < rec.t1.size(); ++i) {
            stats.t1_voxel_min[i] = std::min(stats.t1_voxel_min[i], rec.t1[i]);
            stats.t1_voxel_max[i] = std::max(stats.t1_voxel_max[i], rec.t1[i]);
        }
        // Global signed displacement range over masked-in voxels of both the
        // real and imaginary fields.
        const std::int64_t per_channel = rec.mask.size();
        for (const TensorT<T>* d : {&rec.disp_real, &rec.disp_imag}) {
            for (std::int64_t c = 0; c < 3; ++c)
                for (std::int64_t i = 0; i < per_channel; ++i) {
                    if (rec.mask[i] == T(0)) continue;
                    const double v = static_cast<double>((*d)[c * per_channel + i]);
                    if (!disp_seen) {
                        stats.disp_min = stats.disp_max = v;
                        disp_seen = true;
                    } else {
                        stats.disp_min = std::min(stats.disp_min, v);
                        stats.disp_max = std::max(stats.disp_max, v);
                    }
                }
        }
        if (rec.age > 0.0) {
            if (!age_seen) {
                stats.age_min = stats.age_max = rec.age;
                age_seen = true;
            } else {
                stats.age_min = std::min(stats.age_min, rec.age);
                stats.age_max = std::max(stats.age_max, rec.age);
            }
        }
        if (r == 0) {
            stats.vol_min = stats.vol_max = rec.brain_volume_cm3;
            stats.freq_min = stats.freq_max = rec.frequency_hz;
        } else {
            stats.vol_min = std::min(stats.vol_min, rec.brain_volume_cm3);
            stats.vol_max = std::max(stats.vol_max, rec.brain_volume_cm3);
            stats.freq_min = std::min(stats.freq_min, rec.frequency_hz);
            stats.freq_max = std::max(stats.freq_max, rec.frequency_hz);
        }
    }
    return stats;
}

namespace detail {
// Degenerate ranges (min == max) map to fraction 0 so masked-out background
// voxels never produce NaN.
inline double range_fraction(double v, double lo, double hi) {
    if (hi <= lo) return 0.0;
    return (v - lo) / (hi - lo);
}
} // namespace detail

// Per-voxel min-max scaling of a T1 volume. Training-split voxels land in
// [0,1]; unseen data may exceed the interval and is clamped to [-0.5, 1.5].
template <typename T>
TensorT<T> scale_t1(const TensorT<T>& t1, const ScalingStatsT<T>& stats) {
    if (!t1.same_shape(stats.t1_voxel_min))
        throw ShapeMismatch("scale_t1 shape " + shape_str(t1.shape) + " vs stats " +
                            shape_str(stats.t1_voxel_min.shape));
    TensorT<T> out(t1.shape);
    std::int64_t clamped = 0;
    for (std::int64_t i = 0; i < t1.size(); ++i) {
        const double lo = static_cast<double>(stats.t1_voxel_min[i]);
        const double hi = static_cast<double>(stats.t1_voxel_max[i]);
        double v = detail::range_fraction(static_cast<double>(t1[i]), lo, hi);
        if (v < -0.5) {
            v = -0.5;
            ++clamped;
        } else if (v > 1.5) {
            v = 1.5;
            ++clamped;
        }
        out[i] = static_cast<T>(v);
    }
    if (clamped > 0)
        std::fprintf(stderr, "noforge: warning: scale_t1 clamped %lld voxels outside [-0.5, 1.5]\n",
                     static_cast<long long>(clamped));
    return out;
}

template <typename T>
TensorT<T> scale_displacement(const TensorT<T>& d, const ScalingStatsT<T>& stats) {
    TensorT<T> out(d.shape);
    for (std::int64_t i = 0; i < d.size(); ++i)
        out[i] = static_cast<T>(
            detail::range_fraction(static_cast<double>(d[i]), stats.disp_min, stats.disp_max));
    return out;
}

template <typename T>
TensorT<T> unscale_displacement(const TensorT<T>& scaled, const ScalingStatsT<T>& stats) {
    TensorT<T> out(scaled.shape);
    const double range = stats.disp_max - stats.disp_min;
    for (std::int64_t i = 0; i < scaled.size(); ++i)
        out[i] = static_cast<T>(stats.disp_min + static_cast<double>(scaled[i]) * range);
    return out;
}

// Age in [0,1]; missing values (age <= 0) pass through as the -1 sentinel.
template <typename T>
double scale_age(double age, const ScalingStatsT<T>& stats) {
    if (age <= 0.0) return kAgeSentinel;
    return detail::range_fraction(age, stats.age_min, stats.age_max);
}

// Brain volume in [0.1, 0.9], leaving margin for out-of-distribution values.
template <typename T>
double scale_volume(double vol, const ScalingStatsT<T>& stats) {
    return 0.1 + 0.8 * detail::range_fraction(vol, stats.vol_min, stats.vol_max);
}

template <typename T>
double scale_frequency(double f, const ScalingStatsT<T>& stats) {
    return detail::range_fraction(f, stats.freq_min, stats.freq_max);
}

inline double encode_sex(int sex) {
    if (sex != 0 && sex != 1) throw InvalidInput("sex must be 0 or 1");
    return static_cast<double>(sex);
}

inline double encode_direction(Direction d) { return d == Direction::AP ? 0.0 : 1.0; }

// ---------------------------------------------------------------------------
// Grid-input assembly

// Scalar features in canonical order, matching the grid channel order below.
template <typename T>
std::array<T, 5> scaled_scalars(const SampleRecordT<T>& rec, const ScalingStatsT<T>& stats) {
    return {static_cast<T>(scale_age(rec.age, stats)), static_cast<T>(scale_volume(rec.brain_volume_cm3, stats)),
            static_cast<T>(encode_sex(rec.sex)), static_cast<T>(scale_frequency(rec.frequency_hz, stats)),
            static_cast<T>(encode_direction(rec.direction))};
}

// The frozen 9-channel stacking: [t1, age, volume, sex, frequency, direction,
// pos_x, pos_y, pos_z]. Positional grids span [0,1] per axis.
template <typename T>
TensorT<T> assemble_grid_input(const SampleRecordT<T>& rec, const ScalingStatsT<T>& stats) {
    const std::int64_t w = rec.t1.shape[1], h = rec.t1.shape[2], d = rec.t1.shape[3];
    const std::array<std::int64_t, 3> spatial{w, h, d};
    const auto scalars = scaled_scalars(rec, stats);

    std::vector<TensorT<T>> channels;
    channels.reserve(9);
    channels.push_back(scale_t1(apply_mask(rec.t1, rec.mask), stats));
    for (const T s : scalars) channels.push_back(broadcast_scalar_to_grid<T>(s, spatial));

    const TensorT<T> gx = linspace_grid<T>(w, T(0), T(1));
    const TensorT<T> gy = linspace_grid<T>(h, T(0), T(1));
    const TensorT<T> gz = linspace_grid<T>(d, T(0), T(1));
    TensorT<T> px({1, w, h, d}), py({1, w, h, d}), pz({1, w, h, d});
    for (std::int64_t x = 0; x < w; ++x)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t z = 0; z < d; ++z) {
                const std::int64_t i = (x * h + y) * d + z;
                px[i] = gx[x];
                py[i] = gy[y];
                pz[i] = gz[z];
            }
    channels.push_back(std::move(px));
    channels.push_back(std::move(py));
    channels.push_back(std::move(pz));
    return concat_channels(std::span<const TensorT<T>>(channels));
}

// A record with everything a model consumes precomputed: the 9-channel grid
// input, the scaled masked target, and the branch-side views.
template <typename T>
struct PreparedSampleT {
    std::string subject_id;
    TensorT<T> input;   // [9,W,H,D]
    TensorT<T> t1;      // [1,W,H,D] scaled, masked (channel 0 of input)
    TensorT<T> mask;    // [1,W,H,D]
    TensorT<T> target;  // [3,W,H,D] scaled, re-masked so outside voxels are 0
    std::array<T, 5> scalars{};
};
using PreparedSample = PreparedSampleT<float>;

template <typename T>
PreparedSampleT<T> prepare_sample(const SampleRecordT<T>& rec, const ScalingStatsT<T>& stats,
                                  TargetField target) {
    PreparedSampleT<T> out;
    out.subject_id = rec.subject_id;
    out.input = assemble_grid_input(rec, stats);
    out.t1 = channel_slice(out.input, 0, 1);
    out.mask = rec.mask;
    const TensorT<T>& disp = (target == TargetField::Real) ? rec.disp_real : rec.disp_imag;
    out.target = apply_mask(scale_displacement(apply_mask(disp, rec.mask), stats), rec.mask);
    out.scalars = scaled_scalars(rec, stats);
    return out;
}

// Coordinates of the mask-on voxels, normalized to [0,1]^3, in lexicographic
// (x, y, z) order, plus their flat per-channel offsets.
template <typename T>
void masked_coords(const TensorT<T>& mask, TensorT<T>& coords_out, std::vector<std::int64_t>& offsets_out) {
    const std::int64_t w = mask.shape[1], h = mask.shape[2], d = mask.shape[3];
    offsets_out.clear();
    for (std::int64_t x = 0; x < w; ++x)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t z = 0; z < d; ++z) {
                const std::int64_t i = (x * h + y) * d + z;
                if (mask[i] != T(0)) offsets_out.push_back(i);
            }
    const std::int64_t n = static_cast<std::int64_t>(offsets_out.size());
    if (n == 0) throw EmptyMask("mask selects no voxels");
    coords_out = TensorT<T>({n, 3});
    for (std::int64_t r = 0; r < n; ++r) {
        const std::int64_t i = offsets_out[static_cast<std::size_t>(r)];
        const std::int64_t x = i / (h * d);
        const std::int64_t y = (i / d) % h;
        const std::int64_t z = i % d;
        coords_out[r * 3 + 0] = static_cast<T>(x) / static_cast<T>(w - 1);
        coords_out[r * 3 + 1] = static_cast<T>(y) / static_cast<T>(h - 1);
        coords_out[r * 3 + 2] = static_cast<T>(z) / static_cast<T>(d - 1);
    }
}

// ---------------------------------------------------------------------------
// Splits

struct SplitIndices {
    std::vector<std::int64_t> train, val, test;
};

// Seeded shuffle followed by a contiguous partition. Validation and test
// counts round to the nearest integer; the remainder goes to train
// (249 samples at 70:10:20 gives 174/25/50).
inline SplitIndices split_dataset(std::int64_t n, double train_ratio, double val_ratio, double test_ratio,
                                  std::uint64_t seed, const std::vector<std::string>* strata = nullptr) {
    if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9)
        throw InvalidConfig("split ratios must sum to 1");
    if (n < 1) throw InvalidConfig("cannot split an empty dataset");

    auto partition = [&](std::vector<std::int64_t> idx, SplitIndices& out) {
        const std::int64_t m = static_cast<std::int64_t>(idx.size());
        const std::int64_t n_val = std::llround(static_cast<double>(m) * val_ratio);
        const std::int64_t n_test = std::llround(static_cast<double>(m) * test_ratio);
        const std::int64_t n_train = m - n_val - n_test;
        if (n_train < 1 || n_val < 1 || n_test < 1)
            throw InvalidConfig("split produces an empty subset for " + std::to_string(m) + " samples");
        out.train.insert(out.train.end(), idx.begin(), idx.begin() + n_train);
        out.val.insert(out.val.end(), idx.begin() + n_train, idx.begin() + n_train + n_val);
        out.test.insert(out.test.end(), idx.begin() + n_train + n_val, idx.end());
    };

    SplitIndices out;
    if (!strata) {
        std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
        Rng rng(seed);
        shuffle(idx, rng);
        partition(std::move(idx), out);
        return out;
    }
    // Strata hook: partition each stratum independently with a per-stratum
    // stream so group membership changes do not perturb other groups.
    if (static_cast<std::int64_t>(strata->size()) != n)
        throw InvalidConfig("strata key count does not match sample count");
    std::vector<std::string> keys(*strata);
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    for (const auto& key : keys) {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = 0; i < n; ++i)
            if ((*strata)[static_cast<std::size_t>(i)] == key) idx.push_back(i);
        std::uint64_t h = 1469598103934665603ULL;
        for (const char ch : key) h = (h ^ static_cast<std::uint64_t>(ch)) * 1099511628211ULL;
        Rng rng(seed, h);
        shuffle(idx, rng);
        partition(std::move(idx), out);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic MRE-like sample generator
//
// Desk-scale stand-in for real acquisitions: an ellipsoidal "brain" mask, a
// blobby T1 volume, and a damped harmonic plane wave whose wavelength depends
// on frequency and age through c_wave = 2.0 + 0.01*age (m/s). Coordinates are
// physical with a fixed 3 mm voxel spacing, so wavelengths are resolvable on
// any grid used in tests.

inline constexpr double kVoxelSpacingMeters = 0.003;
inline constexpr double kVoxelVolumeCm3 = 0.027; // (3 mm)^3

template <typename T>
TensorT<T> synth_ellipsoid_mask(std::span<const std::int64_t> grid) {
    const std::int64_t w = grid[0], h = grid[1], d = grid[2];
    TensorT<T> mask({1, w, h, d});
    const double cx = 0.5 * static_cast<double>(w - 1);
    const double cy = 0.5 * static_cast<double>(h - 1);
    const double cz = 0.5 * static_cast<double>(d - 1);
    const double ax = 0.4 * static_cast<double>(w);
    const double ay = 0.4 * static_cast<double>(h);
    const double az = 0.4 * static_cast<double>(d);
    for (std::int64_t x = 0; x < w; ++x)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t z = 0; z < d; ++z) {
                const double rx = (static_cast<double>(x) - cx) / ax;
                const double ry = (static_cast<double>(y) - cy) / ay;
                const double rz = (static_cast<double>(z) - cz) / az;
                mask[(x * h + y) * d + z] = (rx * rx + ry * ry + rz * rz <= 1.0) ? T(1) : T(0);
            }
    return mask;
}

// Damped plane wave in quadrature. Component phases are fixed offsets so the
// field is a deterministic function of (age, frequency, direction).
template <typename T>
void synth_displacement(std::span<const std::int64_t> grid, double age, double freq_hz, Direction dir,
                        TensorT<T>& disp_real, TensorT<T>& disp_imag) {
    const std::int64_t w = grid[0], h = grid[1], d = grid[2];
    disp_real = TensorT<T>({3, w, h, d});
    disp_imag = TensorT<T>({3, w, h, d});
    const double c_wave = 2.0 + 0.01 * age; // m/s
    const double k_wav = 2.0 * std::numbers::pi * freq_hz / c_wave;
    const double cx = 0.5 * static_cast<double>(w - 1) * kVoxelSpacingMeters;
    const double cy = 0.5 * static_cast<double>(h - 1) * kVoxelSpacingMeters;
    const double cz = 0.5 * static_cast<double>(d - 1) * kVoxelSpacingMeters;
    const double decay =
        0.35 * kVoxelSpacingMeters * static_cast<double>(std::max(std::max(w, h), d));
    const std::int64_t per_channel = w * h * d;
    for (std::int64_t x = 0; x < w; ++x)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t z = 0; z < d; ++z) {
                const double px = static_cast<double>(x) * kVoxelSpacingMeters;
                const double py = static_cast<double>(y) * kVoxelSpacingMeters;
                const double pz = static_cast<double>(z) * kVoxelSpacingMeters;
                const double along = (dir == Direction::LR) ? px : py;
                const double dist =
                    std::sqrt((px - cx) * (px - cx) + (py - cy) * (py - cy) + (pz - cz) * (pz - cz));
                const double env = std::exp(-dist / decay);
                const std::int64_t i = (x * h + y) * d + z;
                for (std::int64_t comp = 0; comp < 3; ++comp) {
                    const double phase =
                        k_wav * along + 2.0 * std::numbers::pi * static_cast<double>(comp) / 3.0;
                    disp_real[comp * per_channel + i] = static_cast<T>(env * std::sin(phase));
                    disp_imag[comp * per_channel + i] = static_cast<T>(env * std::cos(phase));
                }
            }
}

template <typename T = float>
std::vector<SampleRecordT<T>> generate_synthetic_dataset(std::int64_t n,
                                                         std::span<const std::int64_t> grid,
                                                         std::uint64_t seed) {
    if (n < 1) throw InvalidConfig("generator needs n >= 1");
    if (grid.size() != 3 || grid[0] < 4 || grid[1] < 4 || grid[2] < 4)
        throw InvalidConfig("generator grid extents must be >= 4");
    const std::int64_t w = grid[0], h = grid[1], d = grid[2];

    const TensorT<T> mask = synth_ellipsoid_mask<T>(grid);
    double mask_count = 0.0;
    for (const T m : mask.data) mask_count += static_cast<double>(m);

    std::vector<SampleRecordT<T>> records;
    records.reserve(static_cast<std::size_t>(n));
    for (std::int64_t s = 0; s < n; ++s) {
        Rng rng(seed, static_cast<std::uint64_t>(s));
        SampleRecordT<T> rec;
        char id[32];
        std::snprintf(id, sizeof(id), "s%04lld", static_cast<long long>(s));
        rec.subject_id = id;
        rec.mask = mask;
        rec.age = rng.uniform(14.0, 80.0);
        rec.sex = static_cast<int>(rng.uniform_int(2));
        rec.frequency_hz = 20.0 + 10.0 * static_cast<double>(rng.uniform_int(8));
        rec.direction = rng.uniform_int(2) == 0 ? Direction::AP : Direction::LR;
        rec.brain_volume_cm3 = mask_count * kVoxelVolumeCm3;

        // T1: K Gaussian blobs centered inside the mask.
        rec.t1 = TensorT<T>({1, w, h, d});
        const int blobs = 5;
        for (int b = 0; b < blobs; ++b) {
            double bx, by, bz;
            do {
                bx = rng.uniform(0.0, static_cast<double>(w - 1));
                by = rng.uniform(0.0, static_cast<double>(h - 1));
                bz = rng.uniform(0.0, static_cast<double>(d - 1));
            } while (mask[(static_cast<std::int64_t>(bx + 0.5) * h + static_cast<std::int64_t>(by + 0.5)) * d +
                          static_cast<std::int64_t>(bz + 0.5)] == T(0));
            const double sx = rng.uniform(0.08, 0.2) * static_cast<double>(w);
            const double sy = rng.uniform(0.08, 0.2) * static_cast<double>(h);
            const double sz = rng.uniform(0.08, 0.2) * static_cast<double>(d);
            const double amp = rng.uniform(0.5, 1.5);
            for (std::int64_t x = 0; x < w; ++x)
                for (std::int64_t y = 0; y < h; ++y)
                    for (std::int64_t z = 0; z < d; ++z) {
                        const double ex = (static_cast<double>(x) - bx) / sx;
                        const double ey = (static_cast<double>(y) - by) / sy;
                        const double ez = (static_cast<double>(z) - bz) / sz;
                        rec.t1[(x * h + y) * d + z] +=
                            static_cast<T>(amp * std::exp(-0.5 * (ex * ex + ey * ey + ez * ez)));
                    }
        }
        rec.t1 = apply_mask(rec.t1, mask);

        synth_displacement<T>(grid, rec.age, rec.frequency_hz, rec.direction, rec.disp_real, rec.disp_imag);
        rec.disp_real = apply_mask(rec.disp_real, mask);
        rec.disp_imag = apply_mask(rec.disp_imag, mask);
        records.push_back(std::move(rec));
    }
    return records;
}

} // namespace noforge
