#include "noforge/pgm.hpp"

#include <cmath>
#include <cstdio>

#include "noforge/error.hpp"

namespace noforge {

void write_pgm(const std::string& path, std::int64_t rows, std::int64_t cols,
               const std::vector<std::uint8_t>& pixels) {
    if (static_cast<std::int64_t>(pixels.size()) != rows * cols)
        throw InvalidShape("pgm pixel count does not match rows*cols");
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IOFailure("cannot open " + path + " for writing");
    std::fprintf(f, "P5\n%lld %lld\n255\n", static_cast<long long>(cols), static_cast<long long>(rows));
    const std::size_t written = std::fwrite(pixels.data(), 1, pixels.size(), f);
    std::fclose(f);
    if (written != pixels.size()) throw IOFailure("short write to " + path);
}

std::vector<std::uint8_t> quantize_slice(const std::vector<double>& values, double lo, double hi) {
    std::vector<std::uint8_t> out(values.size(), 0);
    const double range = hi - lo;
    if (range <= 0.0) return out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        double v = (values[i] - lo) / range;
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        out[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return out;
}

} // namespace noforge
