#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace noforge {

// Binary PGM (P5, maxval 255), row-major. pixels.size() must equal
// rows * cols.
void write_pgm(const std::string& path, std::int64_t rows, std::int64_t cols,
               const std::vector<std::uint8_t>& pixels);

// Map real slice values onto [0, 255] with a shared [lo, hi] range; a
// degenerate range maps everything to 0.
std::vector<std::uint8_t> quantize_slice(const std::vector<double>& values, double lo, double hi);

} // namespace noforge
