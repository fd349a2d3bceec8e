#pragma once

#include <cstdio>
#include <string>

namespace noforge {

// Deterministic float formatting for CSV outputs: 9 significant digits.
inline std::string fmt_g9(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
}

} // namespace noforge
