#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <string>

namespace dknn::detail {

// Shortest representation that round-trips; infinities as "inf"/"-inf".
inline std::string format_double(double v)
{
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    std::array<char, 32> buf{};
    const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), ptr);
}

}  // namespace dknn::detail
