#pragma once

#include <stdexcept>
#include <string>

namespace dknn {

enum class Errc {
    invalid_argument,
    bad_magic,
    truncated,
    dimension_mismatch,
    non_finite,
    version_mismatch,
    corrupt,
    degenerate,
    io,
    parse,
    capability,
};

const char* to_string(Errc code) noexcept;

/// Every failure in the library is reported as a dknn::Error carrying a category code.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

}  // namespace dknn
