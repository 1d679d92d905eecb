#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace vpl {

// Error hierarchy. The CLI maps these onto exit codes, so library code
// throws the most specific type that applies.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad or inconsistent configuration (exit code 2).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// A required input artifact is absent (exit code 3).
struct MissingArtifactError : Error {
    explicit MissingArtifactError(const std::string& msg) : Error(msg) {}
};

// Non-finite values encountered in a numeric pipeline (exit code 4).
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Shape or layout violations in tensor code.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Rounds a double to 32-bit float precision (the on-disk format). The
// volatile store keeps GCC from folding the narrow-and-widen pair away when
// it vectorizes neighboring casts at -O3, which would silently retain full
// precision.
inline double round_f32(double x) {
    volatile float f = static_cast<float>(x);
    return static_cast<double>(f);
}

namespace detail {
template <typename... Args>
std::string format(const char* fmt, Args... args) {
    const int n = std::snprintf(nullptr, 0, fmt, args...);
    std::string out(static_cast<size_t>(n), '\0');
    std::snprintf(out.data(), out.size() + 1, fmt, args...);
    return out;
}
inline std::string format(const char* fmt) { return std::string(fmt); }
}  // namespace detail

#define VPL_CHECK(cond, ...)                                                 \
    do {                                                                     \
        if (!(cond)) {                                                       \
            throw ::vpl::Error(::vpl::detail::format(__VA_ARGS__));          \
        }                                                                    \
    } while (0)

#define VPL_SHAPE_CHECK(cond, ...)                                           \
    do {                                                                     \
        if (!(cond)) {                                                       \
            throw ::vpl::ShapeError(::vpl::detail::format(__VA_ARGS__));     \
        }                                                                    \
    } while (0)

}  // namespace vpl
