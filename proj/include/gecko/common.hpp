#pragma once

// Shared error type, checked assertions and small helpers used across gecko.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace gecko {

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Throws gecko::error with a streamed message when cond fails.
#define GECKO_CHECK(cond, msg)                     \
    do {                                           \
        if (!(cond)) {                             \
            std::ostringstream oss_;               \
            oss_ << "gecko: " << msg;              \
            throw ::gecko::error(oss_.str());      \
        }                                          \
    } while (0)

template <typename T>
inline bool is_finite_value(T v) {
    return std::isfinite(static_cast<double>(v));
}

template <typename Container>
inline bool all_finite(const Container& c) {
    for (const auto& v : c) {
        if (!is_finite_value(v)) return false;
    }
    return true;
}

inline size_t ceil_div(size_t a, size_t b) { return (a + b - 1) / b; }

template <typename T>
inline T sigmoid(T x) {
    if (x >= T(0)) {
        T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
inline T silu(T x) {
    return x * sigmoid(x);
}

// d/dx silu(x) = s(x) * (1 + x * (1 - s(x)))
template <typename T>
inline T silu_grad(T x) {
    T s = sigmoid(x);
    return s * (T(1) + x * (T(1) - s));
}

template <typename T>
struct dtype_name;
template <>
struct dtype_name<float> {
    static constexpr const char* value = "f32";
};
template <>
struct dtype_name<double> {
    static constexpr const char* value = "f64";
};

}  // namespace gecko
