#pragma once

#include <cmath>
#include <compare>
#include <cstdint>

namespace sflow {

/// Integer microseconds. All clocks and timestamps use this type; solvers
/// convert to seconds only at the point of use.
struct Micros {
    std::int64_t count = 0;

    constexpr Micros() = default;
    constexpr explicit Micros(std::int64_t us) : count(us) {}

    static Micros from_seconds(double s) { return Micros(std::llround(s * 1e6)); }
    constexpr double seconds() const { return static_cast<double>(count) * 1e-6; }

    constexpr auto operator<=>(const Micros&) const = default;
    constexpr Micros operator+(Micros o) const { return Micros(count + o.count); }
    constexpr Micros operator-(Micros o) const { return Micros(count - o.count); }
    constexpr Micros& operator+=(Micros o) {
        count += o.count;
        return *this;
    }
};

}  // namespace sflow
