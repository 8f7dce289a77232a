#pragma once

#include <cstdint>
#include <vector>

#include "sflow/time.hpp"

namespace sflow {

/// Instance ids (0 = background) and per-cell flow in cells, channel 0 along
/// columns (x) and channel 1 along rows (y).
struct InstanceFrame {
    Micros timestamp;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<std::int32_t> ids;  // H*W
    std::vector<double> flow;       // 2*H*W

    static InstanceFrame empty(Micros t, std::uint32_t h, std::uint32_t w) {
        return InstanceFrame{t, h, w, std::vector<std::int32_t>(std::size_t{h} * w, 0),
                             std::vector<double>(2 * std::size_t{h} * w, 0.0)};
    }
    std::size_t cells() const { return std::size_t{height} * width; }
    std::int32_t id(std::uint32_t y, std::uint32_t x) const { return ids[std::size_t{y} * width + x]; }
    double flow_x(std::size_t cell) const { return flow[cell]; }
    double flow_y(std::size_t cell) const { return flow[cells() + cell]; }
};

}  // namespace sflow
