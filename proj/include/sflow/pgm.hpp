#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace sflow {

struct GrayImage {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::uint32_t maxval = 255;  // 255 or 65535
    std::vector<std::uint16_t> pixels;
};

/// Binary P5. 16-bit samples are big-endian as the format requires.
void write_pgm(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_pgm(const std::filesystem::path& path);

}  // namespace sflow
