#include "sflow/snapshot.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace sflow {
namespace {

template <typename T>
void put_le(std::ostream& os, T value) {
    std::array<unsigned char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
    std::array<unsigned char, sizeof(T)> bytes;
    if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) {
        throw std::runtime_error("snapshot: truncated stream");
    }
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    T value;
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
}

}  // namespace

void write_snapshot(std::ostream& os, const Tensor& t) {
    const Shape& s = t.shape();
    put_le<std::uint32_t>(os, s.b);
    put_le<std::uint32_t>(os, s.c);
    put_le<std::uint32_t>(os, s.h);
    put_le<std::uint32_t>(os, s.w);
    for (double v : t.data()) put_le<double>(os, v);
    if (!os) throw std::runtime_error("snapshot: write failed");
}

Tensor read_snapshot(std::istream& is) {
    Shape s;
    s.b = get_le<std::uint32_t>(is);
    s.c = get_le<std::uint32_t>(is);
    s.h = get_le<std::uint32_t>(is);
    s.w = get_le<std::uint32_t>(is);
    if (s.numel() > (std::size_t{1} << 32)) throw std::runtime_error("snapshot: implausible shape " + s.str());
    std::vector<double> values(s.numel());
    for (double& v : values) v = get_le<double>(is);
    return Tensor::from(s, std::move(values));
}

void save_snapshot(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("snapshot: cannot open " + path.string());
    write_snapshot(os, t);
}

Tensor load_snapshot(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("snapshot: cannot open " + path.string());
    return read_snapshot(is);
}

}  // namespace sflow
