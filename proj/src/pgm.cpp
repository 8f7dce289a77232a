#include "sflow/pgm.hpp"

#include <fstream>
#include <stdexcept>
#include <string>

namespace sflow {

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
    if (img.maxval != 255 && img.maxval != 65535) throw std::invalid_argument("write_pgm: maxval must be 255 or 65535");
    if (img.pixels.size() != std::size_t{img.width} * img.height) {
        throw std::invalid_argument("write_pgm: pixel count does not match extents");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pgm: cannot open " + path.string());
    out << "P5\n" << img.width << ' ' << img.height << '\n' << img.maxval << '\n';
    std::vector<char> bytes;
    bytes.reserve(img.pixels.size() * 2);
    for (std::uint16_t p : img.pixels) {
        if (p > img.maxval) throw std::invalid_argument("write_pgm: sample exceeds maxval");
        if (img.maxval > 255) bytes.push_back(static_cast<char>(p >> 8));
        bytes.push_back(static_cast<char>(p & 0xff));
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

namespace {

std::uint32_t read_header_int(std::istream& in) {
    // Skips whitespace and '#' comments.
    int c = in.peek();
    while (c != EOF) {
        if (c == '#') {
            std::string ignored;
            std::getline(in, ignored);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
        c = in.peek();
    }
    std::int64_t v = -1;
    in >> v;
    if (!in || v < 0) throw std::runtime_error("read_pgm: malformed header");
    return static_cast<std::uint32_t>(v);
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_pgm: cannot open " + path.string());
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (magic != "P5") throw std::runtime_error("read_pgm: not a binary PGM: " + path.string());
    GrayImage img;
    img.width = read_header_int(in);
    img.height = read_header_int(in);
    img.maxval = read_header_int(in);
    if (img.maxval != 255 && img.maxval != 65535) throw std::runtime_error("read_pgm: unsupported maxval");
    in.get();  // single whitespace before the raster
    const std::size_t n = std::size_t{img.width} * img.height;
    const std::size_t bpp = img.maxval > 255 ? 2 : 1;
    std::vector<unsigned char> bytes(n * bpp);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(in.gcount()) != bytes.size()) throw std::runtime_error("read_pgm: truncated raster");
    img.pixels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        img.pixels[i] = bpp == 2 ? static_cast<std::uint16_t>((bytes[2 * i] << 8) | bytes[2 * i + 1]) : bytes[i];
    }
    return img;
}

}  // namespace sflow
