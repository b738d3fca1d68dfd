#include "timnet/pgm.hpp"

#include <cctype>
#include <fstream>
#include <stdexcept>

namespace timnet {

void write_pgm(const std::string& path, const PgmImage& img) {
    if (img.pixels.size() != static_cast<std::size_t>(img.height) * static_cast<std::size_t>(img.width))
        throw std::invalid_argument("write_pgm: pixel count does not match dimensions");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
    f << "P5\n" << img.width << " " << img.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!f) throw std::runtime_error("write_pgm: write failed for " + path);
}

namespace {

int next_pgm_int(std::istream& in, const std::string& path) {
    // Skips whitespace and '#' comments.
    for (;;) {
        const int c = in.peek();
        if (c == EOF) throw std::runtime_error("read_pgm: truncated header in " + path);
        if (std::isspace(c)) {
            in.get();
        } else if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else {
            break;
        }
    }
    int v = 0;
    if (!(in >> v)) throw std::runtime_error("read_pgm: malformed header in " + path);
    return v;
}

}  // namespace

PgmImage read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_pgm: cannot open " + path);
    char m0 = 0, m1 = 0;
    f.get(m0);
    f.get(m1);
    if (m0 != 'P' || m1 != '5') throw std::runtime_error("read_pgm: not a binary PGM (P5): " + path);
    PgmImage img;
    img.width = next_pgm_int(f, path);
    img.height = next_pgm_int(f, path);
    const int maxval = next_pgm_int(f, path);
    if (maxval != 255) throw std::runtime_error("read_pgm: unsupported maxval " + std::to_string(maxval) + " in " + path);
    f.get();  // single whitespace after maxval
    if (img.width <= 0 || img.height <= 0) throw std::runtime_error("read_pgm: bad dimensions in " + path);
    img.pixels.resize(static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height));
    f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (f.gcount() != static_cast<std::streamsize>(img.pixels.size()))
        throw std::runtime_error("read_pgm: truncated pixel data in " + path);
    return img;
}

}  // namespace timnet
