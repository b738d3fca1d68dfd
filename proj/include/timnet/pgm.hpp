#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace timnet {

struct PgmImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;  // row-major
};

/// Binary PGM (P5), maxval 255.
void write_pgm(const std::string& path, const PgmImage& img);
PgmImage read_pgm(const std::string& path);

}  // namespace timnet
