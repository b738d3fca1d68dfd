#include "timnet/weights.hpp"

#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

namespace timnet {

namespace {

constexpr char kMagic[4] = {'T', 'I', 'M', 'W'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::ostream& f, std::uint16_t v) {
    const std::uint8_t b[2] = {static_cast<std::uint8_t>(v & 0xFF), static_cast<std::uint8_t>(v >> 8)};
    f.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& f, std::uint32_t v) {
    std::uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF);
    f.write(reinterpret_cast<const char*>(b), 4);
}

std::uint16_t get_u16(std::istream& f, const std::string& path) {
    std::uint8_t b[2];
    f.read(reinterpret_cast<char*>(b), 2);
    if (f.gcount() != 2) throw std::runtime_error("load_weights: truncated file " + path);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& f, const std::string& path) {
    std::uint8_t b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (f.gcount() != 4) throw std::runtime_error("load_weights: truncated file " + path);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void save_weight_file(const std::string& path, const WeightFile& wf) {
    std::set<std::string> names;
    for (const auto& e : wf.entries)
        if (!names.insert(e.name).second)
            throw std::invalid_argument("save_weights: duplicate tensor name '" + e.name + "'");

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_weights: cannot open " + path);
    f.write(kMagic, 4);
    put_u32(f, kVersion);
    put_u32(f, static_cast<std::uint32_t>(wf.entries.size()));
    for (const auto& e : wf.entries) {
        if (e.name.size() > 0xFFFF) throw std::invalid_argument("save_weights: tensor name too long");
        put_u16(f, static_cast<std::uint16_t>(e.name.size()));
        f.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        f.put(static_cast<char>(e.shape.size()));
        for (auto d : e.shape) put_u32(f, static_cast<std::uint32_t>(d));
        f.put(static_cast<char>(e.dtype));
        const std::size_t expect =
            static_cast<std::size_t>(e.element_count()) * (e.dtype == 0 ? sizeof(float) : sizeof(double));
        if (e.raw.size() != expect)
            throw std::invalid_argument("save_weights: tensor '" + e.name + "' raw size mismatch");
        f.write(reinterpret_cast<const char*>(e.raw.data()), static_cast<std::streamsize>(e.raw.size()));
    }
    if (!f) throw std::runtime_error("save_weights: write failed for " + path);
}

WeightFile load_weight_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_weights: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (f.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("load_weights: bad magic in " + path + " (not a TIMW weight file)");
    const std::uint32_t version = get_u32(f, path);
    if (version != kVersion)
        throw std::runtime_error("load_weights: unsupported format version " + std::to_string(version) + " in " + path);
    const std::uint32_t count = get_u32(f, path);
    WeightFile wf;
    std::set<std::string> names;
    for (std::uint32_t i = 0; i < count; ++i) {
        WeightEntry e;
        const std::uint16_t name_len = get_u16(f, path);
        e.name.resize(name_len);
        f.read(e.name.data(), name_len);
        if (f.gcount() != name_len) throw std::runtime_error("load_weights: truncated file " + path);
        const int rank = f.get();
        if (rank < 0) throw std::runtime_error("load_weights: truncated file " + path);
        for (int r = 0; r < rank; ++r) e.shape.push_back(static_cast<std::int64_t>(get_u32(f, path)));
        e.dtype = f.get();
        if (e.dtype != 0 && e.dtype != 1)
            throw std::runtime_error("load_weights: bad dtype tag for tensor '" + e.name + "' in " + path);
        const std::size_t bytes =
            static_cast<std::size_t>(e.element_count()) * (e.dtype == 0 ? sizeof(float) : sizeof(double));
        e.raw.resize(bytes);
        f.read(reinterpret_cast<char*>(e.raw.data()), static_cast<std::streamsize>(bytes));
        if (f.gcount() != static_cast<std::streamsize>(bytes))
            throw std::runtime_error("load_weights: truncated file " + path);
        if (!names.insert(e.name).second)
            throw std::runtime_error("load_weights: duplicate tensor name '" + e.name + "' in " + path);
        wf.entries.push_back(std::move(e));
    }
    return wf;
}

}  // namespace timnet
