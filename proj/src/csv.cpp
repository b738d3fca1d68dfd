#include "timnet/csv.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace timnet {

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

void check_field(const std::string& f) {
    for (char c : f)
        if (c == ',' || c == '\n' || c == '\r')
            throw std::invalid_argument("write_csv: field contains a separator: '" + f + "'");
}

}  // namespace

void write_csv(const std::string& path, const CsvTable& table) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_csv: cannot open " + path);
    for (std::size_t i = 0; i < table.header.size(); ++i) {
        check_field(table.header[i]);
        f << (i ? "," : "") << table.header[i];
    }
    f << "\n";
    for (const auto& row : table.rows) {
        if (row.size() != table.header.size())
            throw std::invalid_argument("write_csv: row width " + std::to_string(row.size()) +
                                        " does not match header width " + std::to_string(table.header.size()));
        for (std::size_t i = 0; i < row.size(); ++i) {
            check_field(row[i]);
            f << (i ? "," : "") << row[i];
        }
        f << "\n";
    }
    if (!f) throw std::runtime_error("write_csv: write failed for " + path);
}

CsvTable read_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_csv: cannot open " + path);
    CsvTable table;
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("read_csv: empty file " + path);
    table.header = split_line(line);
    std::size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() && f.eof()) break;
        auto row = split_line(line);
        if (row.size() != table.header.size())
            throw std::runtime_error("read_csv: " + path + ":" + std::to_string(lineno) + ": expected " +
                                     std::to_string(table.header.size()) + " fields, got " + std::to_string(row.size()));
        table.rows.push_back(std::move(row));
    }
    return table;
}

}  // namespace timnet
