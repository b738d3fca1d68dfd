#pragma once

#include <string>
#include <vector>

namespace timnet {

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

/// Writes a rectangular CSV, header first. Fields must not contain commas or
/// newlines (the project's CSVs never do).
void write_csv(const std::string& path, const CsvTable& table);

/// Strict reader: requires a header and rejects ragged rows.
CsvTable read_csv(const std::string& path);

}  // namespace timnet
