// SPDX-License-Identifier: Apache-2.0
//
// Dataset manifest: UTF-8 CSV with the exact header `ref_path,dist_path,mos`,
// one reference/distorted pair per row. Relative paths resolve against the
// manifest's directory.

#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace iqt {

struct ManifestRow {
    std::string ref_path;
    std::string dist_path;
    double mos = 0.0;
};

namespace detail {

inline std::string strip_cr(std::string line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

inline std::string resolve_against(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path path(p);
    if (path.is_absolute()) return path.string();
    return (base / path).string();
}

} // namespace detail

inline std::vector<ManifestRow> parse_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path.string() + ": cannot open manifest");
    const std::filesystem::path base = path.parent_path();

    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line))
        throw std::runtime_error(path.string() + ":1: missing header (expected 'ref_path,dist_path,mos')");
    ++line_no;
    if (detail::strip_cr(line) != "ref_path,dist_path,mos")
        throw std::runtime_error(path.string() + ":1: bad header '" + detail::strip_cr(line) +
                                 "' (expected 'ref_path,dist_path,mos')");

    std::vector<ManifestRow> rows;
    while (std::getline(in, line)) {
        ++line_no;
        line = detail::strip_cr(line);
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 3)
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected 3 fields, got " +
                                     std::to_string(fields.size()));
        ManifestRow row;
        row.ref_path = detail::resolve_against(base, fields[0]);
        row.dist_path = detail::resolve_against(base, fields[1]);
        const char* begin = fields[2].c_str();
        char* end = nullptr;
        row.mos = std::strtod(begin, &end);
        while (end != nullptr && (*end == ' ' || *end == '\t')) ++end;
        if (end == begin || end == nullptr || *end != '\0')
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": invalid mos '" + fields[2] +
                                     "'");
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace iqt
