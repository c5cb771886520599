#pragma once

// Numeric CSV with '#' comment rows for provenance. Numbers are written with
// shortest round-trip formatting, so read(write(x)) == x bit for bit.

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "orc/errors.hpp"

namespace orc {

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
    double v = 0.0;
    const char* b = s.data();
    const char* e = b + s.size();
    while (b < e && *b == ' ') ++b;
    auto res = std::from_chars(b, e, v);
    if (res.ec != std::errc{} || res.ptr != e) throw DatasetError("not a number: '" + s + "'");
    return v;
}

struct CsvTable {
    std::vector<std::string> comments;  // stored without the leading "# "
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    std::size_t column(const std::string& name) const {
        for (std::size_t k = 0; k < columns.size(); ++k)
            if (columns[k] == name) return k;
        throw DatasetError("missing column '" + name + "'");
    }

    std::vector<double> column_values(const std::string& name) const {
        const std::size_t k = column(name);
        std::vector<double> out;
        out.reserve(rows.size());
        for (const auto& r : rows) out.push_back(r[k]);
        return out;
    }
};

inline void write_csv(std::ostream& os, const CsvTable& t) {
    for (const auto& c : t.comments) os << "# " << c << '\n';
    for (std::size_t k = 0; k < t.columns.size(); ++k) os << (k ? "," : "") << t.columns[k];
    os << '\n';
    for (const auto& r : t.rows) {
        if (r.size() != t.columns.size()) throw DatasetError("csv row width does not match header");
        for (std::size_t k = 0; k < r.size(); ++k) os << (k ? "," : "") << format_double(r[k]);
        os << '\n';
    }
}

inline void write_csv(const std::string& path, const CsvTable& t) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DatasetError("cannot open '" + path + "' for writing");
    write_csv(f, t);
    if (!f) throw DatasetError("write failed for '" + path + "'");
}

inline CsvTable read_csv(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DatasetError("cannot open '" + path + "'");
    CsvTable t;
    std::string line;
    bool have_header = false;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            t.comments.push_back(line.size() > 2 ? line.substr(2) : "");
            continue;
        }
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!have_header) {
            t.columns = cells;
            have_header = true;
            continue;
        }
        if (cells.size() != t.columns.size())
            throw DatasetError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.columns.size()) +
                               " fields, got " + std::to_string(cells.size()));
        std::vector<double> r;
        r.reserve(cells.size());
        for (const auto& c : cells) r.push_back(parse_double(c));
        t.rows.push_back(std::move(r));
    }
    if (!have_header) throw DatasetError("'" + path + "' has no header row");
    return t;
}

}  // namespace orc
