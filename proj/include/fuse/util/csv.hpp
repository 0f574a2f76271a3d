#pragma once

#include <charconv>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace fuse::csv {

class CsvError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::vector<std::string> split(std::string_view line, char sep = ',') {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(sep, start);
        std::string_view cell = line.substr(start, pos == std::string_view::npos ? line.npos : pos - start);
        while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
        while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r'))
            cell.remove_suffix(1);
        out.emplace_back(cell);
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline double to_double(std::string_view s, std::string_view context = "") {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw CsvError("not a number: '" + std::string(s) + "'" +
                       (context.empty() ? "" : " (" + std::string(context) + ")"));
    return v;
}

inline long long to_int(std::string_view s, std::string_view context = "") {
    long long v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw CsvError("not an integer: '" + std::string(s) + "'" +
                       (context.empty() ? "" : " (" + std::string(context) + ")"));
    return v;
}

/// Reads a headed CSV file. Blank lines are skipped.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline Table read(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CsvError("cannot open '" + path + "'");
    Table t;
    std::string line;
    bool first = true;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto cells = split(line);
        if (first) {
            if (!cells.empty() && cells[0].rfind("\xEF\xBB\xBF", 0) == 0) cells[0].erase(0, 3);
            t.header = std::move(cells);
            first = false;
            continue;
        }
        if (cells.size() != t.header.size())
            throw CsvError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                           " cells, got " + std::to_string(cells.size()));
        t.rows.push_back(std::move(cells));
    }
    if (first) throw CsvError("'" + path + "' has no header row");
    return t;
}

/// Shortest round-trip decimal form of a double.
inline std::string fmt(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace fuse::csv
