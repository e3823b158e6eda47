#pragma once

#include "mt/errors.hpp"

#include <charconv>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace mt {

// Plain comma-split; fields must not contain commas or quotes. The formats
// this project reads and writes are all flat numeric tables.
inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        size_t pos = line.find(',', start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
    return out;
}

// Shortest representation that round-trips the exact double.
inline std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& what) {
    double v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw ParseError("bad number '" + s + "' for " + what);
    return v;
}

inline long parse_long(const std::string& s, const std::string& what) {
    long v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw ParseError("bad integer '" + s + "' for " + what);
    return v;
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::binary); // binary: no newline translation
    if (!f) throw IoError("cannot open for writing: " + path);
    return f;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    return f;
}

inline std::string read_file(const std::string& path) {
    auto f = open_in(path);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

} // namespace mt
