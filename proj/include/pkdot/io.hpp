#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pkdot/errors.hpp"
#include "pkdot/tensor.hpp"

namespace pkdot {

// Shortest decimal form that round-trips a double exactly. Deterministic,
// so repeated runs emit byte-identical files.
inline std::string format_double(double v) {
    char buf[40];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        double back = 0.0;
        std::sscanf(buf, "%lf", &back);
        if (back == v) return buf;
    }
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void write_matrix_csv(const Tensor2& m, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (int i = 0; i < m.rows(); ++i) {
        for (int j = 0; j < m.cols(); ++j) {
            if (j) out << ',';
            out << format_double(m(i, j));
        }
        out << '\n';
    }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    std::stringstream ss(line);
    while (std::getline(ss, cur, ',')) fields.push_back(cur);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

inline double parse_double_field(const std::string& s, int line_no) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing chars");
        return v;
    } catch (const std::exception&) {
        throw ParseError("line " + std::to_string(line_no) + ": expected a number, got '" + s + "'");
    }
}

inline long parse_long_field(const std::string& s, int line_no) {
    try {
        std::size_t pos = 0;
        const long v = std::stol(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing chars");
        return v;
    } catch (const std::exception&) {
        throw ParseError("line " + std::to_string(line_no) + ": expected an integer, got '" + s + "'");
    }
}

} // namespace pkdot
