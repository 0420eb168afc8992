#pragma once

#include "gbm/types.hpp"

#include <string>
#include <vector>

namespace gbm::io {

struct Table {
    Matrix values;
    std::vector<std::string> header;  // empty when the file has none
};

// Reads a comma- or tab-delimited numeric table. A first row containing any non-numeric
// field is treated as a header. Parse errors report line and column.
Table read_table(const std::string& path);
Matrix read_matrix(const std::string& path);
Vector read_vector(const std::string& path);

// Writes with 17 significant digits so values round-trip exactly.
void write_matrix(const std::string& path, const Matrix& m, const std::vector<std::string>& header = {},
                  char delim = ',');
void write_vector(const std::string& path, const Vector& v, const std::string& header = "");

std::string format_double(double v);

// 64-bit FNV-1a digest of a file's bytes, as 16 hex digits.
std::string file_digest(const std::string& path);

}  // namespace gbm::io
