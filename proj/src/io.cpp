#include "gbm/io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace gbm::io {

namespace {
std::vector<std::string> split_line(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == delim) {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\"");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\"");
    return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& s, double& out) {
    const std::string t = trim(s);
    if (t.empty()) return false;
    const char* first = t.data();
    const char* last = t.data() + t.size();
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec == std::errc() && ptr == last) return true;
    // from_chars rejects "inf"/"nan" spellings on some libraries; fall back to strtod
    char* end = nullptr;
    out = std::strtod(t.c_str(), &end);
    return end == t.c_str() + t.size();
}
}  // namespace

Table read_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw input_error("cannot open '" + path + "'");
    std::vector<std::string> lines;
    std::vector<size_t> line_no;
    std::string line;
    size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (trim(line).empty()) continue;
        lines.push_back(line);
        line_no.push_back(n);
    }
    if (lines.empty()) throw input_error("'" + path + "' is empty");
    const char delim = lines[0].find('\t') != std::string::npos ? '\t' : ',';
    Table t;
    size_t first = 0;
    {
        const auto fields = split_line(lines[0], delim);
        double v;
        for (const auto& f : fields)
            if (!parse_double(f, v)) {
                for (const auto& g : fields) t.header.push_back(trim(g));
                first = 1;
                break;
            }
    }
    if (first >= lines.size()) throw input_error("'" + path + "' has a header but no data rows");
    const size_t cols = split_line(lines[first], delim).size();
    if (!t.header.empty() && t.header.size() != cols)
        throw input_error("'" + path + "' line " + std::to_string(line_no[0]) + ": header has " +
                          std::to_string(t.header.size()) + " fields, data has " + std::to_string(cols));
    t.values.resize(static_cast<Eigen::Index>(lines.size() - first), static_cast<Eigen::Index>(cols));
    for (size_t r = first; r < lines.size(); ++r) {
        const auto fields = split_line(lines[r], delim);
        if (fields.size() != cols)
            throw input_error("'" + path + "' line " + std::to_string(line_no[r]) + ": expected " +
                              std::to_string(cols) + " fields, found " + std::to_string(fields.size()));
        for (size_t c = 0; c < cols; ++c) {
            double v;
            if (!parse_double(fields[c], v))
                throw input_error("'" + path + "' line " + std::to_string(line_no[r]) + ", column " +
                                  std::to_string(c + 1) + ": cannot parse '" + fields[c] + "' as a number");
            t.values(static_cast<Eigen::Index>(r - first), static_cast<Eigen::Index>(c)) = v;
        }
    }
    return t;
}

Matrix read_matrix(const std::string& path) { return read_table(path).values; }

Vector read_vector(const std::string& path) {
    const Matrix m = read_matrix(path);
    if (m.cols() == 1) return m.col(0);
    if (m.rows() == 1) return m.row(0).transpose();
    throw input_error("'" + path + "' must contain a single row or column");
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_matrix(const std::string& path, const Matrix& m, const std::vector<std::string>& header, char delim) {
    std::ofstream out(path);
    if (!out) throw input_error("cannot write '" + path + "'");
    if (!header.empty()) {
        for (size_t c = 0; c < header.size(); ++c) out << (c ? std::string(1, delim) : "") << header[c];
        out << '\n';
    }
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            if (c) out << delim;
            out << format_double(m(r, c));
        }
        out << '\n';
    }
    if (!out) throw input_error("failed writing '" + path + "'");
}

void write_vector(const std::string& path, const Vector& v, const std::string& header) {
    write_matrix(path, v, header.empty() ? std::vector<std::string>{} : std::vector<std::string>{header});
}

std::string file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw input_error("cannot open '" + path + "'");
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

}  // namespace gbm::io
