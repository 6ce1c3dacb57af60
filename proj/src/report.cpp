#include "monelab/report.hpp"

#include <cmath>
#include <cstdio>

#include "monelab/errors.hpp"

namespace monelab {

std::string fmt_num(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    // shortest representation that round-trips
    char buf[64];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        double back = 0;
        std::sscanf(buf, "%lf", &back);
        if (back == v) return buf;
    }
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_num(int64_t v) { return std::to_string(v); }

CsvFile::CsvFile(const std::string& path, const std::vector<std::string>& header)
    : out_(path, std::ios::binary | std::ios::trunc), width_(header.size()) {
    if (!out_) throw InputError("cannot open '" + path + "' for writing");
    for (size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << "\n";
}

void CsvFile::row(const std::vector<std::string>& cells) {
    if (cells.size() != width_) throw InputError("csv row width mismatch");
    for (size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << "\n";
}

CsvFile::~CsvFile() = default;

void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    out << j.dump(2) << "\n";
}

}  // namespace monelab
