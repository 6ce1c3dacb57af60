#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

namespace monelab {

// Shortest exact decimal rendering of a double ('.' decimal point, no locale).
std::string fmt_num(double v);
std::string fmt_num(int64_t v);

// CSV emitter: '.' decimals, '\n' line endings, header always present, so
// identical runs produce byte-identical files.
class CsvFile {
public:
    CsvFile(const std::string& path, const std::vector<std::string>& header);
    void row(const std::vector<std::string>& cells);
    ~CsvFile();

private:
    std::ofstream out_;
    size_t width_;
};

void write_json_file(const std::string& path, const nlohmann::json& j);

}  // namespace monelab
