#include "crft/heatmap.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace crft {
namespace {

void check_cells(const Tensor& grid) {
    if (grid.rank() != 2) throw ShapeError("heatmap grid must be 2-D, got " + shape_string(grid.shape()));
    for (double v : grid.values()) {
        if (!std::isfinite(v)) throw std::invalid_argument("heatmap grid has a non-finite cell");
        if (v < 0.0) throw std::invalid_argument("heatmap grid has a negative cell");
    }
}

}  // namespace

HeatmapFormat parse_heatmap_format(std::string_view text) {
    if (text == "csv") return HeatmapFormat::csv;
    if (text == "pgm") return HeatmapFormat::pgm;
    throw std::invalid_argument("unknown heatmap format '" + std::string(text) + "'");
}

std::string render_csv(const Tensor& grid) {
    check_cells(grid);
    std::string out;
    char buf[40];
    for (std::size_t r = 0; r < grid.rows(); ++r) {
        for (std::size_t c = 0; c < grid.cols(); ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", grid(r, c));
            if (c > 0) out += ',';
            out += buf;
        }
        out += '\n';
    }
    return out;
}

std::string render_pgm(const Tensor& grid) {
    check_cells(grid);
    double max = 0.0;
    for (double v : grid.values()) max = std::max(max, v);
    std::string out = "P2\n" + std::to_string(grid.cols()) + " " + std::to_string(grid.rows()) + "\n255\n";
    for (std::size_t r = 0; r < grid.rows(); ++r) {
        for (std::size_t c = 0; c < grid.cols(); ++c) {
            const long px = max > 0.0 ? std::lround(255.0 * grid(r, c) / max) : 0L;
            if (c > 0) out += ' ';
            out += std::to_string(px);
        }
        out += '\n';
    }
    return out;
}

Tensor parse_csv(const std::string& text) {
    std::vector<double> values;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        std::size_t n = 0;
        std::size_t start = 0;
        while (start <= line.size()) {
            const std::size_t end = std::min(line.find(',', start), line.size());
            const std::string cell = line.substr(start, end - start);
            char* stop = nullptr;
            const double v = std::strtod(cell.c_str(), &stop);
            if (cell.empty() || stop != cell.c_str() + cell.size()) {
                throw std::invalid_argument("bad csv cell '" + cell + "' on line " + std::to_string(rows + 1));
            }
            values.push_back(v);
            ++n;
            start = end + 1;
        }
        if (rows > 0 && n != cols) throw std::invalid_argument("ragged csv row " + std::to_string(rows + 1));
        cols = n;
        ++rows;
    }
    return Tensor({rows, cols}, std::move(values));
}

void export_heatmap(const InfoGrid& grid, const std::filesystem::path& path, HeatmapFormat format) {
    const std::string text = format == HeatmapFormat::csv ? render_csv(grid.values) : render_pgm(grid.values);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write heatmap to " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace crft
