#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "crft/info_flow.hpp"

namespace crft {

enum class HeatmapFormat { csv, pgm };

HeatmapFormat parse_heatmap_format(std::string_view text);

/// One line per grid row, cells as shortest-round-trip "%.17g" joined by ",".
std::string render_csv(const Tensor& grid);
/// Plain graymap: "P2", "width height", "255", then one line per row with
/// cell = round(255 * value / max), halves rounded away from zero. An
/// all-zero grid renders as zeros.
std::string render_pgm(const Tensor& grid);

Tensor parse_csv(const std::string& text);

/// Throws std::invalid_argument for non-finite or negative cells and
/// std::runtime_error when the file cannot be written.
void export_heatmap(const InfoGrid& grid, const std::filesystem::path& path, HeatmapFormat format);

}  // namespace crft
