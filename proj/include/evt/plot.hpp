#pragma once

#include <string>
#include <vector>

#include "evt/csv.hpp"

namespace evt {

struct PlotOptions {
  std::string x = "sparsity";
  std::string y = "miou";
  /// Columns whose joined values name a series; missing columns are skipped.
  std::vector<std::string> series{"model", "granularity", "mode"};
  int width = 640;
  int height = 400;
};

/// Standalone SVG line chart with one polyline per series, points in x
/// order. Throws DataError for a table without data rows.
std::string render_svg(const CsvTable& table, const PlotOptions& options = {});

}  // namespace evt
