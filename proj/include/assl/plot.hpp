// SPDX-License-Identifier: Apache-2.0
/// @file plot.hpp
/// Minimal SVG line charts for metrics already written as CSV.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace assl {

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Writes a line chart with axes, tick labels and a legend. Non-finite points
/// are skipped.
void write_line_plot_svg(const std::filesystem::path &path, const std::string &title,
                         const std::string &x_label, const std::string &y_label,
                         const std::vector<PlotSeries> &series);

}  // namespace assl
