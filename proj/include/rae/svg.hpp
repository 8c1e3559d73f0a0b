#pragma once

// Minimal SVG line-chart writer for loss curves and comparisons.

#include <string>
#include <vector>

namespace rae {

struct ChartSeries {
  std::string name;
  std::vector<double> values;  // y per step; x is the index
};

void write_line_chart(const std::string& path, const std::string& title,
                      const std::vector<ChartSeries>& series, const std::string& x_label = "step",
                      const std::string& y_label = "loss");

}  // namespace rae
