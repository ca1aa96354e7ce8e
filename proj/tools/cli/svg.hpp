#pragma once

#include <string>
#include <vector>

namespace probpnp::cli {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;  // non-finite values break the line
};

/// Static SVG line chart with axes, ticks and a legend.
std::string line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                      const std::vector<Series>& series, bool log_y = false);

}  // namespace probpnp::cli
