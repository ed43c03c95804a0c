#pragma once

#include <string>
#include <vector>

#include "abus/metrics.hpp"

namespace abus {

struct PlotSeries {
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool step = false;          // draw as a staircase (empirical CDF)
  bool diagonal = false;      // add the y = x reference line
  std::vector<double> x_marks;  // dashed vertical guides
};

// Standalone SVG with every data point embedded as a <circle> (scatter) or
// polyline vertex (step).
std::string svg_plot(const PlotSeries& series, const PlotOptions& options);

std::string eval_csv(const std::vector<EvalRecord>& records);
std::string scatter_csv(const std::vector<ScatterRow>& rows, const std::string& x_name, const std::string& y_name);
std::string cdf_csv(const DiameterCdf& cdf);

// Fixed "%.9g" formatting so reruns produce identical bytes.
std::string format_number(double v);

}  // namespace abus
