#include "abus/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace abus {

std::string format_number(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

namespace {

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '&':
        out += "&amp;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// Range padded by 5% on each side; degenerate ranges widen to +-0.5.
std::pair<double, double> padded(std::vector<double> v, const std::vector<double>& extra = {}) {
  v.insert(v.end(), extra.begin(), extra.end());
  if (v.empty()) return {0.0, 1.0};
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  double a = *lo, b = *hi;
  if (b - a < 1e-12) {
    a -= 0.5;
    b += 0.5;
  }
  const double pad = 0.05 * (b - a);
  return {a - pad, b + pad};
}

}  // namespace

std::string svg_plot(const PlotSeries& s, const PlotOptions& o) {
  constexpr double W = 480, H = 360, L = 60, R = 20, T = 40, B = 50;
  auto [x0, x1] = padded(s.x, o.x_marks);
  auto [y0, y1] = padded(s.y);
  if (o.diagonal) {
    x0 = y0 = std::min(x0, y0);
    x1 = y1 = std::max(x1, y1);
  }
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"360\" viewBox=\"0 0 480 360\">\n";
  out += "<rect width=\"480\" height=\"360\" fill=\"white\"/>\n";
  out += "<text x=\"240\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" + escape(o.title) + "</text>\n";
  out += "<line x1=\"" + fixed(L) + "\" y1=\"" + fixed(H - B) + "\" x2=\"" + fixed(W - R) + "\" y2=\"" + fixed(H - B) +
         "\" stroke=\"black\"/>\n";
  out += "<line x1=\"" + fixed(L) + "\" y1=\"" + fixed(T) + "\" x2=\"" + fixed(L) + "\" y2=\"" + fixed(H - B) +
         "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    char lx[32], ly[32];
    std::snprintf(lx, sizeof lx, "%.3g", xv);
    std::snprintf(ly, sizeof ly, "%.3g", yv);
    out += "<text x=\"" + fixed(px(xv)) + "\" y=\"" + fixed(H - B + 16) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + lx + "</text>\n";
    out += "<text x=\"" + fixed(L - 6) + "\" y=\"" + fixed(py(yv) + 4) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + ly + "</text>\n";
  }
  out += "<text x=\"" + fixed((L + W - R) / 2) + "\" y=\"" + fixed(H - 12) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + escape(o.x_label) + "</text>\n";
  out += "<text x=\"16\" y=\"" + fixed((T + H - B) / 2) + "\" transform=\"rotate(-90 16 " + fixed((T + H - B) / 2) +
         ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + escape(o.y_label) + "</text>\n";
  for (double m : o.x_marks)
    out += "<line x1=\"" + fixed(px(m)) + "\" y1=\"" + fixed(T) + "\" x2=\"" + fixed(px(m)) + "\" y2=\"" +
           fixed(H - B) + "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  if (o.diagonal)
    out += "<line x1=\"" + fixed(px(x0)) + "\" y1=\"" + fixed(py(y0)) + "\" x2=\"" + fixed(px(x1)) + "\" y2=\"" +
           fixed(py(y1)) + "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  if (o.step && !s.x.empty()) {
    std::string pts = fixed(px(s.x.front())) + "," + fixed(py(0.0 < y0 ? y0 : 0.0));
    double prev = 0.0 < y0 ? y0 : 0.0;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      pts += " " + fixed(px(s.x[i])) + "," + fixed(py(prev));
      pts += " " + fixed(px(s.x[i])) + "," + fixed(py(s.y[i]));
      prev = s.y[i];
    }
    out += "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
  } else {
    for (std::size_t i = 0; i < s.x.size(); ++i)
      out += "<circle cx=\"" + fixed(px(s.x[i])) + "\" cy=\"" + fixed(py(s.y[i])) +
             "\" r=\"3\" fill=\"steelblue\" fill-opacity=\"0.8\"><title>" + format_number(s.x[i]) + ", " +
             format_number(s.y[i]) + "</title></circle>\n";
  }
  out += "</svg>\n";
  return out;
}

std::string eval_csv(const std::vector<EvalRecord>& records) {
  std::string out = "case_id,dsc,gt_compactness,predicted_compactness,gt_diameter_mm,gt_volume_mm3\n";
  for (const auto& r : records)
    out += r.case_id + "," + format_number(r.dsc) + "," + format_number(r.gt_compactness) + "," +
           format_number(r.predicted_compactness) + "," + format_number(r.gt_diameter_mm) + "," +
           format_number(r.gt_volume_mm3) + "\n";
  return out;
}

std::string scatter_csv(const std::vector<ScatterRow>& rows, const std::string& x_name, const std::string& y_name) {
  std::string out = "case_id," + x_name + "," + y_name + "\n";
  for (const auto& r : rows) out += r.case_id + "," + format_number(r.x) + "," + format_number(r.y) + "\n";
  return out;
}

std::string cdf_csv(const DiameterCdf& cdf) {
  std::string out = "diameter_mm,cumulative_fraction\n";
  for (std::size_t i = 0; i < cdf.diameters.size(); ++i)
    out += format_number(cdf.diameters[i]) + "," + format_number(cdf.fraction[i]) + "\n";
  return out;
}

}  // namespace abus
