#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

namespace theorylab {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct Chart {
  std::string name;  // file stem suffix
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool log_y = false;
  std::vector<Series> series;

  /// True when at least one point can be drawn.
  bool drawable() const {
    for (const auto& s : series) {
      for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
        if (usable(s.x[i], log_x) && usable(s.y[i], log_y)) return true;
      }
    }
    return false;
  }

  static bool usable(double v, bool log_axis) { return std::isfinite(v) && (!log_axis || v > 0.0); }
};

namespace detail {

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string svg_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Axis {
  double lo = 0.0;
  double hi = 1.0;
  bool log = false;

  double map(double v) const {
    const double t = log ? std::log10(v) : v;
    return hi > lo ? (t - lo) / (hi - lo) : 0.5;
  }
};

inline Axis make_axis(const std::vector<double>& values, bool log) {
  Axis a;
  a.log = log;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : values) {
    const double t = log ? std::log10(v) : v;
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  if (log) {
    lo = std::floor(lo);
    hi = std::ceil(hi);
  } else {
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
  }
  a.lo = lo;
  a.hi = hi;
  return a;
}

inline std::vector<double> axis_ticks(const Axis& a) {
  std::vector<double> ticks;
  if (a.log) {
    const double span = a.hi - a.lo;
    const double step = std::max(1.0, std::ceil(span / 8.0));
    for (double e = a.lo; e <= a.hi + 1e-9; e += step) ticks.push_back(std::pow(10.0, e));
  } else {
    for (int i = 0; i <= 5; ++i) ticks.push_back(a.lo + (a.hi - a.lo) * i / 5.0);
  }
  return ticks;
}

}  // namespace detail

/// Line chart with markers; nonpositive values are dropped on log axes.
inline std::string render_svg(const Chart& chart) {
  constexpr double width = 640, height = 420, left = 80, right = 170, top = 40, bottom = 60;
  const double pw = width - left - right, ph = height - top - bottom;
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

  std::vector<double> xs, ys;
  for (const auto& s : chart.series) {
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (Chart::usable(s.x[i], chart.log_x) && Chart::usable(s.y[i], chart.log_y)) {
        xs.push_back(s.x[i]);
        ys.push_back(s.y[i]);
      }
    }
  }
  const auto ax = detail::make_axis(xs, chart.log_x);
  const auto ay = detail::make_axis(ys, chart.log_y);
  auto px = [&](double v) { return left + ax.map(v) * pw; };
  auto py = [&](double v) { return top + (1.0 - ay.map(v)) * ph; };
  using detail::svg_num;

  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" viewBox=\"0 0 640 420\" "
         "font-family=\"sans-serif\" font-size=\"11\">\n";
  out += "<rect width=\"640\" height=\"420\" fill=\"white\"/>\n";
  out += "<text x=\"" + svg_num(left + pw / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" +
         detail::svg_escape(chart.title) + "</text>\n";
  out += "<rect x=\"" + svg_num(left) + "\" y=\"" + svg_num(top) + "\" width=\"" + svg_num(pw) + "\" height=\"" +
         svg_num(ph) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (double t : detail::axis_ticks(ax)) {
    const double x = px(t);
    out += "<line x1=\"" + svg_num(x) + "\" y1=\"" + svg_num(top + ph) + "\" x2=\"" + svg_num(x) + "\" y2=\"" +
           svg_num(top + ph + 5) + "\" stroke=\"black\"/>\n";
    out += "<text x=\"" + svg_num(x) + "\" y=\"" + svg_num(top + ph + 18) + "\" text-anchor=\"middle\">" +
           detail::svg_tick(t) + "</text>\n";
  }
  for (double t : detail::axis_ticks(ay)) {
    const double y = py(t);
    out += "<line x1=\"" + svg_num(left - 5) + "\" y1=\"" + svg_num(y) + "\" x2=\"" + svg_num(left) + "\" y2=\"" +
           svg_num(y) + "\" stroke=\"black\"/>\n";
    out += "<text x=\"" + svg_num(left - 8) + "\" y=\"" + svg_num(y + 4) + "\" text-anchor=\"end\">" +
           detail::svg_tick(t) + "</text>\n";
  }
  out += "<text x=\"" + svg_num(left + pw / 2) + "\" y=\"" + svg_num(height - 15) + "\" text-anchor=\"middle\">" +
         detail::svg_escape(chart.x_label + (chart.log_x ? " (log)" : "")) + "</text>\n";
  out += "<text transform=\"translate(18," + svg_num(top + ph / 2) + ") rotate(-90)\" text-anchor=\"middle\">" +
         detail::svg_escape(chart.y_label + (chart.log_y ? " (log)" : "")) + "</text>\n";

  for (std::size_t k = 0; k < chart.series.size(); ++k) {
    const auto& s = chart.series[k];
    const std::string color = palette[k % 8];
    std::string points;
    std::string marks;
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!Chart::usable(s.x[i], chart.log_x) || !Chart::usable(s.y[i], chart.log_y)) continue;
      const std::string x = svg_num(px(s.x[i])), y = svg_num(py(s.y[i]));
      points += (points.empty() ? "" : " ") + x + "," + y;
      marks += "<circle cx=\"" + x + "\" cy=\"" + y + "\" r=\"2.5\" fill=\"" + color + "\"/>\n";
    }
    if (!points.empty()) {
      out += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\" points=\"" + points + "\"/>\n";
      out += marks;
    }
    const double ly = top + 10 + 16.0 * static_cast<double>(k);
    out += "<line x1=\"" + svg_num(left + pw + 10) + "\" y1=\"" + svg_num(ly) + "\" x2=\"" + svg_num(left + pw + 28) +
           "\" y2=\"" + svg_num(ly) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    out += "<text x=\"" + svg_num(left + pw + 32) + "\" y=\"" + svg_num(ly + 4) + "\">" + detail::svg_escape(s.label) +
           "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace theorylab
