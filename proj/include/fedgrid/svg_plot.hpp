#pragma once

// Tiny SVG line/bar chart writer for quick looks at CSV outputs. The CSVs
// are the data of record; these images are convenience only.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

namespace fedgrid::svg {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct Bars {
  std::string label;
  std::vector<double> edges;   // n + 1 bin edges
  std::vector<double> counts;  // n
};

namespace detail {

inline const char* color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  return palette[i % 6];
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double W = 640, H = 400, L = 70, R = 20, T = 40, B = 50;
  double px(double x) const { return L + (x - x0) / (x1 - x0) * (W - L - R); }
  double py(double y) const { return H - B - (y - y0) / (y1 - y0) * (H - T - B); }
};

inline Frame frame(double x0, double x1, double y0, double y1) {
  if (!(x1 > x0)) x1 = x0 + 1;
  if (!(y1 > y0)) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const double pad = 0.05 * (y1 - y0);
  return {x0, x1, y0 - pad, y1 + pad};
}

inline void header(std::ofstream& os, const Frame& f, const std::string& title, const std::string& xl,
                   const std::string& yl) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << Frame::W << "\" height=\"" << Frame::H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << Frame::W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n"
     << "<line x1=\"" << Frame::L << "\" y1=\"" << Frame::H - Frame::B << "\" x2=\"" << Frame::W - Frame::R
     << "\" y2=\"" << Frame::H - Frame::B << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << Frame::L << "\" y1=\"" << Frame::T << "\" x2=\"" << Frame::L << "\" y2=\""
     << Frame::H - Frame::B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = f.x0 + (f.x1 - f.x0) * k / 4.0, yv = f.y0 + (f.y1 - f.y0) * k / 4.0;
    os << "<text x=\"" << f.px(xv) << "\" y=\"" << Frame::H - Frame::B + 16 << "\" text-anchor=\"middle\">"
       << num(xv) << "</text>\n"
       << "<text x=\"" << Frame::L - 6 << "\" y=\"" << f.py(yv) + 4 << "\" text-anchor=\"end\">" << num(yv)
       << "</text>\n";
  }
  os << "<text x=\"" << Frame::W / 2 << "\" y=\"" << Frame::H - 10 << "\" text-anchor=\"middle\">" << xl
     << "</text>\n"
     << "<text x=\"16\" y=\"" << Frame::H / 2 << "\" transform=\"rotate(-90 16 " << Frame::H / 2
     << ")\" text-anchor=\"middle\">" << yl << "</text>\n";
}

inline void legend(std::ofstream& os, std::size_t i, const std::string& label) {
  const double y = Frame::T + 14 * static_cast<double>(i);
  os << "<rect x=\"" << Frame::W - 150 << "\" y=\"" << y - 9 << "\" width=\"10\" height=\"10\" fill=\"" << color(i)
     << "\"/><text x=\"" << Frame::W - 135 << "\" y=\"" << y << "\">" << label << "</text>\n";
}

}  // namespace detail

inline bool write_lines(const std::string& path, const std::string& title, const std::string& xlabel,
                        const std::string& ylabel, const std::vector<Series>& series) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) return false;
  std::ofstream os(path);
  if (!os) return false;
  const auto f = detail::frame(x0, x1, y0, y1);
  detail::header(os, f, title, xlabel, ylabel);
  for (std::size_t k = 0; k < series.size(); ++k) {
    os << "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" << detail::color(k) << "\" points=\"";
    for (std::size_t i = 0; i < series[k].x.size() && i < series[k].y.size(); ++i)
      if (std::isfinite(series[k].y[i])) os << f.px(series[k].x[i]) << ',' << f.py(series[k].y[i]) << ' ';
    os << "\"/>\n";
    detail::legend(os, k, series[k].label);
  }
  os << "</svg>\n";
  return static_cast<bool>(os);
}

inline bool write_histogram(const std::string& path, const std::string& title, const std::string& xlabel,
                            const std::vector<Bars>& groups) {
  if (groups.empty() || groups.front().edges.size() < 2) return false;
  double y1 = 1;
  for (const auto& g : groups)
    for (double c : g.counts) y1 = std::max(y1, c);
  std::ofstream os(path);
  if (!os) return false;
  const auto f = detail::frame(groups.front().edges.front(), groups.front().edges.back(), 0, y1);
  detail::header(os, f, title, xlabel, "count");
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const auto& g = groups[k];
    for (std::size_t i = 0; i < g.counts.size(); ++i) {
      const double xa = f.px(g.edges[i]), xb = f.px(g.edges[i + 1]), top = f.py(g.counts[i]);
      os << "<rect x=\"" << xa << "\" y=\"" << top << "\" width=\"" << std::max(0.0, xb - xa) << "\" height=\""
         << f.py(0) - top << "\" fill=\"" << detail::color(k) << "\" fill-opacity=\"0.5\"/>\n";
    }
    detail::legend(os, k, g.label);
  }
  os << "</svg>\n";
  return static_cast<bool>(os);
}

}  // namespace fedgrid::svg
