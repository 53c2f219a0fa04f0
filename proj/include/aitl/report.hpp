#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "aitl/fsio.hpp"

namespace aitl {

/// Deterministic CSV assembly; rates printed with fixed precision so
/// byte-identical reruns stay byte-identical.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  static std::string cell(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
  }

  std::string render() const {
    std::string out;
    for (size_t i = 0; i < header.size(); ++i) out += (i ? "," : "") + header[i];
    out += "\n";
    for (const auto& row : rows) {
      for (size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + row[i];
      out += "\n";
    }
    return out;
  }
  void write(const std::string& path) const { atomic_write_file(path, render()); }
};

namespace svg {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

/// Minimal bar chart; labels along x, one bar per value.
inline std::string bar_chart(const std::string& title, const std::vector<std::string>& labels,
                             const std::vector<double>& values) {
  const double w = 900, h = 420, ml = 60, mb = 110, mt = 40;
  double vmax = 1e-9;
  for (double v : values) vmax = std::max(vmax, v);
  const double bar_w = (w - ml - 20) / std::max<size_t>(1, values.size());
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" + num(h) + "\">\n";
  s += "<text x=\"" + num(w / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"16\">" + title + "</text>\n";
  s += "<line x1=\"" + num(ml) + "\" y1=\"" + num(h - mb) + "\" x2=\"" + num(w - 10) + "\" y2=\"" + num(h - mb) +
       "\" stroke=\"black\"/>\n";
  for (size_t i = 0; i < values.size(); ++i) {
    double bh = (h - mb - mt) * values[i] / vmax;
    double x = ml + static_cast<double>(i) * bar_w;
    s += "<rect x=\"" + num(x + 2) + "\" y=\"" + num(h - mb - bh) + "\" width=\"" + num(bar_w - 4) + "\" height=\"" +
         num(bh) + "\" fill=\"#4477aa\"/>\n";
    s += "<text x=\"" + num(x + bar_w / 2) + "\" y=\"" + num(h - mb + 12) + "\" font-size=\"11\" text-anchor=\"end\" " +
         "transform=\"rotate(-45 " + num(x + bar_w / 2) + " " + num(h - mb + 12) + ")\">" + labels[i] + "</text>\n";
    s += "<text x=\"" + num(x + bar_w / 2) + "\" y=\"" + num(h - mb - bh - 4) +
         "\" font-size=\"10\" text-anchor=\"middle\">" + num(values[i]) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

/// Minimal multi-series line chart over a shared x grid.
inline std::string line_chart(const std::string& title, const std::vector<double>& xs,
                              const std::vector<std::string>& series_names,
                              const std::vector<std::vector<double>>& series) {
  const double w = 760, h = 460, ml = 60, mb = 50, mt = 40, mr = 160;
  double xmin = xs.front(), xmax = xs.back(), ymax = 1e-9;
  for (const auto& s : series)
    for (double v : s) ymax = std::max(ymax, v);
  ymax = std::max(ymax, 0.05);
  auto X = [&](double x) { return ml + (w - ml - mr) * (x - xmin) / std::max(1e-9, xmax - xmin); };
  auto Y = [&](double y) { return h - mb - (h - mb - mt) * y / ymax; };
  static const char* colors[] = {"#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377"};
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" + num(h) + "\">\n";
  s += "<text x=\"" + num(w / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"16\">" + title + "</text>\n";
  s += "<line x1=\"" + num(ml) + "\" y1=\"" + num(h - mb) + "\" x2=\"" + num(w - mr) + "\" y2=\"" + num(h - mb) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(ml) + "\" y1=\"" + num(h - mb) + "\" x2=\"" + num(ml) + "\" y2=\"" + num(mt) +
       "\" stroke=\"black\"/>\n";
  for (double x : xs)
    s += "<text x=\"" + num(X(x)) + "\" y=\"" + num(h - mb + 16) + "\" font-size=\"11\" text-anchor=\"middle\">" +
         num(x) + "</text>\n";
  for (size_t k = 0; k < series.size(); ++k) {
    std::string pts;
    for (size_t i = 0; i < xs.size(); ++i)
      pts += num(X(xs[i])) + "," + num(Y(series[k][i])) + " ";
    const char* col = colors[k % 6];
    s += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + col + "\" stroke-width=\"2\"/>\n";
    s += "<text x=\"" + num(w - mr + 10) + "\" y=\"" + num(mt + 18.0 * static_cast<double>(k)) +
         "\" font-size=\"12\" fill=\"" + col + "\">" + series_names[k] + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace svg
}  // namespace aitl
