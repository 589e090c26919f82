#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "opa/augmentor.hpp"

namespace opa {

struct Curve {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(6) << v;
  return s.str();
}

inline const char* curve_color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c",
                                  "#ff7f0e", "#9467bd", "#8c564b"};
  return palette[i % 6];
}

}  // namespace detail

// Simple line chart. Axes are linear; the data range sets the viewport.
inline std::string render_curves_svg(const std::vector<Curve>& curves,
                                     const std::string& title,
                                     const std::string& x_label,
                                     const std::string& y_label) {
  const double W = 640, H = 400, ml = 60, mr = 20, mt = 40, mb = 50;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const auto& c : curves)
    for (std::size_t i = 0; i < c.x.size(); ++i) {
      if (first) {
        xmin = xmax = c.x[i];
        ymin = ymax = c.y[i];
        first = false;
      }
      xmin = std::min(xmin, c.x[i]);
      xmax = std::max(xmax, c.x[i]);
      ymin = std::min(ymin, c.y[i]);
      ymax = std::max(ymax, c.y[i]);
    }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr); };
  auto py = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
    << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  s << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
    << title << "</text>\n";
  s << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr
    << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
    << H - mb << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = xmin + (xmax - xmin) * k / 4.0;
    const double yv = ymin + (ymax - ymin) * k / 4.0;
    s << "<text x=\"" << px(xv) << "\" y=\"" << H - mb + 18
      << "\" text-anchor=\"middle\" font-size=\"11\">" << detail::fmt(xv)
      << "</text>\n";
    s << "<text x=\"" << ml - 8 << "\" y=\"" << py(yv) + 4
      << "\" text-anchor=\"end\" font-size=\"11\">" << detail::fmt(yv)
      << "</text>\n";
  }
  s << "<text x=\"" << W / 2 << "\" y=\"" << H - 12
    << "\" text-anchor=\"middle\" font-size=\"13\">" << x_label << "</text>\n";
  s << "<text x=\"16\" y=\"" << H / 2
    << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 16 "
    << H / 2 << ")\">" << y_label << "</text>\n";
  for (std::size_t ci = 0; ci < curves.size(); ++ci) {
    const auto& c = curves[ci];
    s << "<polyline fill=\"none\" stroke=\"" << detail::curve_color(ci)
      << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < c.x.size(); ++i)
      s << px(c.x[i]) << "," << py(c.y[i]) << " ";
    s << "\"/>\n";
    s << "<text x=\"" << W - mr - 6 << "\" y=\"" << mt + 16 * (ci + 1)
      << "\" text-anchor=\"end\" font-size=\"12\" fill=\""
      << detail::curve_color(ci) << "\">" << c.label << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

// One experiment arm observed under several seeds.
struct RunGroup {
  std::string name;
  std::vector<double> map_25;
  std::vector<double> map_50;
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0, 0};
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  return {mean, std::sqrt(var)};
}

inline std::string comparison_table(const std::vector<RunGroup>& groups) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "| method | seeds | mAP@0.25 | mAP@0.5 |\n";
  s << "|---|---|---|---|\n";
  for (const auto& g : groups) {
    const auto [m25, s25] = mean_std(g.map_25);
    const auto [m50, s50] = mean_std(g.map_50);
    s << "| " << g.name << " | " << g.map_25.size() << " | " << m25 << " ± "
      << s25 << " | " << m50 << " ± " << s50 << " |\n";
  }
  return s.str();
}

// Bar chart of displacement-ratio frequencies per axis, bins of 0.5% of the
// box size, showing only ratios above 1%.
inline std::string render_histogram_svg(const DisplacementHistogram& h,
                                        const std::string& title) {
  const double W = 640, H = 320, ml = 60, mr = 20, mt = 40, mb = 50;
  const std::size_t nbins = DisplacementHistogram::kNumBins;
  long total = 0;
  for (int axis = 0; axis < 3; ++axis)
    for (std::size_t b = 0; b < nbins; ++b) total += h.counts[axis][b];
  double ymax = 1e-12;
  std::array<std::array<double, DisplacementHistogram::kNumBins>, 3> freq{};
  for (int axis = 0; axis < 3; ++axis)
    for (std::size_t b = 0; b < nbins; ++b) {
      freq[axis][b] = total ? static_cast<double>(h.counts[axis][b]) / total : 0;
      ymax = std::max(ymax, freq[axis][b]);
    }

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
    << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  s << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
    << title << "</text>\n";
  s << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr
    << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
    << H - mb << "\" stroke=\"black\"/>\n";
  const double plot_w = W - ml - mr;
  const double bin_w = plot_w / static_cast<double>(nbins);
  const char* axis_names[3] = {"x", "y", "z"};
  for (int axis = 0; axis < 3; ++axis) {
    for (std::size_t b = 0; b < nbins; ++b) {
      if (h.counts[axis][b] == 0) continue;
      const double ratio_lo = b * DisplacementHistogram::kBinWidth;
      const double bw = bin_w / 3.0 - 1.0;
      const double x = ml + b * bin_w + axis * bin_w / 3.0;
      const double bh = freq[axis][b] / ymax * (H - mt - mb);
      s << "<rect x=\"" << x << "\" y=\"" << H - mb - bh << "\" width=\"" << bw
        << "\" height=\"" << bh << "\" fill=\"" << detail::curve_color(axis)
        << "\" data-axis=\"" << axis_names[axis] << "\" data-ratio-lo=\""
        << detail::fmt(ratio_lo) << "\" data-count=\"" << h.counts[axis][b]
        << "\"/>\n";
    }
    s << "<text x=\"" << W - mr - 6 << "\" y=\"" << mt + 16 * (axis + 1)
      << "\" text-anchor=\"end\" font-size=\"12\" fill=\""
      << detail::curve_color(axis) << "\">axis " << axis_names[axis]
      << "</text>\n";
  }
  for (std::size_t b = 0; b <= nbins; b += 4) {
    const double ratio = b * DisplacementHistogram::kBinWidth;
    s << "<text x=\"" << ml + b * bin_w << "\" y=\"" << H - mb + 18
      << "\" text-anchor=\"middle\" font-size=\"11\">"
      << detail::fmt(ratio * 100) << "%</text>\n";
  }
  s << "<text x=\"" << W / 2 << "\" y=\"" << H - 12
    << "\" text-anchor=\"middle\" font-size=\"13\">displacement / box size"
    << "</text>\n";
  s << "</svg>\n";
  return s.str();
}

inline void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << body;
}

}  // namespace opa
