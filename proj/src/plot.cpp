// SPDX-License-Identifier: Apache-2.0
#include "assl/plot.hpp"

#include "assl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace assl {

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;
const char *kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                         "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string &s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

void write_line_plot_svg(const std::filesystem::path &path, const std::string &title,
                         const std::string &x_label, const std::string &y_label,
                         const std::vector<PlotSeries> &series) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const PlotSeries &s : series)
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return kTop + ph - (y - y0) / (y1 - y0) * ph; };

  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
      << kHeight << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
      << escape(title) << "</text>\n";
  out << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4, fy = y0 + (y1 - y0) * i / 4;
    out << "<text x=\"" << px(fx) << "\" y=\"" << kTop + ph + 15
        << "\" text-anchor=\"middle\">" << num(fx) << "</text>\n";
    out << "<text x=\"" << kLeft - 5 << "\" y=\"" << py(fy) + 4 << "\" text-anchor=\"end\">"
        << num(fy) << "</text>\n";
    out << "<line x1=\"" << kLeft << "\" x2=\"" << kLeft + pw << "\" y1=\"" << py(fy)
        << "\" y2=\"" << py(fy) << "\" stroke=\"#ddd\"/>\n";
  }
  out << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 12
      << "\" text-anchor=\"middle\">" << escape(x_label) << "</text>\n";
  out << "<text transform=\"translate(16," << kTop + ph / 2
      << ") rotate(-90)\" text-anchor=\"middle\">" << escape(y_label) << "</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const char *color = kColors[s % std::size(kColors)];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    const PlotSeries &ps = series[s];
    for (std::size_t i = 0; i < std::min(ps.x.size(), ps.y.size()); ++i)
      if (std::isfinite(ps.x[i]) && std::isfinite(ps.y[i]))
        out << px(ps.x[i]) << ',' << py(ps.y[i]) << ' ';
    out << "\"/>\n";
    if (ps.x.size() <= 30)
      for (std::size_t i = 0; i < std::min(ps.x.size(), ps.y.size()); ++i)
        if (std::isfinite(ps.x[i]) && std::isfinite(ps.y[i]))
          out << "<circle cx=\"" << px(ps.x[i]) << "\" cy=\"" << py(ps.y[i])
              << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
    const double ly = kTop + 10 + 16.0 * static_cast<double>(s);
    out << "<line x1=\"" << kLeft + pw + 10 << "\" x2=\"" << kLeft + pw + 30 << "\" y1=\"" << ly
        << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << kLeft + pw + 35 << "\" y=\"" << ly + 4 << "\">" << escape(ps.name)
        << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace assl
