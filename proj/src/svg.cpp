#include "ftmtl/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ftmtl/errors.hpp"

namespace ftmtl {

namespace {

constexpr double kWidth = 640, kHeight = 480;
constexpr double kLeft = 64, kRight = 24, kTop = 24, kBottom = 56;

const char* kPalette[] = {"#1f6fb4", "#d1495b", "#3a7d44", "#8d5a97", "#c77d2e", "#4f6d7a"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

}  // namespace

std::string render_curve_svg(const std::vector<SvgSeries>& series, const std::string& x_label,
                             const std::string& y_label) {
  double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
  bool first = true;
  for (const auto& s : series)
    for (const auto& p : s.curve.points) {
      if (first) {
        x_min = x_max = p.x;
        y_min = std::min(0.0, p.y - 2 * p.err);
        y_max = std::max(1.0, p.y + 2 * p.err);
        first = false;
      }
      x_min = std::min(x_min, p.x);
      x_max = std::max(x_max, p.x);
      y_min = std::min(y_min, p.y - 2 * p.err);
      y_max = std::max(y_max, p.y + 2 * p.err);
    }
  if (x_max <= x_min) x_max = x_min + 1;
  if (y_max <= y_min) y_max = y_min + 1;

  const double plot_w = kWidth - kLeft - kRight, plot_h = kHeight - kTop - kBottom;
  auto sx = [&](double x) { return kLeft + (x - x_min) / (x_max - x_min) * plot_w; };
  auto sy = [&](double y) { return kTop + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\">\n";
  svg << "<rect width=\"" << kWidth << "\" height=\"" << kHeight << "\" fill=\"white\"/>\n";

  // axes and ticks
  svg << "<g stroke=\"#444\" stroke-width=\"1\" fill=\"none\">\n";
  svg << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(kTop) << "\" x2=\"" << num(kLeft) << "\" y2=\""
      << num(kHeight - kBottom) << "\"/>\n";
  svg << "<line x1=\"" << num(kLeft) << "\" y1=\"" << num(kHeight - kBottom) << "\" x2=\"" << num(kWidth - kRight)
      << "\" y2=\"" << num(kHeight - kBottom) << "\"/>\n";
  svg << "</g>\n";
  svg << "<g font-family=\"sans-serif\" font-size=\"12\" fill=\"#222\">\n";
  for (int i = 0; i <= 5; ++i) {
    const double fx = x_min + (x_max - x_min) * i / 5.0;
    const double fy = y_min + (y_max - y_min) * i / 5.0;
    svg << "<line x1=\"" << num(sx(fx)) << "\" y1=\"" << num(kHeight - kBottom) << "\" x2=\"" << num(sx(fx))
        << "\" y2=\"" << num(kHeight - kBottom + 5) << "\" stroke=\"#444\"/>\n";
    svg << "<text x=\"" << num(sx(fx)) << "\" y=\"" << num(kHeight - kBottom + 20)
        << "\" text-anchor=\"middle\">" << tick(fx) << "</text>\n";
    svg << "<line x1=\"" << num(kLeft - 5) << "\" y1=\"" << num(sy(fy)) << "\" x2=\"" << num(kLeft) << "\" y2=\""
        << num(sy(fy)) << "\" stroke=\"#444\"/>\n";
    svg << "<text x=\"" << num(kLeft - 9) << "\" y=\"" << num(sy(fy) + 4) << "\" text-anchor=\"end\">" << tick(fy)
        << "</text>\n";
  }
  svg << "<text x=\"" << num(kLeft + plot_w / 2) << "\" y=\"" << num(kHeight - 12)
      << "\" text-anchor=\"middle\">" << x_label << "</text>\n";
  svg << "<text x=\"16\" y=\"" << num(kTop + plot_h / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << num(kTop + plot_h / 2) << ")\">" << y_label << "</text>\n";
  svg << "</g>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const char* color = kPalette[si % (sizeof kPalette / sizeof kPalette[0])];
    const auto& pts = series[si].curve.points;
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& p : pts) svg << num(sx(p.x)) << "," << num(sy(p.y)) << " ";
    svg << "\"/>\n";
    // whiskers: vertical line at +-2*stderr with small caps
    for (const auto& p : pts) {
      if (p.err <= 0) continue;
      const double x = sx(p.x), y_lo = sy(p.y - 2 * p.err), y_hi = sy(p.y + 2 * p.err);
      svg << "<line x1=\"" << num(x) << "\" y1=\"" << num(y_lo) << "\" x2=\"" << num(x) << "\" y2=\""
          << num(y_hi) << "\" stroke=\"" << color << "\" stroke-width=\"1\" class=\"whisker\"/>\n";
      svg << "<line x1=\"" << num(x - 3) << "\" y1=\"" << num(y_lo) << "\" x2=\"" << num(x + 3) << "\" y2=\""
          << num(y_lo) << "\" stroke=\"" << color << "\" stroke-width=\"1\"/>\n";
      svg << "<line x1=\"" << num(x - 3) << "\" y1=\"" << num(y_hi) << "\" x2=\"" << num(x + 3) << "\" y2=\""
          << num(y_hi) << "\" stroke=\"" << color << "\" stroke-width=\"1\"/>\n";
    }
    svg << "<g font-family=\"sans-serif\" font-size=\"12\">"
        << "<rect x=\"" << num(kLeft + 10) << "\" y=\"" << num(kTop + 8 + 18 * static_cast<double>(si))
        << "\" width=\"12\" height=\"3\" fill=\"" << color << "\"/>"
        << "<text x=\"" << num(kLeft + 28) << "\" y=\"" << num(kTop + 14 + 18 * static_cast<double>(si))
        << "\">" << series[si].name << "</text></g>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void write_curve_svg(const std::string& path, const std::vector<SvgSeries>& series, const std::string& x_label,
                     const std::string& y_label) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("svg: cannot open for writing: " + path);
  out << render_curve_svg(series, x_label, y_label);
  if (!out) throw IoError("svg: write failed: " + path);
}

}  // namespace ftmtl
