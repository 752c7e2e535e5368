#pragma once

#include <string>
#include <vector>

#include "ftmtl/eval.hpp"

namespace ftmtl {

struct SvgSeries {
  std::string name;
  CurveTable curve;
};

/// Deterministic SVG line plot with whiskers at y +- 2*stderr.
std::string render_curve_svg(const std::vector<SvgSeries>& series, const std::string& x_label,
                             const std::string& y_label);

void write_curve_svg(const std::string& path, const std::vector<SvgSeries>& series, const std::string& x_label,
                     const std::string& y_label);

}  // namespace ftmtl
