#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace ftmtl {

/// Axis-aligned rectangle in center-size form (w, h, cx, cy), pixel units,
/// origin top-left, y down. Converts losslessly to corner form.
struct Box {
  double w = 0, h = 0, cx = 0, cy = 0;

  double x1() const { return cx - 0.5 * w; }
  double y1() const { return cy - 0.5 * h; }
  double x2() const { return cx + 0.5 * w; }
  double y2() const { return cy + 0.5 * h; }
  double area() const { return w * h; }

  static Box from_corners(double x1, double y1, double x2, double y2) {
    return Box{x2 - x1, y2 - y1, 0.5 * (x1 + x2), 0.5 * (y1 + y2)};
  }

  bool valid() const { return w > 0 && h > 0; }

  Box clipped(double img_w, double img_h) const {
    const double cx1 = std::clamp(x1(), 0.0, img_w);
    const double cy1 = std::clamp(y1(), 0.0, img_h);
    const double cx2 = std::clamp(x2(), 0.0, img_w);
    const double cy2 = std::clamp(y2(), 0.0, img_h);
    return from_corners(cx1, cy1, cx2, cy2);
  }

  bool operator==(const Box& o) const { return w == o.w && h == o.h && cx == o.cx && cy == o.cy; }
};

inline double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("iou: boxes must have positive dims");
  const double ix = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double iy = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = ix * iy;
  if (inter <= 0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

/// Anchor-relative box parameterization:
/// (log(w/aw), log(h/ah), (cx-ax)/aw, (cy-ay)/ah).
inline std::array<double, 4> box_param(const Box& box, const Box& anchor) {
  if (!box.valid() || !anchor.valid())
    throw std::invalid_argument("box_param: non-positive width/height");
  return {std::log(box.w / anchor.w), std::log(box.h / anchor.h), (box.cx - anchor.cx) / anchor.w,
          (box.cy - anchor.cy) / anchor.h};
}

/// Inverse of box_param; exponential decode keeps dims positive. Deltas are
/// clamped to +-10 so an untrained regressor cannot produce non-finite boxes.
inline Box box_decode(const std::array<double, 4>& deltas, const Box& anchor) {
  if (!anchor.valid()) throw std::invalid_argument("box_decode: degenerate anchor");
  const auto cl = [](double v) { return std::clamp(v, -10.0, 10.0); };
  return Box{anchor.w * std::exp(cl(deltas[0])), anchor.h * std::exp(cl(deltas[1])),
             anchor.cx + deltas[2] * anchor.w, anchor.cy + deltas[3] * anchor.h};
}

/// Greedy class-agnostic NMS: keeps the highest-scoring box of every
/// overlapping group (IoU >= threshold). Returns kept indices in score order,
/// index as tiebreak.
inline std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                            double iou_threshold) {
  if (boxes.size() != scores.size()) throw std::invalid_argument("nms: size mismatch");
  std::vector<int> order(boxes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  std::vector<int> kept;
  std::vector<bool> dead(boxes.size(), false);
  for (int idx : order) {
    if (dead[static_cast<std::size_t>(idx)]) continue;
    kept.push_back(idx);
    for (int j : order) {
      if (j == idx || dead[static_cast<std::size_t>(j)]) continue;
      if (iou(boxes[static_cast<std::size_t>(idx)], boxes[static_cast<std::size_t>(j)]) >= iou_threshold)
        dead[static_cast<std::size_t>(j)] = true;
    }
  }
  return kept;
}

}  // namespace ftmtl
