#include "ftmtl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

namespace ftmtl {

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels, CurveTable* curve) {
  if (scores.size() != labels.size()) throw std::invalid_argument("roc_auc: size mismatch");
  long pos = 0, neg = 0;
  for (int l : labels) (l ? pos : neg)++;
  if (pos == 0 || neg == 0)
    throw std::invalid_argument("roc_auc: both classes must be present (got " + std::to_string(pos) +
                                " positives, " + std::to_string(neg) + " negatives)");

  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  CurveTable table;
  table.x_label = "fpr";
  table.y_label = "tpr";
  table.points.push_back({0, 0, 0});

  double auc = 0;
  long tp = 0, fp = 0, prev_tp = 0, prev_fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    // advance over one distinct-score group so ties form one diagonal segment
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      (labels[order[i]] ? tp : fp)++;
      ++i;
    }
    const double x0 = static_cast<double>(prev_fp) / neg, x1 = static_cast<double>(fp) / neg;
    const double y0 = static_cast<double>(prev_tp) / pos, y1 = static_cast<double>(tp) / pos;
    auc += (x1 - x0) * (y0 + y1) / 2.0;
    if (x1 > x0 || y1 > y0) table.points.push_back({x1, y1, 0});
    prev_tp = tp;
    prev_fp = fp;
  }
  if (curve) {
    // keep x strictly increasing: collapse vertical runs to their top point
    CurveTable clean;
    clean.x_label = table.x_label;
    clean.y_label = table.y_label;
    for (const auto& p : table.points) {
      if (!clean.points.empty() && clean.points.back().x == p.x)
        clean.points.back().y = std::max(clean.points.back().y, p.y);
      else
        clean.points.push_back(p);
    }
    *curve = std::move(clean);
  }
  return auc;
}

std::vector<MatchPair> greedy_match(const std::vector<ScoredBox>& detections, const std::vector<Box>& gts,
                                    double iou_threshold, bool strict_greater) {
  std::vector<std::size_t> order(detections.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });

  std::vector<bool> gt_taken(gts.size(), false);
  std::vector<MatchPair> out;
  for (std::size_t d : order) {
    int best_gt = -1;
    double best_iou = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gt_taken[g]) continue;
      const double v = iou(detections[d].box, gts[g]);
      const bool passes = strict_greater ? v > iou_threshold : v >= iou_threshold;
      if (passes && v > best_iou) {
        best_iou = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      gt_taken[static_cast<std::size_t>(best_gt)] = true;
      out.push_back({static_cast<int>(d), best_gt, best_iou});
    }
  }
  return out;
}

CurveTable froc(const std::vector<std::vector<ScoredBox>>& detections_per_image,
                const std::vector<std::vector<Box>>& gts_per_image, double iou_threshold) {
  if (detections_per_image.size() != gts_per_image.size())
    throw std::invalid_argument("froc: image counts disagree");
  long total_gts = 0;
  for (const auto& g : gts_per_image) total_gts += static_cast<long>(g.size());
  if (total_gts == 0) throw std::invalid_argument("froc: no ground truths");
  const auto n_images = static_cast<double>(detections_per_image.size());

  std::set<double, std::greater<double>> thresholds;
  for (const auto& dets : detections_per_image)
    for (const auto& d : dets) thresholds.insert(d.score);

  CurveTable table;
  table.x_label = "fpi";
  table.y_label = "tpr";
  table.points.push_back({0, 0, 0});  // above every score: no detections
  for (double thr : thresholds) {
    long matched = 0, false_pos = 0;
    for (std::size_t img = 0; img < detections_per_image.size(); ++img) {
      std::vector<ScoredBox> active;
      for (const auto& d : detections_per_image[img])
        if (d.score >= thr) active.push_back(d);
      const auto pairs = greedy_match(active, gts_per_image[img], iou_threshold, /*strict_greater=*/true);
      matched += static_cast<long>(pairs.size());
      false_pos += static_cast<long>(active.size()) - static_cast<long>(pairs.size());
    }
    const double fpi = false_pos / n_images;
    const double tpr = static_cast<double>(matched) / total_gts;
    if (!table.points.empty() && table.points.back().x == fpi)
      table.points.back().y = std::max(table.points.back().y, tpr);
    else
      table.points.push_back({fpi, tpr, 0});
  }
  return table;
}

double curve_value_at(const CurveTable& curve, double x) {
  if (curve.points.empty()) throw std::invalid_argument("curve_value_at: empty curve");
  const auto& pts = curve.points;
  if (x <= pts.front().x) return pts.front().y;
  if (x >= pts.back().x) return pts.back().y;
  for (std::size_t i = 1; i < pts.size(); ++i)
    if (x <= pts[i].x) {
      const double t = (x - pts[i - 1].x) / (pts[i].x - pts[i - 1].x);
      return pts[i - 1].y + t * (pts[i].y - pts[i - 1].y);
    }
  return pts.back().y;
}

CurveTable avg_precision_vs_iou(const std::vector<std::vector<ScoredBox>>& detections_per_image,
                                const std::vector<std::vector<Box>>& gts_per_image,
                                const std::vector<double>& iou_grid) {
  if (detections_per_image.size() != gts_per_image.size())
    throw std::invalid_argument("avg_precision_vs_iou: image counts disagree");
  for (std::size_t i = 1; i < iou_grid.size(); ++i)
    if (iou_grid[i] <= iou_grid[i - 1]) throw std::invalid_argument("avg_precision_vs_iou: grid must increase");
  if (!iou_grid.empty() && (iou_grid.front() <= 0 || iou_grid.back() >= 1))
    throw std::invalid_argument("avg_precision_vs_iou: grid must lie in (0,1)");
  long total_gts = 0;
  for (const auto& g : gts_per_image) total_gts += static_cast<long>(g.size());
  if (total_gts == 0) throw std::invalid_argument("avg_precision_vs_iou: no ground truths");

  CurveTable table;
  table.x_label = "iou";
  table.y_label = "tpr";
  for (double t : iou_grid) {
    long matched = 0;
    for (std::size_t img = 0; img < detections_per_image.size(); ++img)
      matched += static_cast<long>(
          greedy_match(detections_per_image[img], gts_per_image[img], t, /*strict_greater=*/false).size());
    table.points.push_back({t, static_cast<double>(matched) / total_gts, 0});
  }
  return table;
}

std::vector<MatchPair> filter_detected(const std::vector<ScoredBox>& detections, const std::vector<Box>& gts,
                                       double iou_min) {
  return greedy_match(detections, gts, iou_min, /*strict_greater=*/false);
}

double dice(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b, bool union_denominator) {
  if (a.size() != b.size()) throw std::invalid_argument("dice: mask sizes disagree");
  long inter = 0, wa = 0, wb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool ia = a[i] != 0, ib = b[i] != 0;
    inter += ia && ib;
    wa += ia;
    wb += ib;
  }
  if (wa + wb == 0) return 1.0;
  if (union_denominator) {
    const long uni = wa + wb - inter;
    return uni == 0 ? 1.0 : 2.0 * inter / static_cast<double>(uni);
  }
  return 2.0 * inter / static_cast<double>(wa + wb);
}

std::vector<std::uint8_t> paste_mask(const std::vector<float>& mask28, const Box& box, int width, int height) {
  if (mask28.size() != 28 * 28) throw std::invalid_argument("paste_mask: mask must be 28x28");
  std::vector<std::uint8_t> out(static_cast<std::size_t>(width) * height, 0);
  const int x_lo = std::max(0, static_cast<int>(std::floor(box.x1())));
  const int x_hi = std::min(width, static_cast<int>(std::ceil(box.x2())));
  const int y_lo = std::max(0, static_cast<int>(std::floor(box.y1())));
  const int y_hi = std::min(height, static_cast<int>(std::ceil(box.y2())));
  for (int y = y_lo; y < y_hi; ++y)
    for (int x = x_lo; x < x_hi; ++x) {
      // pixel center -> mask grid (nearest neighbor)
      const int mx = static_cast<int>(std::floor((x + 0.5 - box.x1()) / box.w * 28.0));
      const int my = static_cast<int>(std::floor((y + 0.5 - box.y1()) / box.h * 28.0));
      if (mx < 0 || mx >= 28 || my < 0 || my >= 28) continue;
      if (mask28[static_cast<std::size_t>(my) * 28 + mx] >= 0.5f)
        out[static_cast<std::size_t>(y) * width + x] = 1;
    }
  return out;
}

MeanStd aggregate_folds(const std::vector<double>& per_fold) {
  if (per_fold.size() < 2) throw std::invalid_argument("aggregate_folds: need at least 2 folds");
  double mean = 0;
  for (double v : per_fold) mean += v;
  mean /= static_cast<double>(per_fold.size());
  double var = 0;
  for (double v : per_fold) var += (v - mean) * (v - mean);
  var /= static_cast<double>(per_fold.size() - 1);
  return MeanStd{mean, std::sqrt(var)};
}

CurveTable aggregate_curves(const std::vector<CurveTable>& folds, const std::vector<double>& x_grid) {
  if (folds.empty()) throw std::invalid_argument("aggregate_curves: no folds");
  CurveTable out;
  out.x_label = folds.front().x_label;
  out.y_label = folds.front().y_label;
  out.folds = static_cast<int>(folds.size());
  for (double x : x_grid) {
    std::vector<double> ys;
    ys.reserve(folds.size());
    for (const auto& f : folds) ys.push_back(curve_value_at(f, x));
    if (folds.size() == 1) {
      out.points.push_back({x, ys[0], 0});
    } else {
      const auto ms = aggregate_folds(ys);
      out.points.push_back({x, ms.mean, ms.stddev});
    }
  }
  return out;
}

std::string curve_to_csv(const CurveTable& curve) {
  std::ostringstream os;
  os << curve.x_label << ',' << curve.y_label << ",stderr\n";
  char buf[96];
  for (const auto& p : curve.points) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", p.x, p.y, p.err);
    os << buf;
  }
  return os.str();
}

CurveTable curve_from_csv(const std::string& text) {
  CurveTable out;
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw std::invalid_argument("curve_from_csv: empty input");
  {
    std::istringstream hs(line);
    std::string a, b, c;
    if (!std::getline(hs, a, ',') || !std::getline(hs, b, ',') || !std::getline(hs, c))
      throw std::invalid_argument("curve_from_csv: malformed header");
    out.x_label = a;
    out.y_label = b;
  }
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string x, y, e;
    if (!std::getline(ls, x, ',') || !std::getline(ls, y, ',') || !std::getline(ls, e))
      throw std::invalid_argument("curve_from_csv: malformed row: " + line);
    try {
      out.points.push_back({std::stod(x), std::stod(y), std::stod(e)});
    } catch (const std::exception&) {
      throw std::invalid_argument("curve_from_csv: non-numeric row: " + line);
    }
  }
  return out;
}

}  // namespace ftmtl
