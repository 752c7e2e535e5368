#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ftmtl/boxes.hpp"

namespace ftmtl {

struct CurvePoint {
  double x = 0, y = 0, err = 0;
};

struct CurveTable {
  std::string x_label, y_label;
  std::vector<CurvePoint> points;  // x strictly increasing
  int folds = 1;
};

// ---------------------------------------------------------------------------
// ROC
// ---------------------------------------------------------------------------

/// Threshold-sweep ROC with trapezoid AUC; ties contribute half, so the value
/// equals the Mann-Whitney pair-count statistic. Rejects single-class input.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels, CurveTable* curve = nullptr);

// ---------------------------------------------------------------------------
// Detection matching
// ---------------------------------------------------------------------------

struct ScoredBox {
  Box box;
  double score = 0;
};

struct MatchPair {
  int detection = -1, gt = -1;
  double iou = 0;
};

/// Greedy score-descending matching (stable index tiebreak); each ground
/// truth consumes at most one detection. `strict` decides IoU > thr vs >= thr.
std::vector<MatchPair> greedy_match(const std::vector<ScoredBox>& detections, const std::vector<Box>& gts,
                                    double iou_threshold, bool strict_greater);

/// FROC: TPR against false positives per image under the IoU > threshold
/// true-positive rule, swept over every distinct detection score.
CurveTable froc(const std::vector<std::vector<ScoredBox>>& detections_per_image,
                const std::vector<std::vector<Box>>& gts_per_image, double iou_threshold = 0.2);

/// Linear interpolation on the curve, clamped at both ends.
double curve_value_at(const CurveTable& curve, double x);

/// Fraction of ground truths matched at each IoU threshold of the grid
/// (IoU >= t rule); non-increasing in t.
CurveTable avg_precision_vs_iou(const std::vector<std::vector<ScoredBox>>& detections_per_image,
                                const std::vector<std::vector<Box>>& gts_per_image,
                                const std::vector<double>& iou_grid);

/// Detections matched to a ground truth at IoU >= iou_min (one per gt).
std::vector<MatchPair> filter_detected(const std::vector<ScoredBox>& detections, const std::vector<Box>& gts,
                                       double iou_min = 0.4);

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

/// 2|A∩B| / (|A|+|B|) over binary masks; both empty -> 1. The printed
/// 2|A∩B| / |A∪B| variant is available behind the flag.
double dice(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b,
            bool union_denominator = false);

/// Pastes a 28x28 probability mask into an image-sized binary frame through
/// its detection box (nearest neighbor, threshold 0.5).
std::vector<std::uint8_t> paste_mask(const std::vector<float>& mask28, const Box& box, int width, int height);

// ---------------------------------------------------------------------------
// Cross-fold aggregation
// ---------------------------------------------------------------------------

struct MeanStd {
  double mean = 0, stddev = 0;
};

/// Sample mean and sample standard deviation (n-1 denominator).
MeanStd aggregate_folds(const std::vector<double>& per_fold);

/// Pointwise mean and stddev of several curves interpolated onto a shared
/// x grid.
CurveTable aggregate_curves(const std::vector<CurveTable>& folds, const std::vector<double>& x_grid);

// CSV emission: header "x_label,y_label,stderr", one point per line.
std::string curve_to_csv(const CurveTable& curve);
CurveTable curve_from_csv(const std::string& text);

}  // namespace ftmtl
