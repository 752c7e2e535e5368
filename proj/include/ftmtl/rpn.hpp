#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftmtl/backbone.hpp"
#include "ftmtl/boxes.hpp"
#include "ftmtl/nn.hpp"
#include "ftmtl/tensor.hpp"

namespace ftmtl {

inline constexpr int kRoiSize = 7;

struct AnchorSet {
  std::vector<Box> anchors;  // clipped to image bounds, de-duplicated
  int stride = 16;
  std::vector<std::pair<double, double>> sizes;
  int image_w = 0, image_h = 0;
};

/// Size presets from scale fractions of the shorter image side: square plus
/// area-preserving 1:2 and 2:1 variants.
inline std::vector<std::pair<double, double>> anchor_size_presets(double image_side,
                                                                  const std::vector<double>& scales) {
  std::vector<std::pair<double, double>> sizes;
  const double r = std::sqrt(2.0);
  for (double s : scales) {
    const double side = s * image_side;
    sizes.emplace_back(side, side);
    sizes.emplace_back(side / r, side * r);
    sizes.emplace_back(side * r, side / r);
  }
  return sizes;
}

/// One anchor per (feature cell x size preset), centers on the stride grid
/// at (i+0.5)*stride, clipped to the image; exact duplicates are dropped.
inline AnchorSet generate_anchors(int feat_h, int feat_w, int stride,
                                  const std::vector<std::pair<double, double>>& sizes, int image_w,
                                  int image_h) {
  if (sizes.empty()) throw std::invalid_argument("generate_anchors: empty size list");
  AnchorSet set;
  set.stride = stride;
  set.sizes = sizes;
  set.image_w = image_w;
  set.image_h = image_h;
  std::set<std::array<double, 4>> seen;
  for (int gy = 0; gy < feat_h; ++gy)
    for (int gx = 0; gx < feat_w; ++gx) {
      const double cx = (gx + 0.5) * stride;
      const double cy = (gy + 0.5) * stride;
      for (const auto& [w, h] : sizes) {
        const Box b = Box{w, h, cx, cy}.clipped(image_w, image_h);
        if (!b.valid()) continue;
        if (seen.insert({b.x1(), b.y1(), b.x2(), b.y2()}).second) set.anchors.push_back(b);
      }
    }
  return set;
}

enum class AnchorLabel { Negative = 0, Positive = 1, Ignore = 2 };

struct AnchorMatch {
  std::vector<AnchorLabel> labels;
  std::vector<int> matched_gt;   // argmax-IoU ground truth per anchor, -1 if none
  std::vector<double> best_iou;  // IoU with that ground truth
};

/// Positive iff max-IoU >= pos_iou OR the anchor is the argmax anchor of some
/// ground truth; negative iff max-IoU < neg_iou; otherwise ignore.
inline AnchorMatch match_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gt_boxes,
                                 double pos_iou = 0.5, double neg_iou = 0.3) {
  AnchorMatch m;
  const std::size_t n = anchors.size();
  m.labels.assign(n, AnchorLabel::Negative);
  m.matched_gt.assign(n, -1);
  m.best_iou.assign(n, 0.0);
  if (gt_boxes.empty()) return m;

  std::vector<int> gt_argmax(gt_boxes.size(), -1);
  std::vector<double> gt_best(gt_boxes.size(), -1.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = iou(anchors[i], gt_boxes[g]);
      if (v > m.best_iou[i]) {
        m.best_iou[i] = v;
        m.matched_gt[i] = static_cast<int>(g);
      }
      if (v > gt_best[g]) {
        gt_best[g] = v;
        gt_argmax[g] = static_cast<int>(i);
      }
    }
    if (m.best_iou[i] >= pos_iou)
      m.labels[i] = AnchorLabel::Positive;
    else if (m.best_iou[i] < neg_iou)
      m.labels[i] = AnchorLabel::Negative;
    else
      m.labels[i] = AnchorLabel::Ignore;
  }
  for (std::size_t g = 0; g < gt_boxes.size(); ++g)
    if (gt_argmax[g] >= 0) {
      const auto i = static_cast<std::size_t>(gt_argmax[g]);
      m.labels[i] = AnchorLabel::Positive;
      if (m.matched_gt[i] < 0) {
        m.matched_gt[i] = static_cast<int>(g);
        m.best_iou[i] = gt_best[g];
      }
    }
  return m;
}

/// Anchor footprint on the feature grid: coordinates divided by the stride,
/// rounded outward and clamped to at least one cell.
inline CellRect anchor_cell_rect(const Box& b, int stride, int feat_h, int feat_w) {
  int y0 = static_cast<int>(std::floor(b.y1() / stride));
  int y1 = static_cast<int>(std::ceil(b.y2() / stride));
  int x0 = static_cast<int>(std::floor(b.x1() / stride));
  int x1 = static_cast<int>(std::ceil(b.x2() / stride));
  y0 = std::clamp(y0, 0, feat_h - 1);
  x0 = std::clamp(x0, 0, feat_w - 1);
  y1 = std::clamp(y1, y0 + 1, feat_h);
  x1 = std::clamp(x1, x0 + 1, feat_w);
  return CellRect{y0, y1, x0, x1};
}

/// Objectness: per-channel mean over the anchor's feature region, a linear
/// probe, then a sigmoid.
template <typename S>
struct RpnHead {
  Parameter<S>*weight = nullptr, *bias = nullptr;

  RpnHead() = default;
  RpnHead(ParamStore<S>& store, int channels) {
    weight = &store.add("rpn.score.weight", {channels});
    bias = &store.add("rpn.score.bias", {1});
  }

  /// Scores for a batch of anchors -> rank-1 tensor of probabilities.
  Tensor<S> scores(const FeatureMap<S>& fmap, const std::vector<Box>& anchors) const {
    std::vector<CellRect> rects;
    rects.reserve(anchors.size());
    const int fh = fmap.features.dim(1), fw = fmap.features.dim(2);
    for (const Box& b : anchors) rects.push_back(anchor_cell_rect(b, fmap.stride(), fh, fw));
    return sigmoid(linear_rows(region_means(fmap.features, rects), weight->tensor, bias->tensor));
  }

  double objectness(const FeatureMap<S>& fmap, const Box& anchor) const {
    return static_cast<double>(scores(fmap, {anchor}).value()[0]);
  }
};

/// Threshold + stable sort by descending score, truncated to top_n.
/// Returns anchor indices.
inline std::vector<int> select_candidates(const std::vector<double>& scores, double threshold, int top_n) {
  std::vector<int> keep;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] > threshold) keep.push_back(static_cast<int>(i));
  std::stable_sort(keep.begin(), keep.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  if (static_cast<int>(keep.size()) > top_n) keep.resize(static_cast<std::size_t>(top_n));
  return keep;
}

/// Training-mode selection: when fewer than min_positives positive anchors
/// survive, each ground truth's argmax anchor is force-included (displacing
/// the lowest-scoring unforced candidates if the cap is hit).
inline std::vector<int> select_candidates_train(const std::vector<double>& scores, double threshold, int top_n,
                                                const AnchorMatch& match, const std::vector<Box>& anchors,
                                                const std::vector<Box>& gt_boxes, int min_positives = 4) {
  std::vector<int> keep = select_candidates(scores, threshold, top_n);
  int positives = 0;
  for (int i : keep)
    if (match.labels[static_cast<std::size_t>(i)] == AnchorLabel::Positive) ++positives;
  if (positives >= min_positives || gt_boxes.empty()) return keep;

  std::vector<int> forced;
  for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
    int best = -1;
    double best_v = -1.0;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      const double v = iou(anchors[i], gt_boxes[g]);
      if (v > best_v) {
        best_v = v;
        best = static_cast<int>(i);
      }
    }
    if (best >= 0 && std::find(keep.begin(), keep.end(), best) == keep.end() &&
        std::find(forced.begin(), forced.end(), best) == forced.end())
      forced.push_back(best);
  }
  keep.insert(keep.end(), forced.begin(), forced.end());
  while (static_cast<int>(keep.size()) > top_n) {
    // drop the worst-scoring unforced entry
    int drop = -1;
    double worst = 2.0;
    for (std::size_t i = 0; i < keep.size(); ++i) {
      if (std::find(forced.begin(), forced.end(), keep[i]) != forced.end()) continue;
      const double s = scores[static_cast<std::size_t>(keep[i])];
      if (s < worst) {
        worst = s;
        drop = static_cast<int>(i);
      }
    }
    if (drop < 0) break;  // everything is forced
    keep.erase(keep.begin() + drop);
  }
  return keep;
}

// ---------------------------------------------------------------------------
// ROI align
// ---------------------------------------------------------------------------

namespace detail {

// Box corners / stride give continuous feature extents; each output bin is
// sampled once at its center by bilinear interpolation over the cell-center
// grid (cell k spans [k, k+1), center at grid coordinate k).
struct RoiGrid {
  double y0, x0, bin_h, bin_w;
};

inline RoiGrid roi_grid(const Box& box, int stride, int out) {
  return RoiGrid{box.y1() / stride, box.x1() / stride, box.h / (stride * out), box.w / (stride * out)};
}

}  // namespace detail

/// Bilinear ROI pooling of a [C,fh,fw] feature map to [C,out,out]; the box is
/// given in image coordinates and mapped by /stride without rounding.
template <typename S>
Tensor<S> roi_align(const Tensor<S>& features, const Box& box, int stride, int out = kRoiSize) {
  if (features.rank() != 3) throw std::invalid_argument("roi_align: expects features [c,h,w]");
  if (!box.valid()) throw std::invalid_argument("roi_align: degenerate box");
  const int c = features.dim(0), fh = features.dim(1), fw = features.dim(2);
  if (box.x2() <= 0 || box.y2() <= 0 || box.x1() >= fw * stride || box.y1() >= fh * stride)
    throw std::invalid_argument("roi_align: box fully outside the image");

  const auto grid = detail::roi_grid(box, stride, out);
  struct Tap {
    int y0, x0;
    S wy, wx;  // weights of the low neighbor along each axis
  };
  auto taps = std::make_shared<std::vector<Tap>>();
  taps->reserve(static_cast<std::size_t>(out) * out);
  for (int i = 0; i < out; ++i)
    for (int j = 0; j < out; ++j) {
      double gy = grid.y0 + (i + 0.5) * grid.bin_h - 0.5;
      double gx = grid.x0 + (j + 0.5) * grid.bin_w - 0.5;
      gy = std::clamp(gy, 0.0, static_cast<double>(fh - 1));
      gx = std::clamp(gx, 0.0, static_cast<double>(fw - 1));
      const int y0 = std::min(static_cast<int>(gy), fh - 2 >= 0 ? fh - 2 : 0);
      const int x0 = std::min(static_cast<int>(gx), fw - 2 >= 0 ? fw - 2 : 0);
      taps->push_back(Tap{y0, x0, static_cast<S>(1.0 - (gy - y0)), static_cast<S>(1.0 - (gx - x0))});
    }

  Tensor<S> y({c, out, out});
  const long plane = static_cast<long>(fh) * fw;
  for (int ch = 0; ch < c; ++ch) {
    const S* f = features.data() + ch * plane;
    S* o = y.data() + static_cast<long>(ch) * out * out;
    for (std::size_t t = 0; t < taps->size(); ++t) {
      const Tap& tp = (*taps)[t];
      const int y1 = std::min(tp.y0 + 1, fh - 1), x1 = std::min(tp.x0 + 1, fw - 1);
      o[t] = tp.wy * (tp.wx * f[static_cast<long>(tp.y0) * fw + tp.x0] +
                      (S(1) - tp.wx) * f[static_cast<long>(tp.y0) * fw + x1]) +
             (S(1) - tp.wy) * (tp.wx * f[static_cast<long>(y1) * fw + tp.x0] +
                               (S(1) - tp.wx) * f[static_cast<long>(y1) * fw + x1]);
    }
  }

  if (detail::track<S>({&features})) {
    y.set_requires_grad(true);
    auto fn = features.node(), yn = y.node();
    Tape<S>::active().record([fn, yn, taps, c, fh, fw, out, plane] {
      if (detail::no_out_grad(yn)) return;
      fn->ensure_grad();
      for (int ch = 0; ch < c; ++ch) {
        S* gf = fn->grad.data() + ch * plane;
        const S* gy = yn->grad.data() + static_cast<long>(ch) * out * out;
        for (std::size_t t = 0; t < taps->size(); ++t) {
          const auto& tp = (*taps)[t];
          const int y1 = std::min(tp.y0 + 1, fh - 1), x1 = std::min(tp.x0 + 1, fw - 1);
          const S g = gy[t];
          gf[static_cast<long>(tp.y0) * fw + tp.x0] += g * tp.wy * tp.wx;
          gf[static_cast<long>(tp.y0) * fw + x1] += g * tp.wy * (S(1) - tp.wx);
          gf[static_cast<long>(y1) * fw + tp.x0] += g * (S(1) - tp.wy) * tp.wx;
          gf[static_cast<long>(y1) * fw + x1] += g * (S(1) - tp.wy) * (S(1) - tp.wx);
        }
      }
    });
  }
  return y;
}

}  // namespace ftmtl
