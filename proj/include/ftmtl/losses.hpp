#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "ftmtl/boxes.hpp"
#include "ftmtl/rng.hpp"
#include "ftmtl/rpn.hpp"
#include "ftmtl/tensor.hpp"

namespace ftmtl {

struct LossBreakdown {
  double l_cls = 0, l_box = 0, l_mask = 0, l_prop = 0, l_uni = 0;
};

struct LossWeights {
  double lambda_cls = 1, lambda_box = 1, lambda_mask = 1;
};

// ---------------------------------------------------------------------------
// Scalar forms
// ---------------------------------------------------------------------------

inline double smooth_l1(double x) { return std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5; }

/// Binary cross entropy with the prediction clamped into [eps, 1-eps].
inline double cross_entropy(double y_hat, double y) {
  const double p = std::clamp(y_hat, kProbEps, 1.0 - kProbEps);
  return -y * std::log(p) - (1.0 - y) * std::log(1.0 - p);
}

/// Sum of smooth_l1 over the four components of f(T,phi) - f(Y,phi).
inline double l_box(const Box& predicted, const Box& truth, const Box& anchor) {
  const auto t = box_param(predicted, anchor);
  const auto y = box_param(truth, anchor);
  double acc = 0;
  for (int i = 0; i < 4; ++i) acc += smooth_l1(t[static_cast<std::size_t>(i)] - y[static_cast<std::size_t>(i)]);
  return acc;
}

/// -log(p_u) with the probability clamped away from zero.
inline double l_cls(const std::array<double, 3>& probs, int u) {
  if (u < 0 || u > 2) throw std::invalid_argument("l_cls: class index must be 0, 1 or 2");
  return -std::log(std::max(probs[static_cast<std::size_t>(u)], kProbEps));
}

/// Mean per-pixel cross entropy between a predicted map and a same-size
/// binary target.
template <typename MapA, typename MapB>
double mask_cross_entropy(const MapA& pred, const MapB& target, long n) {
  double acc = 0;
  for (long i = 0; i < n; ++i) acc += cross_entropy(static_cast<double>(pred[i]), static_cast<double>(target[i]));
  return acc / static_cast<double>(n);
}

/// Crops a full-resolution binary mask to a box and resizes it to 28x28 by
/// nearest neighbor (pixel centers of the target grid mapped into the box).
inline std::vector<float> resize_mask_to_roi(const std::vector<std::uint8_t>& mask, int mask_w, int mask_h,
                                             const Box& roi_box, int out = 28) {
  if (roi_box.x2() <= 0 || roi_box.y2() <= 0 || roi_box.x1() >= mask_w || roi_box.y1() >= mask_h)
    throw std::invalid_argument("resize_mask_to_roi: ROI box does not overlap the mask image");
  std::vector<float> target(static_cast<std::size_t>(out) * out, 0.0f);
  for (int i = 0; i < out; ++i)
    for (int j = 0; j < out; ++j) {
      const double sy = roi_box.y1() + (i + 0.5) * roi_box.h / out;
      const double sx = roi_box.x1() + (j + 0.5) * roi_box.w / out;
      const int py = static_cast<int>(std::floor(sy));
      const int px = static_cast<int>(std::floor(sx));
      if (py < 0 || py >= mask_h || px < 0 || px >= mask_w) continue;
      target[static_cast<std::size_t>(i) * out + j] =
          mask[static_cast<std::size_t>(py) * mask_w + px] ? 1.0f : 0.0f;
    }
  return target;
}

/// Eq.-7 style mask loss in scalar form: mean cross entropy over the 28x28
/// grid between a predicted map and the ROI-cropped, resized ground truth.
inline double l_mask(const std::vector<double>& pred28, const std::vector<std::uint8_t>& gt_mask, int mask_w,
                     int mask_h, const Box& roi_box) {
  const auto target = resize_mask_to_roi(gt_mask, mask_w, mask_h, roi_box);
  if (pred28.size() != target.size()) throw std::invalid_argument("l_mask: prediction must be 28x28");
  return mask_cross_entropy(pred28.data(), target.data(), static_cast<long>(target.size()));
}

struct PropLoss {
  double value = 0;
  int used_anchors = 0;
  bool no_usable_anchors = false;
};

/// Mean binary cross entropy of objectness against anchor labels; ignore-band
/// anchors are excluded and negatives are subsampled to <= neg_ratio x positives.
inline PropLoss l_prop(const std::vector<double>& scores, const std::vector<AnchorLabel>& labels, Rng& rng,
                       int neg_ratio = 3) {
  if (scores.size() != labels.size()) throw std::invalid_argument("l_prop: size mismatch");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == AnchorLabel::Positive) pos.push_back(i);
    if (labels[i] == AnchorLabel::Negative) neg.push_back(i);
  }
  const std::size_t keep_neg = std::min(neg.size(), pos.size() * static_cast<std::size_t>(neg_ratio));
  // deterministic subsample: partial Fisher-Yates over the negative list
  for (std::size_t i = 0; i < keep_neg; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                            static_cast<std::int64_t>(neg.size()) - 1));
    std::swap(neg[i], neg[j]);
  }
  neg.resize(keep_neg);

  PropLoss out;
  out.used_anchors = static_cast<int>(pos.size() + neg.size());
  if (out.used_anchors == 0) {
    out.no_usable_anchors = true;
    return out;
  }
  double acc = 0;
  for (std::size_t i : pos) acc += cross_entropy(scores[i], 1.0);
  for (std::size_t i : neg) acc += cross_entropy(scores[i], 0.0);
  out.value = acc / out.used_anchors;
  return out;
}

/// Eq.-10 combination; component losses must already be averaged over the
/// same ROI batch.
inline double l_uni(const LossBreakdown& parts, const LossWeights& w) {
  if (w.lambda_cls < 0 || w.lambda_box < 0 || w.lambda_mask < 0)
    throw std::invalid_argument("l_uni: negative loss weights rejected");
  return w.lambda_cls * parts.l_cls + w.lambda_box * parts.l_box + w.lambda_mask * parts.l_mask;
}

// ---------------------------------------------------------------------------
// Graph forms (differentiable, used by the training loop)
// ---------------------------------------------------------------------------

/// Box loss on raw regressor deltas against encoded targets.
template <typename S>
Tensor<S> box_loss_graph(const Tensor<S>& deltas, const std::array<double, 4>& target) {
  Tensor<S> t({4});
  for (int i = 0; i < 4; ++i) t.value()[i] = static_cast<S>(target[static_cast<std::size_t>(i)]);
  return smooth_l1_sum(sub(deltas, t));
}

/// Mean pixel BCE of one predicted map against a constant 28x28 target.
template <typename S>
Tensor<S> mask_loss_graph(const Tensor<S>& pred, const std::vector<float>& target28) {
  Tensor<S> t(pred.shape());
  if (static_cast<long>(target28.size()) != pred.size())
    throw std::invalid_argument("mask_loss_graph: target size mismatch");
  for (long i = 0; i < t.size(); ++i) t.value()[i] = static_cast<S>(target28[static_cast<std::size_t>(i)]);
  return bce_mean(pred, t);
}

template <typename S>
Tensor<S> cls_loss_graph(const Tensor<S>& probs, int target_class) {
  return nll_pick(probs, target_class);
}

/// Objectness BCE over an anchor subset (indices into the score vector).
template <typename S>
Tensor<S> prop_loss_graph(const Tensor<S>& scores, const std::vector<long>& indices,
                          const std::vector<float>& targets) {
  Tensor<S> t({static_cast<int>(targets.size())});
  for (std::size_t i = 0; i < targets.size(); ++i) t.value()[static_cast<long>(i)] = static_cast<S>(targets[i]);
  return bce_mean(gather(scores, indices), t);
}

}  // namespace ftmtl
