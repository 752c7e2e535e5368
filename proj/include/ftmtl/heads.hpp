#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>

#include "ftmtl/boxes.hpp"
#include "ftmtl/nn.hpp"
#include "ftmtl/rpn.hpp"
#include "ftmtl/tensor.hpp"

namespace ftmtl {

inline constexpr int kMaskSize = 28;  // two stride-2 upsamplings of a 7x7 ROI

enum class RoiClass : int { Background = 0, Benign = 1, Malignant = 2 };

/// Mean-pool the ROI features and regress anchor-relative deltas
/// (dw, dh, dx, dy); decoding is the inverse of the box parameterization.
template <typename S>
struct DetectionHead {
  LinearLayer<S> fc;

  DetectionHead() = default;
  DetectionHead(ParamStore<S>& store, int channels) { fc = LinearLayer<S>(store, "det.fc", channels, 4); }

  Tensor<S> deltas(const Tensor<S>& roi_features) const {
    if (roi_features.rank() != 3 || roi_features.dim(1) != kRoiSize || roi_features.dim(2) != kRoiSize)
      throw std::invalid_argument("detection head: ROI features must be [C,7,7]");
    return fc(global_mean_pool(roi_features));
  }

  Box refine(const Tensor<S>& roi_features, const Box& anchor) const {
    const Tensor<S> d = deltas(roi_features);
    return box_decode({static_cast<double>(d.value()[0]), static_cast<double>(d.value()[1]),
                       static_cast<double>(d.value()[2]), static_cast<double>(d.value()[3])},
                      anchor);
  }
};

template <typename S>
struct SegOutput {
  Tensor<S> benign_map;     // [28,28], per-pixel probabilities
  Tensor<S> malignant_map;  // [28,28]
  Tensor<S> seg_features;   // [delta,28,28], retained for the transfer path
};

/// Two stride-2 transposed convolutions (7 -> 14 -> 28) with a relu between,
/// then a 1x1 convolution to two mask channels under a per-pixel sigmoid.
template <typename S>
struct SegmentationHead {
  ConvTranspose2dLayer<S> up1, up2;
  Conv2dLayer<S> mask_conv;
  int feature_channels = 0;

  SegmentationHead() = default;
  SegmentationHead(ParamStore<S>& store, int in_channels, int delta) : feature_channels(delta) {
    up1 = ConvTranspose2dLayer<S>(store, "seg.up1", in_channels, delta);
    up2 = ConvTranspose2dLayer<S>(store, "seg.up2", delta, delta);
    mask_conv = Conv2dLayer<S>(store, "seg.mask", delta, 2, 1, 1, 0);
  }

  SegOutput<S> operator()(const Tensor<S>& roi_features) const {
    if (roi_features.rank() != 3 || roi_features.dim(1) != kRoiSize || roi_features.dim(2) != kRoiSize)
      throw std::invalid_argument("segmentation head: ROI features must be [C,7,7]");
    Tensor<S> features = up2(relu(up1(roi_features)));
    Tensor<S> probs = sigmoid(mask_conv(features));  // [2,28,28]
    SegOutput<S> out;
    out.seg_features = features;
    out.benign_map = slice_channel(probs, 0);
    out.malignant_map = slice_channel(probs, 1);
    return out;
  }

 private:
  // [2,h,w] -> [h,w] view-copy with gradient pass-through
  static Tensor<S> slice_channel(const Tensor<S>& x, int channel) {
    const int h = x.dim(1), w = x.dim(2);
    const long plane = static_cast<long>(h) * w;
    Tensor<S> y({h, w});
    std::copy_n(x.data() + channel * plane, plane, y.data());
    if (detail::track<S>({&x})) {
      y.set_requires_grad(true);
      auto xn = x.node(), yn = y.node();
      Tape<S>::active().record([xn, yn, channel, plane] {
        if (detail::no_out_grad(yn)) return;
        xn->ensure_grad();
        Eigen::Map<ArrayX<S>>(xn->grad.data() + channel * plane, plane) += yn->grad;
      });
    }
    return y;
  }
};

/// Pixelwise max of the two mask probability maps.
template <typename S>
Tensor<S> weight_map(const Tensor<S>& benign_map, const Tensor<S>& malignant_map) {
  return elem_max(benign_map, malignant_map);
}

/// Reweights every channel of the segmentation features by the weight map;
/// gradients flow to both operands unless stop_grad_weight_map is set.
template <typename S>
Tensor<S> reweight_features(const Tensor<S>& seg_features, const Tensor<S>& wmap,
                            bool stop_grad_weight_map = false) {
  return elem_mul(seg_features, stop_grad_weight_map ? stop_gradient(wmap) : wmap);
}

/// 2x2 max pool (28 -> 14) then a global mean pool -> one value per channel.
template <typename S>
Tensor<S> compress_features(const Tensor<S>& reweighted) {
  if (reweighted.rank() != 3 || reweighted.dim(1) != kMaskSize || reweighted.dim(2) != kMaskSize)
    throw std::invalid_argument("compress_features: expects [delta,28,28]");
  return global_mean_pool(max_pool2d(reweighted, 2, 2));
}

/// Concatenates pooled shared ROI features with the transferred vector and
/// maps through a linear layer + softmax to (background, benign, malignant).
template <typename S>
struct ClassificationHead {
  LinearLayer<S> fc;
  int shared_channels = 0, transfer_channels = 0;

  ClassificationHead() = default;
  ClassificationHead(ParamStore<S>& store, int channels, int delta)
      : shared_channels(channels), transfer_channels(delta) {
    fc = LinearLayer<S>(store, "cls.fc", channels + delta, 3);
  }

  int input_features() const { return shared_channels + transfer_channels; }

  Tensor<S> operator()(const Tensor<S>& roi_features, const Tensor<S>& transfer) const {
    if (transfer.rank() != 1 || transfer.dim(0) != transfer_channels)
      throw std::invalid_argument("classification head: transfer vector must have length " +
                                  std::to_string(transfer_channels));
    Tensor<S> pooled = global_mean_pool(roi_features);
    return softmax(fc(concat(pooled, transfer, 0)));
  }
};

template <typename S>
RoiClass classify(const Tensor<S>& probs) {
  if (probs.size() != 3) throw std::invalid_argument("classify: expects 3 class probabilities");
  const S p0 = probs.value()[0], p1 = probs.value()[1], p2 = probs.value()[2];
  // ties break toward the tumor classes, malignant first
  if (p2 >= p1 && p2 >= p0) return RoiClass::Malignant;
  if (p1 >= p0) return RoiClass::Benign;
  return RoiClass::Background;
}

/// Picks the mask matching the classifier decision; background means no mask.
template <typename S>
std::optional<Tensor<S>> select_final_mask(const Tensor<S>& probs, const Tensor<S>& benign_map,
                                           const Tensor<S>& malignant_map) {
  switch (classify(probs)) {
    case RoiClass::Benign:
      return benign_map;
    case RoiClass::Malignant:
      return malignant_map;
    default:
      return std::nullopt;
  }
}

}  // namespace ftmtl
