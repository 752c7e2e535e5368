#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ftmtl/backbone.hpp"
#include "ftmtl/heads.hpp"
#include "ftmtl/nn.hpp"
#include "ftmtl/rpn.hpp"

namespace ftmtl {

struct ModelConfig {
  BackboneConfig backbone;
  int delta = 64;  // segmentation feature channels carried into the transfer
  bool transfer_enabled = true;
  bool stop_grad_weight_map = false;
  std::vector<double> anchor_scales{0.25, 0.5, 0.75};

  static ModelConfig desk() { return ModelConfig{}; }

  static ModelConfig paper_shape() {
    ModelConfig cfg;
    cfg.backbone = BackboneConfig::paper_shape();
    cfg.delta = 256;
    return cfg;
  }
};

/// Shared backbone, RPN scorer and the three task heads over one parameter
/// store. Weights start at zero; call init_weights before use.
template <typename S>
class MtlModel {
 public:
  explicit MtlModel(const ModelConfig& cfg = ModelConfig::desk()) : cfg_(cfg) {
    backbone_ = Backbone<S>(store_, cfg.backbone);
    const int c = backbone_.out_channels();
    rpn_ = RpnHead<S>(store_, c);
    det_ = DetectionHead<S>(store_, c);
    seg_ = SegmentationHead<S>(store_, c, cfg.delta);
    cls_ = ClassificationHead<S>(store_, c, cfg.delta);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<S>& params() { return store_; }
  const Backbone<S>& backbone() const { return backbone_; }
  const RpnHead<S>& rpn() const { return rpn_; }
  const DetectionHead<S>& detection_head() const { return det_; }
  const SegmentationHead<S>& segmentation_head() const { return seg_; }
  const ClassificationHead<S>& classification_head() const { return cls_; }

  /// Backbone weights use fan-in scaled init; every other layer draws from
  /// N(0, 0.05); all biases start at zero. Deterministic in the seed.
  void init_weights(std::uint64_t seed) {
    Rng rng(mix_seed(seed, "init"));
    for (const auto& p : store_.all()) {
      if (p->name.ends_with(".bias")) {
        init_zero(*p);
      } else if (p->name.starts_with("backbone.")) {
        init_he(*p, rng);
      } else {
        init_normal(*p, rng, 0.05);
      }
      p->velocity.setZero();
    }
  }

  std::vector<std::shared_ptr<Parameter<S>>> all_params() const { return store_.all(); }

  std::vector<std::shared_ptr<Parameter<S>>> backbone_rpn_params() const {
    std::vector<std::shared_ptr<Parameter<S>>> out;
    for (const auto& p : store_.all())
      if (p->name.starts_with("backbone.") || p->name.starts_with("rpn.")) out.push_back(p);
    return out;
  }

  std::vector<std::shared_ptr<Parameter<S>>> head_params() const {
    std::vector<std::shared_ptr<Parameter<S>>> out;
    for (const auto& p : store_.all())
      if (!p->name.starts_with("backbone.") && !p->name.starts_with("rpn.")) out.push_back(p);
    return out;
  }

  /// Transfer vector for one ROI; zeros when the transfer path is disabled.
  Tensor<S> transfer_vector(const SegOutput<S>& seg) const {
    if (!cfg_.transfer_enabled) return Tensor<S>({cfg_.delta});
    Tensor<S> wmap = weight_map(seg.benign_map, seg.malignant_map);
    return compress_features(reweight_features(seg.seg_features, wmap, cfg_.stop_grad_weight_map));
  }

 private:
  ModelConfig cfg_;
  ParamStore<S> store_;
  Backbone<S> backbone_;
  RpnHead<S> rpn_;
  DetectionHead<S> det_;
  SegmentationHead<S> seg_;
  ClassificationHead<S> cls_;
};

}  // namespace ftmtl
