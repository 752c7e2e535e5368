#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftmtl/nn.hpp"
#include "ftmtl/tensor.hpp"

namespace ftmtl {

/// Four downsampling stages -> spatial reduction of exactly 16x.
struct BackboneConfig {
  std::array<int, 4> stage_channels{8, 16, 32, 64};
  int blocks_per_stage = 1;
  int input_channels = 1;

  static BackboneConfig desk() { return BackboneConfig{}; }
  static BackboneConfig paper_shape() { return BackboneConfig{{64, 256, 512, 1024}, 1, 1}; }
};

/// conv3x3(stride) -> relu -> conv3x3 plus a shortcut (1x1 projection when
/// the channel count or stride changes), relu on the sum.
template <typename S>
struct ResidualBlock {
  Conv2dLayer<S> conv1, conv2, proj;
  bool has_proj = false;

  ResidualBlock() = default;
  ResidualBlock(ParamStore<S>& store, const std::string& name, int cin, int cout, int stride) {
    conv1 = Conv2dLayer<S>(store, name + ".conv1", cin, cout, 3, stride, 1);
    conv2 = Conv2dLayer<S>(store, name + ".conv2", cout, cout, 3, 1, 1);
    has_proj = (cin != cout) || (stride != 1);
    if (has_proj) proj = Conv2dLayer<S>(store, name + ".proj", cin, cout, 1, stride, 0);
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    Tensor<S> main = conv2(relu(conv1(x)));
    Tensor<S> shortcut = has_proj ? proj(x) : x;
    return relu(add(main, shortcut));
  }
};

template <typename S>
struct FeatureMap {
  Tensor<S> features;  // [C, H/16, W/16]
  int image_h = 0, image_w = 0;
  int stride() const { return image_h / features.dim(1); }
};

template <typename S>
class Backbone {
 public:
  Backbone() = default;

  Backbone(ParamStore<S>& store, const BackboneConfig& cfg) : cfg_(cfg) {
    int cin = cfg.input_channels;
    for (int s = 0; s < 4; ++s) {
      const int cout = cfg.stage_channels[static_cast<std::size_t>(s)];
      for (int b = 0; b < cfg.blocks_per_stage; ++b) {
        const std::string name = "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
        blocks_.emplace_back(store, name, cin, cout, b == 0 ? 2 : 1);
        cin = cout;
      }
    }
  }

  const BackboneConfig& config() const { return cfg_; }
  int out_channels() const { return cfg_.stage_channels[3]; }

  FeatureMap<S> operator()(const Tensor<S>& image) const {
    if (image.rank() != 3 || image.dim(0) != cfg_.input_channels)
      throw std::invalid_argument("backbone: expects image of shape [" + std::to_string(cfg_.input_channels) +
                                  ",H,W]");
    const int h = image.dim(1), w = image.dim(2);
    if (h % 16 != 0 || w % 16 != 0)
      throw std::invalid_argument("backbone: image dims " + std::to_string(h) + "x" + std::to_string(w) +
                                  " must be divisible by 16 (pad upstream)");
    Tensor<S> x = image;
    for (const auto& block : blocks_) x = block(x);
    return FeatureMap<S>{x, h, w};
  }

 private:
  BackboneConfig cfg_;
  std::vector<ResidualBlock<S>> blocks_;
};

}  // namespace ftmtl
