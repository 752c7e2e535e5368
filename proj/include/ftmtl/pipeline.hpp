#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "ftmtl/data.hpp"
#include "ftmtl/losses.hpp"
#include "ftmtl/model.hpp"

namespace ftmtl {

struct TrainConfig {
  double lr = 0.005;
  double momentum = 0.9;
  int batch_size = 4;
  int epochs_per_phase = 10;
  LossWeights lambdas;
  std::uint64_t seed = 0;
  bool include_prop_in_joint = true;

  double rpn_pos_iou = 0.5;
  double rpn_neg_iou = 0.3;
  double score_threshold = 0.5;
  int topn_train = 32;
  int topn_infer = 16;
  int roi_per_image = 16;
  int neg_ratio = 3;
  double nms_iou = 0.5;
};

// 'B' = backbone+RPN on the proposal loss, 'C' = heads only on the combined
// loss (shared layers frozen), 'D' = everything jointly.
struct LossRecord {
  char phase;
  int epoch;
  int batch;
  double l_prop, l_cls, l_box, l_mask, l_uni;
};

struct TrainResult {
  std::vector<LossRecord> history;
};

using PhaseObserver = std::function<void(char phase, MtlModel<float>&)>;

/// Full training schedule: random initialization, proposal phase, frozen-
/// backbone head phase, joint phase. Throws NumericAbort with phase / epoch /
/// batch diagnostics when a loss stops being finite.
TrainResult five_step_train(MtlModel<float>& model, const std::vector<Sample>& train_set,
                            const TrainConfig& cfg, const PhaseObserver& on_phase_end = nullptr);

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

struct Detection {
  Box box;
  double objectness = 0;
  std::array<double, 3> probs{};  // background, benign, malignant
  RoiClass cls = RoiClass::Background;
  std::vector<float> mask;  // 28x28 probabilities for the selected map

  double p_max() const { return std::max(probs[1], probs[2]); }
  double confidence() const { return probs[1] + probs[2]; }
};

struct VetoResult {
  double score = 0.0;
  bool no_findings = false;
};

/// Image-level malignancy score: max malignant probability when any detection
/// is malignant, otherwise 1 - (max benign probability); empty input scores 0
/// with the no-findings flag.
VetoResult malignant_veto(const std::vector<Detection>& detections);

struct InferResult {
  std::vector<Detection> detections;  // post-NMS, background dropped
  VetoResult veto;
};

/// Sequential inference: proposals, box refinement, segmentation on the
/// refined boxes, transfer-aided classification, NMS, veto.
InferResult infer(MtlModel<float>& model, const Sample& sample, const TrainConfig& cfg);

}  // namespace ftmtl
