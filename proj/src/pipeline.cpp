#include "ftmtl/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "ftmtl/errors.hpp"

namespace ftmtl {

namespace {

struct ImageTruth {
  std::vector<Box> boxes;
  std::vector<int> classes;  // 1 benign, 2 malignant
};

ImageTruth truth_of(const Sample& s) {
  ImageTruth t;
  for (const auto& m : s.masses) {
    t.boxes.push_back(m.bbox);
    t.classes.push_back(m.label == MassLabel::Benign ? 1 : 2);
  }
  return t;
}

class AnchorCache {
 public:
  explicit AnchorCache(const std::vector<double>& scales) : scales_(scales) {}

  const AnchorSet& for_size(int w, int h) {
    const auto key = std::make_pair(w, h);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    const auto sizes = anchor_size_presets(std::min(w, h), scales_);
    auto set = generate_anchors(h / 16, w / 16, 16, sizes, w, h);
    return cache_.emplace(key, std::move(set)).first->second;
  }

 private:
  std::vector<double> scales_;
  std::map<std::pair<int, int>, AnchorSet> cache_;
};

std::vector<double> to_doubles(const Tensor<float>& t) {
  std::vector<double> out(static_cast<std::size_t>(t.size()));
  for (long i = 0; i < t.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(t.value()[i]);
  return out;
}

struct RoiSample {
  Box box;        // candidate anchor box
  int cls = 0;    // 0 background, 1 benign, 2 malignant
  int gt = -1;    // index into the image truth when positive
};

/// Candidate selection + class targets + composition control: every positive
/// candidate is eligible, at least a third of the sample is positive when
/// possible, negatives are the highest-scoring ones.
std::vector<RoiSample> sample_rois(const AnchorSet& anchors, const std::vector<double>& scores,
                                   const AnchorMatch& match, const ImageTruth& truth, const TrainConfig& cfg) {
  const auto keep = select_candidates_train(scores, cfg.score_threshold, cfg.topn_train, match, anchors.anchors,
                                            truth.boxes);
  std::vector<int> pos, neg;
  for (int idx : keep) {
    const auto i = static_cast<std::size_t>(idx);
    if (match.labels[i] == AnchorLabel::Positive && match.matched_gt[i] >= 0)
      pos.push_back(idx);
    else
      neg.push_back(idx);
  }
  std::stable_sort(pos.begin(), pos.end(), [&](int a, int b) {
    return match.best_iou[static_cast<std::size_t>(a)] > match.best_iou[static_cast<std::size_t>(b)];
  });
  // negatives stay score-ordered (hard negatives first)

  const int K = cfg.roi_per_image;
  const int n_pos = std::min(static_cast<int>(pos.size()), K);
  // at most two negatives per positive keeps the class mix at >= 1/3 positive
  const int n_neg = std::min(static_cast<int>(neg.size()), std::min(K - n_pos, 2 * n_pos));

  std::vector<RoiSample> rois;
  for (int i = 0; i < n_pos; ++i) {
    const auto idx = static_cast<std::size_t>(pos[static_cast<std::size_t>(i)]);
    RoiSample r;
    r.box = anchors.anchors[idx];
    r.gt = match.matched_gt[idx];
    r.cls = truth.classes[static_cast<std::size_t>(r.gt)];
    rois.push_back(r);
  }
  for (int i = 0; i < n_neg; ++i) {
    RoiSample r;
    r.box = anchors.anchors[static_cast<std::size_t>(neg[static_cast<std::size_t>(i)])];
    rois.push_back(r);
  }
  return rois;
}

struct RoiLossTerms {
  Tensor<float> cls, box, mask;
  bool has_box = false, has_mask = false;
};

/// Head forward on one ROI plus its loss terms against the assigned truth.
RoiLossTerms roi_losses(MtlModel<float>& model, const Tensor<float>& features, const RoiSample& roi,
                        const Sample& sample) {
  RoiLossTerms out;
  Tensor<float> roi_feat = roi_align(features, roi.box, 16);
  Tensor<float> deltas = model.detection_head().deltas(roi_feat);
  SegOutput<float> seg = model.segmentation_head()(roi_feat);
  Tensor<float> transfer = model.transfer_vector(seg);
  Tensor<float> probs = model.classification_head()(roi_feat, transfer);

  out.cls = cls_loss_graph(probs, roi.cls);
  if (roi.cls != 0) {
    const auto& mass = sample.masses[static_cast<std::size_t>(roi.gt)];
    out.box = box_loss_graph(deltas, box_param(mass.bbox, roi.box));
    out.has_box = true;
    const auto target = resize_mask_to_roi(mass.mask, sample.width, sample.height, roi.box);
    const std::vector<float> zeros(target.size(), 0.0f);
    const bool benign = mass.label == MassLabel::Benign;
    Tensor<float> match_loss = mask_loss_graph(benign ? seg.benign_map : seg.malignant_map, target);
    Tensor<float> other_loss = mask_loss_graph(benign ? seg.malignant_map : seg.benign_map, zeros);
    out.mask = scale(add(match_loss, other_loss), 0.5f);
    out.has_mask = true;
  }
  return out;
}

struct ImageLoss {
  Tensor<float> total;  // graph scalar fed to backward()
  bool has_total = false;
};

void add_term(ImageLoss& acc, const Tensor<float>& term) {
  acc.total = acc.has_total ? add(acc.total, term) : term;
  acc.has_total = true;
}

void add_term_to_batch(Tensor<float>& total, bool& has, const Tensor<float>& term) {
  total = has ? add(total, term) : term;
  has = true;
}

/// Per-ROI head losses averaged over the ROI batch, lambda-weighted into the
/// image total; the record collects the per-image component values.
void accumulate_head_losses(MtlModel<float>& model, const Tensor<float>& features,
                            const std::vector<RoiSample>& rois, const Sample& sample, const LossWeights& lw,
                            ImageLoss& img, LossRecord& rec) {
  if (rois.empty()) return;
  Tensor<float> cls_sum, box_sum, mask_sum;
  bool has_cls = false, has_box = false, has_mask = false;
  for (const auto& roi : rois) {
    auto terms = roi_losses(model, features, roi, sample);
    add_term_to_batch(cls_sum, has_cls, terms.cls);
    if (terms.has_box) add_term_to_batch(box_sum, has_box, terms.box);
    if (terms.has_mask) add_term_to_batch(mask_sum, has_mask, terms.mask);
  }
  const float inv = 1.0f / static_cast<float>(rois.size());
  Tensor<float> cls_avg = scale(cls_sum, inv);
  rec.l_cls += static_cast<double>(cls_avg.item());
  add_term(img, scale(cls_avg, static_cast<float>(lw.lambda_cls)));
  if (has_box) {
    Tensor<float> box_avg = scale(box_sum, inv);  // background ROIs contribute 0
    rec.l_box += static_cast<double>(box_avg.item());
    add_term(img, scale(box_avg, static_cast<float>(lw.lambda_box)));
  }
  if (has_mask) {
    Tensor<float> mask_avg = scale(mask_sum, inv);
    rec.l_mask += static_cast<double>(mask_avg.item());
    add_term(img, scale(mask_avg, static_cast<float>(lw.lambda_mask)));
  }
}

}  // namespace

TrainResult five_step_train(MtlModel<float>& model, const std::vector<Sample>& train_set, const TrainConfig& cfg,
                            const PhaseObserver& on_phase_end) {
  if (train_set.empty()) throw std::invalid_argument("five_step_train: empty training set");
  model.init_weights(cfg.seed);

  TrainResult result;
  AnchorCache anchors(model.config().anchor_scales);
  auto& tape = Tape<float>::active();

  // Frozen-phase cache: features and proposal scores are constant while the
  // shared layers are fixed, so they are computed once per image.
  struct Frozen {
    Tensor<float> features;
    std::vector<double> scores;
  };
  std::vector<Frozen> frozen;

  const LossWeights& lw = cfg.lambdas;
  (void)l_uni(LossBreakdown{}, lw);  // validates the weights

  for (char phase : {'B', 'C', 'D'}) {
    if (phase == 'C') {
      frozen.clear();
      frozen.reserve(train_set.size());
      NoGradGuard ng;
      for (const auto& s : train_set) {
        const auto& aset = anchors.for_size(s.width, s.height);
        auto fmap = model.backbone()(image_tensor(s));
        Frozen f;
        f.features = fmap.features;
        f.scores = to_doubles(model.rpn().scores(fmap, aset.anchors));
        frozen.push_back(std::move(f));
      }
    }

    const auto group = phase == 'B'   ? model.backbone_rpn_params()
                       : phase == 'C' ? model.head_params()
                                      : model.all_params();

    for (int epoch = 0; epoch < cfg.epochs_per_phase; ++epoch) {
      std::vector<std::size_t> order(train_set.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng order_rng(mix_seed(cfg.seed, std::string("order:") + phase, static_cast<std::uint64_t>(epoch)));
      for (std::size_t i = order.size() - 1; i > 0; --i)
        std::swap(order[i], order[static_cast<std::size_t>(order_rng.uniform_int(0, static_cast<std::int64_t>(i)))]);

      int batch_index = 0;
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
        tape.clear();

        Tensor<float> batch_total;
        bool has_batch = false;
        LossRecord rec{phase, epoch, batch_index, 0, 0, 0, 0, 0};

        for (std::size_t oi = start; oi < stop; ++oi) {
          const Sample& s = train_set[order[oi]];
          const auto& aset = anchors.for_size(s.width, s.height);
          const auto truth = truth_of(s);
          const auto match = match_anchors(aset.anchors, truth.boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou);
          ImageLoss img;

          if (phase == 'B' || (phase == 'D' && cfg.include_prop_in_joint)) {
            auto fmap = model.backbone()(image_tensor(s));
            Tensor<float> scores_t = model.rpn().scores(fmap, aset.anchors);

            // negatives capped at neg_ratio x positives: the highest-scoring
            // half (hard negatives) plus a random remainder
            std::vector<std::size_t> pos, neg;
            for (std::size_t i = 0; i < match.labels.size(); ++i) {
              if (match.labels[i] == AnchorLabel::Positive) pos.push_back(i);
              if (match.labels[i] == AnchorLabel::Negative) neg.push_back(i);
            }
            Rng sub_rng(mix_seed(cfg.seed, "prop:" + s.id,
                                 static_cast<std::uint64_t>(epoch) * 16 + static_cast<std::uint64_t>(phase)));
            const std::size_t keep_neg =
                std::min(neg.size(), pos.size() * static_cast<std::size_t>(cfg.neg_ratio));
            const std::size_t n_hard = 0;
            std::stable_sort(neg.begin(), neg.end(), [&](std::size_t a, std::size_t b) {
              return scores_t.value()[static_cast<long>(a)] > scores_t.value()[static_cast<long>(b)];
            });
            for (std::size_t i = n_hard; i < keep_neg; ++i) {
              const auto j = static_cast<std::size_t>(
                  sub_rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(neg.size()) - 1));
              std::swap(neg[i], neg[j]);
            }
            neg.resize(keep_neg);
            if (!pos.empty() || !neg.empty()) {
              std::vector<long> idx;
              std::vector<float> tg;
              for (auto i : pos) {
                idx.push_back(static_cast<long>(i));
                tg.push_back(1.0f);
              }
              for (auto i : neg) {
                idx.push_back(static_cast<long>(i));
                tg.push_back(0.0f);
              }
              Tensor<float> lp = prop_loss_graph(scores_t, idx, tg);
              rec.l_prop += static_cast<double>(lp.item());
              add_term(img, lp);
            }

            if (phase == 'D') {
              const auto rois = sample_rois(aset, to_doubles(scores_t), match, truth, cfg);
              accumulate_head_losses(model, fmap.features, rois, s, lw, img, rec);
            }
          } else if (phase == 'C') {
            const Frozen& f = frozen[order[oi]];
            const auto rois = sample_rois(aset, f.scores, match, truth, cfg);
            accumulate_head_losses(model, f.features, rois, s, lw, img, rec);
          }

          if (img.has_total) add_term_to_batch(batch_total, has_batch, img.total);
        }

        const int denom = static_cast<int>(stop - start);
        rec.l_prop /= denom;
        rec.l_cls /= denom;
        rec.l_box /= denom;
        rec.l_mask /= denom;
        rec.l_uni = lw.lambda_cls * rec.l_cls + lw.lambda_box * rec.l_box + lw.lambda_mask * rec.l_mask;
        result.history.push_back(rec);

        if (has_batch) {
          Tensor<float> loss = scale(batch_total, 1.0f / static_cast<float>(denom));
          if (!std::isfinite(static_cast<double>(loss.item())))
            throw NumericAbort("training aborted: non-finite loss in phase " + std::string(1, phase) +
                               ", epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index));
          tape.backward(loss);
          sgd_momentum_step(group, cfg.lr, cfg.momentum);
        }
        tape.clear();
        ++batch_index;
      }
    }
    if (on_phase_end) on_phase_end(phase, model);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

VetoResult malignant_veto(const std::vector<Detection>& detections) {
  if (detections.empty()) return VetoResult{0.0, true};
  double max_malignant = -1.0, max_benign = -1.0;
  for (const auto& d : detections) {
    if (d.cls == RoiClass::Malignant) max_malignant = std::max(max_malignant, d.probs[2]);
    if (d.cls == RoiClass::Benign) max_benign = std::max(max_benign, d.probs[1]);
  }
  if (max_malignant >= 0.0) return VetoResult{max_malignant, false};
  return VetoResult{1.0 - max_benign, false};
}

InferResult infer(MtlModel<float>& model, const Sample& sample, const TrainConfig& cfg) {
  NoGradGuard ng;
  InferResult out;

  AnchorCache cache(model.config().anchor_scales);
  const auto& aset = cache.for_size(sample.width, sample.height);
  auto fmap = model.backbone()(image_tensor(sample));
  const auto scores = to_doubles(model.rpn().scores(fmap, aset.anchors));
  const auto keep = select_candidates(scores, cfg.score_threshold, cfg.topn_infer);

  std::vector<Detection> dets;
  for (int idx : keep) {
    const Box& anchor = aset.anchors[static_cast<std::size_t>(idx)];
    Tensor<float> roi_feat = roi_align(fmap.features, anchor, 16);
    Box refined = model.detection_head().refine(roi_feat, anchor).clipped(sample.width, sample.height);
    if (!refined.valid()) continue;

    Tensor<float> refined_feat = roi_align(fmap.features, refined, 16);
    SegOutput<float> seg = model.segmentation_head()(refined_feat);
    Tensor<float> transfer = model.transfer_vector(seg);
    Tensor<float> probs = model.classification_head()(refined_feat, transfer);

    const RoiClass cls = classify(probs);
    if (cls == RoiClass::Background) continue;

    Detection d;
    d.box = refined;
    d.objectness = scores[static_cast<std::size_t>(idx)];
    for (int i = 0; i < 3; ++i) d.probs[static_cast<std::size_t>(i)] = static_cast<double>(probs.value()[i]);
    d.cls = cls;
    const auto mask = select_final_mask(probs, seg.benign_map, seg.malignant_map);
    d.mask.assign(mask->data(), mask->data() + mask->size());
    dets.push_back(std::move(d));
  }

  // class-agnostic NMS keeping the highest classification confidence
  std::vector<Box> boxes;
  std::vector<double> ranks;
  for (const auto& d : dets) {
    boxes.push_back(d.box);
    ranks.push_back(d.p_max());
  }
  for (int idx : nms(boxes, ranks, cfg.nms_iou)) out.detections.push_back(dets[static_cast<std::size_t>(idx)]);
  out.veto = malignant_veto(out.detections);
  return out;
}

}  // namespace ftmtl
