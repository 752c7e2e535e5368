#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ftmtl/losses.hpp"
#include "ftmtl/rng.hpp"

using namespace ftmtl;

TEST_CASE("smooth_l1") {
  CHECK(smooth_l1(0.0) == 0.0);
  CHECK(smooth_l1(0.5) == 0.125);
  CHECK(smooth_l1(2.0) == 1.5);
  CHECK(smooth_l1(-1.0) == 0.5);  // continuous at the knee
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform(-3, 3);
    CHECK(smooth_l1(x) == smooth_l1(-x));  // even
    CHECK(smooth_l1(x) >= 0.0);
    // derivative is clamp(x, -1, 1), checked by central differences
    const double h = 1e-6;
    const double numeric = (smooth_l1(x + h) - smooth_l1(x - h)) / (2 * h);
    CHECK(std::abs(numeric - std::clamp(x, -1.0, 1.0)) < 1e-5);
  }
}

TEST_CASE("box_param") {
  const Box anchor{10, 20, 50, 50};
  SUBCASE("box equal to the anchor encodes to zeros") {
    const auto v = box_param(anchor, anchor);
    for (double d : v) CHECK(d == 0.0);
  }
  SUBCASE("worked example") {
    const auto v = box_param(Box{20, 20, 55, 50}, anchor);
    CHECK(v[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(v[1] == doctest::Approx(0.0));
    CHECK(v[2] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(v[3] == doctest::Approx(0.0));
  }
  SUBCASE("non-positive dimensions rejected") {
    CHECK_THROWS_AS(box_param(Box{0, 5, 1, 1}, anchor), std::invalid_argument);
    CHECK_THROWS_AS(box_param(anchor, Box{5, -2, 1, 1}), std::invalid_argument);
  }
}

TEST_CASE("l_box") {
  const Box anchor{10, 20, 50, 50};
  SUBCASE("identical boxes cost nothing") { CHECK(l_box(anchor, anchor, anchor) == 0.0); }
  SUBCASE("component difference (0.5,0,0,0) costs 0.125") {
    // predicted width differs so that the first encoded component differs by 0.5
    const Box truth = anchor;
    const Box pred{anchor.w * std::exp(0.5), anchor.h, anchor.cx, anchor.cy};
    CHECK(l_box(pred, truth, anchor) == doctest::Approx(0.125).epsilon(1e-9));
  }
  SUBCASE("random case vs a componentwise scalar loop") {
    Rng rng(7);
    for (int i = 0; i < 100; ++i) {
      const Box t{rng.uniform(2, 30), rng.uniform(2, 30), rng.uniform(0, 60), rng.uniform(0, 60)};
      const Box y{rng.uniform(2, 30), rng.uniform(2, 30), rng.uniform(0, 60), rng.uniform(0, 60)};
      const auto ft = box_param(t, anchor);
      const auto fy = box_param(y, anchor);
      double ref = 0;
      for (int c = 0; c < 4; ++c) ref += smooth_l1(ft[static_cast<std::size_t>(c)] - fy[static_cast<std::size_t>(c)]);
      CHECK(std::abs(l_box(t, y, anchor) - ref) < 1e-12);
      CHECK(std::abs(l_box(t, y, anchor) - l_box(y, t, anchor)) < 1e-12);  // symmetry
    }
  }
}

TEST_CASE("cross_entropy") {
  CHECK(cross_entropy(1.0 - kProbEps, 1.0) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(cross_entropy(0.5, 0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(cross_entropy(0.5, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(std::isfinite(cross_entropy(0.0, 1.0)));  // clamped
  CHECK(std::isfinite(cross_entropy(1.0, 0.0)));
  Rng rng(11);
  for (int i = 0; i < 100; ++i) {
    const double p = rng.uniform(0.01, 0.99);
    const double y = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const double ref = -y * std::log(p) - (1 - y) * std::log(1 - p);
    CHECK(std::abs(cross_entropy(p, y) - ref) < 1e-12);
    CHECK(cross_entropy(p, y) >= 0.0);
  }
}

TEST_CASE("l_mask") {
  const int w = 32, h = 32;
  std::vector<std::uint8_t> gt(static_cast<std::size_t>(w) * h, 0);
  for (int y = 10; y < 20; ++y)
    for (int x = 8; x < 24; ++x) gt[static_cast<std::size_t>(y) * w + x] = 1;
  const Box roi = Box::from_corners(6, 8, 26, 22);

  SUBCASE("prediction equal to the resized target is almost free") {
    const auto target = resize_mask_to_roi(gt, w, h, roi);
    std::vector<double> pred(target.size());
    for (std::size_t i = 0; i < target.size(); ++i)
      pred[i] = target[i] > 0.5f ? 1.0 - kProbEps : kProbEps;
    CHECK(l_mask(pred, gt, w, h, roi) < 1e-5);
  }
  SUBCASE("uniform 0.5 prediction costs ln 2") {
    std::vector<double> pred(28 * 28, 0.5);
    CHECK(l_mask(pred, gt, w, h, roi) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("random prediction vs a pixel-loop oracle") {
    Rng rng(13);
    std::vector<double> pred(28 * 28);
    for (auto& p : pred) p = rng.uniform(0.02, 0.98);
    const auto target = resize_mask_to_roi(gt, w, h, roi);
    double ref = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double t = target[i];
      ref += -t * std::log(pred[i]) - (1 - t) * std::log(1 - pred[i]);
    }
    ref /= static_cast<double>(pred.size());
    CHECK(std::abs(l_mask(pred, gt, w, h, roi) - ref) < 1e-10);
  }
  SUBCASE("ROI that misses the image entirely is rejected") {
    std::vector<double> pred(28 * 28, 0.5);
    CHECK_THROWS_AS(l_mask(pred, gt, w, h, Box::from_corners(100, 100, 120, 120)), std::invalid_argument);
  }
  SUBCASE("nearest-neighbor resampling keeps the target binary") {
    const auto target = resize_mask_to_roi(gt, w, h, roi);
    for (float t : target) CHECK((t == 0.0f || t == 1.0f));
  }
}

TEST_CASE("l_cls") {
  CHECK(l_cls({1.0 - 2 * kProbEps, kProbEps, kProbEps}, 0) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(l_cls({1.0 / 3, 1.0 / 3, 1.0 / 3}, 2) == doctest::Approx(std::log(3.0)).epsilon(1e-9));
  CHECK(std::isfinite(l_cls({0.0, 1.0, 0.0}, 0)));
  CHECK_THROWS_AS(l_cls({0.5, 0.3, 0.2}, 3), std::invalid_argument);
  Rng rng(17);
  for (int i = 0; i < 50; ++i) {
    std::array<double, 3> p{rng.uniform(0.05, 0.9), 0, 0};
    p[1] = rng.uniform(0.05, 1.0 - p[0] - 0.05);
    p[2] = 1.0 - p[0] - p[1];
    const int u = static_cast<int>(rng.uniform_int(0, 2));
    CHECK(std::abs(l_cls(p, u) + std::log(p[static_cast<std::size_t>(u)])) < 1e-12);
  }
}

TEST_CASE("l_prop") {
  SUBCASE("perfect scores cost almost nothing") {
    std::vector<double> scores{1.0 - kProbEps, 1.0 - kProbEps, kProbEps, kProbEps};
    std::vector<AnchorLabel> labels{AnchorLabel::Positive, AnchorLabel::Positive, AnchorLabel::Negative,
                                    AnchorLabel::Negative};
    Rng rng(19);
    CHECK(l_prop(scores, labels, rng).value < 1e-5);
  }
  SUBCASE("uniform 0.5 scores cost ln 2") {
    std::vector<double> scores(8, 0.5);
    std::vector<AnchorLabel> labels(8, AnchorLabel::Negative);
    labels[0] = labels[1] = AnchorLabel::Positive;
    Rng rng(23);
    CHECK(l_prop(scores, labels, rng).value == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("matches a mean-BCE oracle when no subsampling is needed") {
    Rng rng(29);
    std::vector<double> scores;
    std::vector<AnchorLabel> labels;
    for (int i = 0; i < 4; ++i) {
      scores.push_back(rng.uniform(0.1, 0.9));
      labels.push_back(AnchorLabel::Positive);
    }
    for (int i = 0; i < 10; ++i) {  // 10 <= 3*4, all negatives kept
      scores.push_back(rng.uniform(0.1, 0.9));
      labels.push_back(AnchorLabel::Negative);
    }
    labels.push_back(AnchorLabel::Ignore);  // excluded
    scores.push_back(0.99);
    Rng lrng(31);
    const auto out = l_prop(scores, labels, lrng);
    CHECK(out.used_anchors == 14);
    double ref = 0;
    for (int i = 0; i < 4; ++i) ref += cross_entropy(scores[static_cast<std::size_t>(i)], 1.0);
    for (int i = 4; i < 14; ++i) ref += cross_entropy(scores[static_cast<std::size_t>(i)], 0.0);
    CHECK(std::abs(out.value - ref / 14) < 1e-12);
  }
  SUBCASE("negatives subsampled to at most 3x positives") {
    std::vector<double> scores(50, 0.4);
    std::vector<AnchorLabel> labels(50, AnchorLabel::Negative);
    labels[0] = AnchorLabel::Positive;
    Rng rng(37);
    const auto out = l_prop(scores, labels, rng);
    CHECK(out.used_anchors == 4);  // 1 positive + 3 negatives
  }
  SUBCASE("no usable anchors flags a warning and costs zero") {
    std::vector<double> scores{0.5};
    std::vector<AnchorLabel> labels{AnchorLabel::Ignore};
    Rng rng(41);
    const auto out = l_prop(scores, labels, rng);
    CHECK(out.no_usable_anchors);
    CHECK(out.value == 0.0);
  }
}

TEST_CASE("l_uni") {
  SUBCASE("components (1,2,3) with unit weights sum to 6") {
    LossBreakdown parts;
    parts.l_cls = 1;
    parts.l_box = 2;
    parts.l_mask = 3;
    CHECK(l_uni(parts, LossWeights{}) == 6.0);
  }
  SUBCASE("zero weights zero the loss") {
    LossBreakdown parts;
    parts.l_cls = 4;
    parts.l_box = 5;
    parts.l_mask = 6;
    CHECK(l_uni(parts, LossWeights{0, 0, 0}) == 0.0);
  }
  SUBCASE("random components vs the dot-product oracle") {
    Rng rng(43);
    for (int i = 0; i < 50; ++i) {
      LossBreakdown parts;
      parts.l_cls = rng.uniform(0, 5);
      parts.l_box = rng.uniform(0, 5);
      parts.l_mask = rng.uniform(0, 5);
      LossWeights w{rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 2)};
      CHECK(l_uni(parts, w) ==
            w.lambda_cls * parts.l_cls + w.lambda_box * parts.l_box + w.lambda_mask * parts.l_mask);
    }
  }
  SUBCASE("negative weights rejected") {
    CHECK_THROWS_AS(l_uni(LossBreakdown{}, LossWeights{-1, 1, 1}), std::invalid_argument);
  }
}

TEST_CASE("graph losses agree with the scalar forms and differentiate") {
  Rng rng(47);
  SUBCASE("box loss") {
    Tensor<double> deltas({4});
    std::array<double, 4> target;
    for (int i = 0; i < 4; ++i) {
      deltas.value()[i] = rng.uniform(-2, 2);
      target[static_cast<std::size_t>(i)] = rng.uniform(-2, 2);
    }
    double ref = 0;
    for (int i = 0; i < 4; ++i) ref += smooth_l1(deltas.value()[i] - target[static_cast<std::size_t>(i)]);
    CHECK(box_loss_graph(deltas, target).item() == doctest::Approx(ref).epsilon(1e-12));
    CHECK(grad_check<double>([&](const Tensor<double>& v) { return box_loss_graph(v, target); }, deltas, 1e-6) <
          1e-4);
  }
  SUBCASE("mask loss") {
    Tensor<double> pred({28, 28});
    std::vector<float> target(28 * 28);
    for (long i = 0; i < pred.size(); ++i) {
      pred.value()[i] = rng.uniform(0.05, 0.95);
      target[static_cast<std::size_t>(i)] = rng.bernoulli(0.4) ? 1.0f : 0.0f;
    }
    double ref = 0;
    for (long i = 0; i < pred.size(); ++i)
      ref += cross_entropy(pred.value()[i], target[static_cast<std::size_t>(i)]);
    ref /= static_cast<double>(pred.size());
    CHECK(mask_loss_graph(pred, target).item() == doctest::Approx(ref).epsilon(1e-10));
    CHECK(grad_check<double>([&](const Tensor<double>& v) { return mask_loss_graph(v, target); }, pred, 1e-6) <
          1e-4);
  }
  SUBCASE("classification loss") {
    auto p = Tensor<double>::from({3}, {0.2, 0.5, 0.3});
    CHECK(cls_loss_graph(p, 1).item() == doctest::Approx(l_cls({0.2, 0.5, 0.3}, 1)).epsilon(1e-12));
  }
  SUBCASE("proposal loss over gathered indices") {
    Tensor<double> scores({6});
    for (long i = 0; i < 6; ++i) scores.value()[i] = rng.uniform(0.1, 0.9);
    const std::vector<long> idx{0, 2, 5};
    const std::vector<float> targets{1.0f, 0.0f, 1.0f};
    double ref = 0;
    ref += cross_entropy(scores.value()[0], 1.0);
    ref += cross_entropy(scores.value()[2], 0.0);
    ref += cross_entropy(scores.value()[5], 1.0);
    CHECK(prop_loss_graph(scores, idx, targets).item() == doctest::Approx(ref / 3).epsilon(1e-12));
    CHECK(grad_check<double>(
              [&](const Tensor<double>& v) { return prop_loss_graph(v, idx, targets); }, scores, 1e-6) < 1e-4);
  }
}
