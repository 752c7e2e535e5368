#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ftmtl/rng.hpp"
#include "ftmtl/tensor.hpp"
#include "oracles.hpp"

using namespace ftmtl;

namespace {

template <typename S>
Tensor<S> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<S> t(std::move(shape));
  for (long i = 0; i < t.size(); ++i) t.value()[i] = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

std::vector<double> to_vec(const Tensor<double>& t) {
  return {t.data(), t.data() + t.size()};
}

}  // namespace

TEST_CASE("tensor basics and invariants") {
  Tensor<double> t = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.size() == 6);
  CHECK(t.at({1, 2}) == 6);
  CHECK_THROWS_AS(Tensor<double>::from({2, 2}, {1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor<double>({0, 3}), std::invalid_argument);
  CHECK(t.all_finite());
}

TEST_CASE("conv2d matches the sliding-window oracle") {
  SUBCASE("zero input gives zero output") {
    Tensor<double> x({1, 4, 4});
    Tensor<double> w = Tensor<double>::full({1, 1, 3, 3}, 0.7);
    Tensor<double> b({1});
    auto y = conv2d(x, w, b, 1, 0);
    CHECK(y.shape() == Shape{1, 2, 2});
    for (long i = 0; i < y.size(); ++i) CHECK(y.value()[i] == 0.0);
  }
  SUBCASE("1x1 identity kernel reproduces the input") {
    Rng rng(3);
    Tensor<double> x = random_tensor<double>({1, 3, 3}, rng);
    Tensor<double> w = Tensor<double>::full({1, 1, 1, 1}, 1.0);
    Tensor<double> b({1});
    auto y = conv2d(x, w, b, 1, 0);
    for (long i = 0; i < x.size(); ++i) CHECK(y.value()[i] == doctest::Approx(x.value()[i]).epsilon(1e-15));
  }
  SUBCASE("random case vs oracle, strides and padding") {
    Rng rng(11);
    for (int trial = 0; trial < 8; ++trial) {
      const int stride = 1 + trial % 2, pad = trial % 3 == 0 ? 1 : 0;
      Tensor<double> x = random_tensor<double>({2, 5, 5}, rng);
      Tensor<double> w = random_tensor<double>({3, 2, 3, 3}, rng);
      Tensor<double> b = random_tensor<double>({3}, rng);
      auto y = conv2d(x, w, b, stride, pad);
      int ho, wo;
      auto ref = oracle::conv2d(to_vec(x), 2, 5, 5, to_vec(w), 3, 3, to_vec(b), stride, pad, ho, wo);
      REQUIRE(y.shape() == Shape{3, ho, wo});
      for (long i = 0; i < y.size(); ++i)
        CHECK(std::abs(y.value()[i] - ref[static_cast<std::size_t>(i)]) < 1e-10);
    }
  }
  SUBCASE("channel mismatch is a shape error") {
    Tensor<double> x({2, 4, 4}), w({1, 3, 3, 3}), b({1});
    CHECK_THROWS_AS(conv2d(x, w, b, 1, 0), std::invalid_argument);
  }
  SUBCASE("kernel larger than padded input rejected") {
    Tensor<double> x({1, 2, 2}), w({1, 1, 3, 3}), b({1});
    CHECK_THROWS_AS(conv2d(x, w, b, 1, 0), std::invalid_argument);
  }
}

TEST_CASE("conv_transpose2d doubles the resolution and matches the zero-stuffing oracle") {
  SUBCASE("7x7 -> 14x14 -> 28x28") {
    Rng rng(5);
    Tensor<float> x = random_tensor<float>({3, 7, 7}, rng);
    Tensor<float> w1 = random_tensor<float>({4, 3, 2, 2}, rng);
    Tensor<float> b1({4});
    auto y = conv_transpose2d(x, w1, b1);
    CHECK(y.shape() == Shape{4, 14, 14});
    Tensor<float> w2 = random_tensor<float>({2, 4, 2, 2}, rng);
    Tensor<float> b2({2});
    CHECK(conv_transpose2d(y, w2, b2).shape() == Shape{2, 28, 28});
  }
  SUBCASE("zero input broadcasts the bias") {
    Tensor<double> x({2, 3, 3});
    Tensor<double> w({3, 2, 2, 2});
    Tensor<double> b = Tensor<double>::from({3}, {0.5, -1.0, 2.0});
    auto y = conv_transpose2d(x, w, b);
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 36; ++i) CHECK(y.value()[c * 36 + i] == b.value()[c]);
  }
  SUBCASE("random case vs oracle, kernels 2 and 4") {
    Rng rng(7);
    for (int k : {2, 4}) {
      Tensor<double> x = random_tensor<double>({2, 5, 6}, rng);
      Tensor<double> w = random_tensor<double>({3, 2, k, k}, rng);
      Tensor<double> b = random_tensor<double>({3}, rng);
      auto y = conv_transpose2d(x, w, b);
      int ho, wo;
      auto ref = oracle::conv_transpose2d(to_vec(x), 2, 5, 6, to_vec(w), 3, k, to_vec(b), 2, (k - 2) / 2, ho, wo);
      REQUIRE(ho == 10);
      REQUIRE(wo == 12);
      REQUIRE(y.shape() == Shape{3, 10, 12});
      for (long i = 0; i < y.size(); ++i)
        CHECK(std::abs(y.value()[i] - ref[static_cast<std::size_t>(i)]) < 1e-10);
    }
  }
  SUBCASE("non-doubling configurations rejected") {
    Tensor<double> x({1, 3, 3}), w({1, 1, 3, 3}), b({1});
    CHECK_THROWS_AS(conv_transpose2d(x, w, b, 2), std::invalid_argument);  // odd kernel
    Tensor<double> w2({1, 1, 2, 2});
    CHECK_THROWS_AS(conv_transpose2d(x, w2, b, 1), std::invalid_argument);  // wrong stride
  }
}

TEST_CASE("max_pool2d") {
  SUBCASE("constant field stays constant") {
    auto y = max_pool2d(Tensor<double>::full({1, 6, 6}, 3.25), 2, 2);
    for (long i = 0; i < y.size(); ++i) CHECK(y.value()[i] == 3.25);
  }
  SUBCASE("2x2 window picks the max") {
    auto x = Tensor<double>::from({1, 2, 2}, {1, 2, 3, 4});
    CHECK(max_pool2d(x, 2, 2).item() == 4);
  }
  SUBCASE("random 28x28 vs per-window oracle, exact") {
    Rng rng(13);
    Tensor<double> x = random_tensor<double>({3, 28, 28}, rng);
    auto y = max_pool2d(x, 2, 2);
    int ho, wo;
    auto ref = oracle::max_pool2d(to_vec(x), 3, 28, 28, 2, 2, ho, wo);
    REQUIRE(y.shape() == Shape{3, 14, 14});
    for (long i = 0; i < y.size(); ++i) CHECK(y.value()[i] == ref[static_cast<std::size_t>(i)]);
  }
  SUBCASE("window larger than input rejected") {
    CHECK_THROWS_AS(max_pool2d(Tensor<double>({1, 2, 2}), 3, 1), std::invalid_argument);
  }
  SUBCASE("tie routes gradient to the first occurrence") {
    auto x = Tensor<double>::from({1, 2, 2}, {5, 5, 5, 5});
    x.set_requires_grad(true);
    Tape<double>::active().clear();
    backward(sum(max_pool2d(x, 2, 2)));
    CHECK(x.grad()[0] == 1.0);
    CHECK(x.grad()[1] == 0.0);
    CHECK(x.grad()[2] == 0.0);
    CHECK(x.grad()[3] == 0.0);
    Tape<double>::active().clear();
  }
}

TEST_CASE("global_mean_pool") {
  CHECK(global_mean_pool(Tensor<double>::full({2, 3, 3}, 1.5)).value()[1] == 1.5);
  auto x = Tensor<double>::from({1, 2, 2}, {0, 2, 4, 6});
  CHECK(global_mean_pool(x).item() == 3.0);
  Rng rng(17);
  Tensor<double> r = random_tensor<double>({4, 5, 7}, rng);
  auto y = global_mean_pool(r);
  auto ref = oracle::global_mean_pool(to_vec(r), 4, 5, 7);
  for (int c = 0; c < 4; ++c) CHECK(std::abs(y.value()[c] - ref[static_cast<std::size_t>(c)]) < 1e-12);
}

TEST_CASE("linear") {
  SUBCASE("identity weight, zero bias") {
    auto x = Tensor<double>::from({3}, {1, -2, 3});
    auto w = Tensor<double>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto y = linear(x, w, Tensor<double>({3}));
    for (int i = 0; i < 3; ++i) CHECK(y.value()[i] == x.value()[i]);
  }
  SUBCASE("zero weight returns the bias") {
    auto b = Tensor<double>::from({2}, {0.25, -4});
    auto y = linear(Tensor<double>::from({3}, {9, 9, 9}), Tensor<double>({2, 3}), b);
    CHECK(y.value()[0] == 0.25);
    CHECK(y.value()[1] == -4.0);
  }
  SUBCASE("random case vs dot-product oracle") {
    Rng rng(19);
    Tensor<double> x = random_tensor<double>({6}, rng);
    Tensor<double> w = random_tensor<double>({4, 6}, rng);
    Tensor<double> b = random_tensor<double>({4}, rng);
    auto y = linear(x, w, b);
    auto ref = oracle::linear(to_vec(x), to_vec(w), to_vec(b), 4, 6);
    for (int i = 0; i < 4; ++i) CHECK(std::abs(y.value()[i] - ref[static_cast<std::size_t>(i)]) < 1e-12);
  }
  SUBCASE("dimension mismatch rejected") {
    CHECK_THROWS_AS(linear(Tensor<double>({3}), Tensor<double>({2, 4}), Tensor<double>({2})),
                    std::invalid_argument);
  }
}

TEST_CASE("activations") {
  auto s = softmax(Tensor<double>::from({3}, {0, 0, 0}));
  for (int i = 0; i < 3; ++i) CHECK(s.value()[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(sigmoid(Tensor<double>::scalar(0.0)).item() == 0.5);
  CHECK(relu(Tensor<double>::scalar(-3.0)).item() == 0.0);
  CHECK(relu(Tensor<double>::scalar(2.0)).item() == 2.0);

  Rng rng(23);
  for (int t = 0; t < 50; ++t) {
    Tensor<double> x = random_tensor<double>({5}, rng, -20.0, 20.0);
    auto sm = softmax(x);
    CHECK(std::abs(sm.value().sum() - 1.0) < 1e-9);
    auto sg = sigmoid(x);
    for (int i = 0; i < 5; ++i) {
      CHECK(sg.value()[i] > 0.0);
      CHECK(sg.value()[i] < 1.0);
    }
  }
}

TEST_CASE("elementwise ops") {
  Rng rng(29);
  SUBCASE("elem_mul identity and channel broadcast") {
    Tensor<double> x = random_tensor<double>({3, 4, 4}, rng);
    auto y = elem_mul(x, Tensor<double>::full({3, 4, 4}, 1.0));
    for (long i = 0; i < x.size(); ++i) CHECK(y.value()[i] == x.value()[i]);

    Tensor<double> m = random_tensor<double>({4, 4}, rng);
    auto z = elem_mul(x, m);
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 16; ++i)
        CHECK(z.value()[c * 16 + i] == doctest::Approx(x.value()[c * 16 + i] * m.value()[i]).epsilon(1e-12));
    CHECK_THROWS_AS(elem_mul(x, Tensor<double>({5, 4})), std::invalid_argument);
  }
  SUBCASE("elem_max picks the larger value") {
    auto y = elem_max(Tensor<double>::scalar(0.3), Tensor<double>::scalar(0.7));
    CHECK(y.item() == 0.7);
  }
  SUBCASE("concat of 1024 and 256 vectors gives 1280") {
    auto y = concat(Tensor<double>({1024}), Tensor<double>({256}), 0);
    CHECK(y.shape() == Shape{1280});
  }
  SUBCASE("concat preserves order and values") {
    auto a = Tensor<double>::from({2}, {1, 2});
    auto b = Tensor<double>::from({3}, {3, 4, 5});
    auto y = concat(a, b, 0);
    for (int i = 0; i < 5; ++i) CHECK(y.value()[i] == i + 1);
  }
}

TEST_CASE("backward and the tape") {
  SUBCASE("loss = sum(x) gives unit gradients") {
    auto x = Tensor<double>::from({4}, {1, 2, 3, 4});
    x.set_requires_grad(true);
    Tape<double>::active().clear();
    backward(sum(x));
    for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == 1.0);
    Tape<double>::active().clear();
  }
  SUBCASE("loss = x^2 at x=3 gives gradient 6") {
    auto x = Tensor<double>::scalar(3.0);
    x.set_requires_grad(true);
    Tape<double>::active().clear();
    backward(elem_mul(x, x));
    CHECK(x.grad()[0] == 6.0);
    Tape<double>::active().clear();
  }
  SUBCASE("gradients accumulate over reuse") {
    auto x = Tensor<double>::from({3}, {1, 2, 3});
    x.set_requires_grad(true);
    Tape<double>::active().clear();
    backward(add(sum(x), sum(x)));
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 2.0);
    Tape<double>::active().clear();
  }
  SUBCASE("backward on a non-scalar is rejected") {
    auto x = Tensor<double>::from({2}, {1, 2});
    x.set_requires_grad(true);
    Tape<double>::active().clear();
    auto y = scale(x, 2.0);
    CHECK_THROWS_AS(backward(y), std::invalid_argument);
    Tape<double>::active().clear();
  }
  SUBCASE("no recording under NoGradGuard") {
    auto x = Tensor<double>::from({2}, {1, 2});
    x.set_requires_grad(true);
    Tape<double>::active().clear();
    {
      NoGradGuard ng;
      auto y = sum(x);
      CHECK_FALSE(y.requires_grad());
    }
    CHECK(Tape<double>::active().size() == 0);
  }
}

TEST_CASE("grad_check on primitives and composites") {
  const double eps = 1e-5, tol = 1e-4;
  SUBCASE("identity has zero error") {
    // integer values and a power-of-two step keep the central difference exact
    Tensor<double> x = Tensor<double>::from({5}, {1, 2, 3, 4, 5});
    CHECK(grad_check<double>([](const Tensor<double>& v) { return sum(v); }, x, 0.0009765625) == 0.0);
  }
  SUBCASE("sigmoid chain") {
    Rng rng(37);
    Tensor<double> x = random_tensor<double>({6}, rng);
    CHECK(grad_check<double>([](const Tensor<double>& v) { return mean(sigmoid(v)); }, x, eps) < tol);
  }
  SUBCASE("composite conv -> relu -> linear, many seeds") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      Rng rng(seed);
      Tensor<double> w = random_tensor<double>({2, 1, 3, 3}, rng);
      Tensor<double> b = random_tensor<double>({2}, rng);
      Tensor<double> lw = random_tensor<double>({3, 2}, rng);
      Tensor<double> lb = random_tensor<double>({3}, rng);
      Tensor<double> x = random_tensor<double>({1, 4, 4}, rng);
      auto f = [&](const Tensor<double>& v) {
        return sum(linear(global_mean_pool(relu(conv2d(v, w, b, 1, 0))), lw, lb));
      };
      CHECK(grad_check<double>(f, x, eps) < tol);
    }
  }
  SUBCASE("conv2d w.r.t. weights and bias") {
    Rng rng(41);
    Tensor<double> x = random_tensor<double>({2, 5, 5}, rng);
    Tensor<double> w = random_tensor<double>({3, 2, 3, 3}, rng);
    Tensor<double> b = random_tensor<double>({3}, rng);
    CHECK(grad_check<double>([&](const Tensor<double>& v) { return mean(conv2d(x, v, b, 2, 1)); }, w, eps) < tol);
    CHECK(grad_check<double>([&](const Tensor<double>& v) { return mean(conv2d(x, w, v, 2, 1)); }, b, eps) < tol);
    CHECK(grad_check<double>([&](const Tensor<double>& v) { return mean(conv2d(v, w, b, 2, 1)); }, x, eps) < tol);
  }
  SUBCASE("conv_transpose2d gradients") {
    Rng rng(43);
    Tensor<double> x = random_tensor<double>({2, 4, 4}, rng);
    Tensor<double> w = random_tensor<double>({3, 2, 2, 2}, rng);
    Tensor<double> b = random_tensor<double>({3}, rng);
    CHECK(grad_check<double>([&](const Tensor<double>& v) { return mean(conv_transpose2d(v, w, b)); }, x, eps) <
          tol);
    CHECK(grad_check<double>([&](const Tensor<double>& v) { return mean(conv_transpose2d(x, v, b)); }, w, eps) <
          tol);
    CHECK(grad_check<double>([&](const Tensor<double>& v) { return mean(conv_transpose2d(x, w, v)); }, b, eps) <
          tol);
  }
  SUBCASE("pooling and softmax gradients") {
    Rng rng(47);
    Tensor<double> x = random_tensor<double>({2, 6, 6}, rng);
    CHECK(grad_check<double>([](const Tensor<double>& v) { return mean(max_pool2d(v, 2, 2)); }, x, eps) < tol);
    CHECK(grad_check<double>([](const Tensor<double>& v) { return mean(global_mean_pool(v)); }, x, eps) < tol);
    Tensor<double> z = random_tensor<double>({4}, rng);
    CHECK(grad_check<double>([](const Tensor<double>& v) { return pick(softmax(v), 1); }, z, eps) < tol);
  }
}

TEST_CASE("loss kernels") {
  SUBCASE("smooth_l1_sum value and derivative") {
    auto x = Tensor<double>::from({4}, {0.0, 0.5, 2.0, -1.0});
    CHECK(smooth_l1_sum(x).item() == doctest::Approx(0.0 + 0.125 + 1.5 + 0.5).epsilon(1e-12));
    Rng rng(53);
    Tensor<double> r = random_tensor<double>({6}, rng, -2.5, 2.5);
    CHECK(grad_check<double>([](const Tensor<double>& v) { return smooth_l1_sum(v); }, r, 1e-6) < 1e-4);
  }
  SUBCASE("bce_mean matches the scalar form and differentiates") {
    Rng rng(59);
    Tensor<double> p = random_tensor<double>({10}, rng, 0.05, 0.95);
    Tensor<double> t({10});
    for (int i = 0; i < 10; ++i) t.value()[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    double ref = 0;
    for (int i = 0; i < 10; ++i)
      ref += -t.value()[i] * std::log(p.value()[i]) - (1 - t.value()[i]) * std::log(1 - p.value()[i]);
    CHECK(bce_mean(p, t).item() == doctest::Approx(ref / 10).epsilon(1e-12));
    CHECK(grad_check<double>([&](const Tensor<double>& v) { return bce_mean(v, t); }, p, 1e-6) < 1e-4);
  }
  SUBCASE("nll_pick") {
    auto p = Tensor<double>::from({3}, {0.2, 0.5, 0.3});
    CHECK(nll_pick(p, 1).item() == doctest::Approx(-std::log(0.5)).epsilon(1e-12));
    Rng rng(61);
    Tensor<double> q = random_tensor<double>({3}, rng, 0.1, 0.9);
    CHECK(grad_check<double>([](const Tensor<double>& v) { return nll_pick(v, 2); }, q, 1e-6) < 1e-4);
  }
}

TEST_CASE("region means match a direct oracle and differentiate") {
  Rng rng(67);
  Tensor<double> x = random_tensor<double>({3, 6, 8}, rng);
  std::vector<CellRect> regions{{0, 3, 0, 4}, {2, 6, 5, 8}, {1, 2, 1, 2}};
  auto y = region_means(x, regions);
  REQUIRE(y.shape() == Shape{3, 3});
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const auto& reg = regions[r];
    for (int c = 0; c < 3; ++c) {
      double acc = 0;
      for (int yy = reg.y0; yy < reg.y1; ++yy)
        for (int xx = reg.x0; xx < reg.x1; ++xx) acc += x.at({c, yy, xx});
      acc /= (reg.y1 - reg.y0) * (reg.x1 - reg.x0);
      CHECK(std::abs(y.at({static_cast<int>(r), c}) - acc) < 1e-10);
    }
  }
  CHECK(grad_check<double>([&](const Tensor<double>& v) { return mean(region_means(v, regions)); }, x, 1e-5) <
        1e-4);
}

TEST_CASE("stop_gradient blocks flow") {
  auto x = Tensor<double>::from({2}, {1.0, 2.0});
  x.set_requires_grad(true);
  Tape<double>::active().clear();
  backward(sum(elem_mul(stop_gradient(x), x)));
  // d/dx of c*x with c frozen at x's value
  CHECK(x.grad()[0] == 1.0);
  CHECK(x.grad()[1] == 2.0);
  Tape<double>::active().clear();
}
