#include <doctest.h>

#include <cmath>
#include <random>

#include "../support/oracles.hpp"
#include "mega/error.hpp"
#include "mega/tensor.hpp"

using namespace mega;
using doctest::Approx;

namespace {

Tensor leaf(Shape s, std::vector<double> v) { return Tensor::from(std::move(s), std::move(v), true); }

Tensor random_leaf(std::mt19937_64& rng, Shape s) {
  const auto n = shape_numel(s);
  return leaf(std::move(s), oracle::randn(rng, n));
}

void expect_grad_ok(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double tol = 1e-6) {
  const auto r = check_gradients(f, inputs);
  CHECK(r.max_rel_error < tol);
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("shape and data length must agree") {
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), Error);
    auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK(t.dim() == 2);
  }

  TEST_CASE("softmax examples") {
    auto a = softmax(Tensor::from({2}, {0, 0}), 0);
    CHECK(a[0] == Approx(0.5).epsilon(1e-15));
    CHECK(a[1] == Approx(0.5).epsilon(1e-15));
    auto b = softmax(Tensor::from({2}, {1, 0}), 0);
    const double e = std::exp(1.0);
    CHECK(std::abs(b[0] - e / (e + 1)) < 1e-15);
    CHECK(std::abs(b[1] - 1 / (e + 1)) < 1e-15);
    CHECK(b[0] == Approx(0.7311).epsilon(1e-4));
    auto c = softmax(Tensor::from({1}, {5}), 0);
    CHECK(c[0] == 1.0);
  }

  TEST_CASE("softmax errors") {
    CHECK_THROWS_AS(softmax(Tensor::from({2}, {0, 0}), 1), Error);
    CHECK_THROWS_AS(softmax(Tensor::zeros({2, 0}), 1), Error);
  }

  TEST_CASE("softmax sums to one and ignores shifts along either axis") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
      const auto x = oracle::randn(rng, 12, 3.0);
      for (std::size_t axis : {0u, 1u}) {
        const auto s = softmax(Tensor::from({3, 4}, x), axis);
        auto shifted = x;
        for (auto& v : shifted) v += 17.5;
        const auto t = softmax(Tensor::from({3, 4}, shifted), axis);
        for (std::size_t i = 0; i < 12; ++i) CHECK(std::abs(s[i] - t[i]) < 1e-9);
        if (axis == 0) {
          for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(s[j] + s[4 + j] + s[8 + j] - 1) < 1e-9);
        } else {
          for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(s[4 * i] + s[4 * i + 1] + s[4 * i + 2] + s[4 * i + 3] - 1) < 1e-9);
        }
      }
    }
  }

  TEST_CASE("grl examples") {
    auto x = leaf({2}, {1.5, -2.0});
    auto y = grl(x);
    CHECK(y[0] == 1.5);
    CHECK(y[1] == -2.0);
    sum(mul(y, Tensor::from({2}, {0.3, -0.1}))).backward();
    CHECK(x.grad()[0] == -0.3);
    CHECK(x.grad()[1] == 0.1);

    auto z = leaf({2}, {1, 2});
    sum(mul(grl(z), Tensor::zeros({2}))).backward();
    CHECK(z.grad()[0] == 0.0);
    CHECK(z.grad()[1] == 0.0);
  }

  TEST_CASE("grl negates exactly relative to identity") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      auto x = random_leaf(rng, {6});
      const auto w = Tensor::from({6}, oracle::randn(rng, 6));
      sum(square(mul(grl(square(x)), w))).backward();
      const std::vector<double> g1(x.grad().begin(), x.grad().end());
      x.zero_grad();
      sum(square(mul(square(x), w))).backward();
      for (std::size_t i = 0; i < 6; ++i) CHECK(g1[i] == -x.grad()[i]);
    }
  }

  TEST_CASE("conv2d examples") {
    std::mt19937_64 rng(11);
    const auto x = Tensor::from({1, 3, 3}, oracle::randn(rng, 9));
    const auto id = conv2d(x, Tensor::from({1, 1, 1, 1}, {1.0}));
    for (std::size_t i = 0; i < 9; ++i) CHECK(id[i] == x[i]);

    const auto ones = conv2d(Tensor::full({1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0));
    CHECK(ones[4] == 9.0);
    CHECK(ones[0] == 4.0);
    CHECK(ones[1] == 6.0);

    const auto zero = conv2d(x, Tensor::zeros({2, 1, 3, 3}));
    for (double v : zero.data()) CHECK(v == 0.0);

    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 2, 3, 3})), Error);
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 1, 5, 5})), Error);
  }

  TEST_CASE("conv2d equals naive loops") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t cin = oracle::uniform(rng, 1, 3), cout = oracle::uniform(rng, 1, 3);
      const std::size_t H = oracle::uniform(rng, 1, 4), W = oracle::uniform(rng, 1, 4);
      const std::size_t k = trial % 2 ? 3 : 1;
      const auto x = oracle::randn(rng, cin * H * W), w = oracle::randn(rng, cout * cin * k * k),
                 b = oracle::randn(rng, cout);
      const auto got = conv2d(Tensor::from({cin, H, W}, x), Tensor::from({cout, cin, k, k}, w), Tensor::from({cout}, b));
      const auto want = oracle::conv(x, cin, H, W, w, b, cout, k);
      for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);
    }
  }

  TEST_CASE("cosine_map examples") {
    auto c = [](std::vector<double> a, std::vector<double> b) {
      return cosine_map(Tensor::from({2, 1, 1}, std::move(a)), Tensor::from({2, 1, 1}, std::move(b)))[0];
    };
    CHECK(c({3, 4}, {3, 4}) == Approx(1.0).epsilon(1e-15));
    CHECK(c({1, 0}, {0, 1}) == 0.0);
    CHECK(std::abs(c({1, 1}, {1, 0}) - 1 / std::sqrt(2.0)) < 1e-15);
    CHECK(c({0, 0}, {1, 0}) == 0.0);
    CHECK_THROWS_AS(cosine_map(Tensor::zeros({2, 2, 2}), Tensor::zeros({2, 2, 1})), Error);
  }

  TEST_CASE("cosine_map stays in range") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      const auto a = Tensor::from({3, 4, 4}, oracle::randn(rng, 48, 10));
      const auto b = Tensor::from({3, 4, 4}, oracle::randn(rng, 48, 0.1));
      const auto c = cosine_map(a, b);
      for (double v : c.data()) {
        CHECK(v >= -1 - 1e-9);
        CHECK(v <= 1 + 1e-9);
      }
    }
  }

  TEST_CASE("backward examples and accumulation") {
    auto x = leaf({3}, {1, 2, 3});
    sum(x).backward();
    CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1, 1});
    x.zero_grad();
    sum(square(x)).backward();
    CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{2, 4, 6});
    sum(square(x)).backward();
    CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{4, 8, 12});
    CHECK_THROWS_AS(square(x).backward(), Error);
  }

  TEST_CASE("shared subexpressions are visited once") {
    auto x = leaf({1}, {3});
    auto y = mul(x, x);
    auto z = add(y, y);  // 2x², derivative 4x
    sum(z).backward();
    CHECK(x.grad()[0] == 12.0);
  }

  TEST_CASE("no-grad guard records nothing") {
    auto x = leaf({2}, {1, 2});
    Tensor y;
    {
      NoGradGuard g;
      y = square(x);
    }
    CHECK_FALSE(y.requires_grad());
    CHECK(grad_enabled());
  }

  TEST_CASE("finite outputs on finite inputs") {
    auto x = Tensor::from({3}, {-800, 0, 800});
    const auto s = sigmoid(x);
    const auto p = softmax(x, 0);
    for (double v : s.data()) CHECK(std::isfinite(v));
    for (double v : p.data()) CHECK(std::isfinite(v));
    for (double v : s.data()) {
      CHECK(v >= 0);
      CHECK(v <= 1);
    }
  }

  TEST_CASE("mask ops") {
    const auto m = Tensor::from({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    const std::vector<double> mask{0, 1, 1, 0};
    const auto s = masked_select(m, mask);
    CHECK(s.shape() == Shape{2, 2});
    CHECK(oracle::values(s) == std::vector<double>{2, 6, 3, 7});
    CHECK(oracle::values(mask_multiply(m, mask)) == std::vector<double>{0, 2, 3, 0, 0, 6, 7, 0});
    CHECK_THROWS_AS(masked_select(m, std::vector<double>{0, 0, 0, 0}), Error);
    CHECK_THROWS_AS(mask_multiply(m, std::vector<double>{1, 1}), Error);
  }

  TEST_CASE("l2_norm has zero gradient at the origin") {
    auto x = leaf({2, 2}, {0, 0, 3, 4});
    auto n = l2_norm(x, 1);
    CHECK(n[0] == 0.0);
    CHECK(n[1] == 5.0);
    sum(n).backward();
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[2] == Approx(0.6));
  }

  TEST_CASE("normalize_rows") {
    auto x = leaf({2, 2}, {3, 4, 0, 0});
    const auto y = normalize_rows(x);
    CHECK(y[0] == Approx(0.6).epsilon(1e-15));
    CHECK(y[1] == Approx(0.8).epsilon(1e-15));
    CHECK(y[2] == 0.0);
    CHECK(y[3] == 0.0);
    sum(y).backward();
    CHECK(x.grad()[2] == 0.0);
    // d/dx of (x0 + x1)/|x| at (3, 4): (1 - 0.6·1.4) / 5.
    CHECK(x.grad()[0] == Approx((1 - 0.6 * 1.4) / 5));
    CHECK_THROWS_AS(normalize_rows(Tensor::zeros({2})), Error);
  }

  TEST_CASE("primitive gradients match finite differences") {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 20; ++trial) {
      auto a = random_leaf(rng, {3, 4});
      auto b = random_leaf(rng, {3, 4});
      auto c = random_leaf(rng, {4, 2});
      const auto w = Tensor::from({3, 4}, oracle::randn(rng, 12));
      expect_grad_ok([&] { return sum(mul(add(a, b), w)); }, {a, b});
      expect_grad_ok([&] { return sum(square(sub(a, scale(b, 0.7)))); }, {a, b});
      expect_grad_ok([&] { return sum(mul(softmax(a, trial % 2), w)); }, {a});
      expect_grad_ok([&] { return sum(square(matmul(a, c))); }, {a, c});
      expect_grad_ok([&] { return sum(mul(transpose(a), transpose(w))); }, {a});
      expect_grad_ok([&] { return sum(l2_norm(a, trial % 2)); }, {a});
      expect_grad_ok([&] { return sum(mul(normalize_rows(a), w)); }, {a});
      expect_grad_ok([&] { return mean(mul(sigmoid(a), w)); }, {a});
      expect_grad_ok([&] { return sum(mul(relu(a), w)); }, {a}, 1e-4);
      // Two reversals with coefficients 0.5 and 2 restore the true gradient.
      expect_grad_ok([&] { return sum(mul(grl(grl(a, 0.5), 2.0), w)); }, {a});
      std::vector<std::size_t> targets{0, 3, 1};
      expect_grad_ok([&] { return cross_entropy(a, targets); }, {a});
      std::vector<std::size_t> rows{2, 0, 2};
      expect_grad_ok([&] { return sum(square(gather_rows(a, rows))); }, {a});
    }
  }

  TEST_CASE("map gradients match finite differences") {
    std::mt19937_64 rng(100);
    for (int trial = 0; trial < 20; ++trial) {
      auto x = random_leaf(rng, {2, 3, 3});
      auto y = random_leaf(rng, {2, 3, 3});
      auto k = random_leaf(rng, {2, 2, 3, 3});
      auto bias = random_leaf(rng, {2});
      const auto mask = oracle::random_mask(rng, 9, 0.6);
      const auto w = Tensor::from({2, 3, 3}, oracle::randn(rng, 18));
      expect_grad_ok([&] { return sum(mul(conv2d(x, k, bias), w)); }, {x, k, bias});
      expect_grad_ok([&] { return sum(square(cosine_map(x, y))); }, {x, y});
      expect_grad_ok([&] { return sum(mul(mask_multiply(x, mask), w)); }, {x});
      std::vector<double> one_mask(9, 0.0);
      one_mask[trial % 9] = 1;
      expect_grad_ok([&] { return sum(square(masked_select(x, one_mask))); }, {x});
    }
  }
}
