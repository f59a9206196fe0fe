#include <doctest.h>

#include <random>

#include "../support/oracles.hpp"
#include "mega/alignment.hpp"
#include "mega/attention.hpp"
#include "mega/error.hpp"

using namespace mega;

namespace {

// A discriminator whose output is sigmoid(b) everywhere: all weights zero.
Discriminator constant_discriminator(std::size_t channels, double logit) {
  auto rng = make_rng(0, 0);
  Discriminator d(channels, {4, 1.0, true}, rng);
  for (auto& p : d.parameters()) {
    auto v = p.mutable_data();
    std::fill(v.begin(), v.end(), 0.0);
  }
  d.parameters().back().mutable_data()[0] = logit;
  return d;
}

Discriminator random_discriminator(std::size_t channels, std::uint64_t seed, std::size_t width = 4) {
  auto rng = make_rng(seed, 5);
  return Discriminator(channels, {width, 1.0, true}, rng);
}

}  // namespace

TEST_SUITE("alignment") {
  TEST_CASE("discriminator output is an H×W probability map") {
    std::mt19937_64 rng(1);
    const auto d = random_discriminator(3, 1);
    const auto out = d.forward(Tensor::from({3, 4, 2}, oracle::randn(rng, 24, 50)));
    CHECK(out.shape() == Shape{4, 2});
    for (double v : out.data()) {
      CHECK(v > 0);
      CHECK(v < 1);
    }
    CHECK(d.parameters().size() == 8);
    CHECK(d.parameters()[6].shape() == Shape{1, 4, 3, 3});
  }

  TEST_CASE("global_da_loss examples") {
    const auto f = Tensor::zeros({2, 2, 2});
    CHECK(global_da_loss(f, f, constant_discriminator(2, 0.0)).item() == 2.0);
    // Saturated discriminators: ≈1 on source and ≈0 on target is impossible
    // with one constant map, so check the two halves separately.
    const double one_minus = global_da_loss(f, f, constant_discriminator(2, 800.0)).item();
    CHECK(one_minus == doctest::Approx(4.0));
    const double zero = global_da_loss(f, f, constant_discriminator(2, -800.0)).item();
    CHECK(zero == doctest::Approx(4.0));
    CHECK_THROWS_AS(global_da_loss(f, Tensor::zeros({2, 2, 1}), constant_discriminator(2, 0)), Error);
  }

  TEST_CASE("perfect discriminator gives zero loss") {
    // Source features positive, target negative; a 1×1 path that saturates
    // on the sign of channel 0.
    auto d = constant_discriminator(1, 0.0);
    auto ps = d.parameters();
    ps[0].mutable_data()[0] = 1.0;      // 1×1: keep x
    ps[2].mutable_data()[4] = 1.0;      // 3×3 centre tap
    ps[4].mutable_data()[4] = 1.0;
    ps[6].mutable_data()[4] = 2000.0;   // logit = 2000·relu(x) − 1000
    ps[7].mutable_data()[0] = -1000.0;
    const auto src = Tensor::full({1, 2, 2}, 1.0);
    const auto tgt = Tensor::full({1, 2, 2}, 0.0);
    CHECK(global_da_loss(src, tgt, d).item() < 1e-30);
  }

  TEST_CASE("global and category losses equal naive loops") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 50; ++t) {
      const std::size_t c = oracle::uniform(rng, 1, 4), H = oracle::uniform(rng, 1, 4), W = oracle::uniform(rng, 1, 4);
      const auto d = random_discriminator(c, t, oracle::uniform(rng, 1, 4));
      const auto fs = oracle::randn(rng, c * H * W), ft = oracle::randn(rng, c * H * W);
      const auto ms = oracle::random_mask(rng, H * W), mt = oracle::random_mask(rng, H * W);
      const oracle::Vec ones(H * W, 1.0);
      const auto S = Tensor::from({c, H, W}, fs), T = Tensor::from({c, H, W}, ft);
      CHECK(std::abs(global_da_loss(S, T, d).item() - oracle::da_loss(d, fs, ft, ones, ones, c, H, W)) < 1e-9);
      CHECK(std::abs(category_da_loss(S, T, ms, mt, d).item() - oracle::da_loss(d, fs, ft, ms, mt, c, H, W)) < 1e-9);
      CHECK(std::abs(category_da_loss(S, T, ms, mt, d, CdaSummation::kMasked).item() -
                     oracle::da_loss(d, fs, ft, ms, mt, c, H, W, true)) < 1e-9);
      CHECK(global_da_loss(S, T, d).item() >= 0);
    }
  }

  TEST_CASE("category_da_loss examples") {
    std::mt19937_64 rng(3);
    const std::size_t H = 3, W = 2;
    const auto S = Tensor::from({2, H, W}, oracle::randn(rng, 12));
    const auto T = Tensor::from({2, H, W}, oracle::randn(rng, 12));
    const std::vector<double> zeros(H * W, 0.0), ones(H * W, 1.0);
    const auto half = constant_discriminator(2, 0.0);
    CHECK(category_da_loss(S, T, zeros, zeros, half).item() == 0.5 * H * W);
    const auto d = random_discriminator(2, 4);
    CHECK(std::abs(category_da_loss(S, T, ones, ones, d).item() - global_da_loss(S, T, d).item()) < 1e-9);
    CHECK_THROWS_AS(category_da_loss(S, T, std::vector<double>(H * W, 0.5), ones, d), Error);
  }

  TEST_CASE("reversal layer negates the encoder gradient exactly") {
    std::mt19937_64 rng(4);
    for (int t = 0; t < 20; ++t) {
      auto enc_rng = make_rng(t, 6);
      const ConvStack enc(2, {{3, 3, true}}, enc_rng);
      auto d = random_discriminator(3, t);
      const auto xs = Tensor::from({2, 3, 3}, oracle::randn(rng, 18));
      const auto xt = Tensor::from({2, 3, 3}, oracle::randn(rng, 18));
      auto grads = [&](bool reverse) {
        d.set_reverse_gradient(reverse);
        for (auto& p : enc.parameters()) p.zero_grad();
        global_da_loss(enc.forward(xs), enc.forward(xt), d).backward();
        std::vector<double> g;
        for (auto& p : enc.parameters()) g.insert(g.end(), p.grad().begin(), p.grad().end());
        return g;
      };
      const auto with = grads(true), without = grads(false);
      for (std::size_t i = 0; i < with.size(); ++i) CHECK(std::abs(with[i] + without[i]) < 1e-9);
      d.set_reverse_gradient(true);
      const auto x = Tensor::from({3, 2, 2}, oracle::randn(rng, 12));
      const auto a = d.forward(x);
      d.set_reverse_gradient(false);
      CHECK(oracle::values(a) == oracle::values(d.forward(x)));
    }
  }

  TEST_CASE("location labels and surrogate loss") {
    const std::vector<std::vector<double>> masks{{1, 0, 1, 0}, {1, 1, 0, 0}};
    CHECK(location_labels(masks, 4) == std::vector<std::size_t>{0, 1, 0, 2});
    const auto logits = Tensor::zeros({3, 2, 2});
    const auto labels = location_labels(masks, 4);
    CHECK(surrogate_detection_loss(logits, labels).item() == doctest::Approx(std::log(3.0)));
    CHECK(surrogate_detection_loss(logits, labels, Reduction::kSum).item() == doctest::Approx(4 * std::log(3.0)));
  }

  TEST_CASE("objective combination") {
    ObjectiveTerms t;
    t.detection = Tensor::scalar(2.0);
    t.global = Tensor::scalar(1.0);
    t.category = {Tensor::scalar(1.0), Tensor::scalar(2.0)};
    t.memory = Tensor::scalar(6.0);
    const auto o = combine_objective(t, ObjectiveWeights{});
    CHECK(std::abs(o.breakdown.total - 2.64) < 1e-12);
    CHECK(o.breakdown.category_sum() == 3.0);
    CHECK(std::abs(o.breakdown.total - o.breakdown.weighted_sum(ObjectiveWeights{})) < 1e-12);

    const auto zero = combine_objective(t, {0, 0, 0, 1, 0});
    CHECK(zero.total.item() == 2.0);

    t.similarity = Tensor::scalar(0.5);
    CHECK(combine_objective(t, {}).total.item() == doctest::Approx(3.14));
    CHECK_THROWS_AS(combine_objective(ObjectiveTerms{}, {}), Error);
    CHECK_THROWS_AS(combine_objective(t, {-1, 0, 0, 1, 1}), Error);
  }
}
