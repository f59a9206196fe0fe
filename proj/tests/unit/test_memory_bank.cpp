#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "../support/oracles.hpp"
#include "mega/error.hpp"
#include "mega/memory_bank.hpp"

using namespace mega;

namespace {

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor::from({r, c}, std::move(v)); }
CategoryFeatureSet feats(std::size_t r, std::size_t c, std::vector<double> v, bool grad = false) {
  return {Tensor::from({r, c}, std::move(v), grad)};
}
const double e = std::exp(1.0);

}  // namespace

TEST_SUITE("memory_bank") {
  TEST_CASE("write_similarity examples") {
    const auto m = mat(2, 2, {1, 0, 0, 1});
    const auto p1 = write_similarity(m, feats(1, 2, {0.3, -2}));
    REQUIRE(p1);
    CHECK((*p1)[0] == 1.0);
    CHECK((*p1)[1] == 1.0);

    const auto p2 = write_similarity(mat(1, 2, {1, 0}), feats(2, 2, {1, 0, 0, 1}));
    CHECK(std::abs((*p2)[0] - e / (e + 1)) < 1e-15);
    CHECK(std::abs((*p2)[1] - 1 / (e + 1)) < 1e-15);

    const auto p3 = write_similarity(mat(1, 2, {0.2, 0.9}), feats(2, 2, {1, 2, 1, 2}));
    CHECK((*p3)[0] == 0.5);
    CHECK((*p3)[1] == 0.5);

    CHECK_FALSE(write_similarity(m, CategoryFeatureSet{}).has_value());
  }

  TEST_CASE("write_similarity rows normalize over features") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 50; ++t) {
      const std::size_t nm = oracle::uniform(rng, 1, 5), nk = oracle::uniform(rng, 1, 6), c = oracle::uniform(rng, 1, 4);
      const auto m = mat(nm, c, oracle::randn(rng, nm * c));
      const auto g = feats(nk, c, oracle::randn(rng, nk * c));
      const auto p = *write_similarity(m, g);
      const auto want = oracle::write_similarity(oracle::rows(m), oracle::rows(g.features));
      for (std::size_t j = 0; j < nm; ++j) {
        double s = 0;
        for (std::size_t i = 0; i < nk; ++i) {
          s += p[j * nk + i];
          CHECK(std::abs(p[j * nk + i] - want[j][i]) < 1e-9);
        }
        CHECK(std::abs(s - 1) < 1e-9);
      }
    }
  }

  TEST_CASE("write_update examples") {
    const auto m = mat(1, 2, {1, 0});
    const auto g = feats(1, 2, {0, 1});
    const auto out = write_update(m, g, *write_similarity(m, g));
    CHECK(std::abs(out[0] - 1 / std::sqrt(2.0)) < 1e-15);
    CHECK(std::abs(out[1] - 1 / std::sqrt(2.0)) < 1e-15);
    CHECK_FALSE(out.requires_grad());

    const auto u = mat(1, 3, {0.6, 0, 0.8});
    const auto same = feats(1, 3, {0.6, 0, 0.8});
    const auto fixed = write_update(u, same, *write_similarity(u, same));
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(fixed[i] - u[i]) < 1e-15);

    const auto noop = write_update(u, CategoryFeatureSet{}, Tensor{});
    CHECK(oracle::values(noop) == oracle::values(u));
  }

  TEST_CASE("zero-weight row only renormalizes") {
    // p = 0 for the single feature: m stays put up to normalization.
    const auto m = mat(1, 2, {3, 4});
    const auto out = write_update(m, feats(1, 2, {10, 10}), mat(1, 1, {0.0}));
    CHECK(std::abs(out[0] - 0.6) < 1e-15);
    CHECK(std::abs(out[1] - 0.8) < 1e-15);
  }

  TEST_CASE("bank write gives unit rows and matches the oracle") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 50; ++t) {
      const std::size_t K = oracle::uniform(rng, 1, 3), nm = oracle::uniform(rng, 1, 5), c = oracle::uniform(rng, 1, 4);
      auto bank_rng = make_rng(t, 0);
      auto bank = MemoryBank::random_unit(K, nm, c, bank_rng);
      const std::size_t k = oracle::uniform(rng, 0, K - 1), nk = oracle::uniform(rng, 1, 6);
      const auto g = feats(nk, c, oracle::randn(rng, nk * c, 2.0));
      const auto want = oracle::write_update(oracle::rows(bank.matrix(k)), oracle::rows(g.features));
      const auto before = bank;
      CHECK(bank.write(k, g));
      for (std::size_t j = 0; j < nm; ++j) {
        const auto row = bank.item(k, j);
        double n2 = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          n2 += row[ch] * row[ch];
          CHECK(std::abs(row[ch] - want[j][ch]) < 1e-9);
        }
        CHECK(std::abs(std::sqrt(n2) - 1) < 1e-9);
      }
      for (std::size_t other = 0; other < K; ++other)
        if (other != k) CHECK(oracle::values(bank.matrix(other)) == oracle::values(before.matrix(other)));

      auto copy = bank;
      CHECK_FALSE(copy.write(k, CategoryFeatureSet{}));
      CHECK(copy == bank);
    }
  }

  TEST_CASE("read examples") {
    const auto r1 = read(mat(1, 3, {0.2, -1, 4}), Tensor::from({3}, {1, 1, 1}));
    CHECK(r1.weights[0] == 1.0);
    CHECK(oracle::values(r1.retrieved) == std::vector<double>{0.2, -1, 4});

    const auto r2 = read(mat(2, 2, {1, 0, 0, 1}), Tensor::from({2}, {1, 0}));
    CHECK(std::abs(r2.weights[0] - e / (e + 1)) < 1e-15);
    CHECK(std::abs(r2.weights[1] - 1 / (e + 1)) < 1e-15);
    CHECK(std::abs(r2.retrieved[0] - e / (e + 1)) < 1e-15);
    CHECK(std::abs(r2.retrieved[1] - 1 / (e + 1)) < 1e-15);

    const auto r3 = read(mat(3, 2, {0.5, 0.25, 0.5, 0.25, 0.5, 0.25}), Tensor::from({2}, {9, -3}));
    CHECK(std::abs(r3.retrieved[0] - 0.5) < 1e-15);
    CHECK(std::abs(r3.retrieved[1] - 0.25) < 1e-15);
  }

  TEST_CASE("read lies on the simplex and inside the hull") {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 50; ++t) {
      const std::size_t nm = oracle::uniform(rng, 1, 5), c = oracle::uniform(rng, 1, 4);
      const auto m = mat(nm, c, oracle::randn(rng, nm * c, 3.0));
      const auto g = Tensor::from({c}, oracle::randn(rng, c, 3.0));
      const auto r = read(m, g);
      const auto [q, gh] = oracle::read(oracle::rows(m), oracle::values(g));
      double s = 0;
      for (std::size_t j = 0; j < nm; ++j) {
        CHECK(r.weights[j] >= -1e-9);
        CHECK(std::abs(r.weights[j] - q[j]) < 1e-9);
        s += r.weights[j];
      }
      CHECK(std::abs(s - 1) < 1e-9);
      for (std::size_t ch = 0; ch < c; ++ch) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t j = 0; j < nm; ++j) {
          lo = std::min(lo, m[j * c + ch]);
          hi = std::max(hi, m[j * c + ch]);
        }
        CHECK(r.retrieved[ch] >= lo - 1e-9);
        CHECK(r.retrieved[ch] <= hi + 1e-9);
        CHECK(std::abs(r.retrieved[ch] - gh[ch]) < 1e-9);
      }
    }
  }

  TEST_CASE("read_map examples") {
    std::mt19937_64 rng(4);
    const auto m = mat(3, 2, oracle::randn(rng, 6));
    const auto g = oracle::randn(rng, 2);
    const auto single = read_map(m, Tensor::from({2, 1, 1}, g));
    const auto r = read(m, Tensor::from({2}, g));
    CHECK(oracle::values(single) == oracle::values(r.retrieved));

    const auto uniform = read_map(m, Tensor::from({2, 2, 2}, {g[0], g[0], g[0], g[0], g[1], g[1], g[1], g[1]}));
    for (std::size_t l = 1; l < 4; ++l) {
      CHECK(uniform[l] == uniform[0]);
      CHECK(uniform[4 + l] == uniform[4]);
    }

    const auto map = oracle::randn(rng, 8);
    const auto got = read_map(m, Tensor::from({2, 2, 2}, map));
    for (std::size_t l = 0; l < 4; ++l) {
      const auto one = read(m, Tensor::from({2}, {map[l], map[4 + l]}));
      CHECK(std::abs(got[l] - one.retrieved[0]) < 1e-12);
      CHECK(std::abs(got[4 + l] - one.retrieved[1]) < 1e-12);
    }
    CHECK_THROWS_AS(read_map(m, Tensor::zeros({3, 2, 2})), Error);
  }

  TEST_CASE("read_map matches the per-location oracle") {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 50; ++t) {
      const std::size_t nm = oracle::uniform(rng, 1, 5), c = oracle::uniform(rng, 1, 4);
      const std::size_t H = oracle::uniform(rng, 1, 4), W = oracle::uniform(rng, 1, 4);
      const auto m = mat(nm, c, oracle::randn(rng, nm * c));
      const auto map = oracle::randn(rng, c * H * W);
      const auto got = read_map(m, Tensor::from({c, H, W}, map));
      const auto want = oracle::read_map(oracle::rows(m), map, c, H * W);
      for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-9);
    }
  }

  TEST_CASE("nearest_features by dot product, ties to the lowest index") {
    const auto m = mat(2, 2, {1, 0, 0, 1});
    const auto g = feats(3, 2, {2, 0, 2, 0, 0, 5});
    const auto a = nearest_features(m, g);
    CHECK(a.positive == std::vector<std::size_t>{0, 2});
    CHECK(a.negative == std::vector<std::size_t>{1, 0});
    const auto single = nearest_features(m, feats(1, 2, {1, 1}));
    CHECK(single.positive == std::vector<std::size_t>{0, 0});
    CHECK(single.negative.empty());
  }

  TEST_CASE("compactness examples") {
    const auto g = feats(2, 2, {1, 0, 0, 1});
    CHECK(compactness_loss(mat(2, 2, {1, 0, 0, 1}), g).item() == 0.0);
    CHECK(compactness_loss(mat(1, 2, {0, 0}), feats(1, 2, {3, 4})).item() == 5.0);
    // Items at distance 1 and 2 from their nearest features.
    const auto m2 = mat(2, 2, {2, 0, 0, 3});
    CHECK(compactness_loss(m2, g).item() == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(compactness_loss(m2, CategoryFeatureSet{}).item() == 0.0);
  }

  TEST_CASE("uniqueness examples") {
    // One item at the origin; features on a ray give exact distances.
    const auto m = mat(1, 1, {0});
    const NeighborAssignment a{{0}, {1}};
    CHECK(uniqueness_loss(m, feats(2, 1, {0.1, 2.0}), a, 1.0).item() == doctest::Approx(1.0));
    CHECK(uniqueness_loss(m, feats(2, 1, {3.0, 1.0}), a, 1.0).item() == doctest::Approx(2.0));
    CHECK(uniqueness_loss(m, feats(2, 1, {1.5, -1.5}), a, 1.0).item() == doctest::Approx(1.0));
    CHECK(uniqueness_loss(m, feats(2, 1, {1.5, -1.5}), a, 0.3).item() == doctest::Approx(0.3));
    CHECK(uniqueness_loss(m, feats(1, 1, {1}), 1.0).item() == 0.0);
    // Hinge form floors at zero instead of at the margin.
    CHECK(uniqueness_loss(m, feats(2, 1, {0.1, 2.0}), a, 1.0, UniquenessForm::kHinge).item() == 0.0);
    CHECK(uniqueness_loss(m, feats(2, 1, {3.0, 1.0}), a, 1.0, UniquenessForm::kHinge).item() == doctest::Approx(3.0));
  }

  TEST_CASE("memory_loss examples") {
    MemoryBank bank(2, 1, 2);
    CHECK(memory_loss(bank, {CategoryFeatureSet{}, CategoryFeatureSet{}}, 1.0).item() == 0.0);
    // Item [0,0]: nearest g=[3,4] at distance 5; second [-3,-4] at 5 too → max(0, 1) = 1.
    CHECK(memory_loss(bank, {feats(2, 2, {3, 4, -3, -4}), CategoryFeatureSet{}}, 1.0).item() ==
          doctest::Approx(6.0).epsilon(1e-15));
    CHECK_THROWS_AS(memory_loss(bank, {CategoryFeatureSet{}}, 1.0), Error);
  }

  TEST_CASE("memory_loss matches the double-loop oracle") {
    std::mt19937_64 rng(6);
    for (int t = 0; t < 50; ++t) {
      const std::size_t K = oracle::uniform(rng, 1, 3), nm = oracle::uniform(rng, 1, 5), c = oracle::uniform(rng, 1, 4);
      auto brng = make_rng(t, 1);
      const auto bank = MemoryBank::random_unit(K, nm, c, brng);
      std::vector<CategoryFeatureSet> sets;
      std::vector<oracle::Mat> fo;
      std::vector<oracle::Mat> bo;
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t nk = oracle::uniform(rng, 0, 6);
        sets.push_back(nk ? feats(nk, c, oracle::randn(rng, nk * c)) : CategoryFeatureSet{});
        fo.push_back(nk ? oracle::rows(sets.back().features) : oracle::Mat{});
        bo.push_back(oracle::rows(bank.matrix(k)));
      }
      const double alpha = 0.5 + t % 3;
      CHECK(std::abs(memory_loss(bank, sets, alpha).item() - oracle::memory_loss(bo, fo, alpha)) < 1e-9);
      CHECK(std::abs(memory_loss(bank, sets, alpha, UniquenessForm::kHinge).item() -
                     oracle::memory_loss(bo, fo, alpha, true)) < 1e-9);
    }
  }

  TEST_CASE("memory losses send gradient to features, not memory") {
    std::mt19937_64 rng(7);
    auto m = Tensor::from({3, 2}, oracle::randn(rng, 6), true);
    auto g = feats(4, 2, oracle::randn(rng, 8), true);
    add(compactness_loss(m, g), uniqueness_loss(m, g, 0.1, UniquenessForm::kHinge)).backward();
    CHECK_FALSE(m.has_grad());
    CHECK(g.features.has_grad());
  }

  TEST_CASE("bank dumps round-trip") {
    auto rng = make_rng(3, 3);
    const auto bank = MemoryBank::random_unit(2, 3, 4, rng);
    std::stringstream bin;
    write_bank_binary(bin, bank, 0xabcdef);
    std::uint64_t h = 0;
    const auto back = read_bank_binary(bin, &h);
    CHECK(h == 0xabcdef);
    CHECK(back == bank);

    std::stringstream txt;
    write_bank_text(txt, bank, 0xabcdef);
    std::string first;
    std::getline(txt, first);
    CHECK(first == "# config_hash=0000000000abcdef");

    std::stringstream bad("NOTABANK");
    CHECK_THROWS_AS(read_bank_binary(bad), Error);
  }
}
