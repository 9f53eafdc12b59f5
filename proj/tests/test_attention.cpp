#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "mvcd/attention.hpp"
#include "oracle.hpp"

using namespace mvcd;

namespace {

SEWeights identity_se() {
  SEWeights w = SEWeights::zeros(2, 1);
  w.w1.at(0, 0) = w.w1.at(1, 1) = 1.0;
  w.w2.at(0, 0) = w.w2.at(1, 1) = 1.0;
  return w;
}

SEWeights random_se(std::size_t c, std::mt19937_64& rng) {
  SEWeights w = SEWeights::zeros(c);
  for (Tensor* t : {&w.w1, &w.b1, &w.w2, &w.b2})
    for (double& x : t->data()) x = std::uniform_real_distribution<double>(-1, 1)(rng);
  return w;
}

}  // namespace

TEST_CASE("se forward hand case") {
  const Tensor f({2, 1, 1}, {std::log(3.0), 0.0});
  const SEOutput out = se_forward(f, identity_se());
  CHECK(out.v[0] == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(out.v[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(out.reweighted[0] == doctest::Approx(0.75 * std::log(3.0)).epsilon(1e-15));
  CHECK(out.reweighted[1] == 0.0);
}

TEST_CASE("se forward on zero input") {
  std::mt19937_64 rng(5);
  const SEWeights w = random_se(8, rng);
  const SEOutput out = se_forward(Tensor({8, 3, 3}), w);
  for (std::size_t c = 0; c < 8; ++c) {
    double z = w.b2[c];
    for (std::size_t h = 0; h < w.hidden(); ++h) z += w.w2.at(c, h) * std::max(0.0, w.b1[h]);
    CHECK(out.v[c] == doctest::Approx(1.0 / (1.0 + std::exp(-z))).epsilon(1e-14));
  }
  for (double x : out.reweighted.data()) CHECK(x == 0.0);
}

TEST_CASE("se forward shape, range and zeroed channel") {
  std::mt19937_64 rng(6);
  const SEWeights w = random_se(8, rng);
  Tensor f = oracle::random_tensor({8, 4, 4}, rng);
  for (double& x : f.slice(3)) x = 0.0;
  const SEOutput out = se_forward(f, w);
  CHECK(out.reweighted.shape() == f.shape());
  for (double v : out.v) CHECK((v >= 0.0 && v <= 1.0));
  for (double x : out.reweighted.slice(3)) CHECK(x == 0.0);
  CHECK_THROWS_AS(se_forward(Tensor({6, 4, 4}), w), std::invalid_argument);
}

TEST_CASE("se backward matches finite differences") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const SEWeights w = random_se(8, rng);
    const Tensor f = oracle::random_tensor({8, 3, 3}, rng);
    const Tensor seed = oracle::random_tensor({8, 3, 3}, rng);
    auto objective = [&](const Tensor& x, const SEWeights& ww) {
      const SEOutput o = se_forward(x, ww);
      double s = 0;
      for (std::size_t i = 0; i < seed.size(); ++i) s += seed[i] * o.reweighted[i];
      return s;
    };
    const SEOutput out = se_forward(f, w);
    SEWeights grads = SEWeights::zeros(8);
    const Tensor df = se_backward(f, w, out.cache, seed, grads);
    const Tensor nf = finite_difference_grad([&](const Tensor& x) { return objective(x, w); }, f);
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(df[i] == doctest::Approx(nf[i]).epsilon(1e-6));
    const Tensor nw1 = finite_difference_grad(
        [&](const Tensor& x) {
          SEWeights ww = w;
          ww.w1 = x;
          return objective(f, ww);
        },
        w.w1);
    for (std::size_t i = 0; i < nw1.size(); ++i) CHECK(grads.w1[i] == doctest::Approx(nw1[i]).epsilon(1e-6));
    const Tensor nb2 = finite_difference_grad(
        [&](const Tensor& x) {
          SEWeights ww = w;
          ww.b2 = x;
          return objective(f, ww);
        },
        w.b2);
    for (std::size_t i = 0; i < nb2.size(); ++i) CHECK(grads.b2[i] == doctest::Approx(nb2[i]).epsilon(1e-6));
  }
}

TEST_CASE("important channel selection") {
  CHECK(select_important_channels({0.2, 0.9, 0.5, 0.7}) == std::vector<std::size_t>{1, 3});
  CHECK(select_important_channels({0.4, 0.4, 0.4}) == std::vector<std::size_t>{0, 1, 2});
  CHECK(select_important_channels({0.0, 1.0}) == std::vector<std::size_t>{1});
  // Exactly 0.5 after normalization is not selected.
  CHECK(select_important_channels({0.0, 0.5, 1.0}) == std::vector<std::size_t>{2});
  CHECK_THROWS_AS(select_important_channels({}), std::invalid_argument);
}

TEST_CASE("channel selection is invariant under positive affine maps") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(10);
    for (auto& x : v) x = u(rng);
    const double alpha = 0.1 + 5 * u(rng), beta = 4 * u(rng) - 2;
    std::vector<double> w = v;
    for (auto& x : w) x = alpha * x + beta;
    CHECK(select_important_channels(v) == select_important_channels(w));
  }
}

TEST_CASE("spatial attention examples") {
  Tensor spike({3, 4, 4});
  spike.at(1, 2, 3) = 5.0;
  const Tensor a = spatial_attention(spike);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) CHECK(a.at(y, x) == ((y == 2 && x == 3) ? 1.0 : 0.0));

  const Tensor flat = spatial_attention(Tensor({2, 3, 3}));
  for (double x : flat.data()) CHECK(x == 0.0);

  // Unnormalized sum |-1| + |3| = 4 at (0, 0), 0 elsewhere; 2 at (0, 1).
  Tensor f({2, 1, 3});
  f.at(0, 0, 0) = -1.0;
  f.at(1, 0, 0) = 3.0;
  f.at(0, 0, 1) = 2.0;
  const Tensor b = spatial_attention(f);
  CHECK(b.at(0, 0) == 1.0);
  CHECK(b.at(0, 1) == 0.5);
  CHECK(b.at(0, 2) == 0.0);
}

TEST_CASE("spatial attention stays in the unit interval") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor a = spatial_attention(oracle::random_tensor({5, 6, 6}, rng, -10, 10));
    for (double x : a.data()) CHECK((x >= 0.0 && x <= 1.0));
  }
}

TEST_CASE("point selection examples") {
  const Tensor att({2, 2}, {1.0, 0.25, 0.0, 0.5});
  const PointSelection sel = select_points(att, 0.8, 0.1);
  REQUIRE(sel.high.size() == 1);
  REQUIRE(sel.low.size() == 1);
  CHECK(sel.high[0] == GridPoint{0, 0});
  CHECK(sel.low[0] == GridPoint{1, 0});

  const PointSelection flat = select_points(Tensor({3, 3}), 0.8, 0.1);
  CHECK(flat.high.empty());
  CHECK(flat.low.empty());

  const PointSelection mid = select_points(Tensor({2, 2}, {0.2, 0.3, 0.5, 0.7}), 0.8, 0.1);
  CHECK(mid.high.empty());
  CHECK(mid.low.empty());

  CHECK_THROWS_AS(select_points(att, 0.1, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(select_points(att, 0.5, 0.6), std::invalid_argument);
}

TEST_CASE("point sets are disjoint and in range") {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor att = spatial_attention(oracle::random_tensor({4, 5, 7}, rng));
    const PointSelection sel = select_points(att, 0.8, 0.1);
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const auto& p : sel.high) {
      CHECK((p.row < 5 && p.col < 7));
      CHECK(att.at(p.row, p.col) >= 0.8);
      seen.insert({p.row, p.col});
    }
    for (const auto& p : sel.low) {
      CHECK((p.row < 5 && p.col < 7));
      CHECK(att.at(p.row, p.col) <= 0.1);
      CHECK(seen.count({p.row, p.col}) == 0);
    }
    CHECK(sel.high.size() + sel.low.size() <= 35);
    CHECK(!sel.high.empty());
    CHECK(!sel.low.empty());
  }
}
