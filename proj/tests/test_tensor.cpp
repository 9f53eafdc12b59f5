#include <doctest.h>

#include <cmath>
#include <random>

#include "mvcd/tensor.hpp"
#include "oracle.hpp"

using namespace mvcd;

TEST_CASE("tensor shape and indexing") {
  Tensor t({2, 3, 4});
  CHECK(t.size() == 24);
  t.at(1, 2, 3) = 7.0;
  CHECK(t[23] == 7.0);
  CHECK(t.slice(1).size() == 12);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
  CHECK(t.reshaped({6, 4}).at(5, 3) == 7.0);
}

TEST_CASE("cosine similarity examples") {
  const std::vector<double> e1{1, 0}, e2{0, 1}, a{1, 2}, b{2, 1};
  CHECK(cosine_similarity(e1, e1) == 1.0);
  CHECK(cosine_similarity(e1, e2) == 0.0);
  CHECK(cosine_similarity(a, b) == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("cosine similarity rejects bad input") {
  const std::vector<double> a{1, 2}, c{1, 2, 3}, empty;
  CHECK_THROWS_AS(cosine_similarity(a, c), std::invalid_argument);
  CHECK_THROWS_AS(cosine_similarity(empty, empty), std::invalid_argument);
}

TEST_CASE("zero vector has similarity zero") {
  const std::vector<double> z{0, 0, 0}, a{1, -2, 3};
  CHECK(cosine_similarity(z, a) == 0.0);
  CHECK(cosine_similarity(z, z) == 0.0);
}

TEST_CASE("cosine properties on random vectors") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-3, 3);
  std::uniform_real_distribution<double> pos(0.01, 50);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(5), b(5);
    for (auto& x : a) x = u(rng);
    for (auto& x : b) x = u(rng);
    const double alpha = pos(rng);
    std::vector<double> sa = a;
    for (auto& x : sa) x *= alpha;
    CHECK(std::abs(cosine_similarity(a, a) - 1.0) <= 1e-12);
    CHECK(std::abs(cosine_similarity(sa, b) - cosine_similarity(a, b)) <= 1e-12);
    CHECK(cosine_similarity(a, b) == cosine_similarity(b, a));
    CHECK(std::abs(cosine_similarity(a, b) - oracle::cosine(a, b)) <= 1e-14);
    const double c = cosine_similarity(a, b);
    CHECK((c >= -1.0 && c <= 1.0));
  }
}

TEST_CASE("cosine gradient matches finite differences") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = oracle::random_tensor({6}, rng);
    const Tensor b = oracle::random_tensor({6}, rng);
    const CosineGrad g = cosine_similarity_grad(a.data(), b.data());
    CHECK(g.value == cosine_similarity(a.data(), b.data()));
    const Tensor na = finite_difference_grad([&](const Tensor& x) { return cosine_similarity(x.data(), b.data()); }, a);
    const Tensor nb = finite_difference_grad([&](const Tensor& x) { return cosine_similarity(a.data(), x.data()); }, b);
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(g.d_a[i] == doctest::Approx(na[i]).epsilon(1e-6));
      CHECK(g.d_b[i] == doctest::Approx(nb[i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("finite difference examples") {
  const Tensor x = Tensor::vector({1.0, 2.0});
  const Tensor g = finite_difference_grad(
      [](const Tensor& t) {
        double s = 0;
        for (double v : t.data()) s += v * v;
        return s;
      },
      x);
  CHECK(std::abs(g[0] - 2.0) <= 1e-6);
  CHECK(std::abs(g[1] - 4.0) <= 1e-6);

  const Tensor c = finite_difference_grad([](const Tensor&) { return 3.0; }, x);
  CHECK(c[0] == 0.0);
  CHECK(c[1] == 0.0);

  const Tensor target = Tensor::vector({0.0, 5.0, -1.0});
  const Tensor y = Tensor::vector({1.0, 2.0, -3.0});
  const Tensor l1 = finite_difference_grad(
      [&](const Tensor& t) {
        double s = 0;
        for (std::size_t i = 0; i < t.size(); ++i) s += std::abs(t[i] - target[i]);
        return s;
      },
      y);
  CHECK(l1[0] == doctest::Approx(1.0));
  CHECK(l1[1] == doctest::Approx(-1.0));
  CHECK(l1[2] == doctest::Approx(-1.0));
}

TEST_CASE("finite difference reports non-finite evaluations") {
  const Tensor x = Tensor::vector({1.0});
  CHECK_THROWS_AS(finite_difference_grad([](const Tensor&) { return NAN; }, x), NumericError);
}
