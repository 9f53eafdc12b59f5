#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mvcd/distill.hpp"
#include "mvcd/selfcheck.hpp"
#include "oracle.hpp"

using namespace mvcd;

namespace {

std::vector<std::pair<std::size_t, std::size_t>> pairs_of(const std::vector<GridPoint>& pts) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& p : pts) out.emplace_back(p.row, p.col);
  return out;
}

std::vector<std::size_t> random_subset(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx;
  while (idx.empty()) {
    for (std::size_t i = 0; i < n; ++i)
      if (std::bernoulli_distribution(0.6)(rng)) idx.push_back(i);
  }
  return idx;
}

PointSelection random_points(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::vector<GridPoint> all;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) all.push_back({y, x});
  std::shuffle(all.begin(), all.end(), rng);
  const std::size_t nh = 1 + rng() % std::min<std::size_t>(2, all.size() - 1);
  const std::size_t nl = 1 + rng() % std::min<std::size_t>(3, all.size() - nh);
  PointSelection sel;
  sel.high.assign(all.begin(), all.begin() + static_cast<long>(nh));
  sel.low.assign(all.begin() + static_cast<long>(nh), all.begin() + static_cast<long>(nh + nl));
  return sel;
}

double max_abs(const Tensor& t) {
  double m = 0;
  for (double x : t.data()) m = std::max(m, std::abs(x));
  return m;
}

// Smallest |S - S'| off the diagonal; finite differences need it well away from 0.
double min_gap(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  double m = INFINITY;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j)
      if (i != j) m = std::min(m, std::abs(oracle::cosine(a[i], a[j]) - oracle::cosine(b[i], b[j])));
  return m;
}

}  // namespace

TEST_CASE("channel correlation hand case") {
  const Tensor f({2, 1, 1}, {1.0, 1.0});
  const Tensor g({2, 1, 1}, {1.0, -1.0});
  CHECK(channel_correlation_loss(f, g, {0, 1}).value == 1.0);
}

TEST_CASE("channel correlation edge cases") {
  std::mt19937_64 rng(1);
  const Tensor f = oracle::random_tensor({4, 3, 3}, rng);
  const Tensor g = oracle::random_tensor({4, 3, 3}, rng);
  const LossResult empty = channel_correlation_loss(f, g, {});
  CHECK(empty.value == 0.0);
  CHECK(max_abs(empty.grad) == 0.0);
  CHECK_THROWS_AS(channel_correlation_loss(f, g, {4}), std::invalid_argument);
  CHECK_THROWS_AS(channel_correlation_loss(f, Tensor({4, 3, 2}), {0}), std::invalid_argument);
}

TEST_CASE("point correlation hand cases") {
  // psi = 1 in the incremental model, 0 in the old one.
  const Tensor f({2, 1, 2}, {1.0, 1.0, 0.0, 0.0});
  const Tensor g({2, 1, 2}, {1.0, 0.0, 0.0, 1.0});
  PointSelection sel{{{0, 0}}, {{0, 1}}};
  CHECK(point_correlation_loss(f, g, sel).value == 1.0);

  const LossResult none = point_correlation_loss(f, g, PointSelection{{{0, 0}}, {}});
  CHECK(none.value == 0.0);
  CHECK(max_abs(none.grad) == 0.0);
  CHECK_THROWS_AS(point_correlation_loss(f, g, PointSelection{{{0, 2}}, {{0, 0}}}), std::invalid_argument);
}

TEST_CASE("point correlation equals the double-loop sum for 2 x 1 points") {
  std::mt19937_64 rng(2);
  const Tensor f = oracle::random_tensor({3, 2, 2}, rng);
  const Tensor g = oracle::random_tensor({3, 2, 2}, rng);
  const PointSelection sel{{{0, 0}, {1, 1}}, {{0, 1}}};
  CHECK(std::abs(point_correlation_loss(f, g, sel).value -
                 oracle::dpc(f, g, pairs_of(sel.high), pairs_of(sel.low))) <= 1e-12);
}

TEST_CASE("instance correlation sign-flip case is exactly 0.75") {
  const Tensor a({1, 2, 2}, {1, 1, 1, 1});
  const Tensor b({1, 2, 2}, {1, 1, 1, -1});
  CHECK(instance_correlation_loss(a, b, 2).value == 0.75);
}

TEST_CASE("instance patches are grid row-major, channel-row-column inside") {
  Tensor t({2, 4, 4});
  std::iota(t.data().begin(), t.data().end(), 0.0);
  const auto p = instance_patches(t, 2);
  REQUIRE(p.size() == 4);
  CHECK(p[1] == std::vector<double>{2, 3, 6, 7, 18, 19, 22, 23});
  CHECK(p[2] == std::vector<double>{8, 9, 12, 13, 24, 25, 28, 29});
  CHECK_THROWS_AS(instance_correlation_loss(Tensor({1, 3, 4}), Tensor({1, 3, 4}), 2), std::invalid_argument);
}

TEST_CASE("instance correlation under scaling") {
  std::mt19937_64 rng(3);
  const Tensor f = oracle::random_tensor({3, 4, 4}, rng);
  Tensor scaled = f;
  scaled *= 3.7;
  CHECK(instance_correlation_loss(scaled, f, 2).value <= 1e-15);
}

TEST_CASE("output distillation examples") {
  const Tensor cls = Tensor::vector({1, 2}), cls_old = Tensor::vector({0, 4});
  const OutputLossResult r = output_distillation_loss(cls, cls_old, Tensor(), Tensor());
  CHECK(r.value == 1.5);
  CHECK(r.grad_cls[0] == 0.5);
  CHECK(r.grad_cls[1] == -0.5);
  CHECK(output_distillation_loss(cls_old, cls, Tensor(), Tensor()).value == 1.5);
  CHECK(output_distillation_loss(cls, cls, Tensor(), Tensor()).value == 0.0);
  CHECK_THROWS_AS(output_distillation_loss(cls, Tensor::vector({1}), Tensor(), Tensor()), std::invalid_argument);
}

TEST_CASE("total loss examples") {
  CHECK(total_loss(2, 0, 0, 0, 0, 1) == 2.0);
  CHECK(total_loss(1, 0.5, 0.1, 0.2, 0.3, 1) == doctest::Approx(2.1).epsilon(1e-15));
  CHECK(total_loss(1, 0.5, 0.1, 0.2, 0.3, 0) == 1.5);
}

TEST_CASE("identical features give zero loss and zero gradient") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor f = oracle::random_tensor({6, 3, 3}, rng);
    const Tensor inst = oracle::random_tensor({4, 4, 4}, rng);
    const auto idx = random_subset(6, rng);
    const auto sel = random_points(3, 3, rng);
    const LossResult a = channel_correlation_loss(f, f, idx);
    const LossResult b = point_correlation_loss(f, f, sel);
    const LossResult c = instance_correlation_loss(inst, inst, 2);
    const OutputLossResult d = output_distillation_loss(inst, inst, f, f);
    CHECK(a.value == 0.0);
    CHECK(b.value == 0.0);
    CHECK(c.value == 0.0);
    CHECK(d.value == 0.0);
    CHECK(max_abs(a.grad) == 0.0);
    CHECK(max_abs(b.grad) == 0.0);
    CHECK(max_abs(c.grad) == 0.0);
    CHECK(max_abs(d.grad_cls) == 0.0);
    CHECK(max_abs(d.grad_reg) == 0.0);
  }
}

TEST_CASE("losses agree with brute-force references") {
  std::mt19937_64 rng(5);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t c = 1 + rng() % 6, h = 1 + rng() % 3, w = 1 + rng() % 3;
    const Tensor f = oracle::random_tensor({c, h, w}, rng);
    const Tensor g = oracle::random_tensor({c, h, w}, rng);
    const auto idx = random_subset(c, rng);
    worst = std::max(worst, std::abs(channel_correlation_loss(f, g, idx).value - oracle::dcc(f, g, idx)));

    if (h * w >= 2) {
      const auto sel = random_points(h, w, rng);
      const double ref = oracle::dpc(f, g, pairs_of(sel.high), pairs_of(sel.low));
      worst = std::max(worst, std::abs(point_correlation_loss(f, g, sel).value - ref));
    }
    const Tensor a = oracle::random_tensor({c, 2, 2}, rng);
    const Tensor b = oracle::random_tensor({c, 2, 2}, rng);
    worst = std::max(worst, std::abs(instance_correlation_loss(a, b, 2).value - oracle::dic(a, b, 2)));

    const Tensor r1 = oracle::random_tensor({c, 4}, rng), r2 = oracle::random_tensor({c, 4}, rng);
    const double dout = oracle::mean_abs(f, g) + oracle::mean_abs(r1, r2);
    worst = std::max(worst, std::abs(output_distillation_loss(f, g, r1, r2).value - dout));
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("correlation losses are invariant to positive per-vector rescaling") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> scale(0.2, 5.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor f = oracle::random_tensor({5, 3, 3}, rng);
    const Tensor g = oracle::random_tensor({5, 3, 3}, rng);
    const auto idx = random_subset(5, rng);
    const auto sel = random_points(3, 3, rng);

    Tensor fc = f, gc = g;  // per channel
    for (std::size_t ch = 0; ch < 5; ++ch) {
      const double s = scale(rng), t = scale(rng);
      for (double& x : fc.slice(ch)) x *= s;
      for (double& x : gc.slice(ch)) x *= t;
    }
    CHECK(std::abs(channel_correlation_loss(fc, gc, idx).value - channel_correlation_loss(f, g, idx).value) <= 1e-12);

    Tensor fp = f, gp = g;  // per spatial position
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 3; ++x) {
        const double s = scale(rng), t = scale(rng);
        for (std::size_t ch = 0; ch < 5; ++ch) {
          fp.at(ch, y, x) *= s;
          gp.at(ch, y, x) *= t;
        }
      }
    CHECK(std::abs(point_correlation_loss(fp, gp, sel).value - point_correlation_loss(f, g, sel).value) <= 1e-12);

    const Tensor a = oracle::random_tensor({2, 4, 4}, rng), b = oracle::random_tensor({2, 4, 4}, rng);
    Tensor ai = a, bi = b;  // per patch
    for (std::size_t py = 0; py < 2; ++py)
      for (std::size_t px = 0; px < 2; ++px) {
        const double s = scale(rng), t = scale(rng);
        for (std::size_t ch = 0; ch < 2; ++ch)
          for (std::size_t y = 0; y < 2; ++y)
            for (std::size_t x = 0; x < 2; ++x) {
              ai.at(ch, 2 * py + y, 2 * px + x) *= s;
              bi.at(ch, 2 * py + y, 2 * px + x) *= t;
            }
      }
    CHECK(std::abs(instance_correlation_loss(ai, bi, 2).value - instance_correlation_loss(a, b, 2).value) <= 1e-12);
  }
}

TEST_CASE("channel correlation is invariant under a shared channel permutation") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor f = oracle::random_tensor({6, 2, 3}, rng);
    const Tensor g = oracle::random_tensor({6, 2, 3}, rng);
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor fp(f.shape()), gp(g.shape());
    for (std::size_t c = 0; c < 6; ++c) {
      std::copy(f.slice(perm[c]).begin(), f.slice(perm[c]).end(), fp.slice(c).begin());
      std::copy(g.slice(perm[c]).begin(), g.slice(perm[c]).end(), gp.slice(c).begin());
    }
    const auto idx = random_subset(6, rng);
    // Channel idx[i] of (f, g) is channel inv[idx[i]] of (fp, gp).
    std::vector<std::size_t> inv(6), mapped;
    for (std::size_t c = 0; c < 6; ++c) inv[perm[c]] = c;
    for (std::size_t i : idx) mapped.push_back(inv[i]);
    CHECK(std::abs(channel_correlation_loss(fp, gp, mapped).value - channel_correlation_loss(f, g, idx).value) <=
          1e-12);
    std::vector<std::size_t> reversed(idx.rbegin(), idx.rend());
    CHECK(std::abs(channel_correlation_loss(f, g, reversed).value - channel_correlation_loss(f, g, idx).value) <=
          1e-12);
  }
}

TEST_CASE("gradient sparsity") {
  std::mt19937_64 rng(8);
  const Tensor f = oracle::random_tensor({5, 3, 3}, rng);
  const Tensor g = oracle::random_tensor({5, 3, 3}, rng);
  const LossResult cc = channel_correlation_loss(f, g, {1, 3});
  for (std::size_t c : {0, 2, 4})
    for (double x : cc.grad.slice(c)) CHECK(x == 0.0);

  const PointSelection sel{{{0, 0}}, {{2, 1}, {1, 2}}};
  const LossResult pc = point_correlation_loss(f, g, sel);
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 3; ++x) {
      const bool chosen = (y == 0 && x == 0) || (y == 2 && x == 1) || (y == 1 && x == 2);
      if (chosen) continue;
      for (std::size_t c = 0; c < 5; ++c) CHECK(pc.grad.at(c, y, x) == 0.0);
    }
}

TEST_CASE("analytic gradients match finite differences over 20 seeds") {
  double worst_cc = 0, worst_pc = 0, worst_ic = 0, worst_out = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    const std::size_t c = 2 + seed % 7;  // 2..8 channels
    Tensor f, g;
    std::vector<std::size_t> idx;
    do {
      f = oracle::random_tensor({c, 4, 4}, rng);
      g = oracle::random_tensor({c, 4, 4}, rng);
      idx = random_subset(c, rng);
      std::vector<std::vector<double>> a, b;
      for (std::size_t i : idx) {
        a.push_back(oracle::channel(f, i));
        b.push_back(oracle::channel(g, i));
      }
      if (idx.size() >= 2 && min_gap(a, b) > 1e-3) break;
    } while (true);
    const LossResult cc = channel_correlation_loss(f, g, idx);
    worst_cc = std::max(worst_cc, relative_error(cc.grad, finite_difference_grad(
                                                              [&](const Tensor& x) {
                                                                return channel_correlation_loss(x, g, idx).value;
                                                              },
                                                              f)));

    const PointSelection sel = select_points(spatial_attention(g), 0.8, 0.1);
    const LossResult pc = point_correlation_loss(f, g, sel);
    worst_pc = std::max(worst_pc, relative_error(pc.grad, finite_difference_grad(
                                                              [&](const Tensor& x) {
                                                                return point_correlation_loss(x, g, sel).value;
                                                              },
                                                              f)));

    Tensor a, b;
    do {
      a = oracle::random_tensor({c, 4, 4}, rng);
      b = oracle::random_tensor({c, 4, 4}, rng);
    } while (min_gap(oracle::patches(a, 2), oracle::patches(b, 2)) <= 1e-3);
    const LossResult ic = instance_correlation_loss(a, b, 2);
    worst_ic = std::max(worst_ic, relative_error(ic.grad, finite_difference_grad(
                                                              [&](const Tensor& x) {
                                                                return instance_correlation_loss(x, b, 2).value;
                                                              },
                                                              a)));

    const Tensor cls = oracle::random_tensor({4, c}, rng), cls_old = oracle::random_tensor({4, c}, rng);
    const Tensor reg = oracle::random_tensor({4, 8}, rng), reg_old = oracle::random_tensor({4, 8}, rng);
    const OutputLossResult out = output_distillation_loss(cls, cls_old, reg, reg_old);
    const Tensor ncls = finite_difference_grad(
        [&](const Tensor& x) { return output_distillation_loss(x, cls_old, reg, reg_old).value; }, cls);
    const Tensor nreg = finite_difference_grad(
        [&](const Tensor& x) { return output_distillation_loss(cls, cls_old, x, reg_old).value; }, reg);
    worst_out = std::max({worst_out, relative_error(out.grad_cls, ncls), relative_error(out.grad_reg, nreg)});
  }
  CHECK(worst_cc <= 1e-4);
  CHECK(worst_pc <= 1e-4);
  CHECK(worst_ic <= 1e-4);
  CHECK(worst_out <= 1e-4);
}

TEST_CASE("correlation matrix entries") {
  const auto s = correlation_matrix({{1, 0}, {1, 1}}, {{0, 1}, {2, 0}, {1, 2}});
  CHECK(s.shape() == Shape{2, 3});
  CHECK(s.at(0, 0) == 0.0);
  CHECK(s.at(0, 1) == 1.0);
  CHECK(s.at(1, 2) == doctest::Approx(3.0 / std::sqrt(10.0)).epsilon(1e-15));
}
