#include "mvcd/attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mvcd {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

SEWeights SEWeights::zeros(std::size_t channels, std::size_t reduction) {
  if (reduction == 0 || channels / reduction < 1) {
    throw std::invalid_argument("SEWeights: channels / reduction must be at least 1");
  }
  const std::size_t hidden = channels / reduction;
  return SEWeights{Tensor({hidden, channels}), Tensor({hidden}), Tensor({channels, hidden}), Tensor({channels})};
}

void SEWeights::validate() const {
  if (w1.rank() != 2 || w2.rank() != 2 || b1.rank() != 1 || b2.rank() != 1) {
    throw std::invalid_argument("SEWeights: bad tensor ranks");
  }
  const std::size_t h = w1.dim(0);
  const std::size_t c = w1.dim(1);
  if (h < 1 || b1.dim(0) != h || w2.dim(0) != c || w2.dim(1) != h || b2.dim(0) != c) {
    throw std::invalid_argument("SEWeights: inconsistent shapes");
  }
}

SEOutput se_forward(const Tensor& feature, const SEWeights& weights) {
  weights.validate();
  if (feature.rank() != 3 || feature.dim(0) != weights.channels()) {
    throw std::invalid_argument("se_forward: feature " + shape_string(feature.shape()) + " does not match " +
                                std::to_string(weights.channels()) + " SE channels");
  }
  const std::size_t c = feature.dim(0);
  const std::size_t hw = feature.dim(1) * feature.dim(2);
  const std::size_t h = weights.hidden();

  SEOutput out;
  SECache& cache = out.cache;
  cache.squeeze.resize(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (double x : feature.slice(ch)) s += x;
    cache.squeeze[ch] = s / static_cast<double>(hw);
  }
  cache.hidden_pre.resize(h);
  cache.hidden.resize(h);
  for (std::size_t j = 0; j < h; ++j) {
    double z = weights.b1[j];
    for (std::size_t ch = 0; ch < c; ++ch) z += weights.w1.at(j, ch) * cache.squeeze[ch];
    cache.hidden_pre[j] = z;
    cache.hidden[j] = std::max(z, 0.0);
  }
  cache.v.resize(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double z = weights.b2[ch];
    for (std::size_t j = 0; j < h; ++j) z += weights.w2.at(ch, j) * cache.hidden[j];
    cache.v[ch] = sigmoid(z);
  }

  out.reweighted = feature;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (double& x : out.reweighted.slice(ch)) x *= cache.v[ch];
  }
  out.v = cache.v;
  return out;
}

Tensor se_backward(const Tensor& feature, const SEWeights& weights, const SECache& cache,
                   const Tensor& d_reweighted, SEWeights& grads) {
  const std::size_t c = feature.dim(0);
  const std::size_t hw = feature.dim(1) * feature.dim(2);
  const std::size_t h = weights.hidden();

  Tensor d_feature(feature.shape());
  std::vector<double> d_gate(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    auto f = feature.slice(ch);
    auto g = d_reweighted.slice(ch);
    auto d = d_feature.slice(ch);
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      acc += g[i] * f[i];
      d[i] = g[i] * cache.v[ch];
    }
    // Through the sigmoid.
    d_gate[ch] = acc * cache.v[ch] * (1.0 - cache.v[ch]);
  }

  std::vector<double> d_hidden(h, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    grads.b2[ch] += d_gate[ch];
    for (std::size_t j = 0; j < h; ++j) {
      grads.w2.at(ch, j) += d_gate[ch] * cache.hidden[j];
      d_hidden[j] += d_gate[ch] * weights.w2.at(ch, j);
    }
  }
  std::vector<double> d_squeeze(c, 0.0);
  for (std::size_t j = 0; j < h; ++j) {
    if (cache.hidden_pre[j] <= 0.0) continue;
    grads.b1[j] += d_hidden[j];
    for (std::size_t ch = 0; ch < c; ++ch) {
      grads.w1.at(j, ch) += d_hidden[j] * cache.squeeze[ch];
      d_squeeze[ch] += d_hidden[j] * weights.w1.at(j, ch);
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double share = d_squeeze[ch] / static_cast<double>(hw);
    for (double& d : d_feature.slice(ch)) d += share;
  }
  return d_feature;
}

std::vector<std::size_t> select_important_channels(const ChannelAttentionVector& v, double threshold) {
  if (v.empty()) throw std::invalid_argument("select_important_channels: empty attention vector");
  const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  std::vector<std::size_t> idx;
  if (hi == lo) {
    for (std::size_t i = 0; i < v.size(); ++i) idx.push_back(i);
    return idx;
  }
  for (std::size_t i = 0; i < v.size(); ++i) {
    if ((v[i] - lo) / (hi - lo) > threshold) idx.push_back(i);
  }
  return idx;
}

Tensor spatial_attention(const Tensor& feature) {
  if (feature.rank() != 3 || feature.dim(0) < 1) {
    throw std::invalid_argument("spatial_attention: expected C x H x W with C >= 1");
  }
  const std::size_t c = feature.dim(0);
  Tensor att({feature.dim(1), feature.dim(2)});
  const std::size_t hw = att.size();
  for (std::size_t ch = 0; ch < c; ++ch) {
    auto f = feature.slice(ch);
    for (std::size_t i = 0; i < hw; ++i) att[i] += std::abs(f[i]);
  }
  const auto [lo_it, hi_it] = std::minmax_element(att.data().begin(), att.data().end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (hi == lo) {
    att.fill(0.0);
    return att;
  }
  for (double& a : att.data()) a = (a - lo) / (hi - lo);
  return att;
}

PointSelection select_points(const Tensor& attention, double theta_high, double theta_low) {
  if (!(theta_low >= 0.0 && theta_low < theta_high && theta_high <= 1.0)) {
    throw std::invalid_argument("select_points: need 0 <= theta_low < theta_high <= 1");
  }
  if (attention.rank() != 2) throw std::invalid_argument("select_points: attention map must be H x W");
  PointSelection sel;
  if (attention.empty()) return sel;
  const auto [lo_it, hi_it] = std::minmax_element(attention.data().begin(), attention.data().end());
  if (*lo_it == *hi_it) return sel;
  for (std::size_t r = 0; r < attention.dim(0); ++r) {
    for (std::size_t c = 0; c < attention.dim(1); ++c) {
      const double a = attention.at(r, c);
      if (a >= theta_high) {
        sel.high.push_back({r, c});
      } else if (a <= theta_low) {
        sel.low.push_back({r, c});
      }
    }
  }
  return sel;
}

}  // namespace mvcd
