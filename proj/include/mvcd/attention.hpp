#pragma once

#include <cstddef>
#include <vector>

#include "mvcd/tensor.hpp"

namespace mvcd {

/// Reduction ratio of the squeeze-excitation bottleneck.
inline constexpr std::size_t kSeReduction = 4;

/**
 * Squeeze-excitation gate weights for a C-channel feature.
 *
 * w1 is (C/r) x C and w2 is C x (C/r), both applied as matrix-vector
 * products: hidden = relu(w1 * squeeze + b1), v = sigmoid(w2 * hidden + b2).
 */
struct SEWeights {
  Tensor w1;
  Tensor b1;
  Tensor w2;
  Tensor b2;

  static SEWeights zeros(std::size_t channels, std::size_t reduction = kSeReduction);
  std::size_t channels() const { return w1.dim(1); }
  std::size_t hidden() const { return w1.dim(0); }
  void validate() const;
};

/// Per-channel sigmoid gate, entries in [0, 1].
using ChannelAttentionVector = std::vector<double>;

struct GridPoint {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const GridPoint&, const GridPoint&) = default;
};

/// Discriminative positions chosen on an attention map; the two sets are disjoint.
struct PointSelection {
  std::vector<GridPoint> high;
  std::vector<GridPoint> low;
};

/// Intermediate values of an SE pass, kept for the backward pass.
struct SECache {
  std::vector<double> squeeze;
  std::vector<double> hidden_pre;
  std::vector<double> hidden;
  ChannelAttentionVector v;
};

struct SEOutput {
  Tensor reweighted;
  ChannelAttentionVector v;
  SECache cache;
};

SEOutput se_forward(const Tensor& feature, const SEWeights& weights);

/// Backward of se_forward: returns dL/dfeature and accumulates weight grads.
Tensor se_backward(const Tensor& feature, const SEWeights& weights, const SECache& cache,
                   const Tensor& d_reweighted, SEWeights& grads);

/// Min-max normalizes v and keeps indices strictly above the threshold.
/// A constant vector selects every channel.
std::vector<std::size_t> select_important_channels(const ChannelAttentionVector& v, double threshold = 0.5);

/// Sum of |F_c| over channels, min-max normalized; a flat map becomes all zeros.
Tensor spatial_attention(const Tensor& feature);

/// P_high: att >= theta_high, P_low: att <= theta_low. An all-zero map selects nothing.
PointSelection select_points(const Tensor& attention, double theta_high, double theta_low);

}  // namespace mvcd
