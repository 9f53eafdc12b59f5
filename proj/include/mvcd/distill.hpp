#pragma once

#include <cstddef>
#include <vector>

#include "mvcd/attention.hpp"
#include "mvcd/tensor.hpp"

namespace mvcd {

/// Scalar loss plus its gradient with respect to the incremental-model input.
/// The old-model input is treated as a constant.
struct LossResult {
  double value = 0.0;
  Tensor grad;
};

/// Pairwise cosine similarities; rows[i] against cols[j].
Tensor correlation_matrix(const std::vector<std::vector<double>>& rows,
                          const std::vector<std::vector<double>>& cols);

/// Mean |S - S'| over the N x N cosine matrices of the selected channels.
/// Channels are flattened to H*W vectors. Empty idx gives zero loss.
LossResult channel_correlation_loss(const Tensor& feature, const Tensor& feature_old,
                                    const std::vector<std::size_t>& idx);

/// Squared Frobenius distance between the high-vs-low point correlation
/// matrices. Point vectors run along the channel axis.
LossResult point_correlation_loss(const Tensor& feature, const Tensor& feature_old, const PointSelection& sel);

/// Splits a pooled instance feature into k x k spatial patches and compares
/// the (k^2) x (k^2) patch cosine matrices by mean absolute difference.
LossResult instance_correlation_loss(const Tensor& instance, const Tensor& instance_old, std::size_t k);

/// Patch vectors of an instance feature, patch-grid row-major, each vector
/// laid out channel, row, column.
std::vector<std::vector<double>> instance_patches(const Tensor& instance, std::size_t k);

/// L1 distillation on the output layers: mean |cls - cls_old| + mean |reg - reg_old|.
/// An empty pair contributes nothing.
struct OutputLossResult {
  double value = 0.0;
  Tensor grad_cls;
  Tensor grad_reg;
};
OutputLossResult output_distillation_loss(const Tensor& cls, const Tensor& cls_old, const Tensor& reg,
                                          const Tensor& reg_old);

/// L = L_frcnn + D_out + lambda * (D_cc + D_pc + D_ic).
double total_loss(double frcnn, double d_out, double d_cc, double d_pc, double d_ic, double lambda = 1.0);

}  // namespace mvcd
