#include "mvcd/distill.hpp"

#include <cmath>
#include <stdexcept>

namespace mvcd {

namespace {

using VectorSet = std::vector<std::vector<double>>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(who) + ": shape " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
}

void require_chw(const Tensor& t, const char* who) {
  if (t.rank() != 3) throw std::invalid_argument(std::string(who) + ": expected a C x H x W tensor");
}

enum class Penalty { kAbs, kSquare };

/// Compares cos(rows_i, cols_j) against the old-model matrix and returns the
/// summed penalty together with gradients for each row and column vector.
/// When `self` is set, rows and cols are the same set and gradients from
/// both roles land on the same vector.
struct CorrelationGrad {
  double sum = 0.0;
  VectorSet d_rows;
  VectorSet d_cols;
};

CorrelationGrad correlation_distance(const VectorSet& rows, const VectorSet& cols, const VectorSet& rows_old,
                                     const VectorSet& cols_old, Penalty penalty, double weight) {
  CorrelationGrad out;
  out.d_rows.assign(rows.size(), std::vector<double>(rows.empty() ? 0 : rows[0].size(), 0.0));
  out.d_cols.assign(cols.size(), std::vector<double>(cols.empty() ? 0 : cols[0].size(), 0.0));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < cols.size(); ++j) {
      const CosineGrad g = cosine_similarity_grad(rows[i], cols[j]);
      const double diff = g.value - cosine_similarity(rows_old[i], cols_old[j]);
      double d_entry = 0.0;
      if (penalty == Penalty::kAbs) {
        out.sum += std::abs(diff);
        d_entry = sign_of(diff) * weight;
      } else {
        out.sum += diff * diff;
        d_entry = 2.0 * diff * weight;
      }
      if (d_entry == 0.0) continue;
      auto& dr = out.d_rows[i];
      auto& dc = out.d_cols[j];
      for (std::size_t t = 0; t < dr.size(); ++t) {
        dr[t] += d_entry * g.d_a[t];
        dc[t] += d_entry * g.d_b[t];
      }
    }
  }
  out.sum *= weight;
  return out;
}

}  // namespace

Tensor correlation_matrix(const VectorSet& rows, const VectorSet& cols) {
  Tensor s({rows.size(), cols.size()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < cols.size(); ++j) s.at(i, j) = cosine_similarity(rows[i], cols[j]);
  }
  return s;
}

LossResult channel_correlation_loss(const Tensor& feature, const Tensor& feature_old,
                                    const std::vector<std::size_t>& idx) {
  require_chw(feature, "channel_correlation_loss");
  require_same_shape(feature, feature_old, "channel_correlation_loss");
  LossResult result{0.0, Tensor(feature.shape())};
  if (idx.empty()) return result;
  VectorSet cur;
  VectorSet old;
  for (std::size_t c : idx) {
    if (c >= feature.dim(0)) throw std::invalid_argument("channel_correlation_loss: channel index out of range");
    auto s = feature.slice(c);
    auto so = feature_old.slice(c);
    cur.emplace_back(s.begin(), s.end());
    old.emplace_back(so.begin(), so.end());
  }
  const double n = static_cast<double>(idx.size());
  const CorrelationGrad g = correlation_distance(cur, cur, old, old, Penalty::kAbs, 1.0 / (n * n));
  result.value = g.sum;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto dst = result.grad.slice(idx[i]);
    for (std::size_t t = 0; t < dst.size(); ++t) dst[t] += g.d_rows[i][t] + g.d_cols[i][t];
  }
  return result;
}

LossResult point_correlation_loss(const Tensor& feature, const Tensor& feature_old, const PointSelection& sel) {
  require_chw(feature, "point_correlation_loss");
  require_same_shape(feature, feature_old, "point_correlation_loss");
  LossResult result{0.0, Tensor(feature.shape())};
  if (sel.high.empty() || sel.low.empty()) return result;

  const std::size_t channels = feature.dim(0);
  auto gather = [&](const Tensor& t, const std::vector<GridPoint>& pts) {
    VectorSet out;
    out.reserve(pts.size());
    for (const GridPoint& p : pts) {
      if (p.row >= t.dim(1) || p.col >= t.dim(2)) {
        throw std::invalid_argument("point_correlation_loss: point outside the feature map");
      }
      std::vector<double> v(channels);
      for (std::size_t c = 0; c < channels; ++c) v[c] = t.at(c, p.row, p.col);
      out.push_back(std::move(v));
    }
    return out;
  };
  const VectorSet high = gather(feature, sel.high);
  const VectorSet low = gather(feature, sel.low);
  const CorrelationGrad g =
      correlation_distance(high, low, gather(feature_old, sel.high), gather(feature_old, sel.low), Penalty::kSquare,
                           1.0);
  result.value = g.sum;
  auto scatter = [&](const std::vector<GridPoint>& pts, const VectorSet& grads) {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      for (std::size_t c = 0; c < channels; ++c) result.grad.at(c, pts[i].row, pts[i].col) += grads[i][c];
    }
  };
  scatter(sel.high, g.d_rows);
  scatter(sel.low, g.d_cols);
  return result;
}

std::vector<std::vector<double>> instance_patches(const Tensor& instance, std::size_t k) {
  require_chw(instance, "instance_patches");
  if (k == 0 || instance.dim(1) % k != 0 || instance.dim(2) % k != 0) {
    throw std::invalid_argument("instance_patches: spatial size " + shape_string(instance.shape()) +
                                " not divisible by k=" + std::to_string(k));
  }
  const std::size_t ph = instance.dim(1) / k;
  const std::size_t pw = instance.dim(2) / k;
  VectorSet patches;
  patches.reserve(k * k);
  for (std::size_t pr = 0; pr < k; ++pr) {
    for (std::size_t pc = 0; pc < k; ++pc) {
      std::vector<double> v;
      v.reserve(instance.dim(0) * ph * pw);
      for (std::size_t c = 0; c < instance.dim(0); ++c) {
        for (std::size_t y = 0; y < ph; ++y) {
          for (std::size_t x = 0; x < pw; ++x) v.push_back(instance.at(c, pr * ph + y, pc * pw + x));
        }
      }
      patches.push_back(std::move(v));
    }
  }
  return patches;
}

LossResult instance_correlation_loss(const Tensor& instance, const Tensor& instance_old, std::size_t k) {
  require_same_shape(instance, instance_old, "instance_correlation_loss");
  const VectorSet cur = instance_patches(instance, k);
  const VectorSet old = instance_patches(instance_old, k);
  const double n = static_cast<double>(cur.size());
  const CorrelationGrad g = correlation_distance(cur, cur, old, old, Penalty::kAbs, 1.0 / (n * n));

  LossResult result{g.sum, Tensor(instance.shape())};
  const std::size_t ph = instance.dim(1) / k;
  const std::size_t pw = instance.dim(2) / k;
  for (std::size_t pr = 0; pr < k; ++pr) {
    for (std::size_t pc = 0; pc < k; ++pc) {
      const std::size_t p = pr * k + pc;
      std::size_t t = 0;
      for (std::size_t c = 0; c < instance.dim(0); ++c) {
        for (std::size_t y = 0; y < ph; ++y) {
          for (std::size_t x = 0; x < pw; ++x, ++t) {
            result.grad.at(c, pr * ph + y, pc * pw + x) += g.d_rows[p][t] + g.d_cols[p][t];
          }
        }
      }
    }
  }
  return result;
}

OutputLossResult output_distillation_loss(const Tensor& cls, const Tensor& cls_old, const Tensor& reg,
                                          const Tensor& reg_old) {
  require_same_shape(cls, cls_old, "output_distillation_loss(cls)");
  require_same_shape(reg, reg_old, "output_distillation_loss(reg)");
  OutputLossResult out{0.0, Tensor(cls.shape()), Tensor(reg.shape())};
  auto l1 = [&out](const Tensor& a, const Tensor& b, Tensor& grad) {
    if (a.empty()) return;
    const double inv = 1.0 / static_cast<double>(a.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = a[i] - b[i];
      sum += std::abs(d);
      grad[i] = sign_of(d) * inv;
    }
    out.value += sum * inv;
  };
  l1(cls, cls_old, out.grad_cls);
  l1(reg, reg_old, out.grad_reg);
  return out;
}

double total_loss(double frcnn, double d_out, double d_cc, double d_pc, double d_ic, double lambda) {
  return frcnn + d_out + lambda * (d_cc + d_pc + d_ic);
}

}  // namespace mvcd
