#pragma once

// Brute-force references used only by the tests. Written straight from the
// definitions with explicit loops; nothing here calls into the library's math.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <utility>
#include <vector>

#include "mvcd/tensor.hpp"

namespace oracle {

using Vec = std::vector<double>;

inline double cosine(const Vec& a, const Vec& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  double d = std::sqrt(aa) * std::sqrt(bb);
  if (d < 1e-12) d = 1e-12;
  double c = ab / d;
  if (c > 1.0) c = 1.0;
  if (c < -1.0) c = -1.0;
  return c;
}

inline double at3(const mvcd::Tensor& t, std::size_t c, std::size_t y, std::size_t x) {
  return t.values()[(c * t.dim(1) + y) * t.dim(2) + x];
}

inline Vec channel(const mvcd::Tensor& f, std::size_t c) {
  Vec v;
  for (std::size_t y = 0; y < f.dim(1); ++y)
    for (std::size_t x = 0; x < f.dim(2); ++x) v.push_back(at3(f, c, y, x));
  return v;
}

inline Vec column(const mvcd::Tensor& f, std::size_t y, std::size_t x) {
  Vec v;
  for (std::size_t c = 0; c < f.dim(0); ++c) v.push_back(at3(f, c, y, x));
  return v;
}

inline double dcc(const mvcd::Tensor& f, const mvcd::Tensor& g, const std::vector<std::size_t>& idx) {
  if (idx.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i : idx)
    for (std::size_t j : idx)
      sum += std::abs(cosine(channel(f, i), channel(f, j)) - cosine(channel(g, i), channel(g, j)));
  return sum / static_cast<double>(idx.size() * idx.size());
}

inline double dpc(const mvcd::Tensor& f, const mvcd::Tensor& g, const std::vector<std::pair<std::size_t, std::size_t>>& high,
                  const std::vector<std::pair<std::size_t, std::size_t>>& low) {
  double sum = 0.0;
  for (auto [hy, hx] : high) {
    for (auto [ly, lx] : low) {
      const double d = cosine(column(f, hy, hx), column(f, ly, lx)) - cosine(column(g, hy, hx), column(g, ly, lx));
      sum += d * d;
    }
  }
  return sum;
}

inline std::vector<Vec> patches(const mvcd::Tensor& t, std::size_t k) {
  const std::size_t ph = t.dim(1) / k, pw = t.dim(2) / k;
  std::vector<Vec> out;
  for (std::size_t py = 0; py < k; ++py) {
    for (std::size_t px = 0; px < k; ++px) {
      Vec v;
      for (std::size_t c = 0; c < t.dim(0); ++c)
        for (std::size_t y = 0; y < ph; ++y)
          for (std::size_t x = 0; x < pw; ++x) v.push_back(at3(t, c, py * ph + y, px * pw + x));
      out.push_back(v);
    }
  }
  return out;
}

inline double dic(const mvcd::Tensor& f, const mvcd::Tensor& g, std::size_t k) {
  const auto a = patches(f, k), b = patches(g, k);
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j) sum += std::abs(cosine(a[i], a[j]) - cosine(b[i], b[j]));
  return sum / static_cast<double>(a.size() * a.size());
}

inline double mean_abs(const mvcd::Tensor& a, const mvcd::Tensor& b) {
  if (a.size() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.values()[i] - b.values()[i]);
  return s / static_cast<double>(a.size());
}

struct B {
  double x1, y1, x2, y2;
};

inline double iou(B a, B b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  return inter / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter);
}

// TP flags in rank order; AP is the integral of the interpolated precision
// p_interp(r) = max precision at recall >= r, evaluated on a fine grid of the
// distinct recall steps.
inline double ap_from_flags(const std::vector<bool>& tp, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> prec, rec;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    hits += tp[i] ? 1 : 0;
    prec.push_back(static_cast<double>(hits) / static_cast<double>(i + 1));
    rec.push_back(static_cast<double>(hits) / static_cast<double>(num_gt));
  }
  double area = 0.0;
  for (std::size_t step = 1; step <= num_gt; ++step) {
    const double r = static_cast<double>(step) / static_cast<double>(num_gt);
    double best = 0.0;
    for (std::size_t i = 0; i < rec.size(); ++i)
      if (rec[i] >= r - 1e-15) best = std::max(best, prec[i]);
    area += best / static_cast<double>(num_gt);
  }
  return area;
}

inline mvcd::Tensor random_tensor(mvcd::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  mvcd::Tensor t(std::move(shape));
  for (double& x : t.data()) x = u(rng);
  return t;
}

}  // namespace oracle
