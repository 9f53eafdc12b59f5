#include "mvcd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mvcd {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_size(shape_) != data_.size()) {
    throw std::invalid_argument("tensor: shape " + shape_string(shape_) + " does not match " +
                                std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::span<double> Tensor::slice(std::size_t i) {
  const std::size_t stride = shape_.empty() ? 0 : data_.size() / shape_[0];
  return std::span<double>(data_).subspan(i * stride, stride);
}

std::span<const double> Tensor::slice(std::size_t i) const {
  const std::size_t stride = shape_.empty() ? 0 : data_.size() / shape_[0];
  return std::span<const double>(data_).subspan(i * stride, stride);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_) {
    throw std::invalid_argument("tensor +=: shape " + shape_string(shape_) + " vs " + shape_string(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double scale) {
  for (double& v : data_) v *= scale;
  return *this;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

namespace {

void check_pair(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("cosine_similarity: empty vector");
  if (a.size() != b.size()) {
    throw std::invalid_argument("cosine_similarity: length mismatch " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
}

}  // namespace

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  check_pair(a, b);
  const double denom = std::max(l2_norm(a) * l2_norm(b), kCosineEps);
  return std::clamp(dot(a, b) / denom, -1.0, 1.0);
}

CosineGrad cosine_similarity_grad(std::span<const double> a, std::span<const double> b) {
  check_pair(a, b);
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  const double ab = dot(a, b);
  CosineGrad g;
  g.d_a.resize(a.size());
  g.d_b.resize(b.size());
  if (na * nb >= kCosineEps) {
    const double inv = 1.0 / (na * nb);
    const double psi = ab / (na * nb);
    g.value = std::clamp(psi, -1.0, 1.0);
    const double ka = psi / (na * na);
    const double kb = psi / (nb * nb);
    for (std::size_t i = 0; i < a.size(); ++i) {
      g.d_a[i] = b[i] * inv - ka * a[i];
      g.d_b[i] = a[i] * inv - kb * b[i];
    }
  } else {
    // Denominator pinned at eps: the similarity is linear in each argument.
    g.value = std::clamp(ab / kCosineEps, -1.0, 1.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
      g.d_a[i] = b[i] / kCosineEps;
      g.d_b[i] = a[i] / kCosineEps;
    }
  }
  return g;
}

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_grad: step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_difference_grad: non-finite function value at element " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace mvcd
