#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvcd {

/// Raised when a computation produces or consumes a non-finite value.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/**
 * Dense row-major array of doubles.
 *
 * The flat buffer always holds exactly product(shape) values. Indexing
 * helpers cover the ranks the detector needs (1 to 4); anything else goes
 * through data().
 */
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  /// Contiguous slice along the leading axis (e.g. one channel of C x H x W).
  std::span<double> slice(std::size_t i);
  std::span<const double> slice(std::size_t i) const;

  void fill(double value);
  bool all_finite() const;
  Tensor reshaped(Shape shape) const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double scale);

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Stabilizer in the cosine denominator; a zero vector yields similarity 0.
inline constexpr double kCosineEps = 1e-12;

/// a.b / max(|a||b|, eps), clamped to [-1, 1].
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Partial derivatives of cosine_similarity with respect to each argument.
struct CosineGrad {
  double value = 0.0;
  std::vector<double> d_a;
  std::vector<double> d_b;
};
CosineGrad cosine_similarity_grad(std::span<const double> a, std::span<const double> b);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);

/// Central-difference gradient of a scalar function, used as a test oracle.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double h = 1e-5);

/// Sign with sign(0) == 0, the subgradient convention used by every L1 term.
inline double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace mvcd
