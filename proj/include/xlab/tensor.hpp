#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "xlab/error.hpp"

namespace xlab {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense row-major array. Rank 0 denotes a scalar with one element.
template <typename Scalar = float>
class Tensor {
 public:
  using value_type = Scalar;

  Tensor() : data_(1, Scalar(0)) {}

  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(numel(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != numel(shape_)) {
      throw Error(Errc::shape_mismatch, "tensor of shape " + xlab::to_string(shape_) + " given " +
                                            std::to_string(data_.size()) + " values");
    }
  }

  static Tensor scalar(Scalar value) { return Tensor(Shape{}, std::vector<Scalar>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<Scalar> data() noexcept { return data_; }
  std::span<const Scalar> data() const noexcept { return data_; }
  Scalar* raw() noexcept { return data_.data(); }
  const Scalar* raw() const noexcept { return data_.data(); }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  const Scalar& operator[](std::size_t i) const { return data_[i]; }

  Scalar item() const {
    if (data_.size() != 1) throw Error(Errc::shape_mismatch, "item() on tensor " + xlab::to_string(shape_));
    return data_[0];
  }

  auto array() { return Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(data_.data(), data_.size()); }
  auto array() const {
    return Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(data_.data(), data_.size());
  }

  // Rank-2 view: dim 0 by the product of the remaining extents.
  auto matrix() {
    return Eigen::Map<RowMatrix<Scalar>>(data_.data(), rows(), static_cast<Eigen::Index>(cols()));
  }
  auto matrix() const {
    return Eigen::Map<const RowMatrix<Scalar>>(data_.data(), rows(), static_cast<Eigen::Index>(cols()));
  }

  Tensor reshaped(Shape shape) const {
    Tensor out = *this;
    if (numel(shape) != data_.size()) {
      throw Error(Errc::shape_mismatch,
                  "cannot reshape " + xlab::to_string(shape_) + " to " + xlab::to_string(shape));
    }
    out.shape_ = std::move(shape);
    return out;
  }

  template <typename To>
  Tensor<To> cast() const {
    std::vector<To> out(data_.begin(), data_.end());
    return Tensor<To>(shape_, std::move(out));
  }

  bool all_finite() const { return array().isFinite().all(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (std::size_t extent : shape_) {
      if (extent == 0) throw Error(Errc::shape_mismatch, "zero extent in shape " + xlab::to_string(shape_));
    }
  }
  Eigen::Index rows() const { return shape_.empty() ? 1 : static_cast<Eigen::Index>(shape_[0]); }
  std::size_t cols() const { return shape_.empty() ? 1 : data_.size() / shape_[0]; }

  Shape shape_;
  std::vector<Scalar> data_;
};

// Rows [begin, end) along dim 0.
template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& t, std::size_t begin, std::size_t end) {
  if (t.rank() == 0 || begin >= end || end > t.dim(0)) {
    throw Error(Errc::invalid_argument, "bad row slice of " + to_string(t.shape()));
  }
  const std::size_t stride = t.size() / t.dim(0);
  Shape shape = t.shape();
  shape[0] = end - begin;
  std::vector<Scalar> data(t.raw() + begin * stride, t.raw() + end * stride);
  return Tensor<Scalar>(std::move(shape), std::move(data));
}

// Rows selected by index, in the given order.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& t, std::span<const std::size_t> rows) {
  if (rows.empty()) throw Error(Errc::invalid_argument, "gather of zero rows");
  const std::size_t stride = t.size() / t.dim(0);
  Shape shape = t.shape();
  shape[0] = rows.size();
  std::vector<Scalar> data;
  data.reserve(rows.size() * stride);
  for (std::size_t r : rows) {
    if (r >= t.dim(0)) throw Error(Errc::invalid_argument, "row index out of range");
    data.insert(data.end(), t.raw() + r * stride, t.raw() + (r + 1) * stride);
  }
  return Tensor<Scalar>(std::move(shape), std::move(data));
}

template <typename Scalar>
Tensor<Scalar> concat_rows(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != b.rank() || a.rank() == 0 ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw Error(Errc::shape_mismatch, "concat of " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<Scalar> data(a.data().begin(), a.data().end());
  data.insert(data.end(), b.data().begin(), b.data().end());
  return Tensor<Scalar>(std::move(shape), std::move(data));
}

}  // namespace xlab
