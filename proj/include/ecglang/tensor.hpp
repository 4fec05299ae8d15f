#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "ecglang/common.hpp"

namespace ecglang {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

// Dense row-major tensor. Storage is shared on copy; clone() deep-copies.
// All graph ops allocate fresh outputs, so sharing is only ever visible to
// code that mutates in place (parameter updates).
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<T>>(shape_numel(shape_), T(0))) {}
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<T>>(std::move(data))) {
    if (static_cast<int64_t>(buf_->size()) != shape_numel(shape_))
      throw std::invalid_argument("tensor data does not match shape " +
                                  shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data(), t.data() + t.numel(), v);
    return t;
  }
  static Tensor scalar(T v) { return full({1}, v); }

  bool defined() const { return static_cast<bool>(buf_); }
  const Shape& shape() const { return shape_; }
  int64_t dim(int i) const {
    return shape_[i < 0 ? shape_.size() + i : static_cast<size_t>(i)];
  }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return buf_ ? static_cast<int64_t>(buf_->size()) : 0; }

  T* data() { return buf_->data(); }
  const T* data() const { return buf_->data(); }
  T& operator[](int64_t i) { return (*buf_)[i]; }
  const T& operator[](int64_t i) const { return (*buf_)[i]; }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.buf_ = std::make_shared<std::vector<T>>(*buf_);
    return t;
  }

  // Shares storage.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " +
                                  shape_str(shape) + " changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.buf_ = buf_;
    return t;
  }

  void fill(T v) { std::fill(data(), data() + numel(), v); }

  bool all_finite() const {
    const T* p = data();
    for (int64_t i = 0; i < numel(); ++i)
      if (!std::isfinite(static_cast<double>(p[i]))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    const T* src = data();
    U* dst = out.data();
    for (int64_t i = 0; i < numel(); ++i) dst[i] = static_cast<U>(src[i]);
    return out;
  }

 private:
  template <typename U>
  friend class Tensor;
  Shape shape_;
  std::shared_ptr<std::vector<T>> buf_;
};

template <typename T>
using MatMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<
    const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
MatMap<T> as_matrix(Tensor<T>& t, int64_t rows, int64_t cols) {
  return MatMap<T>(t.data(), rows, cols);
}
template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, int64_t rows, int64_t cols) {
  return ConstMatMap<T>(t.data(), rows, cols);
}

// C (+)= op(A) * op(B); raw-pointer variant so strided sub-blocks can reuse it.
template <typename T>
void gemm_ptr(const T* a, int64_t am, int64_t an, bool ta, const T* b,
              int64_t bm, int64_t bn, bool tb, T* c, bool accumulate) {
  ConstMatMap<T> A(a, am, an), B(b, bm, bn);
  int64_t m = ta ? an : am;
  int64_t n = tb ? bm : bn;
  MatMap<T> C(c, m, n);
  if (!ta && !tb) {
    if (accumulate) C.noalias() += A * B; else C.noalias() = A * B;
  } else if (ta && !tb) {
    if (accumulate) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
  } else if (!ta && tb) {
    if (accumulate) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
  } else {
    if (accumulate) C.noalias() += A.transpose() * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
}

}  // namespace ecglang
