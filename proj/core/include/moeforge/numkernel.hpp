// Copyright 2026 The moeforge Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Minimal dense numeric kernel.
//
// Matrices are stored row-major. Every reduction runs in ascending index
// order with a single accumulator so that a given dot product produces the
// same bits no matter which code path (single token, batched tile) computes
// it. The library is built with floating-point contraction disabled for the
// same reason.

#ifndef MOEFORGE_NUMKERNEL_HPP_
#define MOEFORGE_NUMKERNEL_HPP_

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace moeforge {

template <typename T>
class Vector {
 public:
  using value_type = T;

  Vector() = default;
  explicit Vector(std::size_t len, T fill = T(0)) : data_(len, fill) {}
  Vector(std::initializer_list<T> values) : data_(values) {}
  explicit Vector(std::vector<T> values) : data_(std::move(values)) {}

  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  bool operator==(const Vector&) const = default;

 private:
  std::vector<T> data_;
};

template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  /// Builds from nested rows; all rows must have the same length.
  Matrix(std::initializer_list<std::initializer_list<T>> rows);
  /// Takes ownership of a row-major payload of exactly rows*cols values.
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  T& operator()(std::size_t r, std::size_t c) noexcept {
    return data_[r * cols_ + c];
  }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

enum class Activation { kReLU, kGELU };

std::string to_string(Activation a);
/// Accepts "relu" or "gelu"; throws DomainError otherwise.
Activation parse_activation(const std::string& name);

std::string shape_string(std::size_t rows, std::size_t cols);

/// Sequential ascending-index dot product.
template <typename T>
T dot(std::span<const T> a, std::span<const T> b);

template <typename T>
Vector<T> matvec(const Matrix<T>& m, const Vector<T>& v);

/// m^T v, accumulated over rows of m in ascending order.
template <typename T>
Vector<T> matvec_transposed(const Matrix<T>& m, const Vector<T>& v);

/// Row-wise product: out(t, i) = dot(rows(t), m.row(i)) + bias[i].
/// `rows` is T x m.cols, the result is T x m.rows. Each entry is bitwise equal
/// to `matvec(m, rows.row(t))[i] + bias[i]`.
template <typename T>
Matrix<T> affine_rows(const Matrix<T>& rows, const Matrix<T>& m,
                      const Vector<T>& bias);

template <typename T>
Vector<T> add(const Vector<T>& a, const Vector<T>& b);
template <typename T>
Vector<T> sub(const Vector<T>& a, const Vector<T>& b);
template <typename T>
Vector<T> scale(const Vector<T>& a, T s);

/// y += s * x
template <typename T>
void axpy(T s, std::span<const std::type_identity_t<T>> x,
          std::span<std::type_identity_t<T>> y);

/// m += s * a b^T
template <typename T>
void add_outer(Matrix<T>& m, std::type_identity_t<T> s,
               std::span<const std::type_identity_t<T>> a,
               std::span<const std::type_identity_t<T>> b);

template <typename T>
Vector<T> softmax(const Vector<T>& v);

template <typename T>
Vector<T> relu(const Vector<T>& v);
/// Indicator {v > 0}; the derivative at exactly 0 is taken to be 0.
template <typename T>
Vector<T> relu_grad(const Vector<T>& v);

/// Exact (erf) GELU.
template <typename T>
Vector<T> gelu(const Vector<T>& v);
template <typename T>
Vector<T> gelu_grad(const Vector<T>& v);

template <typename T>
T activate(Activation a, T x);
template <typename T>
T activate_grad(Activation a, T x);

template <typename T>
Vector<T> activate(Activation a, const Vector<T>& v);

template <typename T>
bool all_finite(std::span<const T> values);

template <typename T>
T max_abs_diff(std::span<const T> a, std::span<const T> b);

}  // namespace moeforge

#endif  // MOEFORGE_NUMKERNEL_HPP_
