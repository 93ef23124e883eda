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

#include "moeforge/numkernel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "moeforge/error.hpp"

namespace moeforge {

template <typename T>
Matrix<T>::Matrix(std::initializer_list<std::initializer_list<T>> rows)
    : rows_(rows.size()), cols_(rows.size() ? rows.begin()->size() : 0) {
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) {
      throw ShapeError("Matrix: ragged initializer rows");
    }
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

template <typename T>
Matrix<T>::Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("Matrix: payload of " + std::to_string(data_.size()) +
                     " values does not fit " + shape_string(rows, cols));
  }
}

template <typename T>
Matrix<T> Matrix<T>::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
  return m;
}

std::string to_string(Activation a) {
  return a == Activation::kReLU ? "relu" : "gelu";
}

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::kReLU;
  if (name == "gelu") return Activation::kGELU;
  throw DomainError("unknown activation '" + name + "' (expected relu|gelu)");
}

std::string shape_string(std::size_t rows, std::size_t cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
Vector<T> matvec(const Matrix<T>& m, const Vector<T>& v) {
  if (m.cols() != v.size()) {
    throw ShapeError("matvec: matrix is " + shape_string(m.rows(), m.cols()) +
                     " but vector has length " + std::to_string(v.size()));
  }
  Vector<T> out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) out[r] = dot(m.row(r), v.span());
  return out;
}

template <typename T>
Vector<T> matvec_transposed(const Matrix<T>& m, const Vector<T>& v) {
  if (m.rows() != v.size()) {
    throw ShapeError("matvec_transposed: matrix is " +
                     shape_string(m.rows(), m.cols()) +
                     " but vector has length " + std::to_string(v.size()));
  }
  Vector<T> out(m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    axpy(v[r], m.row(r), out.span());
  }
  return out;
}

namespace {

// Tile sizes for affine_rows. Each accumulator still sums over the shared
// dimension in ascending order, so tiling changes only memory traffic.
constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileTokens = 4;
constexpr std::size_t kPanelRows = 64;

template <typename T>
void affine_tile(const T* x, std::size_t x_stride, const T* w,
                 std::size_t w_stride, std::size_t depth, const T* bias,
                 T* out, std::size_t out_stride) {
  T acc[kTileTokens][kTileRows] = {};
  for (std::size_t d = 0; d < depth; ++d) {
    const T w0 = w[d];
    const T w1 = w[w_stride + d];
    const T w2 = w[2 * w_stride + d];
    const T w3 = w[3 * w_stride + d];
    for (std::size_t t = 0; t < kTileTokens; ++t) {
      const T xv = x[t * x_stride + d];
      acc[t][0] += w0 * xv;
      acc[t][1] += w1 * xv;
      acc[t][2] += w2 * xv;
      acc[t][3] += w3 * xv;
    }
  }
  for (std::size_t t = 0; t < kTileTokens; ++t) {
    for (std::size_t r = 0; r < kTileRows; ++r) {
      out[t * out_stride + r] = acc[t][r] + bias[r];
    }
  }
}

}  // namespace

template <typename T>
Matrix<T> affine_rows(const Matrix<T>& rows, const Matrix<T>& m,
                      const Vector<T>& bias) {
  if (rows.cols() != m.cols() || bias.size() != m.rows()) {
    throw ShapeError("affine_rows: inputs " +
                     shape_string(rows.rows(), rows.cols()) + ", weights " +
                     shape_string(m.rows(), m.cols()) + ", bias length " +
                     std::to_string(bias.size()));
  }
  const std::size_t n_tok = rows.rows();
  const std::size_t n_out = m.rows();
  const std::size_t depth = m.cols();
  Matrix<T> out(n_tok, n_out);
  const std::size_t tok_full = n_tok - n_tok % kTileTokens;
  const std::size_t out_full = n_out - n_out % kTileRows;

  for (std::size_t p0 = 0; p0 < out_full; p0 += kPanelRows) {
    const std::size_t p1 = std::min(out_full, p0 + kPanelRows);
    for (std::size_t t = 0; t < tok_full; t += kTileTokens) {
      for (std::size_t r = p0; r < p1; r += kTileRows) {
        affine_tile(rows.data() + t * depth, depth, m.data() + r * depth,
                    depth, depth, bias.data() + r, out.data() + t * n_out + r,
                    n_out);
      }
    }
  }
  // Ragged edges fall back to plain dot products.
  for (std::size_t t = 0; t < n_tok; ++t) {
    const std::size_t r_begin = t < tok_full ? out_full : 0;
    for (std::size_t r = r_begin; r < n_out; ++r) {
      out(t, r) = dot(rows.row(t), m.row(r)) + bias[r];
    }
  }
  return out;
}

template <typename T>
Vector<T> add(const Vector<T>& a, const Vector<T>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("add: lengths " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  Vector<T> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
Vector<T> sub(const Vector<T>& a, const Vector<T>& b) {
  if (a.size() != b.size()) {
    throw ShapeError("sub: lengths " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  Vector<T> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

template <typename T>
Vector<T> scale(const Vector<T>& a, T s) {
  Vector<T> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

template <typename T>
void axpy(T s, std::span<const std::type_identity_t<T>> x,
          std::span<std::type_identity_t<T>> y) {
  if (x.size() != y.size()) {
    throw ShapeError("axpy: lengths " + std::to_string(x.size()) + " and " +
                     std::to_string(y.size()));
  }
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += s * x[i];
}

template <typename T>
void add_outer(Matrix<T>& m, std::type_identity_t<T> s,
               std::span<const std::type_identity_t<T>> a,
               std::span<const std::type_identity_t<T>> b) {
  if (m.rows() != a.size() || m.cols() != b.size()) {
    throw ShapeError("add_outer: matrix is " +
                     shape_string(m.rows(), m.cols()) + " but outer product is " +
                     shape_string(a.size(), b.size()));
  }
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const T sa = s * a[r];
    if (sa == T(0)) continue;
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) row[c] += sa * b[c];
  }
}

template <typename T>
Vector<T> softmax(const Vector<T>& v) {
  if (v.empty()) throw DomainError("softmax: empty input");
  const T mx = *std::max_element(v.begin(), v.end());
  Vector<T> out(v.size());
  T total = T(0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    total += out[i];
  }
  for (auto& x : out) x /= total;
  return out;
}

template <typename T>
T activate(Activation a, T x) {
  if (a == Activation::kReLU) return x > T(0) ? x : T(0);
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <typename T>
T activate_grad(Activation a, T x) {
  if (a == Activation::kReLU) return x > T(0) ? T(1) : T(0);
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(std::numbers::inv_sqrtpi) *
                T(std::numbers::sqrt2 / 2);
  return cdf + x * pdf;
}

template <typename T>
Vector<T> activate(Activation a, const Vector<T>& v) {
  Vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = activate(a, v[i]);
  return out;
}

template <typename T>
Vector<T> relu(const Vector<T>& v) {
  return activate(Activation::kReLU, v);
}

template <typename T>
Vector<T> relu_grad(const Vector<T>& v) {
  Vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = activate_grad(Activation::kReLU, v[i]);
  }
  return out;
}

template <typename T>
Vector<T> gelu(const Vector<T>& v) {
  return activate(Activation::kGELU, v);
}

template <typename T>
Vector<T> gelu_grad(const Vector<T>& v) {
  Vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = activate_grad(Activation::kGELU, v[i]);
  }
  return out;
}

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(),
                     [](T x) { return std::isfinite(x); });
}

template <typename T>
T max_abs_diff(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) {
    throw ShapeError("max_abs_diff: lengths " + std::to_string(a.size()) +
                     " and " + std::to_string(b.size()));
  }
  T worst = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  return worst;
}

#define MOEFORGE_INSTANTIATE_NUMKERNEL(T)                                     \
  template class Matrix<T>;                                                  \
  template T dot<T>(std::span<const T>, std::span<const T>);                 \
  template Vector<T> matvec<T>(const Matrix<T>&, const Vector<T>&);          \
  template Vector<T> matvec_transposed<T>(const Matrix<T>&, const Vector<T>&); \
  template Matrix<T> affine_rows<T>(const Matrix<T>&, const Matrix<T>&,      \
                                    const Vector<T>&);                       \
  template Vector<T> add<T>(const Vector<T>&, const Vector<T>&);             \
  template Vector<T> sub<T>(const Vector<T>&, const Vector<T>&);             \
  template Vector<T> scale<T>(const Vector<T>&, T);                          \
  template void axpy<T>(T, std::span<const T>, std::span<T>);                \
  template void add_outer<T>(Matrix<T>&, T, std::span<const T>,              \
                             std::span<const T>);                            \
  template Vector<T> softmax<T>(const Vector<T>&);                           \
  template Vector<T> relu<T>(const Vector<T>&);                              \
  template Vector<T> relu_grad<T>(const Vector<T>&);                         \
  template Vector<T> gelu<T>(const Vector<T>&);                              \
  template Vector<T> gelu_grad<T>(const Vector<T>&);                         \
  template T activate<T>(Activation, T);                                     \
  template T activate_grad<T>(Activation, T);                                \
  template Vector<T> activate<T>(Activation, const Vector<T>&);              \
  template bool all_finite<T>(std::span<const T>);                           \
  template T max_abs_diff<T>(std::span<const T>, std::span<const T>);

MOEFORGE_INSTANTIATE_NUMKERNEL(float)
MOEFORGE_INSTANTIATE_NUMKERNEL(double)

#undef MOEFORGE_INSTANTIATE_NUMKERNEL

}  // namespace moeforge
