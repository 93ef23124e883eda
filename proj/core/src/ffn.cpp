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

#include "moeforge/ffn.hpp"

#include <cmath>
#include <string>

#include "moeforge/error.hpp"

namespace moeforge {

template <typename T>
void FfnParams<T>::validate() const {
  const std::size_t d = w1.cols();
  const std::size_t h = w1.rows();
  if (d == 0 || h == 0) {
    throw ShapeError("FfnParams: W1 is " + shape_string(h, d) +
                     ", both dimensions must be >= 1");
  }
  if (b1.size() != h || w2.rows() != d || w2.cols() != h || b2.size() != d) {
    throw ShapeError("FfnParams: inconsistent shapes W1 " + shape_string(h, d) +
                     ", b1 " + std::to_string(b1.size()) + ", W2 " +
                     shape_string(w2.rows(), w2.cols()) + ", b2 " +
                     std::to_string(b2.size()));
  }
}

template <typename T>
FfnParams<T> FfnParams<T>::zeros(std::size_t token_dim, std::size_t hidden_dim,
                                 Activation act) {
  return FfnParams{Matrix<T>(hidden_dim, token_dim), Vector<T>(hidden_dim),
                   Matrix<T>(token_dim, hidden_dim), Vector<T>(token_dim), act};
}

template <typename T>
FfnParams<T> FfnParams<T>::random(std::size_t token_dim, std::size_t hidden_dim,
                                  Rng& rng, Activation act, double bias_std) {
  FfnParams p = zeros(token_dim, hidden_dim, act);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(token_dim));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  for (auto& v : p.w1.span()) v = static_cast<T>(rng.normal(0.0, s1));
  for (auto& v : p.b1) v = static_cast<T>(rng.normal(0.0, bias_std));
  for (auto& v : p.w2.span()) v = static_cast<T>(rng.normal(0.0, s2));
  for (auto& v : p.b2) v = static_cast<T>(rng.normal(0.0, bias_std));
  return p;
}

template <typename T>
FfnGrads<T> FfnGrads<T>::zeros_like(const FfnParams<T>& p) {
  return FfnGrads{Matrix<T>(p.w1.rows(), p.w1.cols()), Vector<T>(p.b1.size()),
                  Matrix<T>(p.w2.rows(), p.w2.cols()), Vector<T>(p.b2.size())};
}

template <typename T>
void FfnGrads<T>::accumulate(const FfnGrads& other, T s) {
  axpy(s, other.w1.span(), w1.span());
  axpy(s, other.b1.span(), b1.span());
  axpy(s, other.w2.span(), w2.span());
  axpy(s, other.b2.span(), b2.span());
}

template <typename T>
bool FfnGrads<T>::is_zero() const {
  auto zero = [](std::span<const T> s) {
    for (T v : s)
      if (v != T(0)) return false;
    return true;
  };
  return zero(w1.span()) && zero(b1.span()) && zero(w2.span()) &&
         zero(b2.span());
}

namespace {

template <typename T>
void check_token(const FfnParams<T>& p, std::size_t len, const char* what) {
  if (len != p.token_dim()) {
    throw ShapeError(std::string(what) + ": FFN expects token length " +
                     std::to_string(p.token_dim()) + " (W1 " +
                     shape_string(p.w1.rows(), p.w1.cols()) + "), got " +
                     std::to_string(len));
  }
}

}  // namespace

template <typename T>
Vector<T> ffn_forward(const FfnParams<T>& p, const Vector<T>& x) {
  check_token(p, x.size(), "ffn_forward");
  Vector<T> hidden = matvec(p.w1, x);
  for (std::size_t j = 0; j < hidden.size(); ++j) {
    hidden[j] = activate(p.activation, hidden[j] + p.b1[j]);
  }
  Vector<T> out = matvec(p.w2, hidden);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += p.b2[i];
  return out;
}

template <typename T>
Matrix<T> ffn_forward_batch(const FfnParams<T>& p, const Matrix<T>& tokens) {
  check_token(p, tokens.cols(), "ffn_forward_batch");
  Matrix<T> hidden = affine_rows(tokens, p.w1, p.b1);
  for (auto& v : hidden.span()) v = activate(p.activation, v);
  return affine_rows(hidden, p.w2, p.b2);
}

template <typename T>
Vector<T> ffn_backward_accumulate(const FfnParams<T>& p, const Vector<T>& x,
                                  const Vector<T>& upstream,
                                  FfnGrads<T>& grads) {
  check_token(p, x.size(), "ffn_backward");
  if (upstream.size() != p.token_dim()) {
    throw ShapeError("ffn_backward: upstream length " +
                     std::to_string(upstream.size()) + " but FFN output is " +
                     std::to_string(p.token_dim()));
  }
  const std::size_t h = p.hidden_dim();
  Vector<T> pre = matvec(p.w1, x);
  Vector<T> act(h);
  for (std::size_t j = 0; j < h; ++j) {
    pre[j] += p.b1[j];
    act[j] = activate(p.activation, pre[j]);
  }
  // d out / d W2 = upstream act^T
  add_outer(grads.w2, T(1), upstream.span(), act.span());
  axpy(T(1), upstream.span(), grads.b2.span());

  Vector<T> d_hidden = matvec_transposed(p.w2, upstream);
  for (std::size_t j = 0; j < h; ++j) {
    d_hidden[j] *= activate_grad(p.activation, pre[j]);
  }
  add_outer(grads.w1, T(1), d_hidden.span(), x.span());
  axpy(T(1), d_hidden.span(), grads.b1.span());
  return matvec_transposed(p.w1, d_hidden);
}

template <typename T>
FfnBackward<T> ffn_backward(const FfnParams<T>& p, const Vector<T>& x,
                            const Vector<T>& upstream) {
  FfnBackward<T> out{FfnGrads<T>::zeros_like(p), {}};
  out.input_grad = ffn_backward_accumulate(p, x, upstream, out.grads);
  return out;
}

template <typename T>
FfnParams<T> cast_params(const FfnParams<double>& p) {
  auto cast_m = [](const Matrix<double>& m) {
    std::vector<T> v(m.span().begin(), m.span().end());
    return Matrix<T>(m.rows(), m.cols(), std::move(v));
  };
  auto cast_v = [](const Vector<double>& m) {
    return Vector<T>(std::vector<T>(m.begin(), m.end()));
  };
  return FfnParams<T>{cast_m(p.w1), cast_v(p.b1), cast_m(p.w2), cast_v(p.b2),
                      p.activation};
}

#define MOEFORGE_INSTANTIATE_FFN(T)                                           \
  template struct FfnParams<T>;                                              \
  template struct FfnGrads<T>;                                               \
  template Vector<T> ffn_forward<T>(const FfnParams<T>&, const Vector<T>&);  \
  template Matrix<T> ffn_forward_batch<T>(const FfnParams<T>&,               \
                                          const Matrix<T>&);                 \
  template FfnBackward<T> ffn_backward<T>(                                   \
      const FfnParams<T>&, const Vector<T>&, const Vector<T>&);              \
  template Vector<T> ffn_backward_accumulate<T>(                             \
      const FfnParams<T>&, const Vector<T>&, const Vector<T>&, FfnGrads<T>&); \
  template FfnParams<T> cast_params<T>(const FfnParams<double>&);

MOEFORGE_INSTANTIATE_FFN(float)
MOEFORGE_INSTANTIATE_FFN(double)

#undef MOEFORGE_INSTANTIATE_FFN

}  // namespace moeforge
