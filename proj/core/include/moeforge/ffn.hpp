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

// Dense two-layer feed-forward network: W2 * act(W1 x + b1) + b2.

#ifndef MOEFORGE_FFN_HPP_
#define MOEFORGE_FFN_HPP_

#include <cstddef>

#include "moeforge/numkernel.hpp"
#include "moeforge/rng.hpp"

namespace moeforge {

template <typename T>
struct FfnParams {
  Matrix<T> w1;  // H x D
  Vector<T> b1;  // H
  Matrix<T> w2;  // D x H
  Vector<T> b2;  // D
  Activation activation = Activation::kReLU;

  std::size_t token_dim() const noexcept { return w1.cols(); }
  std::size_t hidden_dim() const noexcept { return w1.rows(); }

  /// Throws ShapeError unless the four tensors agree on (D, H) with D, H >= 1.
  void validate() const;

  static FfnParams zeros(std::size_t token_dim, std::size_t hidden_dim,
                         Activation act = Activation::kReLU);
  /// Gaussian weights with std 1/sqrt(fan_in), biases N(0, bias_std^2).
  static FfnParams random(std::size_t token_dim, std::size_t hidden_dim,
                          Rng& rng, Activation act = Activation::kReLU,
                          double bias_std = 0.1);

  bool operator==(const FfnParams&) const = default;
};

/// Same shapes as the parameters they differentiate.
template <typename T>
struct FfnGrads {
  Matrix<T> w1;
  Vector<T> b1;
  Matrix<T> w2;
  Vector<T> b2;

  static FfnGrads zeros_like(const FfnParams<T>& p);
  /// this += s * other
  void accumulate(const FfnGrads& other, T s = T(1));
  bool is_zero() const;
};

template <typename T>
struct FfnBackward {
  FfnGrads<T> grads;
  Vector<T> input_grad;
};

template <typename T>
Vector<T> ffn_forward(const FfnParams<T>& p, const Vector<T>& x);

/// Row-wise forward over a T x D token matrix. Row t is bitwise equal to
/// ffn_forward(p, tokens.row(t)).
template <typename T>
Matrix<T> ffn_forward_batch(const FfnParams<T>& p, const Matrix<T>& tokens);

/// Gradients of <upstream, ffn_forward(p, x)> with respect to the parameters
/// and to x.
template <typename T>
FfnBackward<T> ffn_backward(const FfnParams<T>& p, const Vector<T>& x,
                            const Vector<T>& upstream);

/// Adds the parameter gradient of <upstream, ffn_forward(p, x)> into `grads`
/// and returns the input gradient. Used by batched training loops.
template <typename T>
Vector<T> ffn_backward_accumulate(const FfnParams<T>& p, const Vector<T>& x,
                                  const Vector<T>& upstream,
                                  FfnGrads<T>& grads);

template <typename T>
FfnParams<T> cast_params(const FfnParams<double>& p);

}  // namespace moeforge

#endif  // MOEFORGE_FFN_HPP_
