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

// Sparse mixture-of-experts layer built from a pretrained dense FFN.
//
// Layout: the supernet holds N replicas of the base FFN, each cut along the
// hidden dimension into k slices, for kN experts. Expert index i = r * k + j
// refers to slice j of replica r. The router is one linear layer over kN
// logits followed by softmax; a hard top-k gate picks the experts, and the
// layer output is the plain sum of the selected experts' outputs (gate
// values are 0/1, not score-weighted).
//
// Gradient contract. The hard gate has no gradient, and selected experts are
// summed with weight 1, so the task loss never reaches the router. The router
// learns only through the P_i (mean score) term of the balance loss; the F_i
// (assignment fraction) term is treated as a constant.
//
// Determinism. Top-k ties go to the lowest index. Every sum over experts runs
// in ascending expert index, so dispatch_batch and the per-token loop agree
// bit for bit.

#ifndef MOEFORGE_MOE_HPP_
#define MOEFORGE_MOE_HPP_

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "moeforge/ffn.hpp"
#include "moeforge/numkernel.hpp"
#include "moeforge/rng.hpp"

namespace moeforge {

inline constexpr double kDefaultBalanceAlpha = 0.01;

struct MoeConfig {
  std::size_t n_replicas = 8;    // N
  std::size_t granularity = 2;   // k
  std::size_t token_dim = 0;     // D
  std::size_t hidden_dim = 0;    // H, divisible by k
  std::size_t top_k = 2;
  std::uint64_t seed = 0;
  Activation activation = Activation::kReLU;

  std::size_t n_experts() const noexcept { return n_replicas * granularity; }
  std::size_t expert_hidden_dim() const noexcept {
    return hidden_dim / granularity;
  }
  /// Throws DomainError on H mod k != 0, top_k outside [1, kN] or zero sizes.
  void validate() const;

  bool operator==(const MoeConfig&) const = default;
};

/// A fine-grained expert has the same roles as a dense FFN at width H/k.
template <typename T>
using ExpertParams = FfnParams<T>;

template <typename T>
struct RouterParams {
  Matrix<T> w;  // kN x D
  Vector<T> b;  // kN

  bool operator==(const RouterParams&) const = default;
};

template <typename T>
struct MoeLayer {
  MoeConfig config;
  std::vector<ExpertParams<T>> experts;  // replica-major
  RouterParams<T> router;

  void validate() const;
  bool operator==(const MoeLayer&) const = default;
};

struct Gate {
  std::vector<std::size_t> selected;  // ascending, size top_k
  std::vector<double> scores;         // softmax over all kN experts

  bool operator==(const Gate&) const = default;
};

struct RoutingTrace {
  std::size_t n_experts = 0;
  std::size_t top_k = 0;
  std::vector<Gate> gates;  // one per token

  std::size_t size() const noexcept { return gates.size(); }
  bool empty() const noexcept { return gates.empty(); }
  /// Checks every gate against n_experts / top_k; throws DomainError.
  void validate() const;

  bool operator==(const RoutingTrace&) const = default;
};

template <typename T>
struct MoeOutput {
  Vector<T> output;
  Gate gate;
};

template <typename T>
struct DispatchResult {
  Matrix<T> output;  // T x D
  RoutingTrace trace;
};

template <typename T>
struct RouterGrads {
  Matrix<T> w;
  Vector<T> b;

  bool is_zero() const;
};

template <typename T>
struct MoeGrads {
  std::vector<FfnGrads<T>> experts;  // one per expert, zero if never selected
  RouterGrads<T> router;
  Matrix<T> input;  // T x D gradient with respect to the tokens

  static MoeGrads zeros_like(const MoeLayer<T>& layer, std::size_t n_tokens);
};

/// Cuts `p` into k experts along the hidden dimension. Expert j owns rows
/// [jH/k, (j+1)H/k) of W1 and b1, the same columns of W2, and b2 / k, so the
/// experts' outputs sum to the parent's output.
template <typename T>
std::vector<ExpertParams<T>> split_ffn(const FfnParams<T>& p, std::size_t k);

/// N centroid rows drawn from N(0, 1/D), centroid biases zero, each repeated
/// k times contiguously.
template <typename T>
RouterParams<T> init_router(const MoeConfig& cfg, Rng& rng);

/// N copies of `base`, each split into k experts, plus a grouped router seeded
/// from cfg.seed.
template <typename T>
MoeLayer<T> expand_supernet(const FfnParams<T>& base, const MoeConfig& cfg);

template <typename T>
Vector<T> router_logits(const RouterParams<T>& r, const Vector<T>& x);

/// softmax(W_r x + b_r)
template <typename T>
Vector<T> route(const RouterParams<T>& r, const Vector<T>& x);

/// Indices of the top_k largest scores (ties to the lowest index), returned
/// in ascending order.
template <typename T>
Gate top_k_gate(std::span<const T> scores, std::size_t top_k);
template <typename T>
Gate top_k_gate(const Vector<T>& scores, std::size_t top_k) {
  return top_k_gate(scores.span(), top_k);
}

template <typename T>
MoeOutput<T> moe_forward(const MoeLayer<T>& layer, const Vector<T>& x);

/// Reference path: moe_forward on every row, one token at a time.
template <typename T>
DispatchResult<T> dispatch_loop(const MoeLayer<T>& layer,
                                const Matrix<T>& tokens);

/// Batched path: route all tokens, gather per expert, one batched FFN pass per
/// expert (in parallel across `threads` workers), then scatter back with
/// ascending-expert accumulation. Bitwise equal to dispatch_loop.
template <typename T>
DispatchResult<T> dispatch_batch(const MoeLayer<T>& layer,
                                 const Matrix<T>& tokens,
                                 std::size_t threads = 0);

/// F_i = assignments to expert i / (T * top_k). Sums to 1.
std::vector<double> assignment_fractions(const RoutingTrace& trace);
/// P_i = mean over tokens of score i.
std::vector<double> mean_scores(const RoutingTrace& trace);

/// kN * sum_i F_i * P_i. Throws DomainError on an empty trace.
double load_balance_loss(const RoutingTrace& trace);

double total_loss(double task, double aux, double alpha = kDefaultBalanceAlpha);

/// Batched backward of
///   sum_t <upstream(t), h(tokens(t))> + aux_weight * load_balance_loss(trace)
/// under the gradient contract described at the top of this header.
template <typename T>
MoeGrads<T> moe_backward_batch(const MoeLayer<T>& layer,
                               const Matrix<T>& tokens,
                               const RoutingTrace& trace,
                               const Matrix<T>& upstream, double aux_weight);

/// Single-token form; the balance loss is that of the one-token trace.
template <typename T>
MoeGrads<T> moe_backward(const MoeLayer<T>& layer, const Vector<T>& x,
                         const Gate& gate, const Vector<T>& upstream,
                         double aux_weight);

template <typename T>
MoeLayer<T> cast_layer(const MoeLayer<double>& layer);

}  // namespace moeforge

#endif  // MOEFORGE_MOE_HPP_
