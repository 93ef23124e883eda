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

#include "moeforge/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "moeforge/error.hpp"
#include "moeforge/parallel.hpp"

namespace moeforge {

void MoeConfig::validate() const {
  if (n_replicas == 0 || granularity == 0) {
    throw DomainError("MoeConfig: n_replicas and granularity must be >= 1");
  }
  if (token_dim == 0 || hidden_dim == 0) {
    throw DomainError("MoeConfig: token_dim and hidden_dim must be >= 1");
  }
  if (hidden_dim % granularity != 0) {
    throw DomainError("MoeConfig: hidden_dim " + std::to_string(hidden_dim) +
                      " is not divisible by granularity " +
                      std::to_string(granularity));
  }
  if (top_k == 0 || top_k > n_experts()) {
    throw DomainError("MoeConfig: top_k " + std::to_string(top_k) +
                      " outside [1, " + std::to_string(n_experts()) + "]");
  }
}

template <typename T>
void MoeLayer<T>::validate() const {
  config.validate();
  if (experts.size() != config.n_experts()) {
    throw ShapeError("MoeLayer: " + std::to_string(experts.size()) +
                     " experts, config wants " +
                     std::to_string(config.n_experts()));
  }
  for (const auto& e : experts) {
    e.validate();
    if (e.token_dim() != config.token_dim ||
        e.hidden_dim() != config.expert_hidden_dim() ||
        e.activation != config.activation) {
      throw ShapeError("MoeLayer: expert W1 is " +
                       shape_string(e.w1.rows(), e.w1.cols()) + ", expected " +
                       shape_string(config.expert_hidden_dim(),
                                    config.token_dim));
    }
  }
  if (router.w.rows() != config.n_experts() ||
      router.w.cols() != config.token_dim ||
      router.b.size() != config.n_experts()) {
    throw ShapeError("MoeLayer: router is " +
                     shape_string(router.w.rows(), router.w.cols()) +
                     " with bias " + std::to_string(router.b.size()) +
                     ", expected " +
                     shape_string(config.n_experts(), config.token_dim));
  }
}

void RoutingTrace::validate() const {
  if (top_k == 0 || top_k > n_experts) {
    throw DomainError("RoutingTrace: top_k " + std::to_string(top_k) +
                      " outside [1, " + std::to_string(n_experts) + "]");
  }
  for (std::size_t t = 0; t < gates.size(); ++t) {
    const Gate& g = gates[t];
    if (g.selected.size() != top_k || g.scores.size() != n_experts) {
      throw DomainError("RoutingTrace: token " + std::to_string(t) + " has " +
                        std::to_string(g.selected.size()) + " selected / " +
                        std::to_string(g.scores.size()) + " scores, expected " +
                        std::to_string(top_k) + " / " +
                        std::to_string(n_experts));
    }
    for (std::size_t i = 0; i < g.selected.size(); ++i) {
      if (g.selected[i] >= n_experts ||
          (i > 0 && g.selected[i] <= g.selected[i - 1])) {
        throw DomainError("RoutingTrace: token " + std::to_string(t) +
                          " selection is not strictly ascending in range");
      }
    }
  }
}

template <typename T>
bool RouterGrads<T>::is_zero() const {
  return std::all_of(w.span().begin(), w.span().end(),
                     [](T v) { return v == T(0); }) &&
         std::all_of(b.begin(), b.end(), [](T v) { return v == T(0); });
}

template <typename T>
MoeGrads<T> MoeGrads<T>::zeros_like(const MoeLayer<T>& layer,
                                    std::size_t n_tokens) {
  MoeGrads g;
  g.experts.reserve(layer.experts.size());
  for (const auto& e : layer.experts) {
    g.experts.push_back(FfnGrads<T>::zeros_like(e));
  }
  g.router.w = Matrix<T>(layer.router.w.rows(), layer.router.w.cols());
  g.router.b = Vector<T>(layer.router.b.size());
  g.input = Matrix<T>(n_tokens, layer.config.token_dim);
  return g;
}

template <typename T>
std::vector<ExpertParams<T>> split_ffn(const FfnParams<T>& p, std::size_t k) {
  p.validate();
  const std::size_t h = p.hidden_dim();
  const std::size_t d = p.token_dim();
  if (k == 0 || h % k != 0) {
    throw DomainError("split_ffn: hidden_dim " + std::to_string(h) +
                      " is not divisible by k = " + std::to_string(k));
  }
  const std::size_t width = h / k;
  std::vector<ExpertParams<T>> experts;
  experts.reserve(k);
  for (std::size_t j = 0; j < k; ++j) {
    auto e = ExpertParams<T>::zeros(d, width, p.activation);
    const std::size_t lo = j * width;
    for (std::size_t r = 0; r < width; ++r) {
      std::copy_n(p.w1.row(lo + r).begin(), d, e.w1.row(r).begin());
      e.b1[r] = p.b1[lo + r];
    }
    for (std::size_t r = 0; r < d; ++r) {
      std::copy_n(p.w2.row(r).begin() + lo, width, e.w2.row(r).begin());
      e.b2[r] = p.b2[r] / static_cast<T>(k);
    }
    experts.push_back(std::move(e));
  }
  return experts;
}

template <typename T>
RouterParams<T> init_router(const MoeConfig& cfg, Rng& rng) {
  const std::size_t n = cfg.n_replicas;
  const std::size_t k = cfg.granularity;
  const std::size_t d = cfg.token_dim;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
  RouterParams<T> r{Matrix<T>(n * k, d), Vector<T>(n * k)};
  std::vector<T> centroid(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : centroid) v = static_cast<T>(rng.normal(0.0, stddev));
    for (std::size_t j = 0; j < k; ++j) {
      std::copy(centroid.begin(), centroid.end(), r.w.row(i * k + j).begin());
      r.b[i * k + j] = T(0);
    }
  }
  return r;
}

template <typename T>
MoeLayer<T> expand_supernet(const FfnParams<T>& base, const MoeConfig& cfg) {
  cfg.validate();
  base.validate();
  if (base.token_dim() != cfg.token_dim || base.hidden_dim() != cfg.hidden_dim) {
    throw ShapeError("expand_supernet: base FFN W1 is " +
                     shape_string(base.hidden_dim(), base.token_dim()) +
                     " but config wants " +
                     shape_string(cfg.hidden_dim, cfg.token_dim));
  }
  MoeLayer<T> layer;
  layer.config = cfg;
  layer.config.activation = base.activation;
  const auto slices = split_ffn(base, cfg.granularity);
  layer.experts.reserve(cfg.n_experts());
  for (std::size_t r = 0; r < cfg.n_replicas; ++r) {
    for (const auto& s : slices) layer.experts.push_back(s);
  }
  Rng rng(cfg.seed);
  layer.router = init_router<T>(cfg, rng);
  return layer;
}

template <typename T>
Vector<T> router_logits(const RouterParams<T>& r, const Vector<T>& x) {
  if (x.size() != r.w.cols()) {
    throw ShapeError("route: router is " + shape_string(r.w.rows(), r.w.cols()) +
                     " but token has length " + std::to_string(x.size()));
  }
  Vector<T> logits = matvec(r.w, x);
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += r.b[i];
  return logits;
}

template <typename T>
Vector<T> route(const RouterParams<T>& r, const Vector<T>& x) {
  return softmax(router_logits(r, x));
}

template <typename T>
Gate top_k_gate(std::span<const T> scores, std::size_t top_k) {
  if (top_k == 0 || top_k > scores.size()) {
    throw DomainError("top_k_gate: top_k " + std::to_string(top_k) +
                      " outside [1, " + std::to_string(scores.size()) + "]");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + top_k, order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] > scores[b] ||
                             (scores[a] == scores[b] && a < b);
                    });
  Gate g;
  g.selected.assign(order.begin(), order.begin() + top_k);
  std::sort(g.selected.begin(), g.selected.end());
  g.scores.assign(scores.begin(), scores.end());
  return g;
}

template <typename T>
MoeOutput<T> moe_forward(const MoeLayer<T>& layer, const Vector<T>& x) {
  if (x.size() != layer.config.token_dim) {
    throw ShapeError("moe_forward: layer token_dim " +
                     std::to_string(layer.config.token_dim) +
                     " but token has length " + std::to_string(x.size()));
  }
  MoeOutput<T> out{Vector<T>(layer.config.token_dim), {}};
  out.gate = top_k_gate(route(layer.router, x), layer.config.top_k);
  for (std::size_t e : out.gate.selected) {
    const Vector<T> part = ffn_forward(layer.experts[e], x);
    for (std::size_t i = 0; i < part.size(); ++i) out.output[i] += part[i];
  }
  return out;
}

namespace {

template <typename T>
void check_tokens(const MoeLayer<T>& layer, const Matrix<T>& tokens,
                  const char* what) {
  if (tokens.cols() != layer.config.token_dim) {
    throw ShapeError(std::string(what) + ": tokens are " +
                     shape_string(tokens.rows(), tokens.cols()) +
                     " but layer token_dim is " +
                     std::to_string(layer.config.token_dim));
  }
}

constexpr std::size_t kRouteChunk = 256;
constexpr std::size_t kExpertChunk = 256;

}  // namespace

template <typename T>
DispatchResult<T> dispatch_loop(const MoeLayer<T>& layer,
                                const Matrix<T>& tokens) {
  check_tokens(layer, tokens, "dispatch_loop");
  const std::size_t d = layer.config.token_dim;
  DispatchResult<T> res{Matrix<T>(tokens.rows(), d),
                        {layer.config.n_experts(), layer.config.top_k, {}}};
  res.trace.gates.reserve(tokens.rows());
  for (std::size_t t = 0; t < tokens.rows(); ++t) {
    Vector<T> x(std::vector<T>(tokens.row(t).begin(), tokens.row(t).end()));
    auto out = moe_forward(layer, x);
    std::copy(out.output.begin(), out.output.end(), res.output.row(t).begin());
    res.trace.gates.push_back(std::move(out.gate));
  }
  return res;
}

template <typename T>
DispatchResult<T> dispatch_batch(const MoeLayer<T>& layer,
                                 const Matrix<T>& tokens,
                                 std::size_t threads) {
  check_tokens(layer, tokens, "dispatch_batch");
  if (threads == 0) threads = num_threads();
  const std::size_t n_tok = tokens.rows();
  const std::size_t d = layer.config.token_dim;
  const std::size_t n_exp = layer.config.n_experts();
  const std::size_t top_k = layer.config.top_k;

  DispatchResult<T> res{Matrix<T>(n_tok, d), {n_exp, top_k, {}}};
  res.trace.gates.resize(n_tok);

  // Routing.
  const std::size_t n_route_chunks = (n_tok + kRouteChunk - 1) / kRouteChunk;
  parallel_for(
      n_route_chunks,
      [&](std::size_t c) {
        const std::size_t lo = c * kRouteChunk;
        const std::size_t hi = std::min(n_tok, lo + kRouteChunk);
        Matrix<T> block(hi - lo, d);
        for (std::size_t t = lo; t < hi; ++t) {
          std::copy_n(tokens.row(t).begin(), d, block.row(t - lo).begin());
        }
        const Matrix<T> logits =
            affine_rows(block, layer.router.w, layer.router.b);
        for (std::size_t t = lo; t < hi; ++t) {
          const auto row = logits.row(t - lo);
          Vector<T> scores = softmax(Vector<T>(std::vector<T>(row.begin(), row.end())));
          res.trace.gates[t] = top_k_gate(scores, top_k);
        }
      },
      threads);

  // Group token indices by expert; slot = position in the token's ascending
  // selection, which fixes where its partial output lands.
  struct Assignment {
    std::size_t token;
    std::size_t slot;
  };
  std::vector<std::vector<Assignment>> buckets(n_exp);
  for (std::size_t t = 0; t < n_tok; ++t) {
    const auto& sel = res.trace.gates[t].selected;
    for (std::size_t s = 0; s < sel.size(); ++s) buckets[sel[s]].push_back({t, s});
  }
  struct WorkItem {
    std::size_t expert;
    std::size_t begin;
    std::size_t end;
  };
  std::vector<WorkItem> work;
  for (std::size_t e = 0; e < n_exp; ++e) {
    for (std::size_t lo = 0; lo < buckets[e].size(); lo += kExpertChunk) {
      work.push_back({e, lo, std::min(buckets[e].size(), lo + kExpertChunk)});
    }
  }

  std::vector<T> partial(n_tok * top_k * d);
  parallel_for(
      work.size(),
      [&](std::size_t w) {
        const WorkItem& item = work[w];
        const auto& bucket = buckets[item.expert];
        Matrix<T> gathered(item.end - item.begin, d);
        for (std::size_t i = item.begin; i < item.end; ++i) {
          std::copy_n(tokens.row(bucket[i].token).begin(), d,
                      gathered.row(i - item.begin).begin());
        }
        const Matrix<T> y = ffn_forward_batch(layer.experts[item.expert], gathered);
        for (std::size_t i = item.begin; i < item.end; ++i) {
          const auto& a = bucket[i];
          std::copy_n(y.row(i - item.begin).begin(), d,
                      partial.begin() + (a.token * top_k + a.slot) * d);
        }
      },
      threads);

  // Scatter: ascending expert order per token.
  for (std::size_t t = 0; t < n_tok; ++t) {
    auto out = res.output.row(t);
    for (std::size_t s = 0; s < top_k; ++s) {
      const T* part = partial.data() + (t * top_k + s) * d;
      for (std::size_t i = 0; i < d; ++i) out[i] += part[i];
    }
  }
  return res;
}

std::vector<double> assignment_fractions(const RoutingTrace& trace) {
  if (trace.empty()) throw DomainError("assignment_fractions: empty trace");
  trace.validate();
  std::vector<double> f(trace.n_experts, 0.0);
  for (const auto& g : trace.gates) {
    for (std::size_t e : g.selected) f[e] += 1.0;
  }
  const double denom = static_cast<double>(trace.size() * trace.top_k);
  for (auto& v : f) v /= denom;
  return f;
}

std::vector<double> mean_scores(const RoutingTrace& trace) {
  if (trace.empty()) throw DomainError("mean_scores: empty trace");
  trace.validate();
  std::vector<double> p(trace.n_experts, 0.0);
  for (const auto& g : trace.gates) {
    for (std::size_t i = 0; i < p.size(); ++i) p[i] += g.scores[i];
  }
  const double denom = static_cast<double>(trace.size());
  for (auto& v : p) v /= denom;
  return p;
}

double load_balance_loss(const RoutingTrace& trace) {
  if (trace.empty()) throw DomainError("load_balance_loss: empty trace");
  const auto f = assignment_fractions(trace);
  const auto p = mean_scores(trace);
  double acc = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) acc += f[i] * p[i];
  return static_cast<double>(trace.n_experts) * acc;
}

double total_loss(double task, double aux, double alpha) {
  return task + alpha * aux;
}

template <typename T>
MoeGrads<T> moe_backward_batch(const MoeLayer<T>& layer,
                               const Matrix<T>& tokens,
                               const RoutingTrace& trace,
                               const Matrix<T>& upstream, double aux_weight) {
  check_tokens(layer, tokens, "moe_backward");
  const std::size_t n_tok = tokens.rows();
  const std::size_t d = layer.config.token_dim;
  const std::size_t n_exp = layer.config.n_experts();
  if (upstream.rows() != n_tok || upstream.cols() != d) {
    throw ShapeError("moe_backward: upstream is " +
                     shape_string(upstream.rows(), upstream.cols()) +
                     " but tokens are " + shape_string(n_tok, d));
  }
  if (trace.size() != n_tok || trace.n_experts != n_exp ||
      trace.top_k != layer.config.top_k) {
    throw DomainError("moe_backward: trace (" + std::to_string(trace.size()) +
                      " tokens, " + std::to_string(trace.n_experts) +
                      " experts, top_k " + std::to_string(trace.top_k) +
                      ") does not match layer/tokens");
  }
  trace.validate();

  MoeGrads<T> grads = MoeGrads<T>::zeros_like(layer, n_tok);
  std::vector<T> coeff;
  if (aux_weight != 0.0 && n_tok > 0) {
    // d(aux_weight * kN * sum F_i P_i) / d s_{t,i} = aux_weight * kN * F_i / T
    const auto f = assignment_fractions(trace);
    coeff.resize(n_exp);
    for (std::size_t i = 0; i < n_exp; ++i) {
      coeff[i] = static_cast<T>(aux_weight * static_cast<double>(n_exp) * f[i] /
                                static_cast<double>(n_tok));
    }
  }

  for (std::size_t t = 0; t < n_tok; ++t) {
    const Vector<T> x(std::vector<T>(tokens.row(t).begin(), tokens.row(t).end()));
    const Vector<T> up(
        std::vector<T>(upstream.row(t).begin(), upstream.row(t).end()));
    auto in_grad = grads.input.row(t);
    for (std::size_t e : trace.gates[t].selected) {
      const Vector<T> g =
          ffn_backward_accumulate(layer.experts[e], x, up, grads.experts[e]);
      for (std::size_t i = 0; i < d; ++i) in_grad[i] += g[i];
    }
    if (coeff.empty()) continue;
    // Softmax backward: dz_j = s_j (c_j - sum_i c_i s_i).
    const auto& s = trace.gates[t].scores;
    T mean = T(0);
    for (std::size_t i = 0; i < n_exp; ++i) mean += coeff[i] * static_cast<T>(s[i]);
    Vector<T> dz(n_exp);
    for (std::size_t j = 0; j < n_exp; ++j) {
      dz[j] = static_cast<T>(s[j]) * (coeff[j] - mean);
    }
    add_outer(grads.router.w, T(1), dz.span(), x.span());
    axpy(T(1), dz.span(), grads.router.b.span());
    const Vector<T> dx = matvec_transposed(layer.router.w, dz);
    for (std::size_t i = 0; i < d; ++i) in_grad[i] += dx[i];
  }
  return grads;
}

template <typename T>
MoeGrads<T> moe_backward(const MoeLayer<T>& layer, const Vector<T>& x,
                         const Gate& gate, const Vector<T>& upstream,
                         double aux_weight) {
  const RoutingTrace trace{layer.config.n_experts(), layer.config.top_k, {gate}};
  return moe_backward_batch(layer, Matrix<T>(1, x.size(), x.values()), trace,
                            Matrix<T>(1, upstream.size(), upstream.values()),
                            aux_weight);
}

template <typename T>
MoeLayer<T> cast_layer(const MoeLayer<double>& layer) {
  MoeLayer<T> out;
  out.config = layer.config;
  for (const auto& e : layer.experts) out.experts.push_back(cast_params<T>(e));
  out.router.w = Matrix<T>(layer.router.w.rows(), layer.router.w.cols(),
                           std::vector<T>(layer.router.w.span().begin(),
                                          layer.router.w.span().end()));
  out.router.b = Vector<T>(std::vector<T>(layer.router.b.begin(), layer.router.b.end()));
  return out;
}

#define MOEFORGE_INSTANTIATE_MOE(T)                                            \
  template struct MoeLayer<T>;                                                \
  template struct RouterGrads<T>;                                             \
  template struct MoeGrads<T>;                                                \
  template std::vector<ExpertParams<T>> split_ffn<T>(const FfnParams<T>&,     \
                                                     std::size_t);            \
  template RouterParams<T> init_router<T>(const MoeConfig&, Rng&);            \
  template MoeLayer<T> expand_supernet<T>(const FfnParams<T>&,                \
                                          const MoeConfig&);                  \
  template Vector<T> router_logits<T>(const RouterParams<T>&, const Vector<T>&); \
  template Vector<T> route<T>(const RouterParams<T>&, const Vector<T>&);      \
  template Gate top_k_gate<T>(std::span<const T>, std::size_t);               \
  template MoeOutput<T> moe_forward<T>(const MoeLayer<T>&, const Vector<T>&); \
  template DispatchResult<T> dispatch_loop<T>(const MoeLayer<T>&,             \
                                              const Matrix<T>&);              \
  template DispatchResult<T> dispatch_batch<T>(const MoeLayer<T>&,            \
                                               const Matrix<T>&, std::size_t); \
  template MoeGrads<T> moe_backward_batch<T>(const MoeLayer<T>&,              \
                                             const Matrix<T>&,                \
                                             const RoutingTrace&,             \
                                             const Matrix<T>&, double);       \
  template MoeGrads<T> moe_backward<T>(const MoeLayer<T>&, const Vector<T>&,  \
                                       const Gate&, const Vector<T>&, double); \
  template MoeLayer<T> cast_layer<T>(const MoeLayer<double>&);

MOEFORGE_INSTANTIATE_MOE(float)
MOEFORGE_INSTANTIATE_MOE(double)

#undef MOEFORGE_INSTANTIATE_MOE

}  // namespace moeforge
