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

#include "moeforge/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>

#include "moeforge/error.hpp"

namespace moeforge {

Matrix<double> co_selection_counts(const RoutingTrace& trace) {
  trace.validate();
  Matrix<double> counts(trace.n_experts, trace.n_experts);
  for (const auto& g : trace.gates) {
    for (std::size_t a = 0; a < g.selected.size(); ++a) {
      for (std::size_t b = a + 1; b < g.selected.size(); ++b) {
        counts(g.selected[a], g.selected[b]) += 1.0;
        counts(g.selected[b], g.selected[a]) += 1.0;
      }
    }
  }
  return counts;
}

CoSelectionMatrix co_selection(const RoutingTrace& trace, CoSelectionNorm norm) {
  if (trace.top_k < 2) {
    throw DomainError("co_selection: top_k = " + std::to_string(trace.top_k) +
                      ", expert pairs need top_k >= 2");
  }
  CoSelectionMatrix m{trace.n_experts, co_selection_counts(trace)};
  double denom = 0.0;
  if (norm == CoSelectionNorm::kMaxCount) {
    for (double v : m.entries.span()) denom = std::max(denom, v);
  } else {
    denom = static_cast<double>(trace.size());
  }
  if (denom > 0.0) {
    for (double& v : m.entries.span()) v /= denom;
  }
  return m;
}

LoadDistribution expert_loading(const RoutingTrace& trace) {
  return {assignment_fractions(trace)};
}

std::vector<std::size_t> partner_counts(const CoSelectionMatrix& m,
                                        double threshold) {
  std::vector<std::size_t> out(m.size, 0);
  for (std::size_t i = 0; i < m.size; ++i) {
    for (std::size_t j = 0; j < m.size; ++j) {
      if (i != j && m.entries(i, j) >= threshold) ++out[i];
    }
  }
  return out;
}

namespace {

double entropy(const std::map<std::size_t, double>& counts, double total) {
  double h = 0.0;
  for (const auto& [key, c] : counts) {
    const double p = c / total;
    h -= p * std::log(p);
  }
  return h;
}

}  // namespace

double pattern_specialization(const RoutingTrace& trace,
                              std::span<const std::size_t> labels) {
  if (labels.size() != trace.size()) {
    throw ShapeError("pattern_specialization: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(trace.size()) + " tokens");
  }
  if (trace.empty()) throw DomainError("pattern_specialization: empty trace");
  trace.validate();

  // Dense ids for the distinct selected sets, in first-seen order.
  std::map<std::vector<std::size_t>, std::size_t> set_ids;
  std::vector<std::size_t> set_of(trace.size());
  for (std::size_t t = 0; t < trace.size(); ++t) {
    auto [it, inserted] =
        set_ids.try_emplace(trace.gates[t].selected, set_ids.size());
    set_of[t] = it->second;
  }

  std::map<std::size_t, double> label_counts, set_counts;
  std::map<std::pair<std::size_t, std::size_t>, double> joint;
  for (std::size_t t = 0; t < trace.size(); ++t) {
    label_counts[labels[t]] += 1.0;
    set_counts[set_of[t]] += 1.0;
    joint[{labels[t], set_of[t]}] += 1.0;
  }
  const double n = static_cast<double>(trace.size());
  const double h_label = entropy(label_counts, n);
  const double h_set = entropy(set_counts, n);
  if (label_counts.size() == 1 && set_counts.size() == 1) return 1.0;
  if (h_label + h_set == 0.0) return 0.0;

  double mi = 0.0;
  for (const auto& [key, c] : joint) {
    const double pxy = c / n;
    const double px = label_counts[key.first] / n;
    const double py = set_counts[key.second] / n;
    mi += pxy * std::log(pxy / (px * py));
  }
  return std::clamp(2.0 * mi / (h_label + h_set), 0.0, 1.0);
}

double shuffled_specialization(const RoutingTrace& trace,
                               std::span<const std::size_t> labels, Rng& rng) {
  std::vector<std::size_t> shuffled(labels.begin(), labels.end());
  for (std::size_t i = shuffled.size(); i > 1; --i) {
    std::swap(shuffled[i - 1], shuffled[rng.index(i)]);
  }
  return pattern_specialization(trace, shuffled);
}

BigInt search_space_size(std::uint64_t n, std::uint64_t top_k,
                         std::uint64_t layers) {
  if (n == 0 || top_k > n) {
    throw DomainError("search_space_size: need 1 <= n and top_k <= n, got n = " +
                      std::to_string(n) + ", top_k = " + std::to_string(top_k));
  }
  if (layers == 0) throw DomainError("search_space_size: layers must be >= 1");
  BigInt binom = 1;
  const std::uint64_t r = std::min(top_k, n - top_k);
  for (std::uint64_t i = 1; i <= r; ++i) {
    binom *= n - r + i;
    binom /= i;
  }
  return boost::multiprecision::pow(binom, static_cast<unsigned>(layers));
}

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

void write_header(std::ostream& out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out << (i ? "," : "") << i;
  out << '\n';
}

}  // namespace

void write_matrix_csv(std::ostream& out, const Matrix<double>& m) {
  write_header(out, m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      out << (c ? "," : "") << format_real(m(r, c));
    }
    out << '\n';
  }
}

void write_distribution_csv(std::ostream& out, std::span<const double> values) {
  write_header(out, values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    out << (i ? "," : "") << format_real(values[i]);
  }
  out << '\n';
}

}  // namespace moeforge
