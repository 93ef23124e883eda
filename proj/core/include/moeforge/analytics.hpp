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

// Routing statistics over RoutingTrace records: expert loading, pairwise
// co-selection, label/routing mutual information, and the size of the
// activation-pattern search space.

#ifndef MOEFORGE_ANALYTICS_HPP_
#define MOEFORGE_ANALYTICS_HPP_

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "moeforge/moe.hpp"
#include "moeforge/numkernel.hpp"
#include "moeforge/rng.hpp"

namespace moeforge {

using BigInt = boost::multiprecision::cpp_int;

enum class CoSelectionNorm {
  kMaxCount,  // divide by the largest pair count, so the max entry is 1
  kTokens,    // divide by the number of tokens
};

struct CoSelectionMatrix {
  std::size_t size = 0;
  Matrix<double> entries;  // symmetric, zero diagonal
};

struct LoadDistribution {
  std::vector<double> fractions;
};

/// Raw unordered-pair counts, symmetric with zero diagonal.
Matrix<double> co_selection_counts(const RoutingTrace& trace);

/// Throws DomainError when top_k < 2.
CoSelectionMatrix co_selection(const RoutingTrace& trace,
                               CoSelectionNorm norm = CoSelectionNorm::kMaxCount);

/// Same values as assignment_fractions(trace).
LoadDistribution expert_loading(const RoutingTrace& trace);

/// For each expert, the number of partners whose normalized co-selection is at
/// least `threshold`.
std::vector<std::size_t> partner_counts(const CoSelectionMatrix& m,
                                        double threshold = 0.5);

/// Normalized mutual information between the token label and the identity of
/// the selected expert set, 2 I(L;S) / (H(L) + H(S)), in [0, 1]. Two constant
/// labelings count as identical partitions (1).
double pattern_specialization(const RoutingTrace& trace,
                              std::span<const std::size_t> labels);

/// The same statistic after a seeded shuffle of the labels.
double shuffled_specialization(const RoutingTrace& trace,
                               std::span<const std::size_t> labels, Rng& rng);

/// binomial(n, top_k) ^ layers, exact.
BigInt search_space_size(std::uint64_t n, std::uint64_t top_k,
                         std::uint64_t layers);

/// Header row of indices 0..cols-1, then one CSV row per matrix row with
/// round-trip (%.17g) formatting.
void write_matrix_csv(std::ostream& out, const Matrix<double>& m);
void write_distribution_csv(std::ostream& out, std::span<const double> values);

/// Shortest-exact text form used in every CSV the tools emit.
std::string format_real(double v);

}  // namespace moeforge

#endif  // MOEFORGE_ANALYTICS_HPP_
