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

#ifndef MOEFORGE_TOOLS_CLI_GRADCHECK_HPP_
#define MOEFORGE_TOOLS_CLI_GRADCHECK_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "moeforge/harness.hpp"

namespace moeforge::cli {

/// Analytic backward under test. The default is toy_loss_and_grads.
using BackwardFn =
    std::function<ToyGrads(const ToyModel&, const Batch&, double alpha)>;

BackwardFn default_backward();

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t instances = 50;
  std::size_t max_dim = 16;
  std::size_t max_hidden = 32;
  std::size_t max_replicas = 4;
  std::size_t tokens = 8;
  double alpha = kDefaultBalanceAlpha;
  double step = 1e-6;
  double tolerance = 1e-4;
  /// Denominator floor of the relative error, scaled by max(1, |loss|). Central
  /// differences carry roundoff of about |loss| * 1e-10 at h = 1e-6, so smaller
  /// gradients are compared on an absolute scale.
  double floor = 1e-5;
  /// Minimum distance of ReLU pre-activations from 0 and of the k-th from the
  /// (k+1)-th router logit; closer instances are redrawn.
  double margin = 1e-4;

  void validate() const;
};

struct Offender {
  std::size_t instance = 0;
  std::optional<std::size_t> expert;
  std::size_t row = 0;
  std::size_t col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GroupReport {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_analytic = 0.0;
  Offender worst;
};

struct GradcheckReport {
  std::vector<GroupReport> groups;  // fixed order, see group_names()
  std::size_t instances = 0;
  double tolerance = 0.0;

  bool passed() const;
  const GroupReport& group(const std::string& name) const;
  void print(std::ostream& out) const;
};

/// input_map, expert.w1, expert.b1, expert.w2, expert.b2, router.w, router.b,
/// head.w, head.b.
const std::vector<std::string>& group_names();

/// One random MoE toy model and batch, redrawn until every kink is at least
/// `opts.margin` away.
struct GradcheckInstance {
  ToyModel model;
  Batch batch;
};
GradcheckInstance make_gradcheck_instance(const GradcheckOptions& opts,
                                          std::size_t index);

/// Central differences of mse + alpha * aux against `backward`.
GradcheckReport run_gradcheck(const GradcheckOptions& opts,
                              const BackwardFn& backward = default_backward());

}  // namespace moeforge::cli

#endif  // MOEFORGE_TOOLS_CLI_GRADCHECK_HPP_
