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

// Desk-scale two-stage experiment: pretrain a dense toy model on a clustered
// regression task, expand its FFN block into a MoE supernet, and fine-tune.
//
// Toy model:   u = A x                      (input map, frozen during tuning)
//              z = u + block(u)             (dense FFN or MoE layer)
//              y = W_h z + b_h              (head)
// Task loss:   mean over tokens and coordinates of (y - target)^2.
// MoE tuning optimizes task + alpha * load_balance_loss.

#ifndef MOEFORGE_HARNESS_HPP_
#define MOEFORGE_HARNESS_HPP_

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "moeforge/analytics.hpp"
#include "moeforge/ffn.hpp"
#include "moeforge/moe.hpp"
#include "moeforge/numkernel.hpp"
#include "moeforge/rng.hpp"

namespace moeforge {

// Sub-stream ids forked from the experiment seed.
enum class Stream : std::uint64_t {
  kTask = 1,
  kModelInit = 2,
  kPretrainData = 3,
  kEval = 4,
  kRouter = 5,
  kTuneData = 6,
  kShuffle = 7,
  kMonitor = 8,
};

Rng stream_rng(std::uint64_t seed, Stream s);

struct TaskSpec {
  std::size_t n_patterns = 4;
  std::size_t token_dim = 8;
  double noise_std = 0.3;
  double center_scale = 3.0;  // expected center norm
  double min_gain = 0.5;      // singular values of each target map
  double max_gain = 2.0;

  void validate() const;
};

struct SyntheticTask {
  std::size_t n_patterns = 0;
  std::size_t token_dim = 0;
  Matrix<double> centers;             // M x D
  std::vector<Matrix<double>> maps;   // M maps, D x D
  double noise_std = 0.0;
  double min_gain = 0.0;
  double max_gain = 0.0;
  std::uint64_t seed = 0;
};

/// Centers are resampled until every pair is at least 4 * noise_std apart;
/// maps are U diag(g) V^T with orthogonal U, V and gains in
/// [min_gain, max_gain].
SyntheticTask make_task(const TaskSpec& spec, std::uint64_t seed);

struct Batch {
  Matrix<double> tokens;   // size x D
  Matrix<double> targets;  // size x D
  std::vector<std::size_t> labels;
};

/// label ~ U{0..M-1}, token = center[label] + N(0, noise_std^2),
/// target = maps[label] * token.
Batch generate_batch(const SyntheticTask& task, Rng& rng, std::size_t size);

struct ToyModel {
  Matrix<double> input_map;  // D x D
  std::variant<FfnParams<double>, MoeLayer<double>> block;
  Matrix<double> head_w;     // D x D
  Vector<double> head_b;     // D

  bool is_moe() const noexcept { return block.index() == 1; }
  std::size_t token_dim() const noexcept { return input_map.rows(); }
  const FfnParams<double>& dense() const;
  const MoeLayer<double>& moe() const;

  bool operator==(const ToyModel&) const = default;
};

/// Input map I + N(0, 0.01/D), random FFN block, identity head.
ToyModel make_dense_model(std::size_t token_dim, std::size_t hidden_dim,
                          Activation act, Rng& rng);

/// Replaces the dense block with expand_supernet(block, cfg); cfg's dims are
/// taken from the block.
ToyModel expand_model(const ToyModel& dense, MoeConfig cfg);

struct ToyForward {
  Matrix<double> mapped;  // u
  Matrix<double> hidden;  // z = u + block(u)
  Matrix<double> output;  // y
  std::optional<RoutingTrace> trace;
};

ToyForward toy_forward(const ToyModel& model, const Matrix<double>& tokens,
                       std::size_t threads = 0);

double mse(const Matrix<double>& output, const Matrix<double>& targets);

struct TrainFlags {
  bool block = true;
  bool head = true;
  bool input_map = true;

  bool operator==(const TrainFlags&) const = default;
};

struct ToyGrads {
  Matrix<double> input_map;
  std::variant<FfnGrads<double>, MoeGrads<double>> block;
  Matrix<double> head_w;
  Vector<double> head_b;
};

struct LossBreakdown {
  double task = 0.0;
  double aux = 0.0;
  double total = 0.0;
};

struct LossAndGrads {
  LossBreakdown loss;
  ToyGrads grads;
  std::optional<RoutingTrace> trace;
};

/// Loss = mse + alpha * aux (aux only for MoE blocks) and its gradient under
/// the MoE gradient contract.
LossAndGrads toy_loss_and_grads(const ToyModel& model, const Batch& batch,
                                double alpha, std::size_t threads = 0);

/// Enumerates parameter tensors in a fixed order: input map, block (experts
/// in index order then router, or the dense FFN), head weight, head bias.
std::vector<std::span<double>> parameter_views(ToyModel& model);
std::vector<std::span<const double>> gradient_views(const ToyGrads& grads);

enum class Stage { kPretrain, kMoeTune };
enum class OptimizerKind { kSgd, kAdamW };

std::string to_string(OptimizerKind o);
OptimizerKind parse_optimizer(const std::string& name);

struct TrainConfig {
  double lr = 0.05;                // block and input map
  std::optional<double> head_lr;   // defaults to lr
  std::size_t steps = 1000;
  std::size_t batch = 64;
  double alpha = kDefaultBalanceAlpha;
  Stage stage = Stage::kPretrain;
  TrainFlags trainable;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double weight_decay = 0.0;       // AdamW only
  std::size_t monitor_tokens = 512;

  double effective_head_lr() const { return head_lr.value_or(lr); }
  void validate() const;
};

struct LossCurve {
  std::vector<double> train;     // loss of each step's training batch
  std::vector<double> monitor;   // loss on a fixed monitor batch, pre-update
  std::vector<double> smoothed;  // running minimum of monitor
  std::vector<double> aux;       // balance loss of each step's batch

  void write_csv(std::ostream& out) const;
};

struct PretrainResult {
  ToyModel model;
  LossCurve curve;
  double eval_mse = 0.0;
};

struct TuneMetrics {
  double base_mse = 0.0;
  double step0_mse = 0.0;
  double mse = 0.0;
  double aux_loss = 0.0;
  double nmi = 0.0;
  double nmi_shuffled = 0.0;
  std::vector<double> loading;
  double max_loading = 0.0;
  std::optional<CoSelectionMatrix> coselection;
  std::vector<std::size_t> partners;
};

struct TuneResult {
  ToyModel model;
  LossCurve curve;
  TuneMetrics metrics;
  RoutingTrace eval_trace;
  std::vector<std::size_t> eval_labels;
};

/// Held-out evaluation set: `size` tokens drawn from the kEval stream.
Batch eval_set(const SyntheticTask& task, std::uint64_t seed,
               std::size_t size = 10000);

/// Gradient descent on the dense model. Throws DivergenceError when the loss
/// becomes non-finite or exceeds 1e6.
PretrainResult pretrain(const SyntheticTask& task, ToyModel model,
                        const TrainConfig& cfg, std::uint64_t seed,
                        std::size_t eval_tokens = 10000);

/// Expands `base`, verifies step-0 identity within 1e-9 (IdentityViolation
/// otherwise), then trains with task + alpha * aux.
TuneResult moe_tune(const SyntheticTask& task, const ToyModel& base,
                    MoeConfig moe_cfg, const TrainConfig& cfg,
                    std::uint64_t seed, std::size_t eval_tokens = 10000);

inline constexpr double kStepZeroTolerance = 1e-9;

struct AblationCombo {
  std::string name;
  TrainFlags flags;
};

/// moe-only, moe+head, moe+frozen-map, all, and all-frozen.
std::vector<AblationCombo> default_ablation_combos();

struct AblationRow {
  AblationCombo combo;
  double mse = 0.0;
};

std::vector<AblationRow> ablate_tuning_subsets(
    const SyntheticTask& task, const ToyModel& base, const MoeConfig& moe_cfg,
    const TrainConfig& cfg, std::uint64_t seed,
    const std::vector<AblationCombo>& combos, std::size_t eval_tokens = 10000);

/// Toy model checkpoint:
///   char[4] "MTOY", u32 version (1), u32 block kind (0 dense, 1 moe),
///   u64 D, f64[D*D] input map, f64[D*D] head weight, f64[D] head bias,
///   then one FFN record or MoE checkpoint (see serialize.hpp).
void write_toy_model(std::ostream& out, const ToyModel& model);
ToyModel read_toy_model(std::istream& in);

}  // namespace moeforge

#endif  // MOEFORGE_HARNESS_HPP_
