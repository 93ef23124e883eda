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

#ifndef MOEFORGE_TOOLS_CLI_CONFIG_HPP_
#define MOEFORGE_TOOLS_CLI_CONFIG_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moeforge/harness.hpp"
#include "moeforge/moe.hpp"

namespace moeforge::cli {

/// One experiment document:
///   {
///     "seed": 0,
///     "task":  {"n_patterns", "token_dim", "noise_std", "center_scale",
///               "min_gain", "max_gain", "eval_tokens"},
///     "model": {"hidden_dim", "activation"},
///     "moe":   {"n_replicas", "granularity", "top_k"},
///     "train": {"pretrain": {...}, "tune": {...}},
///     "ablate": {"combos": ["moe-only", ...]}
///   }
/// Every section and key is optional; unknown keys are rejected. A train
/// stage accepts "lr", "head_lr", "steps", "batch", "alpha", "optimizer",
/// "weight_decay", "monitor_tokens" and "trainable":
/// {"block", "head", "input_map"}.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  TaskSpec task;
  std::size_t eval_tokens = 10000;
  std::size_t hidden_dim = 32;
  Activation activation = Activation::kReLU;
  MoeConfig moe;
  TrainConfig pretrain;
  TrainConfig tune;
  std::vector<std::string> ablate_combos;

  ExperimentConfig();

  /// Router seed and dims derived from the experiment.
  MoeConfig resolved_moe() const;
  std::vector<AblationCombo> resolved_combos() const;
};

/// Throws ConfigError naming the JSON pointer of the offending value.
ExperimentConfig parse_config(const nlohmann::json& doc);
/// Reads and parses a file; parse errors name the file path.
ExperimentConfig load_config(const std::string& path);

/// Fully resolved document with every default spelled out.
nlohmann::json to_json(const ExperimentConfig& cfg);

}  // namespace moeforge::cli

#endif  // MOEFORGE_TOOLS_CLI_CONFIG_HPP_
