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

#include "cli/config.hpp"

#include <algorithm>
#include <concepts>
#include <fstream>
#include <set>
#include <sstream>

#include "moeforge/error.hpp"

namespace moeforge::cli {

using nlohmann::json;

namespace {

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <std::unsigned_integral U>
  void get(const char* key, U& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer() ||
          (!v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
        throw ConfigError(where(key) + ": expected a non-negative integer");
      }
      out = v->get<U>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + ": expected a boolean");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::optional<double>& out) {
    if (const json* v = take(key)) {
      if (v->is_null()) {
        out.reset();
        return;
      }
      if (!v->is_number()) {
        throw ConfigError(where(key) + ": expected a number or null");
      }
      out = v->get<double>();
    }
  }
  void get(const char* key, std::vector<std::string>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + ": expected an array");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        if (!(*v)[i].is_string()) {
          throw ConfigError(where(key) + "/" + std::to_string(i) +
                            ": expected a string");
        }
        out.push_back((*v)[i].get<std::string>());
      }
    }
  }

  /// Returns the sub-object under key, or nullptr if absent.
  const json* child(const char* key) { return take(key); }

  std::string where(const std::string& key = {}) const {
    const std::string base = path_.empty() ? "" : path_;
    return key.empty() ? (base.empty() ? "/" : base) : base + "/" + key;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw ConfigError(where(it.key()) + ": unknown key");
      }
    }
  }

 private:
  const json* take(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Fn>
void validated(const std::string& path, Fn&& fn) {
  try {
    fn();
  } catch (const DomainError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void parse_train(Section& parent, const char* key, TrainConfig& cfg) {
  const json* j = parent.child(key);
  if (!j) return;
  Section s(*j, parent.where(key));
  s.get("lr", cfg.lr);
  s.get("head_lr", cfg.head_lr);
  s.get("steps", cfg.steps);
  s.get("batch", cfg.batch);
  s.get("alpha", cfg.alpha);
  std::string opt = to_string(cfg.optimizer);
  s.get("optimizer", opt);
  validated(s.where("optimizer"), [&] { cfg.optimizer = parse_optimizer(opt); });
  s.get("weight_decay", cfg.weight_decay);
  s.get("monitor_tokens", cfg.monitor_tokens);
  if (const json* t = s.child("trainable")) {
    Section ts(*t, s.where("trainable"));
    ts.get("block", cfg.trainable.block);
    ts.get("head", cfg.trainable.head);
    ts.get("input_map", cfg.trainable.input_map);
    ts.finish();
  }
  s.finish();
  validated(s.where(), [&] { cfg.validate(); });
}

json train_to_json(const TrainConfig& c) {
  return json{{"lr", c.lr},
              {"head_lr", c.effective_head_lr()},
              {"steps", c.steps},
              {"batch", c.batch},
              {"alpha", c.alpha},
              {"optimizer", to_string(c.optimizer)},
              {"weight_decay", c.weight_decay},
              {"monitor_tokens", c.monitor_tokens},
              {"trainable",
               {{"block", c.trainable.block},
                {"head", c.trainable.head},
                {"input_map", c.trainable.input_map}}}};
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  pretrain.lr = 0.05;
  pretrain.steps = 2000;
  pretrain.batch = 64;
  pretrain.stage = Stage::kPretrain;
  pretrain.trainable = {true, true, true};

  tune = pretrain;
  tune.stage = Stage::kMoeTune;
  tune.alpha = kDefaultBalanceAlpha;
  tune.trainable = {true, true, false};

  moe.n_replicas = 8;
  moe.granularity = 2;
  moe.top_k = 2;
}

MoeConfig ExperimentConfig::resolved_moe() const {
  MoeConfig m = moe;
  m.token_dim = task.token_dim;
  m.hidden_dim = hidden_dim;
  m.activation = activation;
  m.seed = mix_seed(seed, static_cast<std::uint64_t>(Stream::kRouter));
  return m;
}

std::vector<AblationCombo> ExperimentConfig::resolved_combos() const {
  const auto all = default_ablation_combos();
  if (ablate_combos.empty()) return all;
  std::vector<AblationCombo> out;
  for (const auto& name : ablate_combos) {
    auto it = std::find_if(all.begin(), all.end(),
                           [&](const AblationCombo& c) { return c.name == name; });
    if (it == all.end()) {
      throw ConfigError("/ablate/combos: unknown combo '" + name + "'");
    }
    out.push_back(*it);
  }
  return out;
}

ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig cfg;
  Section root(doc, "");
  root.get("seed", cfg.seed);

  if (const json* j = root.child("task")) {
    Section s(*j, "/task");
    s.get("n_patterns", cfg.task.n_patterns);
    s.get("token_dim", cfg.task.token_dim);
    s.get("noise_std", cfg.task.noise_std);
    s.get("center_scale", cfg.task.center_scale);
    s.get("min_gain", cfg.task.min_gain);
    s.get("max_gain", cfg.task.max_gain);
    s.get("eval_tokens", cfg.eval_tokens);
    s.finish();
  }
  validated("/task", [&] { cfg.task.validate(); });
  if (cfg.eval_tokens == 0) {
    throw ConfigError("/task/eval_tokens: must be >= 1");
  }

  if (const json* j = root.child("model")) {
    Section s(*j, "/model");
    s.get("hidden_dim", cfg.hidden_dim);
    std::string act = to_string(cfg.activation);
    s.get("activation", act);
    validated("/model/activation", [&] { cfg.activation = parse_activation(act); });
    s.finish();
  }

  bool top_k_given = false;
  if (const json* j = root.child("moe")) {
    Section s(*j, "/moe");
    s.get("n_replicas", cfg.moe.n_replicas);
    s.get("granularity", cfg.moe.granularity);
    top_k_given = j->contains("top_k");
    s.get("top_k", cfg.moe.top_k);
    s.finish();
  }
  if (!top_k_given) cfg.moe.top_k = cfg.moe.granularity;
  validated("/moe", [&] { cfg.resolved_moe().validate(); });

  if (const json* j = root.child("train")) {
    Section s(*j, "/train");
    parse_train(s, "pretrain", cfg.pretrain);
    parse_train(s, "tune", cfg.tune);
    s.finish();
  }

  if (const json* j = root.child("ablate")) {
    Section s(*j, "/ablate");
    s.get("combos", cfg.ablate_combos);
    s.finish();
    cfg.resolved_combos();
  }
  root.finish();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": malformed JSON at byte " +
                      std::to_string(e.byte) + ": " + e.what());
  }
  try {
    return parse_config(doc);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

json to_json(const ExperimentConfig& cfg) {
  return json{
      {"seed", cfg.seed},
      {"task",
       {{"n_patterns", cfg.task.n_patterns},
        {"token_dim", cfg.task.token_dim},
        {"noise_std", cfg.task.noise_std},
        {"center_scale", cfg.task.center_scale},
        {"min_gain", cfg.task.min_gain},
        {"max_gain", cfg.task.max_gain},
        {"eval_tokens", cfg.eval_tokens}}},
      {"model",
       {{"hidden_dim", cfg.hidden_dim},
        {"activation", to_string(cfg.activation)}}},
      {"moe",
       {{"n_replicas", cfg.moe.n_replicas},
        {"granularity", cfg.moe.granularity},
        {"top_k", cfg.moe.top_k}}},
      {"train",
       {{"pretrain", train_to_json(cfg.pretrain)},
        {"tune", train_to_json(cfg.tune)}}},
      {"ablate", {{"combos", [&] {
                     std::vector<std::string> names;
                     for (const auto& c : cfg.resolved_combos()) {
                       names.push_back(c.name);
                     }
                     return names;
                   }()}}},
  };
}

}  // namespace moeforge::cli
