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

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cli/cli.hpp"
#include "cli/config.hpp"
#include "cli/manifest.hpp"
#include "moeforge/analytics.hpp"
#include "moeforge/error.hpp"
#include "moeforge/harness.hpp"
#include "moeforge/moe.hpp"
#include "moeforge/parallel.hpp"
#include "moeforge/serialize.hpp"

namespace moeforge::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::size_t threads = 0;  // 0 keeps MOEFORGE_THREADS / hardware default
  bool f32 = false;
};

struct RunOptions {
  std::string config;
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  std::string out;
};

struct AnalyzeOptions {
  std::string trace;
  std::string labels;
  std::string normalize = "max";
  std::uint64_t layers = 1;
  std::uint64_t seed = 0;
  std::string out;
};

struct BenchOptions {
  std::size_t tokens = 8192;
  std::size_t dim = 256;
  std::size_t hidden = 1024;
  std::size_t replicas = 8;
  std::size_t granularity = 2;
  std::size_t top_k = 2;
  std::uint64_t seed = 0;
  std::size_t repeats = 1;
  std::string out;
};

struct SplitOptions {
  std::string checkpoint;
  std::size_t granularity = 2;
  std::size_t tokens = 1000;
  std::uint64_t seed = 0;
};

std::string read_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path + ": cannot open " + what);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

template <typename Fn>
void write_file(const fs::path& path, Fn&& fn) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot create " + path.string());
  fn(out);
  out.flush();
  if (!out) throw Error("cannot write " + path.string());
}

void write_json(const fs::path& path, const json& j) {
  write_file(path, [&](std::ostream& o) { o << j.dump(2) << '\n'; });
}

fs::path prepare_out(const std::string& out) {
  if (out.empty()) throw ConfigError("--out is required");
  fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError(out + ": cannot create output directory");
  return dir;
}

ExperimentConfig load_run_config(const RunOptions& o) {
  ExperimentConfig cfg = load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  return cfg;
}

ToyModel load_checkpoint(const std::string& path) {
  std::istringstream in(read_file(path, "checkpoint"));
  try {
    return read_toy_model(in);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

ToyModel load_base(const std::string& path, const ExperimentConfig& cfg) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  ToyModel base = load_checkpoint(path);
  if (base.is_moe()) {
    throw ConfigError(path + ": expected a dense base checkpoint");
  }
  const FfnParams<double>& ffn = base.dense();
  if (ffn.token_dim() != cfg.task.token_dim ||
      ffn.hidden_dim() != cfg.hidden_dim || ffn.activation != cfg.activation) {
    throw ConfigError(path + ": checkpoint block is " +
                      shape_string(ffn.hidden_dim(), ffn.token_dim()) + " " +
                      to_string(ffn.activation) + " but the config asks for " +
                      shape_string(cfg.hidden_dim, cfg.task.token_dim) + " " +
                      to_string(cfg.activation));
  }
  return base;
}

RunManifest start_manifest(const std::string& command, const RunOptions& o,
                           const ExperimentConfig& cfg, const fs::path& dir,
                           const Common& common) {
  RunManifest m;
  m.command = command;
  m.config_path = o.config;
  m.seed = cfg.seed;
  m.input_hashes[o.config] = git_blob_hash_file(o.config);
  if (!o.checkpoint.empty()) {
    m.input_hashes[o.checkpoint] = git_blob_hash_file(o.checkpoint);
  }
  m.output_dir = dir.string();
  m.started_at = utc_timestamp();
  m.resolved = {{"config", to_json(cfg)},
                {"checkpoint", o.checkpoint},
                {"threads", num_threads()},
                {"threads_flag", common.threads}};
  return m;
}

void finish_manifest(RunManifest& m, const fs::path& dir) {
  m.finished_at = utc_timestamp();
  m.write(dir);
}

void write_labels_csv(std::ostream& out, const std::vector<std::size_t>& labels) {
  out << "token_id,label\n";
  for (std::size_t t = 0; t < labels.size(); ++t) {
    out << t << ',' << labels[t] << '\n';
  }
}

std::vector<std::size_t> read_labels_csv(const std::string& path) {
  std::istringstream in(read_file(path, "labels file"));
  std::string line;
  std::vector<std::size_t> labels;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("token_id", 0) == 0) continue;
    unsigned long long id = 0;
    unsigned long long label = 0;
    char tail = 0;
    if (std::sscanf(line.c_str(), "%llu,%llu%c", &id, &label, &tail) != 2 ||
        id != labels.size()) {
      throw FormatError(path + ": line " + std::to_string(lineno) +
                        ": expected '<token_id>,<label>' in token order");
    }
    labels.push_back(static_cast<std::size_t>(label));
  }
  return labels;
}

json tune_metrics_json(const TuneResult& r, const TrainConfig& tune,
                       std::uint64_t seed) {
  const TuneMetrics& m = r.metrics;
  json j{{"command", "tune"},
         {"seed", seed},
         {"base_mse", m.base_mse},
         {"step0_mse", m.step0_mse},
         {"identity_gap", std::abs(m.step0_mse - m.base_mse)},
         {"mse", m.mse},
         {"aux_loss", m.aux_loss},
         {"loss", total_loss(m.mse, m.aux_loss, tune.alpha)},
         {"nmi", m.nmi},
         {"nmi_shuffled", m.nmi_shuffled},
         {"loading", m.loading},
         {"max_loading", m.max_loading},
         {"partners", m.partners},
         {"steps", tune.steps}};
  j["coselection_path"] =
      m.coselection ? json("coselection.csv") : json(nullptr);
  return j;
}

int cmd_pretrain(const RunOptions& o, const Common& common, std::ostream& out) {
  const ExperimentConfig cfg = load_run_config(o);
  const fs::path dir = prepare_out(o.out);
  RunManifest manifest = start_manifest("pretrain", o, cfg, dir, common);

  const SyntheticTask task = make_task(cfg.task, cfg.seed);
  Rng init = stream_rng(cfg.seed, Stream::kModelInit);
  ToyModel model =
      make_dense_model(cfg.task.token_dim, cfg.hidden_dim, cfg.activation, init);
  const PretrainResult r =
      pretrain(task, std::move(model), cfg.pretrain, cfg.seed, cfg.eval_tokens);

  write_file(dir / "base.ckpt",
             [&](std::ostream& f) { write_toy_model(f, r.model); });
  write_file(dir / "curves.csv", [&](std::ostream& f) { r.curve.write_csv(f); });
  write_json(dir / "metrics.json",
             {{"command", "pretrain"},
              {"seed", cfg.seed},
              {"eval_mse", r.eval_mse},
              {"final_train_loss",
               r.curve.train.empty() ? json(nullptr) : json(r.curve.train.back())},
              {"final_monitor_mse", r.curve.monitor.empty()
                                        ? json(nullptr)
                                        : json(r.curve.monitor.back())},
              {"steps", cfg.pretrain.steps}});
  finish_manifest(manifest, dir);
  out << "pretrain: eval mse " << format_real(r.eval_mse) << " -> "
      << (dir / "base.ckpt").string() << '\n';
  return kExitOk;
}

int cmd_tune(const RunOptions& o, const Common& common, std::ostream& out) {
  const ExperimentConfig cfg = load_run_config(o);
  const ToyModel base = load_base(o.checkpoint, cfg);
  const fs::path dir = prepare_out(o.out);
  RunManifest manifest = start_manifest("tune", o, cfg, dir, common);

  const SyntheticTask task = make_task(cfg.task, cfg.seed);
  const TuneResult r = moe_tune(task, base, cfg.resolved_moe(), cfg.tune,
                                cfg.seed, cfg.eval_tokens);

  write_file(dir / "tuned.ckpt",
             [&](std::ostream& f) { write_toy_model(f, r.model); });
  write_file(dir / "curves.csv", [&](std::ostream& f) { r.curve.write_csv(f); });
  write_file(dir / "trace.jsonl",
             [&](std::ostream& f) { write_trace_jsonl(f, r.eval_trace); });
  write_file(dir / "labels.csv",
             [&](std::ostream& f) { write_labels_csv(f, r.eval_labels); });
  write_file(dir / "loading.csv", [&](std::ostream& f) {
    write_distribution_csv(f, r.metrics.loading);
  });
  if (r.metrics.coselection) {
    write_file(dir / "coselection.csv", [&](std::ostream& f) {
      write_matrix_csv(f, r.metrics.coselection->entries);
    });
  }
  write_json(dir / "metrics.json", tune_metrics_json(r, cfg.tune, cfg.seed));
  finish_manifest(manifest, dir);
  out << "tune: base mse " << format_real(r.metrics.base_mse) << ", tuned mse "
      << format_real(r.metrics.mse) << ", nmi " << format_real(r.metrics.nmi)
      << '\n';
  return kExitOk;
}

int cmd_ablate(const RunOptions& o, const Common& common, std::ostream& out) {
  const ExperimentConfig cfg = load_run_config(o);
  const ToyModel base = load_base(o.checkpoint, cfg);
  const auto combos = cfg.resolved_combos();
  const fs::path dir = prepare_out(o.out);
  RunManifest manifest = start_manifest("ablate", o, cfg, dir, common);

  const SyntheticTask task = make_task(cfg.task, cfg.seed);
  const auto rows = ablate_tuning_subsets(task, base, cfg.resolved_moe(),
                                          cfg.tune, cfg.seed, combos,
                                          cfg.eval_tokens);
  const Batch eval = eval_set(task, cfg.seed, cfg.eval_tokens);
  const double base_mse = mse(toy_forward(base, eval.tokens).output, eval.targets);

  json table = json::array();
  write_file(dir / "ablation.csv", [&](std::ostream& f) {
    f << "combo,block,head,input_map,mse\n";
    for (const auto& row : rows) {
      const TrainFlags& fl = row.combo.flags;
      f << row.combo.name << ',' << fl.block << ',' << fl.head << ','
        << fl.input_map << ',' << format_real(row.mse) << '\n';
      table.push_back({{"combo", row.combo.name},
                       {"block", fl.block},
                       {"head", fl.head},
                       {"input_map", fl.input_map},
                       {"mse", row.mse}});
    }
  });
  write_json(dir / "metrics.json", {{"command", "ablate"},
                                    {"seed", cfg.seed},
                                    {"base_mse", base_mse},
                                    {"rows", table}});
  finish_manifest(manifest, dir);
  for (const auto& row : rows) {
    out << row.combo.name << ": mse " << format_real(row.mse) << '\n';
  }
  return kExitOk;
}

int cmd_analyze(const AnalyzeOptions& o, const Common& common, std::ostream& out) {
  CoSelectionNorm norm;
  if (o.normalize == "max") {
    norm = CoSelectionNorm::kMaxCount;
  } else if (o.normalize == "tokens") {
    norm = CoSelectionNorm::kTokens;
  } else {
    throw ConfigError("--normalize must be 'max' or 'tokens'");
  }
  std::istringstream trace_in(read_file(o.trace, "trace"));
  RoutingTrace trace;
  try {
    trace = read_trace_jsonl(trace_in);
  } catch (const FormatError& e) {
    throw FormatError(o.trace + ": " + e.what());
  }
  std::vector<std::size_t> labels;
  if (!o.labels.empty()) {
    labels = read_labels_csv(o.labels);
    if (labels.size() != trace.size()) {
      throw ConfigError(o.labels + ": " + std::to_string(labels.size()) +
                        " labels for " + std::to_string(trace.size()) +
                        " trace records");
    }
  }
  const fs::path dir = prepare_out(o.out);
  RunManifest manifest;
  manifest.command = "analyze";
  manifest.seed = o.seed;
  manifest.input_hashes[o.trace] = git_blob_hash_file(o.trace);
  if (!o.labels.empty()) manifest.input_hashes[o.labels] = git_blob_hash_file(o.labels);
  manifest.output_dir = dir.string();
  manifest.started_at = utc_timestamp();
  manifest.resolved = {{"trace", o.trace},      {"labels", o.labels},
                       {"normalize", o.normalize}, {"layers", o.layers},
                       {"seed", o.seed},        {"threads", num_threads()},
                       {"threads_flag", common.threads}};

  const LoadDistribution load = expert_loading(trace);
  write_file(dir / "loading.csv", [&](std::ostream& f) {
    write_distribution_csv(f, load.fractions);
  });
  json metrics{{"command", "analyze"},
               {"tokens", trace.size()},
               {"n_experts", trace.n_experts},
               {"top_k", trace.top_k},
               {"aux_loss", trace.empty() ? json(nullptr)
                                          : json(load_balance_loss(trace))},
               {"loading", load.fractions},
               {"max_loading",
                load.fractions.empty()
                    ? 0.0
                    : *std::max_element(load.fractions.begin(),
                                        load.fractions.end())}};
  if (trace.top_k >= 2) {
    const CoSelectionMatrix m = co_selection(trace, norm);
    write_file(dir / "coselection.csv",
               [&](std::ostream& f) { write_matrix_csv(f, m.entries); });
    bool symmetric = true;
    bool zero_diagonal = true;
    for (std::size_t i = 0; i < m.size; ++i) {
      zero_diagonal = zero_diagonal && m.entries(i, i) == 0.0;
      for (std::size_t j = 0; j < m.size; ++j) {
        symmetric = symmetric && m.entries(i, j) == m.entries(j, i);
      }
    }
    metrics["coselection_path"] = "coselection.csv";
    metrics["coselection_symmetric"] = symmetric;
    metrics["coselection_zero_diagonal"] = zero_diagonal;
    metrics["partners"] = partner_counts(m);
  } else {
    metrics["coselection_path"] = nullptr;
  }
  if (!labels.empty()) {
    Rng shuffle(o.seed);
    metrics["nmi"] = pattern_specialization(trace, labels);
    metrics["nmi_shuffled"] = shuffled_specialization(trace, labels, shuffle);
  }
  if (trace.n_experts > 0) {
    metrics["search_space"] =
        search_space_size(trace.n_experts, trace.top_k, o.layers).str();
  }
  write_json(dir / "metrics.json", metrics);
  finish_manifest(manifest, dir);
  out << "analyze: " << trace.size() << " tokens, " << trace.n_experts
      << " experts, top-" << trace.top_k << '\n';
  return kExitOk;
}

template <typename T>
std::string output_checksum(const Matrix<T>& m) {
  std::string bytes(m.size() * sizeof(T), '\0');
  if (m.size() > 0) std::memcpy(bytes.data(), m.data(), bytes.size());
  return git_blob_hash(bytes);
}

template <typename Fn>
double best_seconds(std::size_t repeats, Fn&& fn) {
  double best = 0.0;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    const std::chrono::duration<double> took =
        std::chrono::steady_clock::now() - start;
    if (r == 0 || took.count() < best) best = took.count();
  }
  return best;
}

template <typename T>
int bench_dispatch(const BenchOptions& o, const Common& common,
                   std::ostream& out) {
  MoeConfig cfg;
  cfg.n_replicas = o.replicas;
  cfg.granularity = o.granularity;
  cfg.token_dim = o.dim;
  cfg.hidden_dim = o.hidden;
  cfg.top_k = o.top_k;
  cfg.seed = mix_seed(o.seed, static_cast<std::uint64_t>(Stream::kRouter));
  try {
    cfg.validate();
  } catch (const DomainError& e) {
    throw ConfigError(std::string("bench-dispatch: ") + e.what());
  }
  if (o.repeats == 0) throw ConfigError("bench-dispatch: --repeats must be >= 1");

  Rng rng(o.seed);
  const FfnParams<double> base =
      FfnParams<double>::random(o.dim, o.hidden, rng, cfg.activation);
  MoeLayer<double> layer64 = expand_supernet(base, cfg);
  // Mild router noise so tokens mix experts from different replicas.
  const double sd = 0.1 / std::sqrt(static_cast<double>(o.dim));
  for (double& v : layer64.router.w.span()) v += rng.normal(0.0, sd);
  const MoeLayer<T> layer = cast_layer<T>(layer64);
  Matrix<T> tokens(o.tokens, o.dim);
  for (T& v : tokens.span()) v = static_cast<T>(rng.normal());

  const std::size_t threads = common.threads > 0 ? common.threads : num_threads();
  DispatchResult<T> loop;
  DispatchResult<T> single;
  DispatchResult<T> multi;
  const double t_loop =
      best_seconds(o.repeats, [&] { loop = dispatch_loop(layer, tokens); });
  const double t_single =
      best_seconds(o.repeats, [&] { single = dispatch_batch(layer, tokens, 1); });
  double t_multi = t_single;
  if (threads > 1) {
    t_multi = best_seconds(
        o.repeats, [&] { multi = dispatch_batch(layer, tokens, threads); });
  } else {
    multi = single;
  }

  const bool identical = loop.output == single.output &&
                         loop.output == multi.output &&
                         loop.trace == single.trace && loop.trace == multi.trace;
  const std::string verdict = identical ? "identical" : "mismatch";
  out << "equivalence: " << verdict << '\n';

  const json shape{{"tokens", o.tokens},       {"dim", o.dim},
                   {"hidden", o.hidden},       {"replicas", o.replicas},
                   {"granularity", o.granularity}, {"top_k", o.top_k},
                   {"seed", o.seed},           {"precision", common.f32 ? "f32" : "f64"}};
  fs::path dir;
  if (!o.out.empty()) {
    dir = prepare_out(o.out);
    write_json(dir / "metrics.json", {{"command", "bench-dispatch"},
                                      {"verdict", verdict},
                                      {"shape", shape},
                                      {"checksum", output_checksum(loop.output)}});
  }
  if (!identical) {
    out << "batched dispatch differs from the per-token loop; timings withheld\n";
    return kExitFailure;
  }

  auto rate = [&](double s) { return s > 0.0 ? o.tokens / s : 0.0; };
  const double speedup = t_multi > 0.0 ? t_loop / t_multi : 0.0;
  const double speedup_1 = t_single > 0.0 ? t_loop / t_single : 0.0;
  char line[160];
  std::snprintf(line, sizeof line, "loop:              %12.1f tokens/s\n",
                rate(t_loop));
  out << line;
  std::snprintf(line, sizeof line, "batched (1 thread):%12.1f tokens/s  x%.2f\n",
                rate(t_single), speedup_1);
  out << line;
  if (threads > 1) {
    std::snprintf(line, sizeof line,
                  "batched (%zu threads):%10.1f tokens/s  x%.2f\n", threads,
                  rate(t_multi), speedup);
    out << line;
  }
  if (!dir.empty()) {
    write_json(dir / "bench.json",
               {{"shape", shape},
                {"threads", threads},
                {"repeats", o.repeats},
                {"loop_seconds", t_loop},
                {"batch_seconds_single_thread", t_single},
                {"batch_seconds", t_multi},
                {"loop_tokens_per_second", rate(t_loop)},
                {"batch_tokens_per_second", rate(t_multi)},
                {"speedup_single_thread", speedup_1},
                {"speedup", speedup}});
  }
  return kExitOk;
}

FfnParams<double> load_ffn_any(const std::string& path) {
  const std::string bytes = read_file(path, "checkpoint");
  std::istringstream in(bytes);
  try {
    if (bytes.rfind("MFFN", 0) == 0) return read_ffn(in);
    if (bytes.rfind("MTOY", 0) == 0) {
      ToyModel m = read_toy_model(in);
      if (m.is_moe()) throw ConfigError(path + ": expected a dense checkpoint");
      return m.dense();
    }
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
  throw FormatError(path + ": not an FFN or toy model checkpoint");
}

template <typename T>
int split_inspect(const SplitOptions& o, const FfnParams<double>& base64,
                  bool f32, std::ostream& out) {
  if (o.granularity == 0 || base64.hidden_dim() % o.granularity != 0) {
    throw ConfigError("split-inspect: granularity " +
                      std::to_string(o.granularity) + " does not divide H = " +
                      std::to_string(base64.hidden_dim()));
  }
  const FfnParams<T> base = cast_params<T>(base64);
  const std::size_t d = base.token_dim();
  const std::size_t h = base.hidden_dim();
  const std::size_t k = o.granularity;
  const std::size_t he = h / k;
  const auto experts = split_ffn(base, k);

  out << "ffn: D=" << d << " H=" << h << " activation=" << to_string(base.activation)
      << " precision=" << (f32 ? "f32" : "f64") << '\n';
  out << "granularity " << k << ": " << k << " experts of hidden size " << he << '\n';
  char line[200];
  for (std::size_t j = 0; j < k; ++j) {
    std::snprintf(line, sizeof line,
                  "  expert %zu: W1 rows [%zu, %zu)  b1 [%zu, %zu)  W2 cols "
                  "[%zu, %zu)  b2 / %zu\n",
                  j, j * he, (j + 1) * he, j * he, (j + 1) * he, j * he,
                  (j + 1) * he, k);
    out << line;
  }

  Rng rng(o.seed);
  double worst = 0.0;
  for (std::size_t t = 0; t < o.tokens; ++t) {
    Vector<T> x(d);
    for (T& v : x) v = static_cast<T>(rng.normal());
    const Vector<T> want = ffn_forward(base, x);
    Vector<T> sum(d);
    for (const auto& e : experts) {
      const Vector<T> y = ffn_forward(e, x);
      axpy(T(1), y.span(), sum.span());
    }
    worst = std::max(worst, static_cast<double>(max_abs_diff<T>(sum.span(), want.span())));
  }
  const double tol = f32 ? 1e-4 : 1e-12;
  std::snprintf(line, sizeof line,
                "identity on %zu tokens: max |sum_j E_j(x) - FFN(x)| = %.3e "
                "(tolerance %.0e) %s\n",
                o.tokens, worst, tol, worst <= tol ? "ok" : "FAILED");
  out << line;
  return worst <= tol ? kExitOk : kExitFailure;
}

int classify(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const IdentityViolation& e) {
    err << "error: " << e.what() << '\n';
    return kExitIdentity;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

void add_common(CLI::App* sub, Common& c, bool f32_supported) {
  sub->add_option("--threads", c.threads,
                  "Worker threads (default: MOEFORGE_THREADS or all cores)");
  sub->add_flag("--f32", c.f32,
                f32_supported ? "Run in 32-bit floats"
                              : "Not supported by this command");
}

void add_run(CLI::App* sub, RunOptions& o, bool needs_checkpoint) {
  sub->add_option("--config", o.config, "Experiment config (JSON)")->required();
  if (needs_checkpoint) {
    sub->add_option("--checkpoint", o.checkpoint, "Dense base checkpoint")
        ->required();
  }
  sub->add_option("--seed", o.seed, "Override the config seed");
  sub->add_option("--out", o.out, "Run directory")->required();
}

}  // namespace

int cmd_gradcheck(const GradcheckOptions& opts, std::ostream& out,
                  std::ostream& err, const BackwardFn& backward) {
  return classify(err, [&] {
    const GradcheckReport report = run_gradcheck(opts, backward);
    report.print(out);
    if (!report.passed()) {
      err << "error: gradient check failed\n";
      return kExitGradcheck;
    }
    return kExitOk;
  });
}

int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err) {
  CLI::App app{"moeforge: MoE layer construction, tuning and analytics"};
  app.require_subcommand(1);
  Common common;
  RunOptions run_opts;
  AnalyzeOptions analyze_opts;
  GradcheckOptions grad_opts;
  std::string grad_out;
  BenchOptions bench_opts;
  SplitOptions split_opts;

  auto* pretrain_cmd = app.add_subcommand("pretrain", "Train the dense base model");
  add_run(pretrain_cmd, run_opts, false);
  add_common(pretrain_cmd, common, false);

  auto* tune_cmd = app.add_subcommand("tune", "Expand a base model and MoE-tune it");
  add_run(tune_cmd, run_opts, true);
  add_common(tune_cmd, common, false);

  auto* ablate_cmd =
      app.add_subcommand("ablate", "MoE-tune with several trainable subsets");
  add_run(ablate_cmd, run_opts, true);
  add_common(ablate_cmd, common, false);

  auto* analyze_cmd = app.add_subcommand("analyze", "Routing statistics of a trace");
  analyze_cmd->add_option("--trace", analyze_opts.trace, "trace.jsonl")->required();
  analyze_cmd->add_option("--labels", analyze_opts.labels, "labels.csv");
  analyze_cmd->add_option("--normalize", analyze_opts.normalize,
                          "Co-selection normalization: max or tokens");
  analyze_cmd->add_option("--layers", analyze_opts.layers,
                          "Layers for the search-space size");
  analyze_cmd->add_option("--seed", analyze_opts.seed, "Label shuffle seed");
  analyze_cmd->add_option("--out", analyze_opts.out, "Output directory")->required();
  add_common(analyze_cmd, common, false);

  auto* grad_cmd =
      app.add_subcommand("gradcheck", "Finite-difference check of the backward pass");
  grad_cmd->add_option("--seed", grad_opts.seed);
  grad_cmd->add_option("--instances", grad_opts.instances);
  grad_cmd->add_option("--max-dim", grad_opts.max_dim);
  grad_cmd->add_option("--max-hidden", grad_opts.max_hidden);
  grad_cmd->add_option("--max-replicas", grad_opts.max_replicas);
  grad_cmd->add_option("--tokens", grad_opts.tokens);
  grad_cmd->add_option("--alpha", grad_opts.alpha, "Balance loss weight");
  grad_cmd->add_option("--out", grad_out, "Write metrics.json here");
  add_common(grad_cmd, common, false);

  auto* bench_cmd = app.add_subcommand(
      "bench-dispatch", "Per-token loop vs batched expert dispatch");
  bench_cmd->add_option("--tokens", bench_opts.tokens);
  bench_cmd->add_option("--dim", bench_opts.dim);
  bench_cmd->add_option("--hidden", bench_opts.hidden);
  bench_cmd->add_option("--replicas", bench_opts.replicas);
  bench_cmd->add_option("--granularity", bench_opts.granularity);
  bench_cmd->add_option("--top-k", bench_opts.top_k);
  bench_cmd->add_option("--seed", bench_opts.seed);
  bench_cmd->add_option("--repeats", bench_opts.repeats);
  bench_cmd->add_option("--out", bench_opts.out, "Write metrics.json and bench.json");
  add_common(bench_cmd, common, true);

  auto* split_cmd = app.add_subcommand(
      "split-inspect", "Show how a checkpoint's FFN is cut into experts");
  split_cmd->add_option("--checkpoint", split_opts.checkpoint)->required();
  split_cmd->add_option("--granularity", split_opts.granularity);
  split_cmd->add_option("--tokens", split_opts.tokens, "Tokens for the identity check");
  split_cmd->add_option("--seed", split_opts.seed);
  add_common(split_cmd, common, true);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  return classify(err, [&]() -> int {
    if (common.f32 && !bench_cmd->parsed() && !split_cmd->parsed()) {
      throw ConfigError(
          "--f32 is supported only by bench-dispatch and split-inspect");
    }
    struct ThreadScope {
      explicit ThreadScope(std::size_t n) { if (n > 0) set_num_threads(n); }
      ~ThreadScope() { set_num_threads(0); }
    } scope(common.threads);
    if (pretrain_cmd->parsed()) return cmd_pretrain(run_opts, common, out);
    if (tune_cmd->parsed()) return cmd_tune(run_opts, common, out);
    if (ablate_cmd->parsed()) return cmd_ablate(run_opts, common, out);
    if (analyze_cmd->parsed()) return cmd_analyze(analyze_opts, common, out);
    if (grad_cmd->parsed()) {
      const GradcheckReport report = run_gradcheck(grad_opts);
      report.print(out);
      if (!grad_out.empty()) {
        const fs::path dir = prepare_out(grad_out);
        json groups = json::array();
        for (const auto& g : report.groups) {
          groups.push_back({{"group", g.name},
                            {"checked", g.checked},
                            {"max_rel_error", g.max_rel_error},
                            {"max_abs_analytic", g.max_abs_analytic}});
        }
        write_json(dir / "metrics.json", {{"command", "gradcheck"},
                                          {"seed", grad_opts.seed},
                                          {"instances", grad_opts.instances},
                                          {"alpha", grad_opts.alpha},
                                          {"passed", report.passed()},
                                          {"groups", groups}});
      }
      if (!report.passed()) {
        err << "error: gradient check failed\n";
        return kExitGradcheck;
      }
      return kExitOk;
    }
    if (bench_cmd->parsed()) {
      return common.f32 ? bench_dispatch<float>(bench_opts, common, out)
                        : bench_dispatch<double>(bench_opts, common, out);
    }
    if (split_cmd->parsed()) {
      const FfnParams<double> base = load_ffn_any(split_opts.checkpoint);
      return common.f32 ? split_inspect<float>(split_opts, base, true, out)
                        : split_inspect<double>(split_opts, base, false, out);
    }
    return kExitFailure;
  });
}

}  // namespace moeforge::cli
