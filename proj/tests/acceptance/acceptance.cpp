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

// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "cli/cli.hpp"
#include "cli/config.hpp"
#include "cli/gradcheck.hpp"
#include "moeforge/analytics.hpp"
#include "moeforge/ffn.hpp"
#include "moeforge/harness.hpp"
#include "moeforge/moe.hpp"
#include "moeforge/parallel.hpp"
#include "moeforge/rng.hpp"

namespace {

namespace fs = std::filesystem;
using namespace moeforge;

struct Verdict {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Matrix<double> random_tokens(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix<double> m(rows, cols);
  for (double& v : m.span()) v = rng.normal();
  return m;
}

// 1 ------------------------------------------------------------------------

Verdict decomposition_identity() {
  const auto start = Clock::now();
  Rng rng(101);
  const std::size_t ks[] = {2, 4, 8};
  double worst = 0.0;
  for (int n = 0; n < 1000; ++n) {
    const std::size_t d = 16 + rng.index(49);
    const std::size_t k = ks[rng.index(3)];
    // H in [32, 256] and divisible by k.
    const std::size_t h = 32 + 8 * rng.index(29);
    const Activation act = rng.index(2) ? Activation::kGELU : Activation::kReLU;
    const auto ffn = FfnParams<double>::random(d, h, rng, act);
    const Matrix<double> x = random_tokens(rng, 1000, d);
    const Matrix<double> want = ffn_forward_batch(ffn, x);
    Matrix<double> sum(x.rows(), d);
    for (const auto& e : split_ffn(ffn, k)) {
      const Matrix<double> y = ffn_forward_batch(e, x);
      axpy(1.0, y.span(), sum.span());
    }
    worst = std::max(worst, max_abs_diff<double>(sum.span(), want.span()));
  }
  const double took = seconds_since(start);
  return {worst <= 1e-12 && took < 30.0,
          "1000 FFNs x 1000 tokens, max error " + fmt("%.3e", worst) + ", " +
              fmt("%.1f s", took)};
}

// 2 ------------------------------------------------------------------------

Verdict init_identity() {
  const auto start = Clock::now();
  struct Shape {
    std::size_t d, h, n, k;
  };
  const Shape shapes[] = {{16, 64, 8, 2}, {32, 128, 4, 4}, {8, 32, 4, 2}, {24, 96, 16, 8}};
  Rng rng(202);
  double worst = 0.0;
  std::size_t bad_gates = 0;
  std::size_t tokens = 0;
  for (const Shape& s : shapes) {
    MoeConfig cfg;
    cfg.token_dim = s.d;
    cfg.hidden_dim = s.h;
    cfg.n_replicas = s.n;
    cfg.granularity = s.k;
    cfg.top_k = s.k;
    cfg.seed = rng.next_u64();
    const auto base = FfnParams<double>::random(s.d, s.h, rng, Activation::kGELU);
    const MoeLayer<double> layer = expand_supernet(base, cfg);
    const Matrix<double> x = random_tokens(rng, 10000, s.d);
    const auto moe = dispatch_batch(layer, x);
    const Matrix<double> want = ffn_forward_batch(base, x);
    worst = std::max(worst, max_abs_diff<double>(moe.output.span(), want.span()));
    for (const Gate& g : moe.trace.gates) {
      const std::size_t r = g.selected.front() / s.k;
      std::vector<std::size_t> replica(s.k);
      std::iota(replica.begin(), replica.end(), r * s.k);
      bad_gates += g.selected != replica;
    }
    tokens += x.rows();
  }
  const double took = seconds_since(start);
  return {worst <= 1e-12 && bad_gates == 0 && took < 10.0,
          std::to_string(tokens) + " tokens over 4 shapes, max error " +
              fmt("%.3e", worst) + ", " + std::to_string(bad_gates) +
              " gates spanning replicas, " + fmt("%.1f s", took)};
}

// 3 ------------------------------------------------------------------------

Verdict gate_agreement() {
  Rng rng(303);
  std::size_t disagreements = 0;
  std::size_t ties = 0;
  const std::size_t trials = 100000;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t n = 1 + rng.index(32);
    std::vector<double> s(n);
    if (trial % 3 == 0) {
      for (double& v : s) v = static_cast<double>(rng.index(3)) / 4.0;
    } else {
      for (double& v : s) v = rng.uniform();
      if (trial % 3 == 1 && n > 1) s[rng.index(n)] = s[rng.index(n)];
    }
    const std::size_t k = 1 + rng.index(n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    if (k < n && s[order[k - 1]] == s[order[k]]) ++ties;
    order.resize(k);
    std::sort(order.begin(), order.end());
    const Gate g = top_k_gate<double>(std::span<const double>(s), k);
    disagreements += g.selected != order;
  }
  return {disagreements == 0,
          std::to_string(trials) + " vectors (" + std::to_string(ties) +
              " with a tie at the cut), " + std::to_string(disagreements) +
              " disagreements"};
}

// 4 ------------------------------------------------------------------------

Gate hard_gate(const std::vector<std::size_t>& selected, std::size_t kn) {
  Gate g;
  g.selected = selected;
  g.scores.assign(kn, 0.0);
  for (std::size_t e : selected) g.scores[e] = 1.0 / selected.size();
  return g;
}

Verdict balance_extrema() {
  double uniform_worst = 0.0;
  for (std::size_t kn = 1; kn <= 16; ++kn) {
    for (std::size_t top_k = 1; top_k <= kn; ++top_k) {
      RoutingTrace tr{kn, top_k, {}};
      // kN tokens whose selections rotate through all experts equally.
      for (std::size_t t = 0; t < kn; ++t) {
        Gate g;
        for (std::size_t j = 0; j < top_k; ++j) g.selected.push_back((t + j) % kn);
        std::sort(g.selected.begin(), g.selected.end());
        g.scores.assign(kn, 1.0 / kn);
        tr.gates.push_back(g);
      }
      uniform_worst = std::max(uniform_worst, std::abs(load_balance_loss(tr) - 1.0));
    }
  }
  bool brute_ok = true;
  std::size_t routings = 0;
  for (std::size_t kn = 1; kn <= 4; ++kn) {
    for (std::size_t top_k = 1; top_k <= kn; ++top_k) {
      std::vector<std::vector<std::size_t>> subsets;
      for (unsigned mask = 0; mask < (1u << kn); ++mask) {
        if (static_cast<std::size_t>(__builtin_popcount(mask)) != top_k) continue;
        std::vector<std::size_t> sel;
        for (std::size_t e = 0; e < kn; ++e) {
          if (mask & (1u << e)) sel.push_back(e);
        }
        subsets.push_back(sel);
      }
      for (std::size_t t = 1; t <= 3; ++t) {
        std::vector<std::size_t> pick(t, 0);
        double best = 1e300;
        while (true) {
          RoutingTrace tr{kn, top_k, {}};
          for (std::size_t i = 0; i < t; ++i) tr.gates.push_back(hard_gate(subsets[pick[i]], kn));
          best = std::min(best, load_balance_loss(tr));
          ++routings;
          std::size_t i = 0;
          while (i < t && ++pick[i] == subsets.size()) pick[i++] = 0;
          if (i == t) break;
        }
        if (best < 1.0 - 1e-9) brute_ok = false;
        if ((t * top_k) % kn == 0 && std::abs(best - 1.0) > 1e-9) brute_ok = false;
      }
    }
  }
  return {uniform_worst <= 1e-9 && brute_ok,
          "uniform |loss - 1| " + fmt("%.1e", uniform_worst) + "; " +
              std::to_string(routings) + " enumerated routings, minimum 1.0 " +
              (brute_ok ? "confirmed" : "violated")};
}

// 5 ------------------------------------------------------------------------

Verdict gradient_check() {
  const auto start = Clock::now();
  cli::GradcheckOptions opts;
  opts.instances = 50;
  const cli::GradcheckReport with_aux = cli::run_gradcheck(opts);
  opts.alpha = 0.0;
  const cli::GradcheckReport no_aux = cli::run_gradcheck(opts);
  double worst = 0.0;
  for (const auto& g : with_aux.groups) worst = std::max(worst, g.max_rel_error);
  for (const auto& g : no_aux.groups) worst = std::max(worst, g.max_rel_error);
  const double router = std::max(no_aux.group("router.w").max_abs_analytic,
                                 no_aux.group("router.b").max_abs_analytic);
  const double took = seconds_since(start);
  return {with_aux.passed() && no_aux.passed() && router == 0.0 && took < 60.0,
          "50 instances, max rel error " + fmt("%.2e", worst) +
              ", router grads at alpha=0 " + (router == 0.0 ? "exactly 0" : fmt("%.3e", router)) +
              ", " + fmt("%.1f s", took)};
}

// 6 ------------------------------------------------------------------------

MoeLayer<double> random_layer(Rng& rng, std::size_t d, std::size_t h, std::size_t n,
                              std::size_t k, std::size_t top_k) {
  MoeConfig cfg;
  cfg.token_dim = d;
  cfg.hidden_dim = h;
  cfg.n_replicas = n;
  cfg.granularity = k;
  cfg.top_k = top_k;
  cfg.seed = rng.next_u64();
  cfg.activation = rng.index(2) ? Activation::kGELU : Activation::kReLU;
  MoeLayer<double> layer = expand_supernet(FfnParams<double>::random(d, h, rng, cfg.activation), cfg);
  for (auto& e : layer.experts) {
    for (double& v : e.w1.span()) v += rng.normal(0.0, 0.2);
    for (double& v : e.w2.span()) v += rng.normal(0.0, 0.2);
  }
  for (double& v : layer.router.w.span()) v += rng.normal(0.0, 0.5);
  return layer;
}

Verdict dispatch_equivalence() {
  Rng rng(606);
  std::size_t mismatches = 0;
  for (int c = 0; c < 200; ++c) {
    const std::size_t d = 1 + rng.index(24);
    const std::size_t k = std::size_t{1} << rng.index(3);
    const std::size_t h = k * (1 + rng.index(8));
    const std::size_t n = 1 + rng.index(6);
    const std::size_t top_k = 1 + rng.index(n * k);
    const std::size_t t = c == 0 ? 0 : c == 1 ? 1 : rng.index(300);
    const std::size_t threads = 1 + rng.index(4);
    const MoeLayer<double> layer = random_layer(rng, d, h, n, k, top_k);
    const Matrix<double> x = random_tokens(rng, t, d);
    const auto loop = dispatch_loop(layer, x);
    const auto batch = dispatch_batch(layer, x, threads);
    mismatches += !(loop.output == batch.output && loop.trace == batch.trace);
  }

  // Throughput on the reference shape.
  MoeConfig cfg;
  cfg.token_dim = 256;
  cfg.hidden_dim = 1024;
  cfg.n_replicas = 8;
  cfg.granularity = 2;
  cfg.top_k = 2;
  cfg.seed = 7;
  MoeLayer<double> layer = expand_supernet(FfnParams<double>::random(256, 1024, rng), cfg);
  for (double& v : layer.router.w.span()) v += rng.normal(0.0, 0.1 / 16.0);
  const Matrix<double> x = random_tokens(rng, 8192, 256);
  auto t0 = Clock::now();
  const auto loop = dispatch_loop(layer, x);
  const double t_loop = seconds_since(t0);
  t0 = Clock::now();
  const auto batch = dispatch_batch(layer, x, num_threads());
  const double t_batch = seconds_since(t0);
  const bool same = loop.output == batch.output;
  return {mismatches == 0 && same && t_batch < t_loop,
          "200 cases, " + std::to_string(mismatches) + " mismatches; T=8192 loop " +
              fmt("%.0f", 8192 / t_loop) + " tok/s vs batched " +
              fmt("%.0f", 8192 / t_batch) + " tok/s (" + std::to_string(num_threads()) +
              " threads)"};
}

// 7, 8 ---------------------------------------------------------------------

struct TuneSeed {
  double gap = 0.0;
  double base = 0.0;
  double tuned = 0.0;
  double nmi = 0.0;
  double shuffled = 0.0;
  bool coselection_ok = false;
};

std::vector<TuneSeed>& tuning_runs() {
  static std::vector<TuneSeed> runs;
  return runs;
}

bool coselection_well_formed(const RoutingTrace& trace) {
  const Matrix<double> counts = co_selection_counts(trace);
  for (auto norm : {CoSelectionNorm::kMaxCount, CoSelectionNorm::kTokens}) {
    const CoSelectionMatrix m = co_selection(trace, norm);
    for (std::size_t i = 0; i < m.size; ++i) {
      if (m.entries(i, i) != 0.0 || counts(i, i) != 0.0) return false;
      for (std::size_t j = 0; j < m.size; ++j) {
        if (m.entries(i, j) != m.entries(j, i)) return false;
        if (counts(i, j) != counts(j, i)) return false;
      }
    }
  }
  return true;
}

Verdict incremental_tuning() {
  const auto start = Clock::now();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    cli::ExperimentConfig cfg = cli::parse_config(nlohmann::json{
        {"seed", seed},
        {"task", {{"n_patterns", 4}, {"token_dim", 8}}},
        {"model", {{"hidden_dim", 32}}},
        {"moe", {{"n_replicas", 4}, {"granularity", 2}, {"top_k", 2}}},
        {"train", {{"tune", {{"alpha", 0.01}}}}}});
    const SyntheticTask task = make_task(cfg.task, seed);
    Rng init = stream_rng(seed, Stream::kModelInit);
    ToyModel model = make_dense_model(8, 32, cfg.activation, init);
    const ToyModel base = pretrain(task, std::move(model), cfg.pretrain, seed).model;
    const TuneResult r = moe_tune(task, base, cfg.resolved_moe(), cfg.tune, seed);
    TuneSeed s;
    s.gap = std::abs(r.metrics.step0_mse - r.metrics.base_mse);
    s.base = r.metrics.base_mse;
    s.tuned = r.metrics.mse;
    s.nmi = r.metrics.nmi;
    s.shuffled = r.metrics.nmi_shuffled;
    s.coselection_ok = coselection_well_formed(r.eval_trace);
    tuning_runs().push_back(s);
  }
  double worst_gap = 0.0;
  int wins = 0;
  std::string per_seed;
  for (const TuneSeed& s : tuning_runs()) {
    worst_gap = std::max(worst_gap, s.gap);
    wins += s.tuned < s.base;
    per_seed += " " + fmt("%.4f", s.base) + "->" + fmt("%.4f", s.tuned);
  }
  const double took = seconds_since(start);
  return {worst_gap <= 1e-9 && wins >= 4 && took < 300.0,
          "step-0 gap " + fmt("%.1e", worst_gap) + ", tuned < base in " +
              std::to_string(wins) + "/5 seeds (mse" + per_seed + "), " +
              fmt("%.1f s", took)};
}

Verdict specialization() {
  if (tuning_runs().size() != 5) return {false, "tuning runs unavailable"};
  int wins = 0;
  bool well_formed = true;
  std::string per_seed;
  for (const TuneSeed& s : tuning_runs()) {
    wins += s.nmi - s.shuffled >= 0.2;
    well_formed = well_formed && s.coselection_ok;
    per_seed += " " + fmt("%.3f", s.nmi) + "/" + fmt("%.3f", s.shuffled);
  }
  return {wins >= 4 && well_formed,
          "NMI beats shuffled by >= 0.2 in " + std::to_string(wins) +
              "/5 seeds (nmi/shuffled" + per_seed + "), co-selection " +
              (well_formed ? "symmetric with zero diagonal" : "malformed")};
}

// 9 ------------------------------------------------------------------------

BigInt binomial_oracle(std::uint64_t n, std::uint64_t k) {
  // Pascal's triangle, independent of the multiplicative formula.
  std::vector<BigInt> row{1};
  for (std::uint64_t i = 1; i <= n; ++i) {
    std::vector<BigInt> next(i + 1, 1);
    for (std::uint64_t j = 1; j < i; ++j) next[j] = row[j - 1] + row[j];
    row = std::move(next);
  }
  return row[k];
}

Verdict search_space() {
  const BigInt headline = search_space_size(16, 2, 6);
  bool ok = headline.str() == "2985984000000";
  BigInt p = 1;
  for (int i = 0; i < 6; ++i) p *= 120;
  ok = ok && headline == p;
  std::size_t checked = 0;
  for (std::uint64_t n = 1; n <= 40; ++n) {
    for (std::uint64_t l = 1; l <= 12; ++l) {
      ok = ok && search_space_size(n, n, l) == 1;
      const std::uint64_t k = 1 + (n * l) % n;
      BigInt want = 1;
      const BigInt c = binomial_oracle(n, k);
      for (std::uint64_t i = 0; i < l; ++i) want *= c;
      ok = ok && search_space_size(n, k, l) == want;
      checked += 2;
    }
  }
  return {ok, "(16,2,6) = " + headline.str() + " = 120^6; " + std::to_string(checked) +
                  " further cases including (N,N,L) = 1"};
}

// 10 -----------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int cli(std::vector<std::string> args, const std::string& threads) {
  args.push_back("--threads");
  args.push_back(threads);
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

Verdict cli_determinism() {
  const fs::path root = fs::temp_directory_path() /
                        ("moeforge_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  {
    std::ofstream c(root / "config.json");
    c << R"({"seed": 11, "task": {"eval_tokens": 3000},
             "moe": {"n_replicas": 4, "granularity": 2},
             "train": {"pretrain": {"steps": 400}, "tune": {"steps": 300}},
             "ablate": {"combos": ["moe-only", "moe+head", "all-frozen"]}})";
  }
  const std::string cfg = (root / "config.json").string();
  bool ran = true;
  std::size_t compared = 0;
  std::vector<std::string> differing;
  const char* thread_counts[] = {"1", "2", "5"};
  for (const char* th : thread_counts) {
    const fs::path d = root / th;
    ran = ran && cli({"pretrain", "--config", cfg, "--out", (d / "pre").string()}, th) == 0;
    const std::string ckpt = (d / "pre" / "base.ckpt").string();
    ran = ran && cli({"tune", "--config", cfg, "--checkpoint", ckpt, "--out",
                      (d / "tune").string()}, th) == 0;
    ran = ran && cli({"ablate", "--config", cfg, "--checkpoint", ckpt, "--out",
                      (d / "ablate").string()}, th) == 0;
    ran = ran && cli({"analyze", "--trace", (d / "tune" / "trace.jsonl").string(), "--labels",
                      (d / "tune" / "labels.csv").string(), "--out",
                      (d / "analyze").string()}, th) == 0;
    ran = ran && cli({"gradcheck", "--instances", "5", "--out", (d / "grad").string()}, th) == 0;
    ran = ran && cli({"bench-dispatch", "--tokens", "256", "--dim", "32", "--hidden", "64",
                      "--out", (d / "bench").string()}, th) == 0;
  }
  if (ran) {
    const fs::path ref = root / thread_counts[0];
    for (const auto& entry : fs::recursive_directory_iterator(ref)) {
      const std::string ext = entry.path().extension().string();
      if (ext != ".json" && ext != ".csv" && ext != ".jsonl" && ext != ".ckpt") continue;
      const std::string name = entry.path().filename().string();
      if (name == "manifest.json" || name == "bench.json") continue;  // wall-clock data
      const fs::path rel = fs::relative(entry.path(), ref);
      for (const char* th : thread_counts) {
        ++compared;
        if (slurp(entry.path()) != slurp(root / th / rel)) {
          differing.push_back(rel.string() + "@" + th);
        }
      }
    }
  }
  fs::remove_all(root);
  std::string detail = ran ? std::to_string(compared) + " file comparisons across --threads 1/2/5, " +
                                 std::to_string(differing.size()) + " differ"
                           : "a CLI command failed";
  for (const auto& d : differing) detail += " " + d;
  return {ran && differing.empty() && compared >= 30, detail};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria = {
      {"decomposition identity", decomposition_identity},
      {"init identity", init_identity},
      {"gate vs sort oracle", gate_agreement},
      {"load-balance extrema", balance_extrema},
      {"gradient check", gradient_check},
      {"dispatch equivalence and throughput", dispatch_equivalence},
      {"incremental MoE tuning", incremental_tuning},
      {"specialization emergence", specialization},
      {"search-space arithmetic", search_space},
      {"CLI determinism across threads", cli_determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failures += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  " << (i + 1) << ". " << criteria[i].first
              << ": " << v.detail << std::endl;
  }
  std::cout << (criteria.size() - failures) << "/" << criteria.size() << " criteria passed"
            << std::endl;
  return failures == 0 ? 0 : 1;
}
