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

#include "cli/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <ostream>

#include "moeforge/error.hpp"

namespace moeforge::cli {

namespace {

// Position of one parameter tensor inside parameter_views().
struct ViewInfo {
  std::size_t group = 0;
  std::optional<std::size_t> expert;
  std::size_t cols = 1;
};

std::vector<ViewInfo> view_layout(const ToyModel& model) {
  const std::size_t d = model.token_dim();
  std::vector<ViewInfo> out;
  out.push_back({0, std::nullopt, d});
  const MoeLayer<double>& layer = model.moe();
  for (std::size_t e = 0; e < layer.experts.size(); ++e) {
    const std::size_t h = layer.experts[e].hidden_dim();
    out.push_back({1, e, d});
    out.push_back({2, e, 1});
    out.push_back({3, e, h});
    out.push_back({4, e, 1});
  }
  out.push_back({5, std::nullopt, d});
  out.push_back({6, std::nullopt, 1});
  out.push_back({7, std::nullopt, d});
  out.push_back({8, std::nullopt, 1});
  return out;
}

Vector<double> row_vector(std::span<const double> row) {
  return Vector<double>(std::vector<double>(row.begin(), row.end()));
}

void jitter(std::span<double> values, Rng& rng, double sd) {
  for (double& v : values) v += rng.normal(0.0, sd);
}

bool far_from_kinks(const ToyModel& model, const Batch& batch, double margin) {
  const ToyForward f = toy_forward(model, batch.tokens, 1);
  const MoeLayer<double>& layer = model.moe();
  const std::size_t top_k = layer.config.top_k;
  for (std::size_t t = 0; t < batch.tokens.rows(); ++t) {
    const Vector<double> u = row_vector(f.mapped.row(t));
    Vector<double> logits = router_logits(layer.router, u);
    std::vector<double> sorted(logits.begin(), logits.end());
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    if (top_k < sorted.size() && sorted[top_k - 1] - sorted[top_k] < margin) {
      return false;
    }
    if (layer.config.activation != Activation::kReLU) continue;
    for (const auto& e : layer.experts) {
      const Vector<double> pre = add(matvec(e.w1, u), e.b1);
      for (double p : pre) {
        if (std::abs(p) < margin) return false;
      }
    }
  }
  return true;
}

double objective(const ToyModel& model, const Batch& batch, double alpha) {
  const ToyForward f = toy_forward(model, batch.tokens, 1);
  return mse(f.output, batch.targets) + alpha * load_balance_loss(*f.trace);
}

}  // namespace

BackwardFn default_backward() {
  return [](const ToyModel& m, const Batch& b, double alpha) {
    return toy_loss_and_grads(m, b, alpha, 1).grads;
  };
}

void GradcheckOptions::validate() const {
  if (instances == 0) throw ConfigError("gradcheck: instances must be >= 1");
  if (max_dim < 2 || max_dim > 64) {
    throw ConfigError("gradcheck: max dim must be in [2, 64]");
  }
  if (max_hidden < 1 || max_hidden > 64) {
    throw ConfigError("gradcheck: max hidden must be in [1, 64]");
  }
  if (max_replicas == 0) throw ConfigError("gradcheck: replicas must be >= 1");
  if (tokens == 0) throw ConfigError("gradcheck: tokens must be >= 1");
  if (!(alpha >= 0.0)) throw ConfigError("gradcheck: alpha must be >= 0");
  if (!(step > 0.0)) throw ConfigError("gradcheck: step must be > 0");
}

const std::vector<std::string>& group_names() {
  static const std::vector<std::string> names = {
      "input_map", "expert.w1", "expert.b1", "expert.w2", "expert.b2",
      "router.w",  "router.b",  "head.w",    "head.b"};
  return names;
}

bool GradcheckReport::passed() const {
  return std::all_of(groups.begin(), groups.end(), [&](const GroupReport& g) {
    return g.max_rel_error <= tolerance;
  });
}

const GroupReport& GradcheckReport::group(const std::string& name) const {
  for (const auto& g : groups) {
    if (g.name == name) return g;
  }
  throw Error("gradcheck: no group named " + name);
}

void GradcheckReport::print(std::ostream& out) const {
  char line[256];
  out << "gradcheck: " << instances << " instances, tolerance "
      << format_real(tolerance) << '\n';
  for (const auto& g : groups) {
    std::snprintf(line, sizeof line,
                  "  %-10s  checked %7zu  max rel error %.3e  max |grad| %.3e",
                  g.name.c_str(), g.checked, g.max_rel_error,
                  g.max_abs_analytic);
    out << line;
    if (g.max_abs_analytic == 0.0) out << "  (exactly 0)";
    out << '\n';
  }
  const auto worst = std::max_element(
      groups.begin(), groups.end(), [](const GroupReport& a, const GroupReport& b) {
        return a.max_rel_error < b.max_rel_error;
      });
  if (worst != groups.end() && worst->checked > 0) {
    const Offender& o = worst->worst;
    out << "  worst: " << worst->name << " instance " << o.instance;
    if (o.expert) out << " expert " << *o.expert;
    out << " at (" << o.row << ", " << o.col << ")  analytic "
        << format_real(o.analytic) << "  numeric " << format_real(o.numeric)
        << '\n';
  }
  out << (passed() ? "PASS" : "FAIL") << '\n';
}

GradcheckInstance make_gradcheck_instance(const GradcheckOptions& opts,
                                          std::size_t index) {
  Rng rng(mix_seed(opts.seed, index));
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const std::size_t d = 2 + rng.index(opts.max_dim - 1);
    std::vector<std::size_t> ks;
    for (std::size_t k : {1, 2, 4}) {
      if (k <= opts.max_hidden) ks.push_back(k);
    }
    const std::size_t k = ks[rng.index(ks.size())];
    const std::size_t h = k * (1 + rng.index(opts.max_hidden / k));
    const std::size_t n = 1 + rng.index(opts.max_replicas);
    const Activation act = rng.index(2) == 0 ? Activation::kReLU : Activation::kGELU;

    TaskSpec spec;
    spec.n_patterns = 3;
    spec.token_dim = d;
    spec.center_scale = 1.0;
    const SyntheticTask task = make_task(spec, rng.next_u64());
    Batch batch = generate_batch(task, rng, opts.tokens);

    ToyModel dense = make_dense_model(d, h, act, rng);
    jitter(dense.head_w.span(), rng, 0.1);
    jitter(dense.head_b.span(), rng, 0.1);

    MoeConfig cfg;
    cfg.n_replicas = n;
    cfg.granularity = k;
    cfg.token_dim = d;
    cfg.hidden_dim = h;
    cfg.top_k = 1 + rng.index(n * k);
    cfg.seed = rng.next_u64();
    cfg.activation = act;
    ToyModel model = expand_model(dense, cfg);
    // Break the replica symmetry so every parameter gets its own gradient.
    auto& layer = std::get<MoeLayer<double>>(model.block);
    for (auto& e : layer.experts) {
      jitter(e.w1.span(), rng, 0.1);
      jitter(e.b1.span(), rng, 0.1);
      jitter(e.w2.span(), rng, 0.1);
      jitter(e.b2.span(), rng, 0.1);
    }
    jitter(layer.router.w.span(), rng, 0.5);
    jitter(layer.router.b.span(), rng, 0.5);

    if (far_from_kinks(model, batch, opts.margin)) {
      return {std::move(model), std::move(batch)};
    }
  }
  throw Error("gradcheck: could not draw an instance away from kinks");
}

GradcheckReport run_gradcheck(const GradcheckOptions& opts,
                              const BackwardFn& backward) {
  opts.validate();
  GradcheckReport report;
  report.instances = opts.instances;
  report.tolerance = opts.tolerance;
  for (const auto& name : group_names()) {
    GroupReport g;
    g.name = name;
    report.groups.push_back(g);
  }

  for (std::size_t i = 0; i < opts.instances; ++i) {
    GradcheckInstance inst = make_gradcheck_instance(opts, i);
    const ToyGrads grads = backward(inst.model, inst.batch, opts.alpha);
    const auto layout = view_layout(inst.model);
    const auto analytic = gradient_views(grads);
    auto params = parameter_views(inst.model);
    const double floor =
        opts.floor *
        std::max(1.0, std::abs(objective(inst.model, inst.batch, opts.alpha)));
    if (analytic.size() != params.size()) {
      throw ShapeError("gradcheck: gradient has " +
                       std::to_string(analytic.size()) + " tensors, expected " +
                       std::to_string(params.size()));
    }
    for (std::size_t v = 0; v < params.size(); ++v) {
      if (analytic[v].size() != params[v].size()) {
        throw ShapeError("gradcheck: gradient tensor " + std::to_string(v) +
                         " has the wrong size");
      }
      GroupReport& g = report.groups[layout[v].group];
      for (std::size_t j = 0; j < params[v].size(); ++j) {
        double& p = params[v][j];
        const double saved = p;
        p = saved + opts.step;
        const double up = objective(inst.model, inst.batch, opts.alpha);
        p = saved - opts.step;
        const double down = objective(inst.model, inst.batch, opts.alpha);
        p = saved;
        const double numeric = (up - down) / (2.0 * opts.step);
        const double a = analytic[v][j];
        const double denom =
            std::max({std::abs(a), std::abs(numeric), floor});
        double err = std::abs(a - numeric) / denom;
        if (!std::isfinite(err)) err = std::numeric_limits<double>::infinity();
        ++g.checked;
        g.max_abs_analytic = std::max(g.max_abs_analytic, std::abs(a));
        if (err > g.max_rel_error || g.checked == 1) {
          g.max_rel_error = err;
          g.worst = {i, layout[v].expert, j / layout[v].cols,
                     j % layout[v].cols, a, numeric};
        }
      }
    }
  }
  return report;
}

}  // namespace moeforge::cli
