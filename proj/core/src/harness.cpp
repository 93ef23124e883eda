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

#include "moeforge/harness.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

#include "moeforge/error.hpp"
#include "moeforge/serialize.hpp"

namespace moeforge {

Rng stream_rng(std::uint64_t seed, Stream s) {
  return Rng(mix_seed(seed, static_cast<std::uint64_t>(s)));
}

void TaskSpec::validate() const {
  if (n_patterns == 0 || token_dim == 0) {
    throw DomainError("TaskSpec: n_patterns and token_dim must be >= 1");
  }
  if (!(noise_std >= 0.0) || !(center_scale > 0.0)) {
    throw DomainError("TaskSpec: noise_std must be >= 0 and center_scale > 0");
  }
  if (!(min_gain > 0.0) || !(max_gain >= min_gain) ||
      max_gain / min_gain > 100.0) {
    throw DomainError(
        "TaskSpec: gains must satisfy 0 < min_gain <= max_gain <= 100 "
        "min_gain");
  }
}

namespace {

Matrix<double> random_orthogonal(std::size_t n, Rng& rng) {
  for (;;) {
    Matrix<double> q(n, n);
    for (double& v : q.span()) v = rng.normal();
    bool ok = true;
    // Modified Gram-Schmidt over rows.
    for (std::size_t i = 0; i < n && ok; ++i) {
      auto ri = q.row(i);
      for (std::size_t j = 0; j < i; ++j) {
        const auto rj = q.row(j);
        const double proj = dot<double>(ri, rj);
        for (std::size_t c = 0; c < n; ++c) ri[c] -= proj * rj[c];
      }
      const double norm = std::sqrt(dot<double>(ri, ri));
      if (norm < 1e-8) {
        ok = false;
        break;
      }
      for (double& v : ri) v /= norm;
    }
    if (ok) return q;
  }
}

}  // namespace

SyntheticTask make_task(const TaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng = stream_rng(seed, Stream::kTask);
  const std::size_t m = spec.n_patterns;
  const std::size_t d = spec.token_dim;
  SyntheticTask task;
  task.n_patterns = m;
  task.token_dim = d;
  task.noise_std = spec.noise_std;
  task.min_gain = spec.min_gain;
  task.max_gain = spec.max_gain;
  task.seed = seed;

  const double coord_std = spec.center_scale / std::sqrt(static_cast<double>(d));
  const double min_dist = 4.0 * spec.noise_std;
  bool separated = false;
  for (int attempt = 0; attempt < 1000 && !separated; ++attempt) {
    task.centers = Matrix<double>(m, d);
    for (double& v : task.centers.span()) v = rng.normal(0.0, coord_std);
    separated = true;
    for (std::size_t a = 0; a < m && separated; ++a) {
      for (std::size_t b = a + 1; b < m; ++b) {
        double dist2 = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = task.centers(a, c) - task.centers(b, c);
          dist2 += diff * diff;
        }
        if (std::sqrt(dist2) < min_dist) {
          separated = false;
          break;
        }
      }
    }
  }
  if (!separated) {
    throw DomainError("make_task: could not place separable centers; raise "
                      "center_scale or lower noise_std");
  }

  for (std::size_t p = 0; p < m; ++p) {
    const Matrix<double> u = random_orthogonal(d, rng);
    const Matrix<double> v = random_orthogonal(d, rng);
    std::vector<double> gains(d);
    for (double& g : gains) g = rng.uniform(spec.min_gain, spec.max_gain);
    Matrix<double> map(d, d);
    for (std::size_t r = 0; r < d; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < d; ++i) acc += u(r, i) * gains[i] * v(c, i);
        map(r, c) = acc;
      }
    }
    task.maps.push_back(std::move(map));
  }
  return task;
}

Batch generate_batch(const SyntheticTask& task, Rng& rng, std::size_t size) {
  if (size == 0) throw DomainError("generate_batch: size must be >= 1");
  const std::size_t d = task.token_dim;
  Batch b{Matrix<double>(size, d), Matrix<double>(size, d),
          std::vector<std::size_t>(size)};
  Vector<double> token(d);
  for (std::size_t t = 0; t < size; ++t) {
    const std::size_t label = rng.index(task.n_patterns);
    b.labels[t] = label;
    for (std::size_t c = 0; c < d; ++c) {
      token[c] = task.centers(label, c);
      if (task.noise_std > 0.0) token[c] += rng.normal(0.0, task.noise_std);
    }
    const Vector<double> target = matvec(task.maps[label], token);
    std::copy(token.begin(), token.end(), b.tokens.row(t).begin());
    std::copy(target.begin(), target.end(), b.targets.row(t).begin());
  }
  return b;
}

const FfnParams<double>& ToyModel::dense() const {
  if (is_moe()) throw DomainError("ToyModel: block is a MoE layer, not dense");
  return std::get<0>(block);
}

const MoeLayer<double>& ToyModel::moe() const {
  if (!is_moe()) throw DomainError("ToyModel: block is dense, not a MoE layer");
  return std::get<1>(block);
}

ToyModel make_dense_model(std::size_t token_dim, std::size_t hidden_dim,
                          Activation act, Rng& rng) {
  ToyModel m;
  m.input_map = Matrix<double>::identity(token_dim);
  const double jitter = 0.1 / std::sqrt(static_cast<double>(token_dim));
  for (double& v : m.input_map.span()) v += rng.normal(0.0, jitter);
  m.block = FfnParams<double>::random(token_dim, hidden_dim, rng, act);
  m.head_w = Matrix<double>::identity(token_dim);
  m.head_b = Vector<double>(token_dim);
  return m;
}

ToyModel expand_model(const ToyModel& dense, MoeConfig cfg) {
  const auto& ffn = dense.dense();
  cfg.token_dim = ffn.token_dim();
  cfg.hidden_dim = ffn.hidden_dim();
  cfg.activation = ffn.activation;
  ToyModel out{dense.input_map, expand_supernet(ffn, cfg), dense.head_w,
               dense.head_b};
  return out;
}

ToyForward toy_forward(const ToyModel& model, const Matrix<double>& tokens,
                       std::size_t threads) {
  const std::size_t d = model.token_dim();
  if (tokens.cols() != d) {
    throw ShapeError("toy_forward: tokens are " +
                     shape_string(tokens.rows(), tokens.cols()) +
                     " but model token_dim is " + std::to_string(d));
  }
  ToyForward f;
  f.mapped = affine_rows(tokens, model.input_map, Vector<double>(d));
  Matrix<double> block_out;
  if (model.is_moe()) {
    auto res = dispatch_batch(model.moe(), f.mapped, threads);
    block_out = std::move(res.output);
    f.trace = std::move(res.trace);
  } else {
    block_out = ffn_forward_batch(model.dense(), f.mapped);
  }
  f.hidden = f.mapped;
  for (std::size_t i = 0; i < f.hidden.size(); ++i) {
    f.hidden.data()[i] += block_out.data()[i];
  }
  f.output = affine_rows(f.hidden, model.head_w, model.head_b);
  return f;
}

double mse(const Matrix<double>& output, const Matrix<double>& targets) {
  if (output.rows() != targets.rows() || output.cols() != targets.cols()) {
    throw ShapeError("mse: output " + shape_string(output.rows(), output.cols()) +
                     " vs targets " +
                     shape_string(targets.rows(), targets.cols()));
  }
  if (output.size() == 0) throw DomainError("mse: empty batch");
  double acc = 0.0;
  for (std::size_t i = 0; i < output.size(); ++i) {
    const double diff = output.data()[i] - targets.data()[i];
    acc += diff * diff;
  }
  return acc / static_cast<double>(output.size());
}

LossAndGrads toy_loss_and_grads(const ToyModel& model, const Batch& batch,
                                double alpha, std::size_t threads) {
  const std::size_t d = model.token_dim();
  const std::size_t n = batch.tokens.rows();
  ToyForward f = toy_forward(model, batch.tokens, threads);

  LossAndGrads out;
  out.loss.task = mse(f.output, batch.targets);
  if (f.trace) out.loss.aux = load_balance_loss(*f.trace);
  out.loss.total = total_loss(out.loss.task, out.loss.aux, alpha);

  ToyGrads& g = out.grads;
  g.input_map = Matrix<double>(d, d);
  g.head_w = Matrix<double>(d, d);
  g.head_b = Vector<double>(d);

  // dL/dy = 2 (y - target) / (n d)
  const double scale = 2.0 / static_cast<double>(n * d);
  Matrix<double> d_hidden(n, d);
  for (std::size_t t = 0; t < n; ++t) {
    Vector<double> dy(d);
    for (std::size_t c = 0; c < d; ++c) {
      dy[c] = scale * (f.output(t, c) - batch.targets(t, c));
    }
    add_outer(g.head_w, 1.0, dy.span(), f.hidden.row(t));
    axpy(1.0, dy.span(), g.head_b.span());
    const Vector<double> dz = matvec_transposed(model.head_w, dy);
    std::copy(dz.begin(), dz.end(), d_hidden.row(t).begin());
  }

  // z = u + block(u): du = dz + block^T dz.
  Matrix<double> d_mapped = d_hidden;
  if (model.is_moe()) {
    MoeGrads<double> mg =
        moe_backward_batch(model.moe(), f.mapped, *f.trace, d_hidden, alpha);
    for (std::size_t i = 0; i < d_mapped.size(); ++i) {
      d_mapped.data()[i] += mg.input.data()[i];
    }
    g.block = std::move(mg);
  } else {
    const auto& ffn = model.dense();
    auto fg = FfnGrads<double>::zeros_like(ffn);
    for (std::size_t t = 0; t < n; ++t) {
      const Vector<double> u(
          std::vector<double>(f.mapped.row(t).begin(), f.mapped.row(t).end()));
      const Vector<double> dz(
          std::vector<double>(d_hidden.row(t).begin(), d_hidden.row(t).end()));
      const Vector<double> du = ffn_backward_accumulate(ffn, u, dz, fg);
      axpy(1.0, du.span(), d_mapped.row(t));
    }
    g.block = std::move(fg);
  }
  for (std::size_t t = 0; t < n; ++t) {
    add_outer(g.input_map, 1.0, d_mapped.row(t), batch.tokens.row(t));
  }
  out.trace = std::move(f.trace);
  return out;
}

namespace {

enum class Owner { kInputMap, kBlock, kHead };

struct ParamView {
  std::span<double> values;
  Owner owner;
};

void push_ffn(std::vector<ParamView>& out, FfnParams<double>& p) {
  out.push_back({p.w1.span(), Owner::kBlock});
  out.push_back({p.b1.span(), Owner::kBlock});
  out.push_back({p.w2.span(), Owner::kBlock});
  out.push_back({p.b2.span(), Owner::kBlock});
}

std::vector<ParamView> tagged_views(ToyModel& model) {
  std::vector<ParamView> out;
  out.push_back({model.input_map.span(), Owner::kInputMap});
  if (auto* layer = std::get_if<MoeLayer<double>>(&model.block)) {
    for (auto& e : layer->experts) push_ffn(out, e);
    out.push_back({layer->router.w.span(), Owner::kBlock});
    out.push_back({layer->router.b.span(), Owner::kBlock});
  } else {
    push_ffn(out, std::get<FfnParams<double>>(model.block));
  }
  out.push_back({model.head_w.span(), Owner::kHead});
  out.push_back({model.head_b.span(), Owner::kHead});
  return out;
}

void push_ffn_grads(std::vector<std::span<const double>>& out,
                    const FfnGrads<double>& g) {
  out.push_back(g.w1.span());
  out.push_back(g.b1.span());
  out.push_back(g.w2.span());
  out.push_back(g.b2.span());
}

}  // namespace

std::vector<std::span<double>> parameter_views(ToyModel& model) {
  std::vector<std::span<double>> out;
  for (const auto& v : tagged_views(model)) out.push_back(v.values);
  return out;
}

std::vector<std::span<const double>> gradient_views(const ToyGrads& grads) {
  std::vector<std::span<const double>> out;
  out.push_back(grads.input_map.span());
  if (const auto* mg = std::get_if<MoeGrads<double>>(&grads.block)) {
    for (const auto& e : mg->experts) push_ffn_grads(out, e);
    out.push_back(mg->router.w.span());
    out.push_back(mg->router.b.span());
  } else {
    push_ffn_grads(out, std::get<FfnGrads<double>>(grads.block));
  }
  out.push_back(grads.head_w.span());
  out.push_back(grads.head_b.span());
  return out;
}

std::string to_string(OptimizerKind o) {
  return o == OptimizerKind::kSgd ? "sgd" : "adamw";
}

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adamw") return OptimizerKind::kAdamW;
  throw DomainError("unknown optimizer '" + name + "' (expected sgd|adamw)");
}

void TrainConfig::validate() const {
  // lr = 0 is accepted: it is the degenerate "no update" run.
  if (!(lr >= 0.0) || !(effective_head_lr() >= 0.0)) {
    throw DomainError("TrainConfig: learning rates must be >= 0");
  }
  if (batch == 0) throw DomainError("TrainConfig: batch must be >= 1");
  if (!(alpha >= 0.0)) throw DomainError("TrainConfig: alpha must be >= 0");
  if (!(weight_decay >= 0.0)) {
    throw DomainError("TrainConfig: weight_decay must be >= 0");
  }
  if (monitor_tokens == 0) {
    throw DomainError("TrainConfig: monitor_tokens must be >= 1");
  }
}

void LossCurve::write_csv(std::ostream& out) const {
  out << "step,train_loss,monitor_mse,smoothed_mse,aux_loss\n";
  for (std::size_t s = 0; s < train.size(); ++s) {
    out << s << ',' << format_real(train[s]) << ',' << format_real(monitor[s])
        << ',' << format_real(smoothed[s]) << ',' << format_real(aux[s]) << '\n';
  }
}

namespace {

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(ToyModel& model, const ToyGrads& grads) {
    auto params = tagged_views(model);
    const auto gviews = gradient_views(grads);
    if (cfg_.optimizer == OptimizerKind::kAdamW && m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.values.size(), 0.0);
        v_.emplace_back(p.values.size(), 0.0);
      }
    }
    ++t_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Owner owner = params[i].owner;
      if ((owner == Owner::kInputMap && !cfg_.trainable.input_map) ||
          (owner == Owner::kBlock && !cfg_.trainable.block) ||
          (owner == Owner::kHead && !cfg_.trainable.head)) {
        continue;
      }
      const double lr =
          owner == Owner::kHead ? cfg_.effective_head_lr() : cfg_.lr;
      auto p = params[i].values;
      const auto g = gviews[i];
      if (cfg_.optimizer == OptimizerKind::kSgd) {
        for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
        continue;
      }
      constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g[j];
        v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g[j] * g[j];
        const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + kEps);
        p[j] -= lr * (update + cfg_.weight_decay * p[j]);
      }
    }
  }

 private:
  const TrainConfig& cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

constexpr double kDivergenceThreshold = 1e6;

void check_loss(double loss, std::size_t step) {
  if (!std::isfinite(loss) || loss > kDivergenceThreshold) {
    throw DivergenceError("training diverged at step " + std::to_string(step) +
                          ": loss = " + format_real(loss));
  }
}

LossCurve train_loop(const SyntheticTask& task, ToyModel& model,
                     const TrainConfig& cfg, Rng& data_rng,
                     const Batch& monitor) {
  LossCurve curve;
  Optimizer opt(cfg);
  double best = 0.0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double mon = mse(toy_forward(model, monitor.tokens).output,
                           monitor.targets);
    check_loss(mon, step);
    best = step == 0 ? mon : std::min(best, mon);

    const Batch batch = generate_batch(task, data_rng, cfg.batch);
    const LossAndGrads lg = toy_loss_and_grads(model, batch, cfg.alpha);
    check_loss(lg.loss.total, step);
    for (auto g : gradient_views(lg.grads)) {
      if (!all_finite(g)) {
        throw DivergenceError("non-finite gradient at step " +
                              std::to_string(step));
      }
    }
    curve.train.push_back(lg.loss.total);
    curve.monitor.push_back(mon);
    curve.smoothed.push_back(best);
    curve.aux.push_back(lg.loss.aux);
    opt.step(model, lg.grads);
  }
  return curve;
}

Batch monitor_set(const SyntheticTask& task, std::uint64_t seed,
                  std::size_t size) {
  Rng rng = stream_rng(seed, Stream::kMonitor);
  return generate_batch(task, rng, size);
}

}  // namespace

Batch eval_set(const SyntheticTask& task, std::uint64_t seed,
               std::size_t size) {
  Rng rng = stream_rng(seed, Stream::kEval);
  return generate_batch(task, rng, size);
}

PretrainResult pretrain(const SyntheticTask& task, ToyModel model,
                        const TrainConfig& cfg, std::uint64_t seed,
                        std::size_t eval_tokens) {
  cfg.validate();
  if (cfg.stage != Stage::kPretrain) {
    throw DomainError("pretrain: TrainConfig.stage must be Pretrain");
  }
  if (model.is_moe()) throw DomainError("pretrain: model must be dense");
  Rng data = stream_rng(seed, Stream::kPretrainData);
  const Batch monitor = monitor_set(task, seed, cfg.monitor_tokens);
  PretrainResult res;
  res.curve = train_loop(task, model, cfg, data, monitor);
  const Batch eval = eval_set(task, seed, eval_tokens);
  res.eval_mse = mse(toy_forward(model, eval.tokens).output, eval.targets);
  check_loss(res.eval_mse, cfg.steps);
  res.model = std::move(model);
  return res;
}

TuneResult moe_tune(const SyntheticTask& task, const ToyModel& base,
                    MoeConfig moe_cfg, const TrainConfig& cfg,
                    std::uint64_t seed, std::size_t eval_tokens) {
  cfg.validate();
  if (cfg.stage != Stage::kMoeTune) {
    throw DomainError("moe_tune: TrainConfig.stage must be MoeTune");
  }
  const Batch eval = eval_set(task, seed, eval_tokens);
  TuneResult res;
  res.metrics.base_mse = mse(toy_forward(base, eval.tokens).output, eval.targets);

  ToyModel model = expand_model(base, moe_cfg);
  res.metrics.step0_mse =
      mse(toy_forward(model, eval.tokens).output, eval.targets);
  const double gap = std::abs(res.metrics.step0_mse - res.metrics.base_mse);
  if (!(gap <= kStepZeroTolerance)) {
    throw IdentityViolation("moe_tune: step-0 eval mse " +
                            format_real(res.metrics.step0_mse) +
                            " differs from base " +
                            format_real(res.metrics.base_mse) + " by " +
                            format_real(gap));
  }

  Rng data = stream_rng(seed, Stream::kTuneData);
  const Batch monitor = monitor_set(task, seed, cfg.monitor_tokens);
  res.curve = train_loop(task, model, cfg, data, monitor);

  ToyForward f = toy_forward(model, eval.tokens);
  TuneMetrics& m = res.metrics;
  m.mse = mse(f.output, eval.targets);
  check_loss(m.mse, cfg.steps);
  res.eval_trace = std::move(*f.trace);
  res.eval_labels = eval.labels;
  m.aux_loss = load_balance_loss(res.eval_trace);
  m.nmi = pattern_specialization(res.eval_trace, res.eval_labels);
  Rng shuffle = stream_rng(seed, Stream::kShuffle);
  m.nmi_shuffled = shuffled_specialization(res.eval_trace, res.eval_labels, shuffle);
  m.loading = expert_loading(res.eval_trace).fractions;
  m.max_loading = *std::max_element(m.loading.begin(), m.loading.end());
  if (res.eval_trace.top_k >= 2) {
    m.coselection = co_selection(res.eval_trace);
    m.partners = partner_counts(*m.coselection);
  }
  res.model = std::move(model);
  return res;
}

std::vector<AblationCombo> default_ablation_combos() {
  return {
      {"moe-only", {true, false, false}},
      {"moe+head", {true, true, false}},
      {"moe+frozen-map", {true, false, true}},
      {"all", {true, true, true}},
      {"all-frozen", {false, false, false}},
  };
}

std::vector<AblationRow> ablate_tuning_subsets(
    const SyntheticTask& task, const ToyModel& base, const MoeConfig& moe_cfg,
    const TrainConfig& cfg, std::uint64_t seed,
    const std::vector<AblationCombo>& combos, std::size_t eval_tokens) {
  std::vector<AblationRow> rows;
  rows.reserve(combos.size());
  for (const auto& combo : combos) {
    TrainConfig c = cfg;
    c.trainable = combo.flags;
    const TuneResult r = moe_tune(task, base, moe_cfg, c, seed, eval_tokens);
    rows.push_back({combo, r.metrics.mse});
  }
  return rows;
}

namespace {
constexpr std::uint32_t kToyFormatVersion = 1;
}

void write_toy_model(std::ostream& out, const ToyModel& model) {
  BinaryWriter w(out);
  const std::size_t d = model.token_dim();
  w.magic("MTOY");
  w.u32(kToyFormatVersion);
  w.u32(model.is_moe() ? 1u : 0u);
  w.u64(d);
  w.reals(model.input_map.span());
  w.reals(model.head_w.span());
  w.reals(model.head_b.span());
  if (model.is_moe()) {
    write_moe(w, model.moe());
  } else {
    write_ffn(w, model.dense());
  }
}

ToyModel read_toy_model(std::istream& in) {
  BinaryReader r(in);
  r.expect_magic("MTOY");
  const std::uint32_t version = r.u32();
  if (version != kToyFormatVersion) {
    throw FormatError("toy model version " + std::to_string(version) +
                      " is not supported");
  }
  const std::uint32_t kind = r.u32();
  if (kind > 1) throw FormatError("toy model: unknown block kind");
  const std::size_t d = r.dim("token_dim");
  ToyModel m;
  m.input_map = Matrix<double>(d, d);
  m.head_w = Matrix<double>(d, d);
  m.head_b = Vector<double>(d);
  r.reals(m.input_map.span());
  r.reals(m.head_w.span());
  r.reals(m.head_b.span());
  if (kind == 1) {
    m.block = read_moe(r);
  } else {
    m.block = read_ffn(r);
  }
  const std::size_t block_d =
      kind == 1 ? m.moe().config.token_dim : m.dense().token_dim();
  if (block_d != d) {
    throw FormatError("toy model: block token_dim " + std::to_string(block_d) +
                      " does not match " + std::to_string(d));
  }
  return m;
}

}  // namespace moeforge
