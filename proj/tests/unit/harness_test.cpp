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
#include <limits>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "moeforge/error.hpp"
#include "test_support.hpp"

namespace {

using moeforge::Activation;
using moeforge::Batch;
using moeforge::MoeConfig;
using moeforge::Stage;
using moeforge::SyntheticTask;
using moeforge::TaskSpec;
using moeforge::ToyModel;
using moeforge::TrainConfig;
using moeforge::Vector;
using moeforge::testing::row_of;

MoeConfig moe_config(std::uint64_t seed, std::size_t n = 4, std::size_t k = 2) {
  MoeConfig c;
  c.n_replicas = n;
  c.granularity = k;
  c.top_k = k;
  c.seed = moeforge::mix_seed(seed, static_cast<std::uint64_t>(moeforge::Stream::kRouter));
  return c;
}

TrainConfig pretrain_config(std::size_t steps = 2000) {
  TrainConfig c;
  c.steps = steps;
  c.stage = Stage::kPretrain;
  return c;
}

TrainConfig tune_config(std::size_t steps = 2000) {
  TrainConfig c;
  c.steps = steps;
  c.stage = Stage::kMoeTune;
  c.trainable = {true, true, false};
  return c;
}

struct Pretrained {
  SyntheticTask task;
  ToyModel base;
};

Pretrained pretrained(std::uint64_t seed, TaskSpec spec = {}) {
  Pretrained p{moeforge::make_task(spec, seed), {}};
  moeforge::Rng init = moeforge::stream_rng(seed, moeforge::Stream::kModelInit);
  ToyModel model = moeforge::make_dense_model(spec.token_dim, 32, Activation::kReLU, init);
  p.base = moeforge::pretrain(p.task, std::move(model), pretrain_config(), seed).model;
  return p;
}

// ---------------------------------------------------------------------------
// Task generation

TEST(TaskTest, CentersAreSeparatedAndMapsHaveBoundedGain) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TaskSpec spec;
    const SyntheticTask task = moeforge::make_task(spec, seed);
    ASSERT_EQ(task.maps.size(), spec.n_patterns);
    for (std::size_t a = 0; a < spec.n_patterns; ++a) {
      for (std::size_t b = a + 1; b < spec.n_patterns; ++b) {
        double d2 = 0;
        for (std::size_t c = 0; c < spec.token_dim; ++c) {
          const double diff = task.centers(a, c) - task.centers(b, c);
          d2 += diff * diff;
        }
        EXPECT_GE(std::sqrt(d2), 4 * spec.noise_std);
      }
    }
    moeforge::Rng rng(seed);
    for (const auto& m : task.maps) {
      for (int trial = 0; trial < 50; ++trial) {
        Vector<double> v = moeforge::testing::random_vector(rng, spec.token_dim);
        const double n = std::sqrt(moeforge::dot<double>(v.span(), v.span()));
        v = moeforge::scale(v, 1.0 / n);
        const Vector<double> mv = moeforge::matvec(m, v);
        const double gain = std::sqrt(moeforge::dot<double>(mv.span(), mv.span()));
        EXPECT_GE(gain, spec.min_gain - 1e-9);
        EXPECT_LE(gain, spec.max_gain + 1e-9);
      }
    }
  }
}

TEST(TaskTest, NoiselessTokensSitOnCenters) {
  TaskSpec spec;
  spec.noise_std = 0.0;
  const SyntheticTask task = moeforge::make_task(spec, 3);
  moeforge::Rng rng(4);
  const Batch b = moeforge::generate_batch(task, rng, 50);
  for (std::size_t t = 0; t < 50; ++t) {
    EXPECT_EQ(row_of(b.tokens, t), row_of(task.centers, b.labels[t]));
    const Vector<double> want = moeforge::matvec(task.maps[b.labels[t]], row_of(b.tokens, t));
    EXPECT_EQ(row_of(b.targets, t), want);
  }
}

TEST(TaskTest, LabelHistogramIsUniform) {
  const SyntheticTask task = moeforge::make_task(TaskSpec{}, 5);
  moeforge::Rng rng(6);
  const std::size_t n = 100000;
  const Batch b = moeforge::generate_batch(task, rng, n);
  std::vector<double> counts(task.n_patterns, 0);
  for (std::size_t l : b.labels) counts[l] += 1;
  const double p = 1.0 / task.n_patterns;
  const double sigma = std::sqrt(n * p * (1 - p));
  for (double c : counts) EXPECT_NEAR(c, n * p, 3 * sigma);
}

TEST(TaskTest, ReproducibleUnderSeed) {
  const SyntheticTask t1 = moeforge::make_task(TaskSpec{}, 7);
  const SyntheticTask t2 = moeforge::make_task(TaskSpec{}, 7);
  moeforge::Rng r1(8), r2(8);
  const Batch b1 = moeforge::generate_batch(t1, r1, 100);
  const Batch b2 = moeforge::generate_batch(t2, r2, 100);
  EXPECT_EQ(b1.tokens, b2.tokens);
  EXPECT_EQ(b1.targets, b2.targets);
  EXPECT_EQ(b1.labels, b2.labels);
}

TEST(TaskTest, SpecValidation) {
  TaskSpec spec;
  spec.n_patterns = 0;
  EXPECT_THROW(spec.validate(), moeforge::DomainError);
  spec = {};
  spec.min_gain = 3;
  EXPECT_THROW(spec.validate(), moeforge::DomainError);
  spec = {};
  spec.noise_std = -1;
  EXPECT_THROW(spec.validate(), moeforge::DomainError);
}

// ---------------------------------------------------------------------------
// Toy model

TEST(ToyModelTest, ForwardIsResidualBlockThenHead) {
  moeforge::Rng rng(9);
  ToyModel m = moeforge::make_dense_model(4, 6, Activation::kGELU, rng);
  for (double& v : m.head_w.span()) v += rng.normal(0, 0.3);
  const auto tokens = moeforge::testing::random_matrix(rng, 3, 4);
  const auto f = moeforge::toy_forward(m, tokens);
  for (std::size_t t = 0; t < 3; ++t) {
    const Vector<double> u = moeforge::matvec(m.input_map, row_of(tokens, t));
    const Vector<double> z = moeforge::add(u, moeforge::ffn_forward(m.dense(), u));
    const Vector<double> y = moeforge::add(moeforge::matvec(m.head_w, z), m.head_b);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(f.output(t, c), y[c], 1e-14);
  }
  EXPECT_FALSE(f.trace.has_value());
}

TEST(ToyModelTest, ExpandedModelMatchesDense) {
  moeforge::Rng rng(10);
  const ToyModel dense = moeforge::make_dense_model(8, 32, Activation::kReLU, rng);
  const ToyModel moe = moeforge::expand_model(dense, moe_config(1, 8, 2));
  ASSERT_TRUE(moe.is_moe());
  EXPECT_EQ(moe.moe().experts.size(), 16u);
  const auto tokens = moeforge::testing::random_matrix(rng, 500, 8, 3.0);
  const auto a = moeforge::toy_forward(dense, tokens).output;
  const auto b = moeforge::toy_forward(moe, tokens).output;
  EXPECT_LE(moeforge::max_abs_diff<double>(a.span(), b.span()), 1e-12);
}

TEST(ToyModelTest, DenseLossGradientMatchesFiniteDifferences) {
  moeforge::Rng rng(11);
  TaskSpec spec;
  spec.token_dim = 3;
  spec.center_scale = 1.0;
  const SyntheticTask task = moeforge::make_task(spec, 12);
  ToyModel m = moeforge::make_dense_model(3, 5, Activation::kGELU, rng);
  const Batch b = moeforge::generate_batch(task, rng, 6);
  const auto lg = moeforge::toy_loss_and_grads(m, b, 0.0);
  const auto grads = moeforge::gradient_views(lg.grads);
  auto params = moeforge::parameter_views(m);
  ASSERT_EQ(grads.size(), params.size());
  const double h = 1e-6;
  for (std::size_t v = 0; v < params.size(); ++v) {
    for (std::size_t i = 0; i < params[v].size(); ++i) {
      const double saved = params[v][i];
      params[v][i] = saved + h;
      const double up = moeforge::mse(moeforge::toy_forward(m, b.tokens).output, b.targets);
      params[v][i] = saved - h;
      const double down = moeforge::mse(moeforge::toy_forward(m, b.tokens).output, b.targets);
      params[v][i] = saved;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(grads[v][i], fd, 1e-4 * std::max({std::abs(fd), 1e-3}))
          << "tensor " << v << " index " << i;
    }
  }
}

// ---------------------------------------------------------------------------
// Pretraining

TEST(PretrainTest, SinglePatternIsLearned) {
  TaskSpec spec;
  spec.n_patterns = 1;
  const Pretrained p = pretrained(13, spec);
  const Batch eval = moeforge::eval_set(p.task, 13);
  EXPECT_EQ(eval.tokens.rows(), 10000u);
  EXPECT_LE(moeforge::mse(moeforge::toy_forward(p.base, eval.tokens).output, eval.targets),
            1e-3);
}

TEST(PretrainTest, ZeroLearningRateGivesConstantCurve) {
  const SyntheticTask task = moeforge::make_task(TaskSpec{}, 14);
  moeforge::Rng init(15);
  const ToyModel m = moeforge::make_dense_model(8, 32, Activation::kReLU, init);
  TrainConfig cfg = pretrain_config(50);
  cfg.lr = 0.0;
  const auto r = moeforge::pretrain(task, m, cfg, 14, 1000);
  ASSERT_EQ(r.curve.monitor.size(), 50u);
  for (std::size_t s = 0; s < 50; ++s) {
    EXPECT_EQ(r.curve.monitor[s], r.curve.monitor[0]);
    EXPECT_EQ(r.curve.smoothed[s], r.curve.monitor[0]);
  }
  EXPECT_EQ(r.model, m);
}

TEST(PretrainTest, SeededRunsAreIdentical) {
  const SyntheticTask task = moeforge::make_task(TaskSpec{}, 16);
  moeforge::Rng init(17);
  const ToyModel m = moeforge::make_dense_model(8, 32, Activation::kReLU, init);
  const auto a = moeforge::pretrain(task, m, pretrain_config(200), 16, 500);
  const auto b = moeforge::pretrain(task, m, pretrain_config(200), 16, 500);
  EXPECT_EQ(a.curve.train, b.curve.train);
  EXPECT_EQ(a.curve.monitor, b.curve.monitor);
  EXPECT_EQ(a.model, b.model);
  std::ostringstream ca, cb;
  a.curve.write_csv(ca);
  b.curve.write_csv(cb);
  EXPECT_EQ(ca.str(), cb.str());
  EXPECT_EQ(ca.str().substr(0, ca.str().find('\n')),
            "step,train_loss,monitor_mse,smoothed_mse,aux_loss");
}

TEST(PretrainTest, CurvesAreFiniteAndSmoothedIsMonotone) {
  const SyntheticTask task = moeforge::make_task(TaskSpec{}, 18);
  moeforge::Rng init(19);
  const ToyModel m = moeforge::make_dense_model(8, 32, Activation::kReLU, init);
  const auto r = moeforge::pretrain(task, m, pretrain_config(300), 18, 500);
  for (std::size_t s = 0; s < r.curve.smoothed.size(); ++s) {
    EXPECT_TRUE(std::isfinite(r.curve.train[s]));
    EXPECT_TRUE(std::isfinite(r.curve.monitor[s]));
    EXPECT_LE(r.curve.smoothed[s], r.curve.monitor[s]);
    if (s > 0) {
      EXPECT_LE(r.curve.smoothed[s], r.curve.smoothed[s - 1]);
    }
  }
  EXPECT_LT(r.curve.monitor.back(), r.curve.monitor.front());
}

TEST(PretrainTest, DivergenceIsReported) {
  const SyntheticTask task = moeforge::make_task(TaskSpec{}, 20);
  moeforge::Rng init(21);
  const ToyModel m = moeforge::make_dense_model(8, 32, Activation::kReLU, init);
  TrainConfig cfg = pretrain_config(200);
  cfg.lr = 50.0;
  EXPECT_THROW(moeforge::pretrain(task, m, cfg, 20, 100), moeforge::DivergenceError);
}

TEST(PretrainTest, AdamWAlsoLearns) {
  const SyntheticTask task = moeforge::make_task(TaskSpec{}, 22);
  moeforge::Rng init(23);
  const ToyModel m = moeforge::make_dense_model(8, 32, Activation::kReLU, init);
  TrainConfig cfg = pretrain_config(300);
  cfg.optimizer = moeforge::OptimizerKind::kAdamW;
  cfg.lr = 0.005;
  cfg.weight_decay = 0.01;
  const auto r = moeforge::pretrain(task, m, cfg, 22, 500);
  EXPECT_LT(r.curve.monitor.back(), 0.5 * r.curve.monitor.front());
}

TEST(PretrainTest, ConfigurationErrors) {
  const SyntheticTask task = moeforge::make_task(TaskSpec{}, 24);
  moeforge::Rng init(25);
  const ToyModel m = moeforge::make_dense_model(8, 32, Activation::kReLU, init);
  EXPECT_THROW(moeforge::pretrain(task, m, tune_config(1), 24), moeforge::DomainError);
  TrainConfig bad = pretrain_config(1);
  bad.batch = 0;
  EXPECT_THROW(moeforge::pretrain(task, m, bad, 24), moeforge::DomainError);
  bad = pretrain_config(1);
  bad.lr = -1;
  EXPECT_THROW(bad.validate(), moeforge::DomainError);
  EXPECT_EQ(moeforge::parse_optimizer("adamw"), moeforge::OptimizerKind::kAdamW);
  EXPECT_THROW(moeforge::parse_optimizer("lion"), moeforge::DomainError);
}

// ---------------------------------------------------------------------------
// MoE tuning

TEST(MoeTuneTest, ZeroStepsIsFunctionallyTheBase) {
  const Pretrained p = pretrained(26);
  const auto r = moeforge::moe_tune(p.task, p.base, moe_config(26), tune_config(0), 26);
  EXPECT_NEAR(r.metrics.step0_mse, r.metrics.base_mse, 1e-9);
  EXPECT_NEAR(r.metrics.mse, r.metrics.base_mse, 1e-9);
  const Batch eval = moeforge::eval_set(p.task, 26, 2000);
  const auto a = moeforge::toy_forward(p.base, eval.tokens).output;
  const auto b = moeforge::toy_forward(r.model, eval.tokens).output;
  EXPECT_LE(moeforge::max_abs_diff<double>(a.span(), b.span()), 1e-12);
  EXPECT_TRUE(r.curve.train.empty());
}

TEST(MoeTuneTest, TunedBeatsBaseOnFourPatterns) {
  const Pretrained p = pretrained(27);
  const auto r = moeforge::moe_tune(p.task, p.base, moe_config(27), tune_config(), 27);
  EXPECT_LE(std::abs(r.metrics.step0_mse - r.metrics.base_mse), 1e-9);
  EXPECT_LT(r.metrics.mse, r.metrics.base_mse);
  EXPECT_GT(r.metrics.nmi, r.metrics.nmi_shuffled + 0.2);
  ASSERT_TRUE(r.metrics.coselection.has_value());
  const auto& m = r.metrics.coselection->entries;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    EXPECT_EQ(m(i, i), 0.0);
    for (std::size_t j = 0; j < m.cols(); ++j) EXPECT_EQ(m(i, j), m(j, i));
  }
  EXPECT_EQ(r.metrics.loading.size(), 8u);
  EXPECT_EQ(r.eval_labels.size(), r.eval_trace.size());
  for (double a : r.curve.aux) EXPECT_TRUE(std::isfinite(a));
}

TEST(MoeTuneTest, FrozenPartsAreBitIdentical) {
  const Pretrained p = pretrained(28);
  TrainConfig cfg = tune_config(300);
  cfg.trainable = {true, false, false};
  const auto r = moeforge::moe_tune(p.task, p.base, moe_config(28), cfg, 28, 1000);
  EXPECT_EQ(r.model.input_map, p.base.input_map);
  EXPECT_EQ(r.model.head_w, p.base.head_w);
  EXPECT_EQ(r.model.head_b, p.base.head_b);
  cfg.trainable = {false, true, false};
  const auto h = moeforge::moe_tune(p.task, p.base, moe_config(28), cfg, 28, 1000);
  const ToyModel expanded = moeforge::expand_model(p.base, moe_config(28));
  EXPECT_EQ(h.model.moe(), expanded.moe());
  EXPECT_NE(h.model.head_w, p.base.head_w);
}

TEST(MoeTuneTest, StrongerBalanceWeightDoesNotConcentrateLoad) {
  const Pretrained p = pretrained(29);
  double previous = std::numeric_limits<double>::infinity();
  for (double alpha : {0.0, 0.01, 1.0}) {
    TrainConfig cfg = tune_config();
    cfg.alpha = alpha;
    const auto r = moeforge::moe_tune(p.task, p.base, moe_config(29), cfg, 29);
    EXPECT_LE(r.metrics.max_loading, previous) << "alpha " << alpha;
    previous = r.metrics.max_loading;
  }
}

TEST(MoeTuneTest, BrokenInitIsAHardFailure) {
  Pretrained p = pretrained(30);
  p.base.head_b[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(moeforge::moe_tune(p.task, p.base, moe_config(30), tune_config(1), 30, 100),
               moeforge::IdentityViolation);
}

TEST(MoeTuneTest, RequiresTuneStage) {
  const Pretrained p = pretrained(31);
  EXPECT_THROW(moeforge::moe_tune(p.task, p.base, moe_config(31), pretrain_config(1), 31),
               moeforge::DomainError);
}

// ---------------------------------------------------------------------------
// Ablation

TEST(AblationTest, RowsFollowTheRequestedCombos) {
  const Pretrained p = pretrained(32);
  const auto combos = moeforge::default_ablation_combos();
  ASSERT_EQ(combos.size(), 5u);
  const auto rows = moeforge::ablate_tuning_subsets(p.task, p.base, moe_config(32),
                                                    tune_config(200), 32, combos, 2000);
  ASSERT_EQ(rows.size(), combos.size());
  const Batch eval = moeforge::eval_set(p.task, 32, 2000);
  const double base_mse = moeforge::mse(moeforge::toy_forward(p.base, eval.tokens).output,
                                        eval.targets);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].combo.name, combos[i].name);
    if (rows[i].combo.name == "all-frozen") {
      EXPECT_NEAR(rows[i].mse, base_mse, 1e-9);
    }
  }
  const std::vector<moeforge::AblationCombo> two(combos.begin(), combos.begin() + 2);
  EXPECT_EQ(moeforge::ablate_tuning_subsets(p.task, p.base, moe_config(32),
                                            tune_config(10), 32, two, 500)
                .size(),
            2u);
}

TEST(AblationTest, TrainingTheHeadHelpsInMostSeeds) {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Pretrained p = pretrained(seed);
    const auto all = moeforge::default_ablation_combos();
    const std::vector<moeforge::AblationCombo> pair{all[0], all[1]};
    ASSERT_EQ(pair[0].name, "moe-only");
    ASSERT_EQ(pair[1].name, "moe+head");
    const auto rows = moeforge::ablate_tuning_subsets(p.task, p.base, moe_config(seed),
                                                      tune_config(), seed, pair);
    wins += rows[1].mse <= rows[0].mse;
  }
  EXPECT_GE(wins, 4);
}

}  // namespace
