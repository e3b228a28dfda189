#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "support.hpp"
#include "theorylab/trainer.hpp"

using namespace theorylab;

namespace {

std::shared_ptr<const TrajectoryTable> table_for(const Environment& env) {
  return std::make_shared<const TrajectoryTable>(enumerate_trajectories(env.dag, env.rewards));
}

std::string csv_of(const RunRecord& r) {
  std::ostringstream out;
  write_csv(out, r);
  return out.str();
}

}  // namespace

TEST(Schedule, Examples) {
  EXPECT_DOUBLE_EQ(lr(schedule::inv_sqrt, 0.1, 4), 0.05);
  EXPECT_DOUBLE_EQ(lr(schedule::two_thirds, 0.1, 8), 0.025);
  EXPECT_DOUBLE_EQ(lr(schedule::constant, 0.3, 999), 0.3);
  try {
    lr(schedule::inv_sqrt, 0.1, 0);
    FAIL();
  } catch (const error& e) {
    EXPECT_EQ(e.kind(), error_kind::invalid_argument);
  }
  EXPECT_EQ(parse_schedule("two_thirds"), schedule::two_thirds);
  EXPECT_THROW(parse_schedule("cosine"), error);
}

TEST(EffectiveReward, NoNoiseIsExact) {
  const auto env = build_v2();
  rng_t rng(1);
  const auto r = effective_reward(env.rewards, {}, 2, rng);
  EXPECT_EQ(r.value, 3.0);
  EXPECT_FALSE(r.clamped);
}

TEST(EffectiveReward, UniformMoments) {
  const auto env = build_chain(1, 1.0);
  NoiseConfig noise{noise_kind::uniform, 0.0003, std::nullopt, resample_mode::per_draw};
  rng_t rng(derive_stream(5, 1));
  const std::size_t n = 100000;
  double sum = 0.0, sq = 0.0;
  std::vector<double> xs;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = effective_reward(env.rewards, noise, 1, rng).value;
    EXPECT_LE(std::abs(x - 1.0), std::sqrt(3 * 0.0003) + 1e-15);
    xs.push_back(x);
    sum += x;
  }
  const double mean = sum / n;
  for (double x : xs) sq += (x - mean) * (x - mean);
  const double var = sq / (n - 1);
  EXPECT_NEAR(mean, 1.0, 0.001);
  EXPECT_NEAR(var, 0.0003, 0.15 * 0.0003);
}

TEST(EffectiveReward, GaussianMoments) {
  const auto env = build_chain(1, 5.0);
  NoiseConfig noise{noise_kind::gaussian, 0.01, std::nullopt, resample_mode::per_draw};
  rng_t rng(derive_stream(6, 1));
  const std::size_t n = 100000;
  double sum = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = effective_reward(env.rewards, noise, 1, rng).value - 5.0;
    sum += x;
    sq += x * x;
  }
  EXPECT_NEAR(sum / n, 0.0, 4 * 0.1 / std::sqrt(n));
  EXPECT_NEAR(sq / n, 0.01, 0.05 * 0.01);
}

TEST(EffectiveReward, FloorBinds) {
  const auto env = build_chain(1, 0.05);
  NoiseConfig noise{noise_kind::gaussian, 100.0, 0.05, resample_mode::per_draw};
  rng_t rng(3);
  RewardNoise source(env.rewards, noise, rng);
  std::size_t clamped = 0;
  for (int i = 0; i < 1000; ++i) {
    const double r = source(1);
    EXPECT_GE(r, 0.05);
    clamped += r == 0.05;
  }
  EXPECT_GT(clamped, 300u);
  EXPECT_EQ(source.clamps(), clamped);
  EXPECT_NEAR(source.clamp_rate(), clamped / 1000.0, 1e-15);
}

TEST(EffectiveReward, FixedRealizationReused) {
  const auto env = build_grid(2, 2, grid_reward::uniform);
  NoiseConfig noise{noise_kind::uniform, 0.01, std::nullopt, resample_mode::fixed_realization};
  RewardNoise source(env.rewards, noise, rng_t(4));
  for (state_id t : env.rewards.terminals()) {
    const double first = source(t);
    EXPECT_NE(first, 1.0);
    for (int i = 0; i < 5; ++i) EXPECT_EQ(source(t), first);
  }
}

TEST(Checkpoints, GeometricAndFixed) {
  EXPECT_EQ(checkpoint_steps(10, 0), (std::vector<std::size_t>{1, 2, 4, 8, 10}));
  EXPECT_EQ(checkpoint_steps(8, 0), (std::vector<std::size_t>{1, 2, 4, 8}));
  EXPECT_EQ(checkpoint_steps(10, 3), (std::vector<std::size_t>{3, 6, 9, 10}));
  EXPECT_EQ(checkpoint_steps(1, 5), (std::vector<std::size_t>{1}));
}

TEST(Train, TbOnV2RecoversTarget) {
  const auto env = build_v2();
  TrainConfig config;
  config.obj = objective::tb;
  config.eta0 = 0.5;
  config.steps = 20000;
  config.sampling = sampling_mode::on_policy;
  config.seed = 1;
  const auto record = train(env.dag, env.rewards, config, {}, 1000, table_for(env));
  EXPECT_LE(record.final_kl, 1e-3);
}

TEST(Train, FmOnChainMatchesOracle) {
  const auto env = build_chain(4, 2.0);
  TrainConfig config;
  config.obj = objective::fm;
  config.sched = schedule::constant;
  config.eta0 = 0.1;
  config.steps = 10000;
  config.sampling = sampling_mode::exhaustive;
  const auto oracle = min_norm_flow(build_incidence(env.dag, env.rewards));
  for (double f : oracle) EXPECT_NEAR(f, 2.0, 1e-12);
  const auto record = train(env.dag, env.rewards, config, {}, 0, nullptr, oracle);
  EXPECT_LE(record.final_l1_flow_err, 1e-2);
}

TEST(Train, ZeroStepSizeKeepsInit) {
  const auto env = build_grid(2, 2, grid_reward::corner);
  for (objective obj : {objective::fm, objective::db, objective::tb}) {
    TrainConfig config;
    config.obj = obj;
    config.eta0 = 0.0;
    config.steps = 64;
    config.sampling = sampling_mode::exhaustive;
    config.init = init_kind::uniform;
    config.seed = 9;
    Trainer trainer(env.dag, env.rewards, config, {}, table_for(env));
    const LogFlowParams init = trainer.params();
    trainer.set_checkpoints(checkpoint_steps(config.steps, 1));
    for (std::size_t i = 0; i < config.steps; ++i) {
      trainer.step();
      EXPECT_EQ(trainer.params(), init);
    }
    const auto& rows = trainer.record().rows;
    ASSERT_EQ(rows.size(), 64u);
    for (const auto& r : rows) {
      EXPECT_EQ(r.eta, 0.0);
      EXPECT_EQ(r.loss, rows[0].loss);
      EXPECT_EQ(r.grad_norm, rows[0].grad_norm);
      EXPECT_EQ(r.min_grad_sq, rows[0].min_grad_sq);
      EXPECT_EQ(r.l1_flow_err, rows[0].l1_flow_err);
      EXPECT_EQ(r.tv, rows[0].tv);
      EXPECT_EQ(r.kl, rows[0].kl);
      EXPECT_EQ(r.g_est, rows[0].g_est);
    }
  }
}

TEST(Train, Deterministic) {
  const auto env = build_grid(2, 3, grid_reward::corner);
  for (auto mode : {sampling_mode::on_policy, sampling_mode::backward, sampling_mode::uniform_traj}) {
    TrainConfig config;
    config.obj = objective::db;
    config.sched = schedule::inv_sqrt;
    config.eta0 = 0.2;
    config.steps = 300;
    config.batch_size = 4;
    config.sampling = mode;
    config.seed = 77;
    config.init = init_kind::uniform;
    NoiseConfig noise{noise_kind::gaussian, 0.001, std::nullopt, resample_mode::per_draw};
    const auto a = train(env.dag, env.rewards, config, noise, 10, table_for(env));
    const auto b = train(env.dag, env.rewards, config, noise, 10, table_for(env));
    EXPECT_EQ(a, b);
    EXPECT_EQ(csv_of(a), csv_of(b));
    config.seed = 78;
    EXPECT_NE(csv_of(train(env.dag, env.rewards, config, noise, 10, table_for(env))), csv_of(a));
  }
}

TEST(Train, NoNoiseEqualsZeroVarianceFixedRealization) {
  const auto env = build_v2();
  TrainConfig config;
  config.eta0 = 0.3;
  config.steps = 200;
  config.seed = 4;
  const NoiseConfig zero{noise_kind::uniform, 0.0, std::nullopt, resample_mode::fixed_realization};
  EXPECT_EQ(train(env.dag, env.rewards, config, {}, 7, table_for(env)),
            train(env.dag, env.rewards, config, zero, 7, table_for(env)));
}

TEST(Train, RowInvariants) {
  std::mt19937_64 gen(10);
  const auto env = build_grid(2, 3, grid_reward::center);
  for (objective obj : {objective::fm, objective::db, objective::tb}) {
    TrainConfig config;
    config.obj = obj;
    config.sched = schedule::inv_sqrt;
    config.eta0 = 0.1;
    config.steps = 500;
    config.batch_size = 2;
    config.seed = gen();
    config.init = init_kind::uniform;
    const auto record = train(env.dag, env.rewards, config, {}, 0, table_for(env));
    for (std::size_t i = 0; i < record.rows.size(); ++i) {
      const auto& r = record.rows[i];
      if (i > 0) {
        EXPECT_LT(record.rows[i - 1].t, r.t);
        EXPECT_LE(r.min_grad_sq, record.rows[i - 1].min_grad_sq);
        EXPECT_GE(r.g_est, record.rows[i - 1].g_est);
      }
      EXPECT_LE(r.min_grad_sq, r.grad_norm * r.grad_norm * (1 + 1e-15));
      EXPECT_LE(r.tv, std::sqrt(r.kl / 2) + 1e-12);
      EXPECT_EQ(r.k_est, 4.0);
    }
  }
}

TEST(Train, TbGradientVanishesAtOptimum) {
  const auto env = build_v2();
  TrainConfig config;
  config.sampling = sampling_mode::exhaustive;
  config.init = init_kind::explicit_params;
  config.init_params = LogFlowParams::from_values({std::log(0.25), std::log(0.75)}, std::log(4.0));
  config.steps = 1;
  Trainer trainer(env.dag, env.rewards, config, {}, table_for(env));
  const auto full = trainer.full_objective();
  ASSERT_TRUE(full.has_value());
  EXPECT_LE(full->grad_norm(), 1e-10);
}

TEST(Train, DivergenceReported) {
  const auto env = build_chain(3, 1.0);
  TrainConfig config;
  config.obj = objective::fm;
  config.eta0 = 1e6;
  config.steps = 200;
  config.sampling = sampling_mode::exhaustive;
  config.init = init_kind::explicit_params;
  config.init_params = LogFlowParams::from_values({-3.0, -3.0, -3.0}, 0.0);
  try {
    train(env.dag, env.rewards, config, {}, 1);
    FAIL();
  } catch (const training_diverged& e) {
    EXPECT_EQ(e.kind(), error_kind::training_diverged);
    EXPECT_GE(e.step(), 1u);
    EXPECT_EQ(e.last_record().rows.size(), e.step() - 1);
  }
}

TEST(Train, InvalidConfigs) {
  const auto env = build_v2();
  TrainConfig config;
  config.steps = 0;
  EXPECT_THROW(train(env.dag, env.rewards, config), error);
  config.steps = 5;
  config.eta0 = -1;
  EXPECT_THROW(train(env.dag, env.rewards, config), error);
  config.eta0 = 0.1;
  config.sampling = sampling_mode::custom;
  EXPECT_THROW(train(env.dag, env.rewards, config), error);
  config.custom_probs = {1.0};
  EXPECT_THROW(train(env.dag, env.rewards, config, {}, 0, table_for(env)), error);
}

TEST(Train, CustomSamplerFollowsProbabilities) {
  const auto env = build_diamond();
  TrainConfig config;
  config.obj = objective::tb;
  config.eta0 = 0.0;
  config.steps = 1;
  config.sampling = sampling_mode::custom;
  config.custom_probs = {0.9, 0.1};
  Trainer trainer(env.dag, env.rewards, config, {}, table_for(env));
  // Full TB objective weights trajectories by the custom probabilities.
  const auto table = enumerate_trajectories(env.dag, env.rewards);
  const auto expected = tb_loss_grad(trainer.params(), env.dag, env.rewards, table.trajectories, config.custom_probs);
  EXPECT_EQ(trainer.full_objective()->loss, expected.loss);
}

TEST(Csv, HeaderAndPrecision) {
  RunRecord r;
  RunRow row;
  row.t = 3;
  row.eta = 0.1;
  r.rows.push_back(row);
  const auto text = csv_of(r);
  EXPECT_EQ(text.substr(0, text.find('\n')), "t,eta,loss,grad_norm,min_grad_sq,l1_flow_err,tv,kl,g_est,k_est,clamp_rate");
  EXPECT_NE(text.find("3,0.10000000000000001,"), std::string::npos);
  EXPECT_EQ(csv_of(RunRecord{}), std::string(run_csv_header) + "\n");
}

TEST(Replay, IdenticalListsBitIdentical) {
  const auto env = build_diamond();
  const auto table = enumerate_trajectories(env.dag, env.rewards);
  std::vector<Trajectory> list;
  for (int i = 0; i < 40; ++i) list.push_back(table.trajectories[i < 25 && i % 2 == 0 ? 0 : 1]);
  TrainConfig config;
  config.obj = objective::fm;
  config.sched = schedule::inv_sqrt;
  config.eta0 = 0.3;
  config.steps = list.size();
  EXPECT_EQ(replay_order(env.dag, env.rewards, list, config), replay_order(env.dag, env.rewards, list, config));
  auto reversed = list;
  std::reverse(reversed.begin(), reversed.end());
  const auto a = replay_order(env.dag, env.rewards, list, config);
  const auto b = replay_order(env.dag, env.rewards, reversed, config);
  double gap = 0.0;
  const auto fa = edge_flows(*a.final_params), fb = edge_flows(*b.final_params);
  for (std::size_t e = 0; e < fa.size(); ++e) gap += std::abs(fa[e] - fb[e]);
  EXPECT_GT(gap, 0.0);
}

TEST(Replay, RepeatedChainTrajectoryLossDecreases) {
  const auto env = build_chain(6, 2.0);
  const auto table = enumerate_trajectories(env.dag, env.rewards);
  std::vector<Trajectory> list(200, table.trajectories[0]);
  TrainConfig config;
  config.obj = objective::fm;
  config.sched = schedule::constant;
  config.eta0 = 0.05;
  config.steps = list.size();
  const auto record = replay_order(env.dag, env.rewards, list, config, 1);
  // Median filter over a window of 5, then monotone after a burn-in of 10 steps.
  std::vector<double> filtered;
  for (std::size_t i = 2; i + 2 < record.rows.size(); ++i) {
    std::vector<double> w;
    for (std::size_t k = i - 2; k <= i + 2; ++k) w.push_back(record.rows[k].loss);
    std::nth_element(w.begin(), w.begin() + 2, w.end());
    filtered.push_back(w[2]);
  }
  for (std::size_t i = 10; i < filtered.size(); ++i) EXPECT_LE(filtered[i], filtered[i - 1]);
  EXPECT_LT(record.rows.back().loss, record.rows.front().loss);
}

TEST(Replay, LengthMustMatchSteps) {
  const auto env = build_diamond();
  const auto table = enumerate_trajectories(env.dag, env.rewards);
  TrainConfig config;
  config.steps = 3;
  EXPECT_THROW(replay_order(env.dag, env.rewards, table.trajectories, config), error);
}
