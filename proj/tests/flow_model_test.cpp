#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "support.hpp"
#include "theorylab/flow_model.hpp"
#include "theorylab/oracle.hpp"

using namespace theorylab;

namespace {

LogFlowParams with_w(std::vector<double> w, double zeta = 0.0) {
  return LogFlowParams::from_values(std::move(w), zeta);
}

// Empirical frequencies of each enumerated trajectory over n draws.
template <class Draw>
std::vector<double> frequencies(const TrajectoryTable& table, std::size_t n, Draw draw) {
  std::vector<double> counts(table.count(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const Trajectory t = draw();
    bool found = false;
    for (std::size_t k = 0; k < table.count(); ++k) {
      if (table.trajectories[k] == t) {
        counts[k] += 1.0;
        found = true;
        break;
      }
    }
    EXPECT_TRUE(found);
  }
  for (double& c : counts) c /= static_cast<double>(n);
  return counts;
}

void expect_within_bands(const std::vector<double>& freq, const std::vector<double>& probs, std::size_t n,
                         double sigmas) {
  ASSERT_EQ(freq.size(), probs.size());
  for (std::size_t k = 0; k < freq.size(); ++k) {
    const double sd = std::sqrt(probs[k] * (1 - probs[k]) / static_cast<double>(n));
    EXPECT_LE(std::abs(freq[k] - probs[k]), sigmas * sd + 1e-12) << "trajectory " << k;
  }
}

}  // namespace

TEST(EdgeFlow, Exponentiates) {
  const auto p = with_w({0.0, std::log(2.0), -std::log(4.0)});
  EXPECT_DOUBLE_EQ(edge_flow(p, 0), 1.0);
  EXPECT_NEAR(edge_flow(p, 1), 2.0, 1e-15);
  EXPECT_NEAR(edge_flow(p, 2), 0.25, 1e-16);
}

TEST(NodeOutflow, DiamondHalfFlows) {
  const auto env = build_diamond();
  const auto p = with_w(std::vector<double>(4, std::log(0.5)));
  EXPECT_NEAR(node_outflow(p, env.dag, env.rewards, 0), 1.0, 1e-15);
  EXPECT_NEAR(node_outflow(p, env.dag, env.rewards, 1), 0.5, 1e-15);
  EXPECT_DOUBLE_EQ(node_outflow(p, env.dag, env.rewards, 3), 1.0);
}

TEST(ForwardPolicy, Examples) {
  const auto v2 = build_v2();
  for (double x : forward_policy(with_w({0.3, 0.3}), v2.dag, 0)) EXPECT_NEAR(x, 0.5, 1e-15);
  const auto p = forward_policy(with_w({std::log(3.0), 0.0}), v2.dag, 0);
  EXPECT_NEAR(p[0], 0.75, 1e-15);
  EXPECT_NEAR(p[1], 0.25, 1e-15);
  const auto chain = build_chain(3, 1.0);
  EXPECT_EQ(forward_policy(with_w({0.1, -4.0, 2.0}), chain.dag, 1), (std::vector<double>{1.0}));
}

TEST(ForwardPolicy, TerminalRejected) {
  const auto v2 = build_v2();
  try {
    forward_policy(with_w({0.0, 0.0}), v2.dag, 1);
    FAIL();
  } catch (const error& e) {
    EXPECT_EQ(e.kind(), error_kind::invalid_argument);
  }
}

TEST(ForwardPolicy, ShiftInvariantAndNormalized) {
  std::mt19937_64 gen(11);
  const auto env = build_grid(2, 3, grid_reward::corner);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = support::random_params(env.dag, gen, 3.0);
    const state_id s = static_cast<state_id>(gen() % 9);  // lattice points are non-terminal
    const auto before = forward_policy(p, env.dag, s);
    double total = 0.0;
    for (double x : before) {
      EXPECT_GT(x, 0.0);
      total += x;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
    const double shift = std::uniform_real_distribution<double>(-5, 5)(gen);
    for (edge_id e : env.dag.out_edges(s)) p.set(e, p.w(e) + shift);
    const auto after = forward_policy(p, env.dag, s);
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(before[i], after[i], 1e-12);
    std::vector<double> logits;
    for (edge_id e : env.dag.out_edges(s)) logits.push_back(p.w(e));
    const auto ref = support::softmax(logits);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(after[i], ref[i], 1e-14);
  }
}

TEST(BackwardPolicy, UniformOverParents) {
  const auto diamond = build_diamond();
  EXPECT_EQ(backward_policy_uniform(diamond.dag, 3), (std::vector<double>{0.5, 0.5}));
  const auto chain = build_chain(3, 1.0);
  EXPECT_EQ(backward_policy_uniform(chain.dag, 2), (std::vector<double>{1.0}));
  const Dag four = Dag::create(6, 0, {{0, 1}, {0, 2}, {0, 3}, {0, 4}, {1, 5}, {2, 5}, {3, 5}, {4, 5}});
  EXPECT_EQ(backward_policy_uniform(four, 5), (std::vector<double>(4, 0.25)));
  try {
    backward_policy_uniform(chain.dag, 0);
    FAIL();
  } catch (const error& e) {
    EXPECT_EQ(e.kind(), error_kind::invalid_argument);
  }
}

TEST(TrajectoryLogprob, Examples) {
  const auto chain = build_chain(4, 1.0);
  const auto chain_table = enumerate_trajectories(chain.dag, chain.rewards);
  EXPECT_EQ(trajectory_logprob(with_w({0.4, -1.0, 2.0, 0.0}), chain.dag, chain_table.trajectories[0]), 0.0);
  const auto v2 = build_v2();
  const auto v2_table = enumerate_trajectories(v2.dag, v2.rewards);
  for (const auto& t : v2_table.trajectories) {
    EXPECT_NEAR(trajectory_logprob(with_w({0.0, 0.0}), v2.dag, t), std::log(0.5), 1e-15);
  }
  const auto diamond = build_diamond();
  const auto d_table = enumerate_trajectories(diamond.dag, diamond.rewards);
  for (const auto& t : d_table.trajectories) {
    EXPECT_NEAR(trajectory_logprob(with_w({0.0, 0.0, 0.7, -0.2}), diamond.dag, t), std::log(0.5), 1e-15);
  }
}

TEST(TrajectoryLogprob, InvalidTrajectoryRejected) {
  const auto diamond = build_diamond();
  Trajectory bad;
  bad.states = {0, 2, 3};
  bad.edges = {0, 3};
  try {
    trajectory_logprob(with_w({0, 0, 0, 0}), diamond.dag, bad);
    FAIL();
  } catch (const error& e) {
    EXPECT_EQ(e.kind(), error_kind::invalid_argument);
  }
}

TEST(TrajectoryLogprob, SumsToOneOverEnumeration) {
  std::mt19937_64 gen(3);
  for (const auto& env : {build_grid(2, 3, grid_reward::uniform), build_asymmetric_diamond(),
                          build_grid(3, 2, grid_reward::center)}) {
    const auto table = enumerate_trajectories(env.dag, env.rewards);
    for (int trial = 0; trial < 20; ++trial) {
      const auto p = support::random_params(env.dag, gen, 2.0);
      double total = 0.0;
      for (const auto& t : table.trajectories) {
        const double lp = trajectory_logprob(p, env.dag, t);
        EXPECT_LE(lp, 0.0);
        total += std::exp(lp);
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(SampleForward, ChainAlwaysUnique) {
  const auto chain = build_chain(6, 1.0);
  rng_t rng(1);
  const auto p = LogFlowParams::initial(chain.dag, chain.rewards);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_forward(p, chain.dag, rng).length(), 6u);
}

TEST(SampleForward, V2Frequencies) {
  const auto v2 = build_v2();
  const auto table = enumerate_trajectories(v2.dag, v2.rewards);
  rng_t rng(derive_stream(42, 0));
  const std::size_t n = 100000;
  auto uniform = with_w({0.0, 0.0});
  const auto f1 = frequencies(table, n, [&] { return sample_forward(uniform, v2.dag, rng); });
  EXPECT_NEAR(f1[0], 0.5, 0.01);
  auto tilted = with_w({std::log(3.0), 0.0});
  const auto f2 = frequencies(table, n, [&] { return sample_forward(tilted, v2.dag, rng); });
  EXPECT_NEAR(f2[0], 0.75, 0.012);
}

TEST(SampleForward, MatchesExactProbabilitiesOnGrid) {
  const auto env = build_grid(2, 3, grid_reward::corner);
  const auto table = enumerate_trajectories(env.dag, env.rewards);
  std::mt19937_64 gen(5);
  const auto p = support::random_params(env.dag, gen, 1.0);
  rng_t rng(derive_stream(9, 0));
  const std::size_t n = 100000;
  const auto freq = frequencies(table, n, [&] { return sample_forward(p, env.dag, rng); });
  std::vector<double> probs;
  for (const auto& t : table.trajectories) probs.push_back(std::exp(trajectory_logprob(p, env.dag, t)));
  expect_within_bands(freq, probs, n, 4.0);
}

TEST(SampleBackward, V2TerminalMarginal) {
  const auto v2 = build_v2();
  rng_t rng(derive_stream(7, 0));
  std::size_t hits = 0;
  const std::size_t n = 100000;
  for (std::size_t i = 0; i < n; ++i) hits += sample_backward(v2.dag, v2.rewards, rng).terminal() == 2;
  EXPECT_NEAR(static_cast<double>(hits) / n, 0.75, 0.012);
}

TEST(SampleBackward, DiamondPathsAndGridMarginal) {
  const auto diamond = build_diamond();
  const auto table = enumerate_trajectories(diamond.dag, diamond.rewards);
  rng_t rng(derive_stream(8, 0));
  const std::size_t n = 100000;
  const auto freq = frequencies(table, n, [&] { return sample_backward(diamond.dag, diamond.rewards, rng); });
  EXPECT_NEAR(freq[0], 0.5, 0.01);

  const auto grid = build_grid(2, 3, grid_reward::corner);
  std::map<state_id, double> hits;
  for (std::size_t i = 0; i < n; ++i) hits[sample_backward(grid.dag, grid.rewards, rng).terminal()] += 1.0;
  for (std::size_t k = 0; k < grid.rewards.size(); ++k) {
    const double p = grid.rewards.values()[k] / grid.rewards.z_r();
    const double sd = std::sqrt(p * (1 - p) / n);
    EXPECT_LE(std::abs(hits[grid.rewards.terminals()[k]] / n - p), 4 * sd);
  }
}

TEST(SampleBackward, ProbabilityMatchesLogprob) {
  const auto grid = build_grid(2, 3, grid_reward::center);
  const auto table = enumerate_trajectories(grid.dag, grid.rewards);
  rng_t rng(derive_stream(10, 0));
  const std::size_t n = 100000;
  const auto freq = frequencies(table, n, [&] { return sample_backward(grid.dag, grid.rewards, rng); });
  std::vector<double> probs;
  double total = 0.0;
  for (const auto& t : table.trajectories) {
    probs.push_back(std::exp(backward_trajectory_logprob(grid.dag, grid.rewards, t)));
    total += probs.back();
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
  expect_within_bands(freq, probs, n, 4.0);
}

TEST(Sampling, SameSeedSameDraws) {
  const auto env = build_grid(2, 3, grid_reward::uniform);
  const auto p = LogFlowParams::initial(env.dag, env.rewards);
  rng_t a(derive_stream(1, 0)), b(derive_stream(1, 0));
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sample_forward(p, env.dag, a), sample_forward(p, env.dag, b));
}

TEST(Params, NonFiniteRejected) {
  const auto env = build_diamond();
  auto p = LogFlowParams::initial(env.dag, env.rewards);
  EXPECT_THROW(p.set(0, std::nan("")), error);
  EXPECT_THROW(LogFlowParams::from_values({0.0, INFINITY}, 0.0), error);
  const std::vector<double> huge(4, 1e308);
  const auto before = p;
  EXPECT_THROW(p.sgd_step(huge, 0.0, 1e10), error);
  EXPECT_EQ(p, before);
}

TEST(Params, DefaultInit) {
  const auto env = build_v2();
  const auto p = LogFlowParams::initial(env.dag, env.rewards);
  EXPECT_EQ(p.size(), 2u);
  EXPECT_EQ(p.w(0), 0.0);
  EXPECT_DOUBLE_EQ(p.zeta(), std::log(4.0));
}

TEST(Params, SnapshotRoundTrip) {
  const auto env = build_grid(2, 3, grid_reward::corner);
  std::mt19937_64 gen(2);
  const auto p = support::random_params(env.dag, gen, 5.0);
  const auto dir = support::temp_dir("params");
  for (auto fmt : {snapshot_format::json, snapshot_format::binary}) {
    const auto path = (dir / "p.snap").string();
    save_params(path, p, fmt);
    EXPECT_EQ(load_params(path, env.dag, fmt), p);
  }
  std::ofstream(dir / "short.json") << "[1.0, 2.0]";
  EXPECT_THROW(load_params((dir / "short.json").string(), env.dag), error);
  std::filesystem::remove_all(dir);
}

TEST(Visitation, ChainVisitsEverything) {
  const auto chain = build_chain(5, 1.0);
  const auto visit = state_visitation(LogFlowParams::initial(chain.dag, chain.rewards), chain.dag);
  for (double v : visit) EXPECT_EQ(v, 1.0);
}
