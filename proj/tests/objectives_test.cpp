#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"
#include "theorylab/objectives.hpp"
#include "theorylab/oracle.hpp"

using namespace theorylab;

namespace {

LogFlowParams from_flows(const std::vector<double>& f, double zeta = 0.0) {
  std::vector<double> w;
  for (double x : f) w.push_back(std::log(x));
  return LogFlowParams::from_values(std::move(w), zeta);
}

// Inflow minus outflow (or minus R at a terminal), straight from the edge list.
double residual(const Environment& env, const std::vector<double>& flows, state_id s) {
  double in = 0.0, out = 0.0;
  bool has_out = false;
  for (std::size_t e = 0; e < env.dag.edges().size(); ++e) {
    if (env.dag.edges()[e].head == s) in += flows[e];
    if (env.dag.edges()[e].tail == s) {
      out += flows[e];
      has_out = true;
    }
  }
  if (!has_out) out = env.rewards.reward(s);
  return in - out;
}

// Every edge of the batch function checked against central differences.
void expect_fd_match(const std::function<LossGrad(const LogFlowParams&)>& f, const LogFlowParams& p,
                     double tol = 1e-6) {
  const LossGrad g = f(p);
  const auto fd = support::central_differences([&](const LogFlowParams& q) { return f(q).loss; }, p);
  for (std::size_t e = 0; e < g.grad_w.size(); ++e) {
    EXPECT_LE(support::rel_err(g.grad_w[e], fd[e]), tol) << "edge " << e << ": " << g.grad_w[e] << " vs " << fd[e];
  }
  EXPECT_LE(support::rel_err(g.grad_zeta, fd.back()), tol) << "zeta";
}

std::vector<Environment> fd_envs() {
  return {build_chain(4, 1.0), build_diamond(), build_grid(2, 3, grid_reward::uniform), build_asymmetric_diamond(),
          build_grid(2, 3, grid_reward::corner)};
}

// Flow where every state's inflow is split equally among its parents: the
// unique flow whose backward policy is uniform.
std::vector<double> uniform_backward_flow(const Environment& env) {
  const Dag& dag = env.dag;
  std::vector<double> node(dag.num_states(), 0.0);
  std::vector<double> flows(dag.num_edges(), 0.0);
  const auto order = dag.topo_order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const state_id s = *it;
    if (dag.is_terminal(s)) {
      node[s] = env.rewards.reward(s);
    } else {
      for (edge_id e : dag.out_edges(s)) node[s] += flows[e];
    }
    for (edge_id e : dag.in_edges(s)) flows[e] = node[s] / static_cast<double>(dag.in_edges(s).size());
  }
  return flows;
}

}  // namespace

TEST(FlowMatching, DiamondHalfFlowsIsExact) {
  const auto env = build_diamond();
  const auto p = from_flows({0.5, 0.5, 0.5, 0.5});
  const std::vector<state_id> batch{1, 2, 3};
  const auto lg = fm_loss_grad(p, env.dag, env.rewards, batch);
  EXPECT_NEAR(lg.loss, 0.0, 1e-30);
  EXPECT_NEAR(lg.grad_norm(), 0.0, 1e-15);
  EXPECT_EQ(lg.grad_zeta, 0.0);
}

TEST(FlowMatching, ChainResidual) {
  const auto env = build_chain(2, 1.0);
  const std::vector<double> flows{2.0, 1.0};
  const std::vector<state_id> batch{1};
  const auto lg = fm_loss_grad(from_flows(flows), env.dag, env.rewards, batch);
  const double r = residual(env, flows, 1);
  EXPECT_DOUBLE_EQ(r * r, 1.0);
  EXPECT_NEAR(lg.loss, r * r, 1e-15);
}

TEST(FlowMatching, MeanOfResiduals) {
  std::mt19937_64 gen(21);
  const auto env = build_grid(2, 3, grid_reward::center);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = support::random_params(env.dag, gen, 1.0);
    const auto flows = edge_flows(p);
    const auto batch = nonsource_states(env.dag);
    double expected = 0.0;
    for (state_id s : batch) expected += std::pow(residual(env, flows, s), 2);
    expected /= static_cast<double>(batch.size());
    EXPECT_NEAR(fm_loss_grad(p, env.dag, env.rewards, batch).loss, expected, 1e-12 * std::max(1.0, expected));
  }
}

TEST(FlowMatching, SourceRejected) {
  const auto env = build_diamond();
  const std::vector<state_id> batch{0};
  try {
    fm_loss_grad(LogFlowParams::initial(env.dag, env.rewards), env.dag, env.rewards, batch);
    FAIL();
  } catch (const error& e) {
    EXPECT_EQ(e.kind(), error_kind::invalid_argument);
  }
}

TEST(DetailedBalance, Examples) {
  const auto chain = build_chain(3, 2.0);
  const auto pc = from_flows({2.0, 2.0, 2.0});
  for (edge_id e = 0; e < 3; ++e) {
    const edge_id batch[] = {e};
    EXPECT_NEAR(db_loss_grad(pc, chain.dag, chain.rewards, batch).loss, 0.0, 1e-28);
  }
  const auto v2 = build_v2();
  const auto pv = from_flows({1.0, 3.0});
  EXPECT_NEAR(db_loss_grad(pv, v2.dag, v2.rewards, all_transitions(v2.dag)).loss, 0.0, 1e-28);

  const auto diamond = build_diamond();
  const auto pd = from_flows({0.8, 0.2, 0.5, 0.5});
  const edge_id a_t[] = {2};
  EXPECT_NEAR(db_loss_grad(pd, diamond.dag, diamond.rewards, a_t).loss, 0.0, 1e-28);
  const edge_id s0_a[] = {0};
  // F(s0->a) / (F(a) P_B) - 1 = 0.8 / 0.5 - 1
  const double hand = std::pow(0.8 / (0.5 * 1.0) - 1.0, 2);
  EXPECT_NEAR(hand, 0.36, 1e-15);
  EXPECT_NEAR(db_loss_grad(pd, diamond.dag, diamond.rewards, s0_a).loss, hand, 1e-14);
}

TEST(DetailedBalance, SourceHeadRejected) {
  const auto env = build_v2();
  const std::vector<edge_id> empty;
  EXPECT_THROW(db_loss_grad(LogFlowParams::initial(env.dag, env.rewards), env.dag, env.rewards, empty), error);
}

TEST(DetailedBalance, ZeroAtFeasibleFlowsOnTrees) {
  // With one parent per state the backward policy is forced, so any
  // feasible flow balances every transition.
  for (const auto& env : {build_chain(5, 0.7), build_v2(2.0, 5.0), build_grid(1, 4, grid_reward::corner)}) {
    const auto sol = max_entropy_flow(build_incidence(env.dag, env.rewards), env.dag, 1e-12);
    const auto lg = db_loss_grad(from_flows(sol.edge_flows), env.dag, env.rewards, all_transitions(env.dag));
    EXPECT_NEAR(lg.loss, 0.0, 1e-18) << env.name;
  }
}

TEST(DetailedBalance, ZeroAtUniformBackwardFlow) {
  for (const auto& env : {build_diamond(), build_grid(2, 3, grid_reward::corner), build_asymmetric_diamond(),
                          build_grid(3, 3, grid_reward::center)}) {
    const auto flows = uniform_backward_flow(env);
    const auto sys = build_incidence(env.dag, env.rewards);
    EXPECT_LE(residual_inf(sys, flows), 1e-12);
    const auto lg = db_loss_grad(from_flows(flows), env.dag, env.rewards, all_transitions(env.dag));
    EXPECT_NEAR(lg.loss, 0.0, 1e-24) << env.name;
    EXPECT_NEAR(lg.grad_norm(), 0.0, 1e-10) << env.name;
  }
}

TEST(DetailedBalance, NonzeroAtUnevenParentSplit) {
  // Feasible on the diamond, but t's inflow is not split equally between a and b.
  const auto env = build_diamond();
  const auto lg = db_loss_grad(from_flows({0.8, 0.2, 0.8, 0.2}), env.dag, env.rewards, all_transitions(env.dag));
  EXPECT_GT(lg.loss, 0.1);
}

TEST(TrajectoryBalance, V2UniformPolicy) {
  const auto env = build_v2();
  const auto table = enumerate_trajectories(env.dag, env.rewards);
  const auto p = LogFlowParams::from_values({0.0, 0.0}, std::log(4.0));
  const auto weights = trajectory_probs(p, env.dag, table);
  const auto lg = tb_loss_grad(p, env.dag, env.rewards, table.trajectories, weights);
  EXPECT_NEAR(lg.loss, 5.0 / 9.0, 1e-15);
  EXPECT_NEAR(0.5 * std::pow(2.0 - 1, 2) + 0.5 * std::pow(2.0 / 3 - 1, 2), 5.0 / 9.0, 1e-15);
}

TEST(TrajectoryBalance, V2PerfectlyTrained) {
  const auto env = build_v2();
  const auto table = enumerate_trajectories(env.dag, env.rewards);
  const auto p = LogFlowParams::from_values({std::log(0.25), std::log(0.75)}, std::log(4.0));
  const auto lg = tb_loss_grad(p, env.dag, env.rewards, table.trajectories);
  EXPECT_NEAR(lg.loss, 0.0, 1e-28);
  EXPECT_NEAR(lg.grad_norm(), 0.0, 1e-14);
}

TEST(TrajectoryBalance, NonpositiveEffectiveRewardRejected) {
  const auto env = build_v2();
  const auto table = enumerate_trajectories(env.dag, env.rewards);
  const std::vector<double> eff{1.0, -0.5};
  try {
    tb_loss_grad(LogFlowParams::initial(env.dag, env.rewards), env.dag, env.rewards, table.trajectories, {}, eff);
    FAIL();
  } catch (const error& e) {
    EXPECT_EQ(e.kind(), error_kind::invalid_argument);
  }
}

TEST(TrajectoryBalance, LongChainStaysFinite) {
  const auto env = build_chain(200, 1e-3);
  const auto table = enumerate_trajectories(env.dag, env.rewards);
  const auto p = LogFlowParams::from_values(std::vector<double>(200, 50.0), 300.0);
  const auto lg = tb_loss_grad(p, env.dag, env.rewards, table.trajectories);
  EXPECT_TRUE(std::isfinite(lg.loss) || std::isinf(lg.loss));
  const auto q = LogFlowParams::from_values(std::vector<double>(200, 50.0), std::log(1e-3));
  EXPECT_NEAR(tb_loss_grad(q, env.dag, env.rewards, table.trajectories).loss, 0.0, 1e-20);
}

TEST(Gradients, MatchFiniteDifferences) {
  std::mt19937_64 gen(2024);
  for (const auto& env : fd_envs()) {
    const auto table = enumerate_trajectories(env.dag, env.rewards);
    const auto states = nonsource_states(env.dag);
    const auto edges = all_transitions(env.dag);
    for (int trial = 0; trial < 25; ++trial) {
      const auto p = support::random_params(env.dag, gen, 1.0);
      expect_fd_match([&](const LogFlowParams& q) { return fm_loss_grad(q, env.dag, env.rewards, states); }, p);
      expect_fd_match([&](const LogFlowParams& q) { return db_loss_grad(q, env.dag, env.rewards, edges); }, p);
      expect_fd_match(
          [&](const LogFlowParams& q) { return tb_loss_grad(q, env.dag, env.rewards, table.trajectories); }, p);
    }
  }
}

TEST(Gradients, WeightedNoisyBatchesMatchFiniteDifferences) {
  std::mt19937_64 gen(99);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  const auto env = build_grid(2, 3, grid_reward::corner);
  const auto table = enumerate_trajectories(env.dag, env.rewards);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = support::random_params(env.dag, gen, 1.5);
    std::vector<state_id> states;
    std::vector<double> sw, seff;
    for (int i = 0; i < 7; ++i) {
      states.push_back(static_cast<state_id>(1 + gen() % (env.dag.num_states() - 1)));
      sw.push_back(u(gen));
      seff.push_back(u(gen));
    }
    expect_fd_match([&](const LogFlowParams& q) { return fm_loss_grad(q, env.dag, env.rewards, states, sw, seff); },
                    p);
    std::vector<edge_id> edges;
    for (int i = 0; i < 7; ++i) edges.push_back(static_cast<edge_id>(gen() % env.dag.num_edges()));
    expect_fd_match([&](const LogFlowParams& q) { return db_loss_grad(q, env.dag, env.rewards, edges, sw, seff); },
                    p);
    std::vector<Trajectory> trajs;
    for (int i = 0; i < 7; ++i) trajs.push_back(table.trajectories[gen() % table.count()]);
    expect_fd_match([&](const LogFlowParams& q) { return tb_loss_grad(q, env.dag, env.rewards, trajs, sw, seff); },
                    p);
  }
}

TEST(ZeroLoss, FlowMatchingIffFeasible) {
  std::mt19937_64 gen(5);
  for (const auto& env : {build_diamond(), build_asymmetric_diamond(), build_grid(2, 3, grid_reward::corner)}) {
    const auto sys = build_incidence(env.dag, env.rewards);
    const auto states = nonsource_states(env.dag);
    const auto sol = max_entropy_flow(sys, env.dag, 1e-12);
    EXPECT_LE(fm_loss_grad(from_flows(sol.edge_flows), env.dag, env.rewards, states).loss, 1e-20);
    rng_t rng(derive_stream(3, 0));
    const auto table = enumerate_trajectories(env.dag, env.rewards);
    for (int i = 0; i < 10; ++i) {
      const auto f = random_feasible_flow(env.dag, env.rewards, table, rng);
      EXPECT_LE(fm_loss_grad(from_flows(f), env.dag, env.rewards, states).loss, 1e-20);
    }
    // Conversely, loss bounds every residual: each non-source row has
    // r^2 <= n * loss, and the source row is minus their sum, so r^2 <= n^2 * loss.
    for (int i = 0; i < 20; ++i) {
      const auto p = support::random_params(env.dag, gen, 1.0);
      const double loss = fm_loss_grad(p, env.dag, env.rewards, states).loss;
      const double res = residual_inf(sys, edge_flows(p));
      const auto n = static_cast<double>(states.size());
      EXPECT_LE(res * res, n * n * loss * (1 + 1e-12)) << env.name;
    }
  }
}

TEST(ZeroLoss, TrajectoryBalanceOnTrees) {
  // Random trees with random rewards: the target policy is proportional to
  // subtree reward sums.
  std::mt19937_64 gen(31);
  std::uniform_real_distribution<double> u(0.2, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 3 + gen() % 10;
    std::vector<Edge> edges;
    for (state_id s = 1; s < n; ++s) edges.push_back({static_cast<state_id>(gen() % s), s});
    const Dag dag = Dag::create(n, 0, edges);
    std::vector<double> r;
    for (std::size_t i = 0; i < dag.terminals().size(); ++i) r.push_back(u(gen));
    const RewardTable rewards = RewardTable::from_terminal_values(dag, r);
    std::vector<double> subtree(n, 0.0);
    for (auto it = dag.topo_order().rbegin(); it != dag.topo_order().rend(); ++it) {
      const state_id s = *it;
      if (dag.is_terminal(s)) subtree[s] = rewards.reward(s);
      for (edge_id e : dag.out_edges(s)) subtree[s] += subtree[dag.edge(e).head];
    }
    std::vector<double> w;
    for (const Edge& e : dag.edges()) w.push_back(std::log(subtree[e.head]));
    const auto p = LogFlowParams::from_values(w, std::log(rewards.z_r()));
    const auto table = enumerate_trajectories(dag, rewards);
    EXPECT_NEAR(tb_loss_grad(p, dag, rewards, table.trajectories).loss, 0.0, 1e-20);
    const auto model = model_terminal_distribution(p, dag);
    const auto target = exact_terminal_distribution(rewards);
    for (std::size_t i = 0; i < model.size(); ++i) EXPECT_NEAR(model[i], target[i], 1e-12);
    EXPECT_NEAR(std::exp(p.zeta()), rewards.z_r(), 1e-12);
  }
}

TEST(ZeroLoss, TrajectoryBalanceWithSharedTerminals) {
  // On the diamond both paths end at t. Zero loss needs exp(zeta) equal to the
  // sum of per-path rewards, not Z_R.
  const auto env = build_diamond();
  const auto table = enumerate_trajectories(env.dag, env.rewards);
  const auto at_zr = LogFlowParams::from_values({0, 0, 0, 0}, std::log(env.rewards.z_r()));
  EXPECT_GT(tb_loss_grad(at_zr, env.dag, env.rewards, table.trajectories).loss, 0.2);
  const auto at_path_sum = LogFlowParams::from_values({0, 0, 0, 0}, std::log(2.0));
  EXPECT_NEAR(tb_loss_grad(at_path_sum, env.dag, env.rewards, table.trajectories).loss, 0.0, 1e-28);
}

TEST(Invariance, EdgeReorderingWithPermutedParameters) {
  std::mt19937_64 gen(8);
  const auto env = build_grid(2, 3, grid_reward::corner);
  std::vector<std::size_t> perm(env.dag.num_edges());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), gen);
  std::vector<Edge> edges;
  for (std::size_t i : perm) edges.push_back(env.dag.edges()[i]);
  const Dag shuffled = Dag::create(env.dag.num_states(), env.dag.source(), edges);
  const RewardTable rewards = RewardTable::from_terminal_values(shuffled, {env.rewards.values().begin(),
                                                                         env.rewards.values().end()});
  const auto t1 = enumerate_trajectories(env.dag, env.rewards);
  const auto t2 = enumerate_trajectories(shuffled, rewards);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = support::random_params(env.dag, gen, 1.0);
    std::vector<double> w2;
    for (std::size_t i : perm) w2.push_back(p.w(static_cast<edge_id>(i)));
    const auto q = LogFlowParams::from_values(w2, p.zeta());
    const auto s1 = nonsource_states(env.dag);
    EXPECT_NEAR(fm_loss_grad(p, env.dag, env.rewards, s1).loss, fm_loss_grad(q, shuffled, rewards, s1).loss, 1e-12);
    EXPECT_NEAR(db_loss_grad(p, env.dag, env.rewards, all_transitions(env.dag)).loss,
                db_loss_grad(q, shuffled, rewards, all_transitions(shuffled)).loss, 1e-12);
    EXPECT_NEAR(tb_loss_grad(p, env.dag, env.rewards, t1.trajectories).loss,
                tb_loss_grad(q, shuffled, rewards, t2.trajectories).loss, 1e-12);
  }
}

TEST(Objective, ParseNames) {
  EXPECT_EQ(parse_objective("FM"), objective::fm);
  EXPECT_EQ(parse_objective("db"), objective::db);
  EXPECT_EQ(to_string(objective::tb), "TB");
  EXPECT_THROW(parse_objective("SubTB"), error);
}
