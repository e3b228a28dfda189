#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "theorylab/error.hpp"
#include "theorylab/flow_model.hpp"
#include "theorylab/graph.hpp"
#include "theorylab/objectives.hpp"
#include "theorylab/rng.hpp"

namespace theorylab {

/// A f = b with A[s][e] = +1 when e leaves s, -1 when e enters s;
/// b[source] = Z_R, b[t] = -R(t) at terminals, 0 elsewhere.
struct IncidenceSystem {
  Eigen::MatrixXd a;
  Eigen::VectorXd b;
};

inline IncidenceSystem build_incidence(const Dag& dag, const RewardTable& rewards) {
  IncidenceSystem sys;
  sys.a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dag.num_states()),
                                static_cast<Eigen::Index>(dag.num_edges()));
  sys.b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dag.num_states()));
  for (edge_id e = 0; e < dag.num_edges(); ++e) {
    sys.a(dag.edge(e).tail, e) = 1.0;
    sys.a(dag.edge(e).head, e) = -1.0;
  }
  sys.b(dag.source()) = rewards.z_r();
  for (std::size_t i = 0; i < rewards.size(); ++i) sys.b(rewards.terminals()[i]) = -rewards.values()[i];
  return sys;
}

inline double residual_inf(const IncidenceSystem& sys, std::span<const double> flows) {
  const Eigen::Map<const Eigen::VectorXd> f(flows.data(), static_cast<Eigen::Index>(flows.size()));
  return (sys.a * f - sys.b).cwiseAbs().maxCoeff();
}

/// -sum (f/Z) log(f/Z) over edges with positive flow.
inline double flow_entropy(std::span<const double> flows, double z) {
  double h = 0.0;
  for (double f : flows) {
    if (f > 0.0) h -= (f / z) * std::log(f / z);
  }
  return h;
}

struct FlowSolution {
  std::vector<double> edge_flows;
  std::vector<double> node_flows;
  std::vector<double> terminal_dist;
  double entropy = 0.0;
  double residual = 0.0;
  std::size_t iterations = 0;
};

inline FlowSolution make_flow_solution(const IncidenceSystem& sys, const Dag& dag, std::vector<double> flows) {
  FlowSolution sol;
  sol.node_flows.assign(dag.num_states(), 0.0);
  for (edge_id e = 0; e < dag.num_edges(); ++e) {
    const Edge& edge = dag.edge(e);
    sol.node_flows[edge.head] += flows[e];
    if (edge.tail == dag.source()) sol.node_flows[edge.tail] += flows[e];
  }
  double total = 0.0;
  for (state_id t : dag.terminals()) total += sol.node_flows[t];
  for (state_id t : dag.terminals()) sol.terminal_dist.push_back(sol.node_flows[t] / total);
  sol.entropy = flow_entropy(flows, sys.b(dag.source()));
  sol.residual = residual_inf(sys, flows);
  sol.edge_flows = std::move(flows);
  return sol;
}

/// Minimum-Euclidean-norm solution of A f = b. Entries may be negative.
inline std::vector<double> min_norm_flow(const IncidenceSystem& sys) {
  const Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(sys.a);
  const Eigen::VectorXd f = cod.solve(sys.b);
  std::vector<double> flows(f.data(), f.data() + f.size());
  const double res = residual_inf(sys, flows);
  const double scale = std::max(1.0, sys.b.cwiseAbs().maxCoeff());
  if (!(res <= 1e-9 * scale)) {
    std::ostringstream msg;
    msg << "least-squares residual " << res << " exceeds tolerance";
    throw error(error_kind::solver, msg.str());
  }
  return flows;
}

/// Maximum-entropy positive flow with A f = b. Solved in the dual: with state
/// potentials phi, f_e = (Z/e) exp(phi_tail - phi_head), and the convex dual
/// sum_e f_e(phi) - phi.b is minimized by damped Newton with backtracking.
inline FlowSolution max_entropy_flow(const IncidenceSystem& sys, const Dag& dag, double tol = 1e-8,
                                     std::size_t max_iters = 100000) {
  require(tol > 0.0, error_kind::invalid_argument, "tolerance must be positive");
  const auto n = static_cast<Eigen::Index>(dag.num_states());
  const auto m = static_cast<Eigen::Index>(dag.num_edges());
  const double z = sys.b(dag.source());
  const double c = z / std::exp(1.0);
  const auto pinned = static_cast<Eigen::Index>(dag.source());

  Eigen::VectorXd phi = Eigen::VectorXd::Zero(n);
  auto flows_at = [&](const Eigen::VectorXd& p) {
    Eigen::VectorXd f(m);
    for (Eigen::Index e = 0; e < m; ++e) {
      const Edge& edge = dag.edge(static_cast<edge_id>(e));
      f(e) = c * std::exp(p(edge.tail) - p(edge.head));
    }
    return f;
  };
  auto dual = [&](const Eigen::VectorXd& p, const Eigen::VectorXd& f) { return f.sum() - p.dot(sys.b); };

  Eigen::VectorXd f = flows_at(phi);
  double value = dual(phi, f);
  Eigen::VectorXd grad = sys.a * f - sys.b;
  std::size_t iter = 0;
  for (; iter < max_iters && grad.cwiseAbs().maxCoeff() > tol; ++iter) {
    Eigen::MatrixXd hess = sys.a * f.asDiagonal() * sys.a.transpose();
    // Potentials are defined up to a constant; pin the source.
    hess.row(pinned).setZero();
    hess.col(pinned).setZero();
    hess(pinned, pinned) = 1.0;
    Eigen::VectorXd g = grad;
    g(pinned) = 0.0;
    const double ridge = 1e-14 * std::max(1.0, hess.diagonal().maxCoeff());
    hess.diagonal().array() += ridge;
    Eigen::VectorXd step = -hess.ldlt().solve(g);
    if (!step.allFinite()) step = -g;
    const double slope = g.dot(step);
    double t = 1.0;
    bool accepted = false;
    while (t > 1e-20) {
      const Eigen::VectorXd trial = phi + t * step;
      const Eigen::VectorXd trial_f = flows_at(trial);
      const double trial_value = dual(trial, trial_f);
      if (std::isfinite(trial_value) && trial_value <= value + 1e-4 * t * slope) {
        phi = trial;
        f = trial_f;
        value = trial_value;
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    grad = sys.a * f - sys.b;
    if (!accepted) break;
  }
  const double res = grad.cwiseAbs().maxCoeff();
  if (!(res <= tol)) {
    std::ostringstream msg;
    msg << "max-entropy dual did not converge after " << iter << " iterations, residual " << res;
    throw error(error_kind::solver, msg.str());
  }
  FlowSolution sol = make_flow_solution(sys, dag, std::vector<double>(f.data(), f.data() + f.size()));
  sol.iterations = iter;
  return sol;
}

/// Every source-to-terminal trajectory, in lexicographic edge order, with
/// target probabilities proportional to the reward of each trajectory's terminal.
struct TrajectoryTable {
  std::vector<Trajectory> trajectories;
  std::vector<double> target_probs;

  std::size_t count() const noexcept { return trajectories.size(); }
};

inline TrajectoryTable enumerate_trajectories(const Dag& dag, const RewardTable& rewards,
                                              std::size_t cap = 1000000) {
  TrajectoryTable table;
  Trajectory current;
  current.states.push_back(dag.source());
  std::vector<std::size_t> cursor{0};
  while (!cursor.empty()) {
    const state_id s = current.states.back();
    if (dag.is_terminal(s)) {
      require(table.trajectories.size() < cap, error_kind::resource_limit,
              "trajectory count exceeds the cap of " + std::to_string(cap));
      table.trajectories.push_back(current);
    }
    const auto out = dag.out_edges(s);
    if (cursor.back() < out.size()) {
      const edge_id e = out[cursor.back()++];
      current.edges.push_back(e);
      current.states.push_back(dag.edge(e).head);
      cursor.push_back(0);
    } else {
      cursor.pop_back();
      current.states.pop_back();
      if (!current.edges.empty()) current.edges.pop_back();
    }
  }
  double total = 0.0;
  for (const auto& t : table.trajectories) total += rewards.reward(t.terminal());
  for (const auto& t : table.trajectories) table.target_probs.push_back(rewards.reward(t.terminal()) / total);
  return table;
}

/// exp(trajectory_logprob) for every trajectory of the table.
inline std::vector<double> trajectory_probs(const LogFlowParams& params, const Dag& dag,
                                            const TrajectoryTable& table) {
  // Enumerated trajectories are valid by construction; share each state's
  // normalizer across trajectories.
  std::vector<double> lse(dag.num_states(), 0.0);
  for (state_id s = 0; s < dag.num_states(); ++s) {
    if (!dag.is_terminal(s)) lse[s] = log_outflow(params, dag, s);
  }
  std::vector<double> p;
  p.reserve(table.count());
  for (const auto& t : table.trajectories) {
    double total = 0.0;
    for (std::size_t i = 0; i < t.edges.size(); ++i) total += params.w(t.edges[i]) - lse[t.states[i]];
    p.push_back(std::exp(total));
  }
  return p;
}

/// max over trajectories of target / sample.
inline double discrepancy(const TrajectoryTable& table, std::span<const double> sample_probs) {
  require(sample_probs.size() == table.count(), error_kind::invalid_argument,
          "sample distribution size does not match the trajectory table");
  double total = 0.0;
  for (double p : sample_probs) {
    require(p >= 0.0 && std::isfinite(p), error_kind::invalid_argument, "sample probabilities must be nonnegative");
    total += p;
  }
  require(std::abs(total - 1.0) <= 1e-9, error_kind::invalid_argument, "sample probabilities do not sum to 1");
  double worst = 0.0;
  for (std::size_t i = 0; i < table.count(); ++i) {
    const double target = table.target_probs[i];
    if (target <= 0.0) continue;
    if (sample_probs[i] <= 0.0) {
      throw error(error_kind::infinite_discrepancy,
                  "trajectory " + std::to_string(i) + " has target mass but zero sample probability");
    }
    worst = std::max(worst, target / sample_probs[i]);
  }
  return worst;
}

/// R / Z_R in terminals() order.
inline std::vector<double> exact_terminal_distribution(const RewardTable& rewards) {
  std::vector<double> p(rewards.values().begin(), rewards.values().end());
  for (double& x : p) x /= rewards.z_r();
  return p;
}

/// Feasible flow from random per-terminal mixtures over the paths that end at
/// each terminal (flat Dirichlet weights, path flow = weight * R).
inline std::vector<double> random_feasible_flow(const Dag& dag, const RewardTable& rewards,
                                                const TrajectoryTable& table, rng_t& rng) {
  std::vector<double> weight(table.count());
  std::vector<double> per_terminal(dag.num_states(), 0.0);
  for (std::size_t i = 0; i < table.count(); ++i) {
    weight[i] = -std::log(1.0 - uniform01(rng));
    per_terminal[table.trajectories[i].terminal()] += weight[i];
  }
  std::vector<double> flows(dag.num_edges(), 0.0);
  for (std::size_t i = 0; i < table.count(); ++i) {
    const state_id t = table.trajectories[i].terminal();
    const double path_flow = rewards.reward(t) * weight[i] / per_terminal[t];
    for (edge_id e : table.trajectories[i].edges) flows[e] += path_flow;
  }
  return flows;
}

/// Rank by Gaussian elimination with partial pivoting.
inline std::size_t matrix_rank(Eigen::MatrixXd m, double tol = 1e-9) {
  std::size_t rank = 0;
  const Eigen::Index rows = m.rows();
  const Eigen::Index cols = m.cols();
  for (Eigen::Index col = 0; col < cols && static_cast<Eigen::Index>(rank) < rows; ++col) {
    const auto r0 = static_cast<Eigen::Index>(rank);
    Eigen::Index pivot = r0;
    for (Eigen::Index r = r0 + 1; r < rows; ++r) {
      if (std::abs(m(r, col)) > std::abs(m(pivot, col))) pivot = r;
    }
    if (std::abs(m(pivot, col)) <= tol) continue;
    m.row(r0).swap(m.row(pivot));
    for (Eigen::Index r = r0 + 1; r < rows; ++r) {
      const double factor = m(r, col) / m(r0, col);
      if (factor != 0.0) m.row(r) -= factor * m.row(r0);
    }
    ++rank;
  }
  return rank;
}

/// Incidence rows of the states on `traj`, restricted to its edges.
inline Eigen::MatrixXd trajectory_incidence(const Dag& dag, const Trajectory& traj) {
  const auto rows = static_cast<Eigen::Index>(traj.states.size());
  const auto cols = static_cast<Eigen::Index>(traj.edges.size());
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    const Edge& edge = dag.edge(traj.edges[static_cast<std::size_t>(j)]);
    for (Eigen::Index i = 0; i < rows; ++i) {
      const state_id s = traj.states[static_cast<std::size_t>(i)];
      if (s == edge.tail) a(i, j) = 1.0;
      if (s == edge.head) a(i, j) = -1.0;
    }
  }
  return a;
}

struct AssumptionReport {
  std::vector<double> visitation;
  double visitation_constant = 0.0;  // min_s pi(s) * |S|
  std::vector<std::size_t> ranks;
  std::vector<double> rank_ratios;    // rank(A_tau) / L
  double min_rank_ratio = 0.0;
  std::vector<double> lag_correlations;  // lags 1, 2, ...
  double rho = 0.0;
  double error_slope = 0.0;  // trajectory error vs sqrt(L) * eps_edge, through the origin
  double error_r2 = 0.0;
  std::size_t error_points = 0;
};

namespace detail {

inline double pearson(std::span<const double> x, std::span<const double> y) {
  const auto n = static_cast<double>(x.size());
  if (x.size() < 2) return 0.0;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace detail

/// Empirical checks of the visitation, error-correlation, rank, and
/// error-propagation conditions at `params`. Edge-flow errors come from
/// perturbing w by noise_probe * N(0, 1), `draws` times.
inline AssumptionReport audit_assumptions(const Dag& dag, const TrajectoryTable& table, const LogFlowParams& params,
                                          double noise_probe, std::size_t draws, rng_t& rng,
                                          std::size_t max_lag = 3) {
  AssumptionReport report;
  report.visitation = state_visitation(params, dag);
  report.visitation_constant = *std::min_element(report.visitation.begin(), report.visitation.end()) *
                               static_cast<double>(dag.num_states());

  report.min_rank_ratio = std::numeric_limits<double>::infinity();
  for (const auto& traj : table.trajectories) {
    const std::size_t rank = matrix_rank(trajectory_incidence(dag, traj));
    report.ranks.push_back(rank);
    const double ratio = static_cast<double>(rank) / static_cast<double>(traj.length());
    report.rank_ratios.push_back(ratio);
    report.min_rank_ratio = std::min(report.min_rank_ratio, ratio);
  }

  const auto reference = edge_flows(params);
  std::vector<std::vector<double>> lag_x(max_lag), lag_y(max_lag);
  std::vector<double> reg_x, reg_y;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t d = 0; d < draws; ++d) {
    std::vector<double> err(dag.num_edges());
    double mean_abs = 0.0;
    for (edge_id e = 0; e < dag.num_edges(); ++e) {
      const double xi = noise_probe == 0.0 ? 0.0 : normal(rng);
      err[e] = std::exp(params.w(e) + noise_probe * xi) - reference[e];
      mean_abs += std::abs(err[e]);
    }
    mean_abs /= static_cast<double>(dag.num_edges());
    for (const auto& traj : table.trajectories) {
      double sq = 0.0;
      for (std::size_t i = 0; i < traj.edges.size(); ++i) {
        sq += err[traj.edges[i]] * err[traj.edges[i]];
        for (std::size_t k = 1; k <= max_lag && i + k < traj.edges.size(); ++k) {
          lag_x[k - 1].push_back(err[traj.edges[i]]);
          lag_y[k - 1].push_back(err[traj.edges[i + k]]);
        }
      }
      reg_x.push_back(std::sqrt(static_cast<double>(traj.length())) * mean_abs);
      reg_y.push_back(std::sqrt(sq));
    }
  }
  for (std::size_t k = 0; k < max_lag; ++k) report.lag_correlations.push_back(detail::pearson(lag_x[k], lag_y[k]));
  report.rho = report.lag_correlations.empty() ? 0.0 : std::clamp(report.lag_correlations[0], 0.0, 0.999);

  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < reg_x.size(); ++i) {
    sxy += reg_x[i] * reg_y[i];
    sxx += reg_x[i] * reg_x[i];
  }
  report.error_points = reg_x.size();
  if (sxx > 0.0) {
    report.error_slope = sxy / sxx;
    double ss_res = 0.0, ss_tot = 0.0;
    const double my = std::accumulate(reg_y.begin(), reg_y.end(), 0.0) / static_cast<double>(reg_y.size());
    for (std::size_t i = 0; i < reg_x.size(); ++i) {
      const double r = reg_y[i] - report.error_slope * reg_x[i];
      ss_res += r * r;
      ss_tot += (reg_y[i] - my) * (reg_y[i] - my);
    }
    report.error_r2 = ss_tot > 0.0 ? std::clamp(1.0 - ss_res / ss_tot, 0.0, 1.0) : 1.0;
  }
  return report;
}

struct ConstantsReport {
  double g_fm = 0.0;  // largest single-element gradient norm per objective
  double g_db = 0.0;
  double g_tb = 0.0;
  double k = 0.0;     // sup 1 / P_B(s|s')^2
  double m = 0.0;     // min node flow
  double big_m = 0.0; // max node flow
  double min_transition_prob = 0.0;
};

inline ConstantsReport estimate_constants(const LogFlowParams& params, const Dag& dag, const RewardTable& rewards,
                                          const TrajectoryTable& table) {
  ConstantsReport report;
  for (state_id s : nonsource_states(dag)) {
    const state_id batch[] = {s};
    report.g_fm = std::max(report.g_fm, fm_loss_grad(params, dag, rewards, batch).grad_norm());
  }
  for (edge_id e = 0; e < dag.num_edges(); ++e) {
    const edge_id batch[] = {e};
    report.g_db = std::max(report.g_db, db_loss_grad(params, dag, rewards, batch).grad_norm());
  }
  for (const auto& traj : table.trajectories) {
    report.g_tb = std::max(report.g_tb, tb_loss_grad(params, dag, rewards, std::span(&traj, 1)).grad_norm());
  }
  const double max_in = static_cast<double>(dag.max_in_degree());
  report.k = max_in * max_in;
  report.m = std::numeric_limits<double>::infinity();
  report.min_transition_prob = 1.0;
  for (state_id s = 0; s < dag.num_states(); ++s) {
    const double flow = node_outflow(params, dag, rewards, s);
    report.m = std::min(report.m, flow);
    report.big_m = std::max(report.big_m, flow);
    if (!dag.is_terminal(s)) {
      for (double p : forward_policy(params, dag, s)) report.min_transition_prob = std::min(report.min_transition_prob, p);
    }
  }
  return report;
}

inline nlohmann::json to_json(const FlowSolution& sol) {
  return {{"residual", sol.residual}, {"entropy", sol.entropy}, {"flows", sol.edge_flows},
          {"node_flows", sol.node_flows}, {"terminal_dist", sol.terminal_dist}};
}

inline nlohmann::json to_json(const AssumptionReport& r) {
  return {{"ranks", r.ranks},
          {"rank_ratios", r.rank_ratios},
          {"min_rank_ratio", r.min_rank_ratio},
          {"visitation", r.visitation},
          {"visitation_constant", r.visitation_constant},
          {"lag_correlations", r.lag_correlations},
          {"rho", r.rho},
          {"error_slope", r.error_slope},
          {"error_r2", r.error_r2}};
}

inline nlohmann::json to_json(const ConstantsReport& c) {
  return {{"constants",
           {{"G_fm", c.g_fm}, {"G_db", c.g_db}, {"G_tb", c.g_tb}, {"K", c.k}, {"m", c.m}, {"M", c.big_m},
            {"min_transition_prob", c.min_transition_prob}}}};
}

}  // namespace theorylab
