#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "theorylab/error.hpp"
#include "theorylab/flow_model.hpp"
#include "theorylab/graph.hpp"

namespace theorylab {

enum class objective { fm, db, tb };

inline std::string to_string(objective o) {
  switch (o) {
    case objective::fm: return "FM";
    case objective::db: return "DB";
    case objective::tb: return "TB";
  }
  return "?";
}

inline objective parse_objective(const std::string& name) {
  if (name == "FM" || name == "fm") return objective::fm;
  if (name == "DB" || name == "db") return objective::db;
  if (name == "TB" || name == "tb") return objective::tb;
  throw error(error_kind::invalid_argument, "unknown objective '" + name + "'");
}

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad_w;
  double grad_zeta = 0.0;

  double grad_norm_sq() const {
    double acc = grad_zeta * grad_zeta;
    for (double g : grad_w) acc += g * g;
    return acc;
  }
  double grad_norm() const { return std::sqrt(grad_norm_sq()); }
};

namespace detail {

/// Per-element weights: 1/n when `weights` is empty, else weights / sum.
inline std::vector<double> batch_weights(std::size_t n, std::span<const double> weights) {
  require(n > 0, error_kind::invalid_argument, "batch is empty");
  if (weights.empty()) return std::vector<double>(n, 1.0 / static_cast<double>(n));
  require(weights.size() == n, error_kind::invalid_argument, "weight count does not match batch");
  double total = 0.0;
  for (double w : weights) {
    require(w >= 0.0 && std::isfinite(w), error_kind::invalid_argument, "batch weights must be nonnegative");
    total += w;
  }
  require(total > 0.0, error_kind::invalid_argument, "batch weights sum to zero");
  std::vector<double> out(weights.begin(), weights.end());
  for (double& w : out) w /= total;
  return out;
}

inline double terminal_reward(const RewardTable& rewards, state_id t, std::span<const double> effective,
                              std::size_t index) {
  if (effective.empty()) return rewards.reward(t);
  require(effective.size() > index, error_kind::invalid_argument,
          "effective reward count does not match batch");
  return effective[index];
}

}  // namespace detail

/// Flow-matching loss over a batch of non-source states. Interior residual is
/// inflow - outflow; a terminal's residual is inflow - R. `effective_rewards`,
/// when given, is aligned with the batch and replaces R for terminal entries.
inline LossGrad fm_loss_grad(const LogFlowParams& params, const Dag& dag, const RewardTable& rewards,
                             std::span<const state_id> states, std::span<const double> weights = {},
                             std::span<const double> effective_rewards = {}) {
  const auto omega = detail::batch_weights(states.size(), weights);
  LossGrad out;
  out.grad_w.assign(dag.num_edges(), 0.0);
  for (std::size_t i = 0; i < states.size(); ++i) {
    const state_id s = states[i];
    require(s < dag.num_states(), error_kind::invalid_argument, "state out of range");
    require(s != dag.source(), error_kind::invalid_argument, "flow-matching batch contains the source");
    double inflow = 0.0;
    for (edge_id e : dag.in_edges(s)) inflow += edge_flow(params, e);
    double outflow = 0.0;
    if (dag.is_terminal(s)) {
      outflow = detail::terminal_reward(rewards, s, effective_rewards, i);
    } else {
      for (edge_id e : dag.out_edges(s)) outflow += edge_flow(params, e);
    }
    const double residual = inflow - outflow;
    out.loss += omega[i] * residual * residual;
    const double scale = 2.0 * omega[i] * residual;
    for (edge_id e : dag.in_edges(s)) out.grad_w[e] += scale * edge_flow(params, e);
    if (!dag.is_terminal(s)) {
      for (edge_id e : dag.out_edges(s)) out.grad_w[e] -= scale * edge_flow(params, e);
    }
  }
  return out;
}

/// Detailed-balance loss over a batch of transitions with the uniform backward
/// policy. F(s') is the outflow of s', or R(s') at a terminal.
inline LossGrad db_loss_grad(const LogFlowParams& params, const Dag& dag, const RewardTable& rewards,
                             std::span<const edge_id> transitions, std::span<const double> weights = {},
                             std::span<const double> effective_rewards = {}) {
  const auto omega = detail::batch_weights(transitions.size(), weights);
  LossGrad out;
  out.grad_w.assign(dag.num_edges(), 0.0);
  for (std::size_t i = 0; i < transitions.size(); ++i) {
    const edge_id e = transitions[i];
    require(e < dag.num_edges(), error_kind::invalid_argument, "transition out of range");
    const state_id head = dag.edge(e).head;
    require(head != dag.source(), error_kind::invalid_argument, "transition enters the source");
    const bool terminal = dag.is_terminal(head);
    // log F(s->s') - log F(s') - log P_B(s|s')
    const double log_head_flow = terminal
                                     ? std::log(detail::terminal_reward(rewards, head, effective_rewards, i))
                                     : log_outflow(params, dag, head);
    const double log_pb = -std::log(static_cast<double>(dag.in_edges(head).size()));
    const double ratio = std::exp(params.w(e) - log_head_flow - log_pb);
    const double diff = ratio - 1.0;
    out.loss += omega[i] * diff * diff;
    const double scale = 2.0 * omega[i] * diff * ratio;
    out.grad_w[e] += scale;
    if (!terminal) {
      for (edge_id next : dag.out_edges(head)) {
        out.grad_w[next] -= scale * std::exp(params.w(next) - log_head_flow);
      }
    }
  }
  return out;
}

/// Trajectory-balance loss: (P_F(tau) * exp(zeta) / R(x) - 1)^2 averaged over
/// the batch (or weighted by fixed `weights`). Ratios are formed in log space.
inline LossGrad tb_loss_grad(const LogFlowParams& params, const Dag& dag, const RewardTable& rewards,
                             std::span<const Trajectory> trajs, std::span<const double> weights = {},
                             std::span<const double> effective_rewards = {}) {
  const auto omega = detail::batch_weights(trajs.size(), weights);
  LossGrad out;
  out.grad_w.assign(dag.num_edges(), 0.0);
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const Trajectory& traj = trajs[i];
    const double reward = detail::terminal_reward(rewards, traj.terminal(), effective_rewards, i);
    require(reward > 0.0 && std::isfinite(reward), error_kind::invalid_argument,
            "nonpositive effective reward at terminal " + std::to_string(traj.terminal()));
    const double log_ratio = trajectory_logprob(params, dag, traj) + params.zeta() - std::log(reward);
    const double ratio = std::exp(log_ratio);
    const double diff = ratio - 1.0;
    out.loss += omega[i] * diff * diff;
    // d loss / d log_ratio
    const double scale = 2.0 * omega[i] * diff * ratio;
    out.grad_zeta += scale;
    for (std::size_t k = 0; k < traj.edges.size(); ++k) {
      const state_id s = traj.states[k];
      const auto probs = forward_policy(params, dag, s);
      const auto outs = dag.out_edges(s);
      for (std::size_t j = 0; j < outs.size(); ++j) out.grad_w[outs[j]] -= scale * probs[j];
      out.grad_w[traj.edges[k]] += scale;
    }
  }
  return out;
}

/// All non-source states: the exhaustive flow-matching batch.
inline std::vector<state_id> nonsource_states(const Dag& dag) {
  std::vector<state_id> states;
  for (state_id s = 0; s < dag.num_states(); ++s) {
    if (s != dag.source()) states.push_back(s);
  }
  return states;
}

inline std::vector<edge_id> all_transitions(const Dag& dag) {
  std::vector<edge_id> edges(dag.num_edges());
  for (edge_id e = 0; e < edges.size(); ++e) edges[e] = e;
  return edges;
}

}  // namespace theorylab
