#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "theorylab/error.hpp"
#include "theorylab/graph.hpp"
#include "theorylab/rng.hpp"

namespace theorylab {

/// Tabular log edge flows w (one per edge, in edge order) plus the log of the
/// learned partition used by trajectory balance. Entries are always finite.
class LogFlowParams {
 public:
  static LogFlowParams zeros(const Dag& dag, double zeta) {
    return from_values(std::vector<double>(dag.num_edges(), 0.0), zeta);
  }

  /// Default start: uniform policies and zeta = ln Z_R.
  static LogFlowParams initial(const Dag& dag, const RewardTable& rewards) {
    return zeros(dag, std::log(rewards.z_r()));
  }

  /// w iid uniform on [-half_width, half_width].
  static LogFlowParams uniform(const Dag& dag, double half_width, rng_t& rng, double zeta) {
    std::vector<double> w(dag.num_edges());
    for (double& x : w) x = half_width * (2.0 * uniform01(rng) - 1.0);
    return from_values(std::move(w), zeta);
  }

  static LogFlowParams from_values(std::vector<double> w, double zeta) {
    for (std::size_t e = 0; e < w.size(); ++e) {
      require(std::isfinite(w[e]), error_kind::non_finite,
              "log flow for edge " + std::to_string(e) + " is not finite");
    }
    require(std::isfinite(zeta), error_kind::non_finite, "zeta is not finite");
    LogFlowParams p;
    p.w_ = std::move(w);
    p.zeta_ = zeta;
    return p;
  }

  std::span<const double> w() const noexcept { return w_; }
  double w(edge_id e) const { return w_.at(e); }
  double zeta() const noexcept { return zeta_; }
  std::size_t size() const noexcept { return w_.size(); }

  void set(edge_id e, double value) {
    require(std::isfinite(value), error_kind::non_finite,
            "log flow for edge " + std::to_string(e) + " is not finite");
    w_.at(e) = value;
  }
  void set_zeta(double value) {
    require(std::isfinite(value), error_kind::non_finite, "zeta is not finite");
    zeta_ = value;
  }

  /// w -= eta * grad_w, zeta -= eta * grad_zeta. Leaves the parameters
  /// untouched and throws if any updated entry would be non-finite.
  void sgd_step(std::span<const double> grad_w, double grad_zeta, double eta) {
    require(grad_w.size() == w_.size(), error_kind::invalid_argument, "gradient size mismatch");
    std::vector<double> next(w_.size());
    for (std::size_t e = 0; e < w_.size(); ++e) {
      next[e] = w_[e] - eta * grad_w[e];
      require(std::isfinite(next[e]), error_kind::non_finite,
              "update of edge " + std::to_string(e) + " is not finite");
    }
    const double next_zeta = zeta_ - eta * grad_zeta;
    require(std::isfinite(next_zeta), error_kind::non_finite, "update of zeta is not finite");
    w_ = std::move(next);
    zeta_ = next_zeta;
  }

  friend bool operator==(const LogFlowParams&, const LogFlowParams&) = default;

 private:
  LogFlowParams() = default;
  std::vector<double> w_;
  double zeta_ = 0.0;
};

struct Trajectory {
  std::vector<state_id> states;
  std::vector<edge_id> edges;

  std::size_t length() const noexcept { return edges.size(); }
  state_id terminal() const { return states.back(); }
  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

inline void validate_trajectory(const Dag& dag, const Trajectory& traj) {
  require(!traj.states.empty() && traj.states.size() == traj.edges.size() + 1,
          error_kind::invalid_argument, "trajectory state/edge counts are inconsistent");
  require(traj.states.front() == dag.source(), error_kind::invalid_argument,
          "trajectory does not start at the source");
  require(traj.states.back() < dag.num_states() && dag.is_terminal(traj.states.back()),
          error_kind::invalid_argument, "trajectory does not end at a terminal");
  for (std::size_t i = 0; i < traj.edges.size(); ++i) {
    require(traj.edges[i] < dag.num_edges(), error_kind::invalid_argument,
            "trajectory edge out of range");
    const Edge& e = dag.edge(traj.edges[i]);
    require(e.tail == traj.states[i] && e.head == traj.states[i + 1], error_kind::invalid_argument,
            "trajectory step " + std::to_string(i) + " does not follow its edge");
  }
}

inline double edge_flow(const LogFlowParams& params, edge_id e) { return std::exp(params.w(e)); }

inline std::vector<double> edge_flows(const LogFlowParams& params) {
  std::vector<double> f(params.size());
  for (std::size_t e = 0; e < f.size(); ++e) f[e] = std::exp(params.w()[e]);
  return f;
}

/// Sum of outgoing edge flows; a terminal's flow is its reward.
inline double node_outflow(const LogFlowParams& params, const Dag& dag, const RewardTable& rewards,
                           state_id s) {
  if (dag.is_terminal(s)) return rewards.reward(s);
  double total = 0.0;
  for (edge_id e : dag.out_edges(s)) total += edge_flow(params, e);
  return total;
}

/// log-sum-exp of w over the outgoing edges of s.
inline double log_outflow(const LogFlowParams& params, const Dag& dag, state_id s) {
  const auto out = dag.out_edges(s);
  double peak = -std::numeric_limits<double>::infinity();
  for (edge_id e : out) peak = std::max(peak, params.w(e));
  double acc = 0.0;
  for (edge_id e : out) acc += std::exp(params.w(e) - peak);
  return peak + std::log(acc);
}

/// Softmax of w over out_edges(state), aligned with that list.
inline std::vector<double> forward_policy(const LogFlowParams& params, const Dag& dag, state_id state) {
  require(state < dag.num_states(), error_kind::invalid_argument, "state out of range");
  require(!dag.is_terminal(state), error_kind::invalid_argument,
          "terminal state " + std::to_string(state) + " has no forward policy");
  const double lse = log_outflow(params, dag, state);
  const auto out = dag.out_edges(state);
  std::vector<double> p(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) p[i] = std::exp(params.w(out[i]) - lse);
  return p;
}

inline double forward_prob(const LogFlowParams& params, const Dag& dag, edge_id e) {
  return std::exp(params.w(e) - log_outflow(params, dag, dag.edge(e).tail));
}

/// Uniform over in_edges(state), aligned with that list.
inline std::vector<double> backward_policy_uniform(const Dag& dag, state_id state) {
  require(state < dag.num_states(), error_kind::invalid_argument, "state out of range");
  require(state != dag.source(), error_kind::invalid_argument, "the source has no backward policy");
  const auto in = dag.in_edges(state);
  return std::vector<double>(in.size(), 1.0 / static_cast<double>(in.size()));
}

inline double backward_prob(const Dag& dag, edge_id e) {
  return 1.0 / static_cast<double>(dag.in_edges(dag.edge(e).head).size());
}

inline Trajectory sample_forward(const LogFlowParams& params, const Dag& dag, rng_t& rng) {
  Trajectory traj;
  state_id s = dag.source();
  traj.states.push_back(s);
  while (!dag.is_terminal(s)) {
    const auto probs = forward_policy(params, dag, s);
    const edge_id e = dag.out_edges(s)[sample_categorical(probs, rng)];
    s = dag.edge(e).head;
    traj.edges.push_back(e);
    traj.states.push_back(s);
  }
  return traj;
}

/// Terminal drawn proportional to reward, then uniform parents back to the
/// source. Returned in forward order.
inline Trajectory sample_backward(const Dag& dag, const RewardTable& rewards, rng_t& rng) {
  const std::size_t slot = sample_categorical(rewards.values(), rng);
  state_id s = rewards.terminals()[slot];
  Trajectory traj;
  traj.states.push_back(s);
  while (s != dag.source()) {
    const auto in = dag.in_edges(s);
    const auto pick = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(in.size()));
    const edge_id e = in[std::min(pick, in.size() - 1)];
    s = dag.edge(e).tail;
    traj.edges.push_back(e);
    traj.states.push_back(s);
  }
  std::reverse(traj.states.begin(), traj.states.end());
  std::reverse(traj.edges.begin(), traj.edges.end());
  return traj;
}

/// Sum of log forward-policy probabilities along the trajectory.
inline double trajectory_logprob(const LogFlowParams& params, const Dag& dag, const Trajectory& traj) {
  validate_trajectory(dag, traj);
  double total = 0.0;
  for (std::size_t i = 0; i < traj.edges.size(); ++i) {
    total += params.w(traj.edges[i]) - log_outflow(params, dag, traj.states[i]);
  }
  return total;
}

/// log of R(x)/Z_R times the uniform backward steps: the probability that
/// sample_backward returns this trajectory.
inline double backward_trajectory_logprob(const Dag& dag, const RewardTable& rewards,
                                          const Trajectory& traj) {
  validate_trajectory(dag, traj);
  double total = std::log(rewards.reward(traj.terminal()) / rewards.z_r());
  for (edge_id e : traj.edges) total += std::log(backward_prob(dag, e));
  return total;
}

/// Probability that each state appears on a forward-sampled trajectory.
inline std::vector<double> state_visitation(const LogFlowParams& params, const Dag& dag) {
  std::vector<double> visit(dag.num_states(), 0.0);
  visit[dag.source()] = 1.0;
  for (state_id s : dag.topo_order()) {
    if (dag.is_terminal(s) || visit[s] == 0.0) continue;
    const auto probs = forward_policy(params, dag, s);
    const auto out = dag.out_edges(s);
    for (std::size_t i = 0; i < out.size(); ++i) visit[dag.edge(out[i]).head] += visit[s] * probs[i];
  }
  return visit;
}

/// Exact terminal distribution of the forward policy, in terminals() order.
inline std::vector<double> model_terminal_distribution(const LogFlowParams& params, const Dag& dag) {
  const auto visit = state_visitation(params, dag);
  std::vector<double> dist;
  dist.reserve(dag.terminals().size());
  for (state_id t : dag.terminals()) dist.push_back(visit[t]);
  return dist;
}

/// Edge flows implied by the forward policy and a total flow Z:
/// Z * P(tail visited) * P_F(edge).
inline std::vector<double> induced_edge_flows(const LogFlowParams& params, const Dag& dag, double z) {
  const auto visit = state_visitation(params, dag);
  std::vector<double> flows(dag.num_edges());
  for (edge_id e = 0; e < dag.num_edges(); ++e) {
    flows[e] = z * visit[dag.edge(e).tail] * forward_prob(params, dag, e);
  }
  return flows;
}

enum class snapshot_format { json, binary };

inline void save_params(const std::string& path, const LogFlowParams& params,
                        snapshot_format format = snapshot_format::json) {
  std::vector<double> flat(params.w().begin(), params.w().end());
  flat.push_back(params.zeta());
  if (format == snapshot_format::json) {
    std::ofstream out(path);
    require(static_cast<bool>(out), error_kind::io, "cannot write " + path);
    out << nlohmann::json(flat).dump() << '\n';
    require(static_cast<bool>(out), error_kind::io, "write failed for " + path);
    return;
  }
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), error_kind::io, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(flat.data()),
            static_cast<std::streamsize>(flat.size() * sizeof(double)));
  require(static_cast<bool>(out), error_kind::io, "write failed for " + path);
}

inline LogFlowParams load_params(const std::string& path, const Dag& dag,
                                 snapshot_format format = snapshot_format::json) {
  std::vector<double> flat;
  if (format == snapshot_format::json) {
    std::ifstream in(path);
    require(static_cast<bool>(in), error_kind::io, "cannot open " + path);
    try {
      flat = nlohmann::json::parse(in).get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw error(error_kind::parse, path + ": " + e.what());
    }
  } else {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), error_kind::io, "cannot open " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    require(bytes.size() % sizeof(double) == 0, error_kind::parse, path + ": truncated snapshot");
    flat.resize(bytes.size() / sizeof(double));
    std::memcpy(flat.data(), bytes.data(), bytes.size());
  }
  require(flat.size() == dag.num_edges() + 1, error_kind::parse,
          path + ": expected " + std::to_string(dag.num_edges() + 1) + " values, found " +
              std::to_string(flat.size()));
  const double zeta = flat.back();
  flat.pop_back();
  return LogFlowParams::from_values(std::move(flat), zeta);
}

}  // namespace theorylab
