#pragma once

// Independent reference computations used by the tests. None of these call
// into the code under test beyond reading the graph's edge list.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "theorylab/flow_model.hpp"
#include "theorylab/graph.hpp"

namespace support {

using namespace theorylab;

/// Number of source-to-sink paths, by memoized recursion over the raw edge list.
inline std::uint64_t count_paths(const Dag& dag) {
  std::vector<std::vector<state_id>> children(dag.num_states());
  for (const Edge& e : dag.edges()) children[e.tail].push_back(e.head);
  std::vector<std::int64_t> memo(dag.num_states(), -1);
  std::function<std::uint64_t(state_id)> go = [&](state_id s) -> std::uint64_t {
    if (memo[s] >= 0) return static_cast<std::uint64_t>(memo[s]);
    std::uint64_t n = children[s].empty() ? 1 : 0;
    for (state_id c : children[s]) n += go(c);
    memo[s] = static_cast<std::int64_t>(n);
    return n;
  };
  return go(dag.source());
}

/// Longest path length in edges, by recursion over the raw edge list.
inline std::size_t longest_path(const Dag& dag) {
  std::vector<std::vector<state_id>> children(dag.num_states());
  for (const Edge& e : dag.edges()) children[e.tail].push_back(e.head);
  std::function<std::size_t(state_id)> go = [&](state_id s) -> std::size_t {
    std::size_t best = 0;
    for (state_id c : children[s]) best = std::max(best, 1 + go(c));
    return best;
  };
  return go(dag.source());
}

/// Central differences of f at (w, zeta), one coordinate at a time; the last
/// entry is the zeta derivative.
inline std::vector<double> central_differences(const std::function<double(const LogFlowParams&)>& f,
                                               const LogFlowParams& p, double h = 1e-5) {
  std::vector<double> out;
  for (edge_id e = 0; e < p.size(); ++e) {
    LogFlowParams up = p, down = p;
    up.set(e, p.w(e) + h);
    down.set(e, p.w(e) - h);
    out.push_back((f(up) - f(down)) / (2 * h));
  }
  LogFlowParams up = p, down = p;
  up.set_zeta(p.zeta() + h);
  down.set_zeta(p.zeta() - h);
  out.push_back((f(up) - f(down)) / (2 * h));
  return out;
}

/// |a - b| / max(1, |a|, |b|)
inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline LogFlowParams random_params(const Dag& dag, std::mt19937_64& gen, double half_width = 1.0) {
  std::uniform_real_distribution<double> u(-half_width, half_width);
  std::vector<double> w(dag.num_edges());
  for (double& x : w) x = u(gen);
  return LogFlowParams::from_values(std::move(w), u(gen));
}

/// Softmax of the given logits.
inline std::vector<double> softmax(const std::vector<double>& x) {
  double peak = -1e300;
  for (double v : x) peak = std::max(peak, v);
  std::vector<double> out;
  double total = 0.0;
  for (double v : x) {
    out.push_back(std::exp(v - peak));
    total += out.back();
  }
  for (double& v : out) v /= total;
  return out;
}

inline std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("theorylab_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace support
