#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "theorylab/error.hpp"

namespace theorylab {

using state_id = std::uint32_t;
using edge_id = std::uint32_t;

inline constexpr std::int64_t no_slot = -1;

struct Edge {
  state_id tail = 0;
  state_id head = 0;
  friend bool operator==(const Edge&, const Edge&) = default;
};

/// Finite DAG with a single source. Terminals are exactly the states with no
/// outgoing edges. Immutable once created.
class Dag {
 public:
  static Dag create(std::size_t num_states, state_id source, std::vector<Edge> edges);

  std::size_t num_states() const noexcept { return out_.size(); }
  std::size_t num_edges() const noexcept { return edges_.size(); }
  state_id source() const noexcept { return source_; }

  std::span<const Edge> edges() const noexcept { return edges_; }
  const Edge& edge(edge_id e) const { return edges_.at(e); }
  std::span<const edge_id> out_edges(state_id s) const { return out_.at(s); }
  std::span<const edge_id> in_edges(state_id s) const { return in_.at(s); }
  std::span<const state_id> terminals() const noexcept { return terminals_; }
  std::span<const state_id> topo_order() const noexcept { return topo_; }

  bool is_terminal(state_id s) const { return out_.at(s).empty(); }
  /// Position of `s` in terminals(), or no_slot.
  std::int64_t terminal_slot(state_id s) const { return terminal_slot_.at(s); }
  std::size_t max_in_degree() const noexcept;

  friend bool operator==(const Dag& a, const Dag& b) {
    return a.source_ == b.source_ && a.edges_ == b.edges_ && a.out_.size() == b.out_.size();
  }

 private:
  Dag() = default;

  state_id source_ = 0;
  std::vector<Edge> edges_;
  std::vector<std::vector<edge_id>> out_;
  std::vector<std::vector<edge_id>> in_;
  std::vector<state_id> terminals_;
  std::vector<std::int64_t> terminal_slot_;
  std::vector<state_id> topo_;
};

inline std::string describe_edge(edge_id e, const Edge& edge) {
  return "edge " + std::to_string(e) + " (" + std::to_string(edge.tail) + " -> " +
         std::to_string(edge.head) + ")";
}

inline Dag Dag::create(std::size_t num_states, state_id source, std::vector<Edge> edges) {
  require(num_states >= 2, error_kind::invalid_argument, "a DAG needs at least two states");
  require(num_states <= std::numeric_limits<state_id>::max(), error_kind::resource_limit,
          "state count exceeds id range");
  require(source < num_states, error_kind::invalid_argument,
          "source " + std::to_string(source) + " out of range");

  Dag dag;
  dag.source_ = source;
  dag.out_.assign(num_states, {});
  dag.in_.assign(num_states, {});
  {
    std::vector<std::pair<state_id, state_id>> seen;
    seen.reserve(edges.size());
    for (edge_id e = 0; e < edges.size(); ++e) {
      const Edge& edge = edges[e];
      require(edge.tail < num_states && edge.head < num_states, error_kind::invalid_argument,
              describe_edge(e, edge) + " references a state out of range");
      require(edge.tail != edge.head, error_kind::cycle, describe_edge(e, edge) + " is a self-loop");
      seen.emplace_back(edge.tail, edge.head);
      dag.out_[edge.tail].push_back(e);
      dag.in_[edge.head].push_back(e);
    }
    std::vector<std::size_t> order(seen.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return seen[a] < seen[b]; });
    for (std::size_t i = 1; i < order.size(); ++i) {
      if (seen[order[i]] == seen[order[i - 1]]) {
        throw error(error_kind::duplicate_edge,
                    describe_edge(static_cast<edge_id>(order[i]), edges[order[i]]) +
                        " duplicates edge " + std::to_string(order[i - 1]));
      }
    }
  }
  dag.edges_ = std::move(edges);

  // Cycle search: iterative DFS, first back-edge found is reported.
  {
    enum : std::uint8_t { white, grey, black };
    std::vector<std::uint8_t> colour(num_states, white);
    std::vector<std::pair<state_id, std::size_t>> stack;
    for (state_id root = 0; root < num_states; ++root) {
      const state_id start = root == 0 ? source : (root == source ? 0 : root);
      if (colour[start] != white) continue;
      stack.emplace_back(start, 0);
      colour[start] = grey;
      while (!stack.empty()) {
        auto& [s, next] = stack.back();
        if (next == dag.out_[s].size()) {
          colour[s] = black;
          stack.pop_back();
          continue;
        }
        const edge_id e = dag.out_[s][next++];
        const state_id h = dag.edges_[e].head;
        if (colour[h] == grey) {
          throw error(error_kind::cycle, describe_edge(e, dag.edges_[e]) + " closes a cycle");
        }
        if (colour[h] == white) {
          colour[h] = grey;
          stack.emplace_back(h, 0);
        }
      }
    }
  }

  if (!dag.in_[source].empty()) {
    const edge_id e = dag.in_[source].front();
    throw error(error_kind::invalid_argument,
                "source has incoming " + describe_edge(e, dag.edges_[e]));
  }
  require(!dag.out_[source].empty(), error_kind::invalid_argument, "source has no outgoing edges");

  {
    std::vector<bool> reached(num_states, false);
    std::vector<state_id> frontier{source};
    reached[source] = true;
    while (!frontier.empty()) {
      const state_id s = frontier.back();
      frontier.pop_back();
      for (edge_id e : dag.out_[s]) {
        const state_id h = dag.edges_[e].head;
        if (!reached[h]) {
          reached[h] = true;
          frontier.push_back(h);
        }
      }
    }
    for (state_id s = 0; s < num_states; ++s) {
      require(reached[s], error_kind::unreachable,
              "state " + std::to_string(s) + " is not reachable from the source");
    }
  }

  // Kahn's algorithm, smallest id first, so generated environments keep id order.
  {
    std::vector<std::size_t> indeg(num_states);
    for (state_id s = 0; s < num_states; ++s) indeg[s] = dag.in_[s].size();
    std::vector<state_id> ready{source};
    while (!ready.empty()) {
      std::pop_heap(ready.begin(), ready.end(), std::greater<>{});
      const state_id s = ready.back();
      ready.pop_back();
      dag.topo_.push_back(s);
      for (edge_id e : dag.out_[s]) {
        const state_id h = dag.edges_[e].head;
        if (--indeg[h] == 0) {
          ready.push_back(h);
          std::push_heap(ready.begin(), ready.end(), std::greater<>{});
        }
      }
    }
  }

  dag.terminal_slot_.assign(num_states, no_slot);
  for (state_id s = 0; s < num_states; ++s) {
    if (dag.out_[s].empty()) {
      dag.terminal_slot_[s] = static_cast<std::int64_t>(dag.terminals_.size());
      dag.terminals_.push_back(s);
    }
  }
  return dag;
}

inline std::size_t Dag::max_in_degree() const noexcept {
  std::size_t best = 0;
  for (const auto& in : in_) best = std::max(best, in.size());
  return best;
}

/// Strictly positive rewards on the terminals of one Dag, with cached
/// minimum and sum.
class RewardTable {
 public:
  /// `rewards` maps state id to reward and must cover exactly the terminals.
  static RewardTable create(const Dag& dag, const std::map<state_id, double>& rewards);
  /// Rewards given in terminals() order.
  static RewardTable from_terminal_values(const Dag& dag, std::vector<double> values);

  double reward(state_id terminal) const {
    const auto slot = slot_.at(terminal);
    require(slot != no_slot, error_kind::invalid_argument,
            "state " + std::to_string(terminal) + " is not a terminal");
    return values_[static_cast<std::size_t>(slot)];
  }
  std::span<const double> values() const noexcept { return values_; }
  std::span<const state_id> terminals() const noexcept { return terminals_; }
  std::size_t size() const noexcept { return values_.size(); }
  double r_min() const noexcept { return r_min_; }
  double z_r() const noexcept { return z_r_; }

  void set_reward(state_id terminal, double value);
  RewardTable scaled(double factor) const;

  friend bool operator==(const RewardTable& a, const RewardTable& b) {
    return a.terminals_ == b.terminals_ && a.values_ == b.values_;
  }

 private:
  RewardTable() = default;
  void refresh();

  std::vector<state_id> terminals_;
  std::vector<double> values_;
  std::vector<std::int64_t> slot_;
  double r_min_ = 0.0;
  double z_r_ = 0.0;
};

inline void check_reward_value(state_id terminal, double value) {
  require(std::isfinite(value), error_kind::nonpositive_reward,
          "terminal " + std::to_string(terminal) + " has non-finite reward");
  if (!(value > 0.0)) {
    std::ostringstream msg;
    msg << "terminal " << terminal << " has reward " << value;
    throw error(error_kind::nonpositive_reward, msg.str());
  }
}

inline RewardTable RewardTable::create(const Dag& dag, const std::map<state_id, double>& rewards) {
  for (const auto& [s, value] : rewards) {
    require(s < dag.num_states(), error_kind::invalid_argument,
            "reward given for unknown state " + std::to_string(s));
    require(dag.is_terminal(s), error_kind::reward_on_nonterminal,
            "state " + std::to_string(s) + " has outgoing edges but a reward");
  }
  std::vector<double> values;
  values.reserve(dag.terminals().size());
  for (state_id t : dag.terminals()) {
    const auto it = rewards.find(t);
    require(it != rewards.end(), error_kind::dead_end,
            "state " + std::to_string(t) + " has no outgoing edges and no reward");
    values.push_back(it->second);
  }
  return from_terminal_values(dag, std::move(values));
}

inline RewardTable RewardTable::from_terminal_values(const Dag& dag, std::vector<double> values) {
  require(values.size() == dag.terminals().size(), error_kind::invalid_argument,
          "reward count does not match terminal count");
  RewardTable table;
  table.terminals_.assign(dag.terminals().begin(), dag.terminals().end());
  for (std::size_t i = 0; i < values.size(); ++i) check_reward_value(table.terminals_[i], values[i]);
  table.values_ = std::move(values);
  table.slot_.assign(dag.num_states(), no_slot);
  for (std::size_t i = 0; i < table.terminals_.size(); ++i) {
    table.slot_[table.terminals_[i]] = static_cast<std::int64_t>(i);
  }
  table.refresh();
  return table;
}

inline void RewardTable::refresh() {
  r_min_ = *std::min_element(values_.begin(), values_.end());
  z_r_ = std::accumulate(values_.begin(), values_.end(), 0.0);
}

inline void RewardTable::set_reward(state_id terminal, double value) {
  const auto slot = slot_.at(terminal);
  require(slot != no_slot, error_kind::reward_on_nonterminal,
          "state " + std::to_string(terminal) + " is not a terminal");
  check_reward_value(terminal, value);
  values_[static_cast<std::size_t>(slot)] = value;
  refresh();
}

inline RewardTable RewardTable::scaled(double factor) const {
  RewardTable copy = *this;
  for (std::size_t i = 0; i < copy.values_.size(); ++i) {
    copy.values_[i] *= factor;
    check_reward_value(copy.terminals_[i], copy.values_[i]);
  }
  copy.refresh();
  return copy;
}

struct Environment {
  std::string name;
  Dag dag;
  RewardTable rewards;
};

struct GridLimits {
  std::size_t max_trajectory_length = 1024;
  std::size_t state_cap = 100000;
};

enum class grid_reward { uniform, corner, center };

inline grid_reward parse_grid_reward(const std::string& name) {
  if (name == "uniform") return grid_reward::uniform;
  if (name == "corner") return grid_reward::corner;
  if (name == "center") return grid_reward::center;
  throw error(error_kind::invalid_argument, "unknown grid reward '" + name + "'");
}

inline std::string to_string(grid_reward r) {
  switch (r) {
    case grid_reward::uniform: return "uniform";
    case grid_reward::corner: return "corner";
    case grid_reward::center: return "center";
  }
  return "?";
}

/// s0 -> s1 -> ... -> s_length, reward on the last state.
inline Environment build_chain(std::size_t length, double reward) {
  require(length >= 1, error_kind::invalid_argument, "chain length must be at least 1");
  std::vector<Edge> edges;
  edges.reserve(length);
  for (std::size_t i = 0; i < length; ++i) {
    edges.push_back({static_cast<state_id>(i), static_cast<state_id>(i + 1)});
  }
  Dag dag = Dag::create(length + 1, 0, std::move(edges));
  RewardTable rewards = RewardTable::from_terminal_values(dag, {reward});
  return {"chain" + std::to_string(length), std::move(dag), std::move(rewards)};
}

/// Hypergrid {0..side-1}^dimension. Lattice point with mixed-radix index i is
/// state i; its stop terminal is state side^dimension + i. Edges are emitted per
/// lattice point: one increment per axis (axis order), then the stop edge.
inline Environment build_grid(std::size_t dimension, std::size_t side, grid_reward reward_fn,
                              const GridLimits& limits = {}) {
  require(dimension >= 1 && side >= 1, error_kind::invalid_argument,
          "grid dimension and side must be positive");
  require(dimension * (side - 1) <= limits.max_trajectory_length, error_kind::resource_limit,
          "grid trajectory length " + std::to_string(dimension * (side - 1)) +
              " exceeds the configured maximum " + std::to_string(limits.max_trajectory_length));
  std::size_t points = 1;
  for (std::size_t i = 0; i < dimension; ++i) {
    require(points <= limits.state_cap / side, error_kind::resource_limit,
            "grid state count exceeds the cap of " + std::to_string(limits.state_cap));
    points *= side;
  }
  require(2 * points <= limits.state_cap, error_kind::resource_limit,
          "grid state count " + std::to_string(2 * points) + " exceeds the cap of " +
              std::to_string(limits.state_cap));

  std::vector<Edge> edges;
  std::vector<double> rewards(points);
  std::vector<std::size_t> coord(dimension, 0);
  for (std::size_t index = 0; index < points; ++index) {
    std::size_t rem = index;
    for (std::size_t axis = dimension; axis-- > 0;) {
      coord[axis] = rem % side;
      rem /= side;
    }
    std::size_t stride = 1;
    std::vector<std::size_t> strides(dimension);
    for (std::size_t axis = dimension; axis-- > 0;) {
      strides[axis] = stride;
      stride *= side;
    }
    for (std::size_t axis = 0; axis < dimension; ++axis) {
      if (coord[axis] + 1 < side) {
        edges.push_back({static_cast<state_id>(index), static_cast<state_id>(index + strides[axis])});
      }
    }
    edges.push_back({static_cast<state_id>(index), static_cast<state_id>(points + index)});

    bool at_corner = true;
    bool at_center = true;
    for (std::size_t axis = 0; axis < dimension; ++axis) {
      at_corner = at_corner && coord[axis] == side - 1;
      at_center = at_center && coord[axis] == (side - 1) / 2;
    }
    switch (reward_fn) {
      case grid_reward::uniform: rewards[index] = 1.0; break;
      case grid_reward::corner: rewards[index] = 0.1 + (at_corner ? 2.0 : 0.0); break;
      case grid_reward::center: rewards[index] = 0.1 + (at_center ? 2.0 : 0.0); break;
    }
  }
  Dag dag = Dag::create(2 * points, 0, std::move(edges));
  RewardTable table = RewardTable::from_terminal_values(dag, std::move(rewards));
  return {"grid" + std::to_string(dimension) + "x" + std::to_string(side) + "_" + to_string(reward_fn),
          std::move(dag), std::move(table)};
}

/// s0 -> t1, s0 -> t2 with rewards (r1, r2).
inline Environment build_v2(double r1 = 1.0, double r2 = 3.0) {
  Dag dag = Dag::create(3, 0, {{0, 1}, {0, 2}});
  RewardTable rewards = RewardTable::from_terminal_values(dag, {r1, r2});
  return {"v2", std::move(dag), std::move(rewards)};
}

/// s0 -> a, s0 -> b, a -> t, b -> t (ids 0, 1, 2, 3).
inline Environment build_diamond(double reward = 1.0) {
  Dag dag = Dag::create(4, 0, {{0, 1}, {0, 2}, {1, 3}, {2, 3}});
  RewardTable rewards = RewardTable::from_terminal_values(dag, {reward});
  return {"diamond", std::move(dag), std::move(rewards)};
}

/// Diamond plus a -> t2; R(t) = R(t2) = 1. One flow degree of freedom.
inline Environment build_asymmetric_diamond() {
  Dag dag = Dag::create(5, 0, {{0, 1}, {0, 2}, {1, 3}, {2, 3}, {1, 4}});
  RewardTable rewards = RewardTable::from_terminal_values(dag, {1.0, 1.0});
  return {"asym_diamond", std::move(dag), std::move(rewards)};
}

inline nlohmann::json to_json(const Dag& dag, const RewardTable& rewards) {
  nlohmann::json edges = nlohmann::json::array();
  for (const Edge& e : dag.edges()) edges.push_back({e.tail, e.head});
  nlohmann::json r = nlohmann::json::object();
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    r[std::to_string(rewards.terminals()[i])] = rewards.values()[i];
  }
  return {{"states", dag.num_states()}, {"source", dag.source()}, {"edges", edges}, {"rewards", r}};
}

inline Environment parse_dag_json(const std::string& text, const std::string& name = "file") {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw error(error_kind::parse, std::string("malformed JSON: ") + e.what());
  }
  auto field = [&](const char* key) -> const nlohmann::json& {
    require(doc.is_object() && doc.contains(key), error_kind::parse,
            std::string("missing key '") + key + "'");
    return doc.at(key);
  };
  const auto& states = field("states");
  const auto& source = field("source");
  const auto& edges = field("edges");
  const auto& rewards = field("rewards");
  require(states.is_number_unsigned(), error_kind::parse, "'states' must be a nonnegative integer");
  require(source.is_number_unsigned(), error_kind::parse, "'source' must be a nonnegative integer");
  require(edges.is_array(), error_kind::parse, "'edges' must be an array");
  require(rewards.is_object(), error_kind::parse, "'rewards' must be an object");

  std::vector<Edge> edge_list;
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const auto& pair = edges[i];
    require(pair.is_array() && pair.size() == 2 && pair[0].is_number_unsigned() &&
                pair[1].is_number_unsigned(),
            error_kind::parse, "edge " + std::to_string(i) + " must be [tail, head]");
    edge_list.push_back({pair[0].get<state_id>(), pair[1].get<state_id>()});
  }
  std::map<state_id, double> reward_map;
  for (const auto& [key, value] : rewards.items()) {
    state_id id = 0;
    std::size_t used = 0;
    try {
      const unsigned long parsed = std::stoul(key, &used);
      require(parsed <= std::numeric_limits<state_id>::max(), error_kind::parse, "id out of range");
      id = static_cast<state_id>(parsed);
    } catch (const std::logic_error&) {
      used = 0;
    }
    require(used == key.size() && !key.empty(), error_kind::parse,
            "reward key '" + key + "' is not a state id");
    require(value.is_number(), error_kind::parse, "reward for state " + key + " is not a number");
    reward_map[id] = value.get<double>();
  }
  Dag dag = Dag::create(states.get<std::size_t>(), source.get<state_id>(), std::move(edge_list));
  RewardTable table = RewardTable::create(dag, reward_map);
  return {name, std::move(dag), std::move(table)};
}

inline Environment load_dag(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), error_kind::io, "cannot open " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  std::string name = path;
  if (const auto slash = name.find_last_of('/'); slash != std::string::npos) name = name.substr(slash + 1);
  if (const auto dot = name.rfind('.'); dot != std::string::npos) name = name.substr(0, dot);
  return parse_dag_json(buffer.str(), name);
}

inline void save_dag(const std::string& path, const Dag& dag, const RewardTable& rewards) {
  std::ofstream out(path);
  require(static_cast<bool>(out), error_kind::io, "cannot write " + path);
  out << to_json(dag, rewards).dump(2) << '\n';
  require(static_cast<bool>(out), error_kind::io, "write failed for " + path);
}

}  // namespace theorylab
