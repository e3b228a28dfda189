#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace theorylab {

enum class error_kind {
  invalid_argument,
  resource_limit,
  parse,
  cycle,
  unreachable,
  dead_end,
  duplicate_edge,
  nonpositive_reward,
  missing_reward,
  reward_on_nonterminal,
  non_finite,
  solver,
  infinite_discrepancy,
  training_diverged,
  io,
};

inline std::string_view to_string(error_kind kind) {
  switch (kind) {
    case error_kind::invalid_argument: return "invalid-argument";
    case error_kind::resource_limit: return "resource-limit";
    case error_kind::parse: return "parse";
    case error_kind::cycle: return "cycle";
    case error_kind::unreachable: return "unreachable";
    case error_kind::dead_end: return "dead-end";
    case error_kind::duplicate_edge: return "duplicate-edge";
    case error_kind::nonpositive_reward: return "nonpositive-reward";
    case error_kind::missing_reward: return "missing-reward";
    case error_kind::reward_on_nonterminal: return "reward-on-nonterminal";
    case error_kind::non_finite: return "non-finite";
    case error_kind::solver: return "solver";
    case error_kind::infinite_discrepancy: return "infinite-discrepancy";
    case error_kind::training_diverged: return "training-diverged";
    case error_kind::io: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library. `kind()` distinguishes the variants
/// callers are expected to branch on; the message names the offending element.
class error : public std::runtime_error {
 public:
  error(error_kind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  error_kind kind() const noexcept { return kind_; }

 private:
  error_kind kind_;
};

inline void require(bool condition, error_kind kind, const std::string& message) {
  if (!condition) throw error(kind, message);
}

}  // namespace theorylab
