#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "theorylab/error.hpp"
#include "theorylab/flow_model.hpp"
#include "theorylab/graph.hpp"
#include "theorylab/objectives.hpp"
#include "theorylab/oracle.hpp"
#include "theorylab/rng.hpp"

namespace theorylab {

enum class schedule { inv_sqrt, two_thirds, constant };

inline std::string to_string(schedule s) {
  switch (s) {
    case schedule::inv_sqrt: return "inv_sqrt";
    case schedule::two_thirds: return "two_thirds";
    case schedule::constant: return "constant";
  }
  return "?";
}

inline schedule parse_schedule(const std::string& name) {
  if (name == "inv_sqrt") return schedule::inv_sqrt;
  if (name == "two_thirds") return schedule::two_thirds;
  if (name == "constant") return schedule::constant;
  throw error(error_kind::invalid_argument, "unknown schedule '" + name + "'");
}

inline double lr(schedule s, double eta0, std::size_t t) {
  require(t >= 1, error_kind::invalid_argument, "learning-rate step index starts at 1");
  const auto x = static_cast<double>(t);
  switch (s) {
    case schedule::inv_sqrt: return eta0 / std::sqrt(x);
    case schedule::two_thirds: return eta0 / std::cbrt(x * x);
    case schedule::constant: return eta0;
  }
  return eta0;
}

/// How each step's batch is drawn.
///   on_policy    - batch_size forward trajectories (FM/DB use the visited states/transitions)
///   backward     - batch_size backward trajectories, terminal ~ R
///   uniform_traj - batch_size trajectories uniform over the enumeration table
///   custom       - batch_size trajectories from custom_probs over the table
///   uniform      - batch_size iid uniform states (FM), transitions (DB) or trajectories (TB)
///   exhaustive   - every state / transition / trajectory; TB weights trajectories by the current P_F
enum class sampling_mode { on_policy, backward, uniform_traj, custom, uniform, exhaustive };

inline std::string to_string(sampling_mode m) {
  switch (m) {
    case sampling_mode::on_policy: return "on_policy";
    case sampling_mode::backward: return "backward";
    case sampling_mode::uniform_traj: return "uniform_traj";
    case sampling_mode::custom: return "custom";
    case sampling_mode::uniform: return "uniform";
    case sampling_mode::exhaustive: return "exhaustive";
  }
  return "?";
}

inline sampling_mode parse_sampling_mode(const std::string& name) {
  for (auto m : {sampling_mode::on_policy, sampling_mode::backward, sampling_mode::uniform_traj,
                 sampling_mode::custom, sampling_mode::uniform, sampling_mode::exhaustive}) {
    if (to_string(m) == name) return m;
  }
  throw error(error_kind::invalid_argument, "unknown sampling mode '" + name + "'");
}

enum class init_kind { zeros, uniform, explicit_params };

struct TrainConfig {
  objective obj = objective::tb;
  schedule sched = schedule::constant;
  double eta0 = 0.1;
  std::size_t steps = 1000;
  std::size_t batch_size = 1;
  sampling_mode sampling = sampling_mode::on_policy;
  std::vector<double> custom_probs;
  std::uint64_t seed = 0;
  init_kind init = init_kind::zeros;
  double init_half_width = 1.0;
  std::optional<LogFlowParams> init_params;
  /// Evaluate the full-objective gradient at every step so the running
  /// minimum covers all iterates; otherwise only at checkpoints.
  bool track_every_step = true;
};

enum class noise_kind { none, uniform, gaussian };
enum class resample_mode { per_draw, fixed_realization };

inline noise_kind parse_noise_kind(const std::string& name) {
  if (name == "none") return noise_kind::none;
  if (name == "uniform") return noise_kind::uniform;
  if (name == "gaussian") return noise_kind::gaussian;
  throw error(error_kind::invalid_argument, "unknown noise kind '" + name + "'");
}

struct NoiseConfig {
  noise_kind kind = noise_kind::none;
  double sigma2 = 0.0;
  std::optional<double> floor;  // defaults to R_min / 10
  resample_mode resample = resample_mode::per_draw;
};

inline void validate(const NoiseConfig& noise) {
  require(noise.sigma2 >= 0.0 && std::isfinite(noise.sigma2), error_kind::invalid_argument,
          "noise variance must be nonnegative");
  require(!noise.floor || *noise.floor > 0.0, error_kind::invalid_argument, "reward floor must be positive");
}

inline void validate(const TrainConfig& config) {
  require(config.eta0 >= 0.0 && std::isfinite(config.eta0), error_kind::invalid_argument,
          "eta0 must be nonnegative and finite");
  require(config.steps >= 1, error_kind::invalid_argument, "steps must be at least 1");
  require(config.batch_size >= 1, error_kind::invalid_argument, "batch_size must be at least 1");
  require(config.init != init_kind::explicit_params || config.init_params.has_value(),
          error_kind::invalid_argument, "explicit init needs parameters");
}

/// Zero-mean noise draw with variance sigma2.
inline double draw_noise(const NoiseConfig& noise, rng_t& rng) {
  if (noise.kind == noise_kind::none || noise.sigma2 == 0.0) return 0.0;
  if (noise.kind == noise_kind::uniform) {
    const double half = std::sqrt(3.0 * noise.sigma2);
    return half * (2.0 * uniform01(rng) - 1.0);
  }
  return std::sqrt(noise.sigma2) * std::normal_distribution<double>(0.0, 1.0)(rng);
}

struct NoisyReward {
  double value = 0.0;
  bool clamped = false;
};

inline double reward_floor(const RewardTable& rewards, const NoiseConfig& noise) {
  return noise.floor.value_or(rewards.r_min() / 10.0);
}

/// max(R + eps, floor) with a fresh eps.
inline NoisyReward effective_reward(const RewardTable& rewards, const NoiseConfig& noise, state_id terminal,
                                    rng_t& rng) {
  const double r = rewards.reward(terminal);
  if (noise.kind == noise_kind::none || noise.sigma2 == 0.0) return {r, false};
  const double noisy = r + draw_noise(noise, rng);
  const double floor = reward_floor(rewards, noise);
  if (noisy < floor) return {floor, true};
  return {noisy, false};
}

/// Effective rewards over a run: per-draw or one fixed realization per terminal,
/// with clamp accounting.
class RewardNoise {
 public:
  RewardNoise(const RewardTable& rewards, NoiseConfig config, rng_t rng)
      : rewards_(&rewards), config_(std::move(config)), rng_(std::move(rng)) {
    validate(config_);
    if (active() && config_.resample == resample_mode::fixed_realization) {
      for (state_id t : rewards.terminals()) {
        const auto r = effective_reward(rewards, config_, t, rng_);
        fixed_.push_back(r);
      }
    }
  }

  bool active() const { return config_.kind != noise_kind::none && config_.sigma2 > 0.0; }

  double operator()(state_id terminal) {
    if (!active()) return rewards_->reward(terminal);
    NoisyReward r;
    if (config_.resample == resample_mode::fixed_realization) {
      r = fixed_[slot(terminal)];
    } else {
      r = effective_reward(*rewards_, config_, terminal, rng_);
    }
    ++draws_;
    if (r.clamped) ++clamps_;
    return r.value;
  }

  double clamp_rate() const { return draws_ == 0 ? 0.0 : static_cast<double>(clamps_) / static_cast<double>(draws_); }
  std::size_t clamps() const { return clamps_; }
  std::size_t draws() const { return draws_; }

 private:
  std::size_t slot(state_id terminal) const {
    const auto ts = rewards_->terminals();
    return static_cast<std::size_t>(std::find(ts.begin(), ts.end(), terminal) - ts.begin());
  }

  const RewardTable* rewards_;
  NoiseConfig config_;
  rng_t rng_;
  std::vector<NoisyReward> fixed_;
  std::size_t draws_ = 0;
  std::size_t clamps_ = 0;
};

struct RunRow {
  std::size_t t = 0;
  double eta = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double min_grad_sq = 0.0;
  double l1_flow_err = 0.0;
  double tv = 0.0;
  double kl = 0.0;
  double g_est = 0.0;
  double k_est = 0.0;
  double clamp_rate = 0.0;

  friend bool operator==(const RunRow&, const RunRow&) = default;
};

struct RunRecord {
  std::vector<RunRow> rows;
  std::optional<LogFlowParams> final_params;
  double final_loss = 0.0;
  double final_l1_flow_err = 0.0;
  double final_tv = 0.0;
  double final_kl = 0.0;

  friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

inline constexpr const char* run_csv_header = "t,eta,loss,grad_norm,min_grad_sq,l1_flow_err,tv,kl,g_est,k_est,clamp_rate";

inline std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline void write_csv(std::ostream& out, const RunRecord& record) {
  out << run_csv_header << '\n';
  for (const auto& r : record.rows) {
    out << r.t;
    for (double x : {r.eta, r.loss, r.grad_norm, r.min_grad_sq, r.l1_flow_err, r.tv, r.kl, r.g_est, r.k_est,
                     r.clamp_rate}) {
      out << ',' << format_double(x);
    }
    out << '\n';
  }
}

/// Total variation and KL(p || q) between distributions on the same support.
inline double total_variation(std::span<const double> p, std::span<const double> q) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
  return 0.5 * acc;
}

inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) acc += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(acc, 0.0);
}

class training_diverged : public error {
 public:
  training_diverged(std::size_t step, RunRecord last, const std::string& what)
      : error(error_kind::training_diverged, "step " + std::to_string(step) + ": " + what),
        step_(step),
        last_(std::move(last)) {}

  std::size_t step() const noexcept { return step_; }
  const RunRecord& last_record() const noexcept { return last_; }

 private:
  std::size_t step_;
  RunRecord last_;
};

/// Checkpoint steps: powers of two and T when every == 0, else multiples of every and T.
inline std::vector<std::size_t> checkpoint_steps(std::size_t steps, std::size_t every) {
  std::vector<std::size_t> out;
  if (every == 0) {
    for (std::size_t t = 1; t <= steps; t *= 2) out.push_back(t);
  } else {
    for (std::size_t t = every; t <= steps; t += every) out.push_back(t);
  }
  if (out.empty() || out.back() != steps) out.push_back(steps);
  return out;
}

struct StepInfo {
  std::size_t t = 0;
  double eta = 0.0;
  double batch_loss = 0.0;
  double batch_grad_norm = 0.0;
};

/// Single-writer SGD loop over one LogFlowParams. `train` drives it for a fixed
/// number of steps; experiments that need first-passage stopping drive it directly.
class Trainer {
 public:
  Trainer(Dag dag, RewardTable rewards, TrainConfig config, NoiseConfig noise = {},
          std::shared_ptr<const TrajectoryTable> table = nullptr,
          std::optional<std::vector<double>> reference_flows = std::nullopt)
      : dag_(std::move(dag)),
        rewards_(std::move(rewards)),
        config_(std::move(config)),
        table_(std::move(table)),
        sample_rng_(derive_stream(config_.seed, 0)),
        noise_(rewards_, noise, derive_stream(config_.seed, 1)),
        params_(LogFlowParams::initial(dag_, rewards_)),
        target_dist_(exact_terminal_distribution(rewards_)) {
    validate(config_);
    const bool needs_table = config_.sampling == sampling_mode::uniform_traj ||
                             config_.sampling == sampling_mode::custom ||
                             (config_.obj == objective::tb && (config_.sampling == sampling_mode::uniform ||
                                                               config_.sampling == sampling_mode::exhaustive));
    require(!needs_table || table_ != nullptr, error_kind::invalid_argument,
            "sampling mode " + to_string(config_.sampling) + " needs an enumeration table");
    if (config_.sampling == sampling_mode::custom) {
      require(config_.custom_probs.size() == table_->count(), error_kind::invalid_argument,
              "custom sampling probabilities do not match the trajectory table");
    }
    rng_t init_rng = derive_stream(config_.seed, 2);
    if (config_.init == init_kind::uniform) {
      params_ = LogFlowParams::uniform(dag_, config_.init_half_width, init_rng, std::log(rewards_.z_r()));
    } else if (config_.init == init_kind::explicit_params) {
      require(config_.init_params->size() == dag_.num_edges(), error_kind::invalid_argument,
              "initial parameters do not match the edge count");
      params_ = *config_.init_params;
    }
    if (reference_flows) {
      require(reference_flows->size() == dag_.num_edges(), error_kind::invalid_argument,
              "reference flow size does not match the edge count");
      reference_ = std::move(*reference_flows);
    } else {
      reference_ = max_entropy_flow(build_incidence(dag_, rewards_), dag_, 1e-10).edge_flows;
    }
    const double max_in = static_cast<double>(dag_.max_in_degree());
    k_est_ = max_in * max_in;
  }

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const Dag& dag() const noexcept { return dag_; }
  const RewardTable& rewards() const noexcept { return rewards_; }
  const TrainConfig& config() const noexcept { return config_; }
  const LogFlowParams& params() const noexcept { return params_; }
  std::size_t next_step() const noexcept { return t_; }
  /// Trajectories (or states/transitions for uniform FM/DB) consumed so far.
  std::size_t samples() const noexcept { return samples_; }
  double clamp_rate() const { return noise_.clamp_rate(); }

  /// Loss and gradient of the full objective at the current parameters with
  /// true rewards: FM over all non-source states, DB over all transitions,
  /// TB over the table weighted by the sampling distribution (the batch when no
  /// table is available).
  std::optional<LossGrad> full_objective() const {
    switch (config_.obj) {
      case objective::fm: {
        const auto states = nonsource_states(dag_);
        return fm_loss_grad(params_, dag_, rewards_, states);
      }
      case objective::db: {
        const auto edges = all_transitions(dag_);
        return db_loss_grad(params_, dag_, rewards_, edges);
      }
      case objective::tb: {
        if (!table_) return std::nullopt;
        const auto weights = trajectory_weights();
        return tb_loss_grad(params_, dag_, rewards_, table_->trajectories, weights);
      }
    }
    return std::nullopt;
  }

  /// Exact terminal TV / KL vs R/Z_R and L1 flow error vs the reference.
  RunRow evaluate_distances() const {
    RunRow row;
    const auto model = model_terminal_distribution(params_, dag_);
    row.tv = total_variation(model, target_dist_);
    row.kl = kl_divergence(model, target_dist_);
    const auto flows = current_flows();
    for (std::size_t e = 0; e < flows.size(); ++e) row.l1_flow_err += std::abs(flows[e] - reference_[e]);
    return row;
  }

  /// FM/DB: exp(w). TB: flows induced by P_F and exp(zeta).
  std::vector<double> current_flows() const {
    if (config_.obj == objective::tb) return induced_edge_flows(params_, dag_, std::exp(params_.zeta()));
    return edge_flows(params_);
  }

  StepInfo step() { return step_with(nullptr); }

  /// One update on a caller-supplied trajectory instead of a sampled batch.
  StepInfo step_on(const Trajectory& traj) { return step_with(&traj); }

  RunRow make_row(const StepInfo& info) {
    RunRow row = evaluate_distances();
    row.t = info.t;
    row.eta = info.eta;
    track_full_gradient();
    row.loss = last_full_loss_;
    row.grad_norm = last_full_grad_norm_;
    row.min_grad_sq = min_grad_sq_;
    row.g_est = g_est_;
    row.k_est = k_est_;
    row.clamp_rate = noise_.clamp_rate();
    return row;
  }

  RunRecord& record() noexcept { return record_; }

  /// Steps at which step() appends a row to record().
  void set_checkpoints(std::vector<std::size_t> steps) { checkpoints_ = std::move(steps); }

  void finish() {
    const RunRow d = evaluate_distances();
    record_.final_params = params_;
    const auto full = full_objective();
    record_.final_loss = full ? full->loss : std::numeric_limits<double>::quiet_NaN();
    record_.final_l1_flow_err = d.l1_flow_err;
    record_.final_tv = d.tv;
    record_.final_kl = d.kl;
  }

 private:
  std::vector<double> trajectory_weights() const {
    switch (config_.sampling) {
      case sampling_mode::backward: {
        std::vector<double> w;
        for (const auto& t : table_->trajectories) w.push_back(std::exp(backward_trajectory_logprob(dag_, rewards_, t)));
        return w;
      }
      case sampling_mode::uniform_traj:
      case sampling_mode::uniform: return std::vector<double>(table_->count(), 1.0);
      case sampling_mode::custom: return config_.custom_probs;
      case sampling_mode::on_policy:
      case sampling_mode::exhaustive: return trajectory_probs(params_, dag_, *table_);
    }
    return {};
  }

  void track_full_gradient() {
    if (tracked_at_ == t_) return;
    tracked_at_ = t_;
    const auto full = full_objective();
    if (full) {
      last_full_loss_ = full->loss;
      last_full_grad_norm_ = full->grad_norm();
    } else {
      last_full_loss_ = last_batch_loss_;
      last_full_grad_norm_ = last_batch_grad_norm_;
    }
    min_grad_sq_ = std::min(min_grad_sq_, last_full_grad_norm_ * last_full_grad_norm_);
  }

  Trajectory draw_trajectory() {
    ++samples_;
    switch (config_.sampling) {
      case sampling_mode::on_policy: return sample_forward(params_, dag_, sample_rng_);
      case sampling_mode::backward: return sample_backward(dag_, rewards_, sample_rng_);
      case sampling_mode::custom:
        return table_->trajectories[sample_categorical(config_.custom_probs, sample_rng_)];
      default: {
        const auto n = table_->count();
        const auto i = std::min(static_cast<std::size_t>(uniform01(sample_rng_) * static_cast<double>(n)), n - 1);
        return table_->trajectories[i];
      }
    }
  }

  LossGrad batch_loss_grad(const Trajectory* fixed) {
    std::vector<Trajectory> trajs;
    std::vector<double> weights;
    const bool exhaustive = fixed == nullptr && config_.sampling == sampling_mode::exhaustive;
    const bool iid_elements = fixed == nullptr && config_.sampling == sampling_mode::uniform;
    if (fixed) {
      trajs.push_back(*fixed);
      ++samples_;
    } else if (!exhaustive && !(iid_elements && config_.obj != objective::tb)) {
      for (std::size_t i = 0; i < config_.batch_size; ++i) trajs.push_back(draw_trajectory());
    }

    switch (config_.obj) {
      case objective::fm: {
        std::vector<state_id> states;
        if (exhaustive) {
          states = nonsource_states(dag_);
        } else if (iid_elements) {
          const auto all = nonsource_states(dag_);
          for (std::size_t i = 0; i < config_.batch_size; ++i) {
            states.push_back(all[std::min(static_cast<std::size_t>(uniform01(sample_rng_) * static_cast<double>(all.size())),
                                          all.size() - 1)]);
            ++samples_;
          }
        } else {
          for (const auto& t : trajs) states.insert(states.end(), t.states.begin() + 1, t.states.end());
        }
        const auto eff = effective_for_states(states);
        return fm_loss_grad(params_, dag_, rewards_, states, {}, eff);
      }
      case objective::db: {
        std::vector<edge_id> edges;
        if (exhaustive) {
          edges = all_transitions(dag_);
        } else if (iid_elements) {
          for (std::size_t i = 0; i < config_.batch_size; ++i) {
            edges.push_back(static_cast<edge_id>(std::min(
                static_cast<std::size_t>(uniform01(sample_rng_) * static_cast<double>(dag_.num_edges())),
                static_cast<std::size_t>(dag_.num_edges() - 1))));
            ++samples_;
          }
        } else {
          for (const auto& t : trajs) edges.insert(edges.end(), t.edges.begin(), t.edges.end());
        }
        std::vector<state_id> heads;
        for (edge_id e : edges) heads.push_back(dag_.edge(e).head);
        const auto eff = effective_for_states(heads);
        return db_loss_grad(params_, dag_, rewards_, edges, {}, eff);
      }
      case objective::tb: {
        if (exhaustive) {
          trajs = table_->trajectories;
          weights = trajectory_probs(params_, dag_, *table_);
        }
        std::vector<state_id> ends;
        for (const auto& t : trajs) ends.push_back(t.terminal());
        const auto eff = effective_for_states(ends);
        return tb_loss_grad(params_, dag_, rewards_, trajs, weights, eff);
      }
    }
    throw error(error_kind::invalid_argument, "unknown objective");
  }

  std::vector<double> effective_for_states(std::span<const state_id> states) {
    if (!noise_.active()) return {};
    std::vector<double> eff;
    eff.reserve(states.size());
    for (state_id s : states) eff.push_back(dag_.is_terminal(s) ? noise_(s) : 0.0);
    return eff;
  }

  StepInfo step_with(const Trajectory* fixed) {
    StepInfo info;
    info.t = t_;
    info.eta = lr(config_.sched, config_.eta0, t_);
    LossGrad lg = batch_loss_grad(fixed);
    info.batch_loss = lg.loss;
    info.batch_grad_norm = lg.grad_norm();
    last_batch_loss_ = lg.loss;
    last_batch_grad_norm_ = info.batch_grad_norm;
    if (!std::isfinite(info.batch_loss) || !std::isfinite(info.batch_grad_norm)) {
      throw training_diverged(t_, record_, "loss or gradient is not finite");
    }
    g_est_ = std::max(g_est_, info.batch_grad_norm);
    if (config_.track_every_step) track_full_gradient();
    if (std::binary_search(checkpoints_.begin(), checkpoints_.end(), t_)) record_.rows.push_back(make_row(info));
    if (config_.obj != objective::tb) lg.grad_zeta = 0.0;
    try {
      params_.sgd_step(lg.grad_w, lg.grad_zeta, info.eta);
    } catch (const error& e) {
      throw training_diverged(t_, record_, e.what());
    }
    ++t_;
    return info;
  }

 private:
  Dag dag_;
  RewardTable rewards_;
  TrainConfig config_;
  std::shared_ptr<const TrajectoryTable> table_;
  rng_t sample_rng_;
  RewardNoise noise_;
  LogFlowParams params_;
  std::vector<double> target_dist_;
  std::vector<double> reference_;
  std::vector<std::size_t> checkpoints_;
  RunRecord record_;
  std::size_t t_ = 1;
  std::size_t tracked_at_ = 0;
  std::size_t samples_ = 0;
  double k_est_ = 1.0;
  double g_est_ = 0.0;
  double min_grad_sq_ = std::numeric_limits<double>::infinity();
  double last_full_loss_ = 0.0;
  double last_full_grad_norm_ = 0.0;
  double last_batch_loss_ = 0.0;
  double last_batch_grad_norm_ = 0.0;
};

/// Run config.steps SGD steps. Rows are recorded at the checkpoint steps with
/// metrics of the iterate before that step's update; the record also holds the
/// final parameters and their exact distances.
inline RunRecord train(const Dag& dag, const RewardTable& rewards, const TrainConfig& config,
                       const NoiseConfig& noise = {}, std::size_t checkpoint_every = 0,
                       std::shared_ptr<const TrajectoryTable> table = nullptr,
                       std::optional<std::vector<double>> reference_flows = std::nullopt) {
  Trainer trainer(dag, rewards, config, noise, std::move(table), std::move(reference_flows));
  trainer.set_checkpoints(checkpoint_steps(config.steps, checkpoint_every));
  for (std::size_t i = 0; i < config.steps; ++i) trainer.step();
  trainer.finish();
  return trainer.record();
}

/// Train on the given trajectories in order, one per step.
inline RunRecord replay_order(const Dag& dag, const RewardTable& rewards, std::span<const Trajectory> trajs,
                              const TrainConfig& config, std::size_t checkpoint_every = 0,
                              std::optional<std::vector<double>> reference_flows = std::nullopt) {
  require(config.steps == trajs.size(), error_kind::invalid_argument,
          "replay needs exactly one trajectory per step");
  for (const auto& t : trajs) validate_trajectory(dag, t);
  Trainer trainer(dag, rewards, config, {}, nullptr, std::move(reference_flows));
  trainer.set_checkpoints(checkpoint_steps(config.steps, checkpoint_every));
  for (const auto& t : trajs) trainer.step_on(t);
  trainer.finish();
  return trainer.record();
}

}  // namespace theorylab
