#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "theorylab/harness.hpp"

namespace {

using namespace theorylab;

std::vector<double> parse_values(const std::string& key, const std::string& list) {
  std::vector<double> out;
  std::stringstream in(list);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used > 0 && used == item.size(), error_kind::parse, "bad value '" + item + "' for grid key '" + key + "'");
    out.push_back(v);
  }
  require(!out.empty(), error_kind::parse, "grid key '" + key + "' has no values");
  return out;
}

void add_grid_entry(Grid& grid, const std::string& entry) {
  const auto eq = entry.find('=');
  require(eq != std::string::npos && eq > 0, error_kind::parse, "grid entry '" + entry + "' is not KEY=v1,v2,...");
  const std::string key = entry.substr(0, eq);
  grid[key] = parse_values(key, entry.substr(eq + 1));
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int export_envs(const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& env : bundled_environments()) {
    const auto path = std::filesystem::path(dir) / (env.name + ".json");
    save_dag(path.string(), env.dag, env.rewards);
    std::cout << path.string() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"theorylab: GFlowNet experiments on explicit DAGs"};
  std::string experiment;
  std::string env_kind;
  EnvSpec env;
  std::vector<std::string> grid_entries;
  std::string sigma2, eps;
  std::string formats = "csv,svg";
  ExperimentSpec spec;
  std::string out = "out";
  app.add_option("experiment", experiment,
                 "convergence | sample_complexity | order | error_accum | noise_objective | noise_drift | "
                 "noise_sample_ratio | regularization | audit | export-envs")
      ->required();
  app.add_option("--env", env_kind, "chain | grid | layered | v2 | diamond | asym_diamond | file:PATH");
  app.add_option("--length", env.length, "chain length")->check(CLI::PositiveNumber);
  app.add_option("--reward-value", env.chain_reward, "chain terminal reward")->check(CLI::PositiveNumber);
  app.add_option("--dim", env.dim, "grid dimension")->check(CLI::PositiveNumber);
  app.add_option("--side", env.side, "grid side")->check(CLI::PositiveNumber);
  app.add_option("--grid-reward", env.grid_reward, "uniform | corner | center");
  app.add_option("--layers", env.layers, "layered DAG depth")->check(CLI::PositiveNumber);
  app.add_option("--width", env.width, "layered DAG width")->check(CLI::PositiveNumber);
  app.add_option("--layered-seed", env.layered_seed, "layered DAG generator seed");
  app.add_option("--grid", grid_entries, "KEY=v1,v2,... (repeatable)");
  app.add_option("--seeds", spec.seeds, "seeds per cell (0: experiment default)");
  app.add_option("--sigma2", sigma2, "noise variances, comma separated");
  app.add_option("--eps", eps, "accuracy targets, comma separated");
  app.add_option("--out", out, "output directory");
  app.add_option("--formats", formats, "subset of csv,svg");
  app.add_option("--seed", spec.base_seed, "base seed");
  app.add_option("--threads", spec.threads, "worker threads (0: all cores)");
  app.add_option("--slack", spec.slack, "relative slack on bound checks");
  app.add_option("--delta", spec.delta, "PAC failure probability");
  app.add_option("--sample-cap", spec.sample_cap, "first-passage sample cap");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (experiment == "export-envs") return export_envs(out);
    spec.id = parse_experiment(experiment);
    if (!env_kind.empty()) {
      env.kind = env_kind;
      spec.env = env;
    }
    for (const auto& entry : grid_entries) add_grid_entry(spec.grid, entry);
    if (!sigma2.empty()) spec.grid["sigma2"] = parse_values("sigma2", sigma2);
    if (!eps.empty()) spec.grid["eps"] = parse_values("eps", eps);
    spec.formats = split(formats);
    spec.out = out;

    const Summary summary = run_experiment(spec);
    emit(summary, spec.out, spec.formats);
    for (const auto& c : summary.checks) {
      std::printf("%-4s %s%s\n", c.pass ? "ok" : "FAIL", c.name.c_str(), c.asserted ? "" : " (reported)");
    }
    if (summary.censored > 0) std::printf("censored: %zu\n", summary.censored);
    for (const auto& note : summary.notes) std::printf("note: %s\n", note.c_str());
    std::printf("%s: %s\n", summary.experiment.c_str(), summary.passed() ? "pass" : "fail");
    return summary.passed() ? 0 : 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
