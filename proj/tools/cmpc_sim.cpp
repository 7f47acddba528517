// Command-line front end: run, batch, metrics, replay.
//
// Exit codes: 0 completed, 2 run aborted (solver failure or diverged plant),
// 3 configuration error.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <thread>

#include "CLI11.hpp"
#include "cmpc/sim.hpp"

namespace fs = std::filesystem;
using namespace cmpc;

namespace {

constexpr int kExitAborted = 2;
constexpr int kExitConfig = 3;

int exit_code(const RunLog& log) { return log.outcome == RunOutcome::Completed ? 0 : kExitAborted; }

void print_summary(const std::string& name, const RunLog& log, const fs::path& dir) {
  const Metrics m = compute_metrics(log, log.scenario);
  std::printf("%s: %s, %d ticks, max boundary violation %.3f m, mean solve %.2f ms -> %s\n", name.c_str(),
              to_string(log.outcome), m.ticks, m.max_boundary_violation, m.mean_solve_ms, dir.string().c_str());
  if (!log.diagnostic.empty()) std::printf("  %s\n", log.diagnostic.c_str());
}

int run_one(Scenario scenario, const fs::path& out) {
  const RunLog log = run_closed_loop(scenario);
  write_log(log, out);
  print_summary(scenario.name, log, out);
  return exit_code(log);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contingency MPC closed-loop simulator"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Simulate one scenario");
  std::string scenario_file, out_dir, controller;
  std::uint64_t seed = 0;
  run->add_option("scenario", scenario_file, "Scenario JSON")->required();
  run->add_option("--out", out_dir, "Output directory (default runs/<name>)");
  run->add_option("--controller", controller, "Override the controller kind")->check(CLI::IsMember({"cmpc", "dmpc"}));
  auto* seed_opt = run->add_option("--seed", seed, "Seed for the initial-state jitter");

  auto* batch = app.add_subcommand("batch", "Simulate every scenario JSON in a directory");
  std::string batch_dir, batch_out = "runs";
  unsigned jobs = std::max(1u, std::thread::hardware_concurrency());
  batch->add_option("dir", batch_dir, "Scenario directory")->required();
  batch->add_option("--out", batch_out, "Output root");
  batch->add_option("--jobs", jobs, "Parallel runs")->check(CLI::PositiveNumber);

  auto* metrics = app.add_subcommand("metrics", "Recompute metrics of a run directory");
  std::string metrics_dir;
  metrics->add_option("run_dir", metrics_dir)->required();

  auto* replay = app.add_subcommand("replay", "Re-drive the plant from logged commands");
  std::string replay_dir;
  replay->add_option("run_dir", replay_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) {
      Scenario scenario;
      try {
        scenario = load_scenario(scenario_file);
        if (!controller.empty()) {
          scenario.controller.kind = controller_kind_from_string(controller);
          scenario.name += "_" + controller;
        }
        if (*seed_opt) scenario.seed = seed;
      } catch (const Error& e) {
        std::cerr << e.what() << '\n';
        return kExitConfig;
      }
      return run_one(scenario, out_dir.empty() ? fs::path("runs") / scenario.name : fs::path(out_dir));
    }

    if (*batch) {
      std::vector<fs::path> files;
      for (const auto& entry : fs::directory_iterator(batch_dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
      }
      std::sort(files.begin(), files.end());
      std::vector<Scenario> scenarios;
      for (const auto& f : files) {
        try {
          scenarios.push_back(load_scenario(f));
        } catch (const Error& e) {
          std::cerr << f.string() << ": " << e.what() << '\n';
          return kExitConfig;
        }
      }
      std::atomic<std::size_t> next{0};
      std::atomic<int> worst{0};
      std::mutex print;
      auto worker = [&] {
        for (std::size_t i; (i = next++) < scenarios.size();) {
          const fs::path dir = fs::path(batch_out) / scenarios[i].name;
          const RunLog log = run_closed_loop(scenarios[i]);
          write_log(log, dir);
          std::lock_guard<std::mutex> lock(print);
          print_summary(scenarios[i].name, log, dir);
          int code = exit_code(log);
          int prev = worst.load();
          while (code > prev && !worst.compare_exchange_weak(prev, code)) {
          }
        }
      };
      std::vector<std::thread> pool;
      for (unsigned t = 0; t < std::min<std::size_t>(jobs, scenarios.size()); ++t) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
      return worst.load();
    }

    if (*metrics) {
      const RunLog log = read_log(metrics_dir);
      std::cout << metrics_to_json(compute_metrics(log, log.scenario)).dump(2) << '\n';
      return 0;
    }

    if (*replay) {
      const RunLog log = read_log(replay_dir);
      std::vector<double> commands;
      for (const auto& t : log.ticks) commands.push_back(t.delta);
      const auto states = replay_commands(log.scenario, commands);
      double worst = 0.0;
      for (std::size_t i = 0; i < log.ticks.size(); ++i) {
        const VehicleState& a = log.ticks[i].state;
        const VehicleState& b = states[i];
        worst = std::max({worst, std::abs(a.s - b.s), std::abs(a.e - b.e), std::abs(a.dpsi - b.dpsi),
                          std::abs(a.Ux - b.Ux), std::abs(a.Uy - b.Uy), std::abs(a.r - b.r)});
      }
      const nlohmann::json report = {{"ticks", log.ticks.size()}, {"max_state_deviation", worst}};
      std::cout << report.dump(2) << '\n';
      return worst == 0.0 ? 0 : 1;
    }
  } catch (const Error& e) {
    std::cerr << e.what() << '\n';
    const bool config = e.code() == ErrorCode::ParseError || e.code() == ErrorCode::SchemaVersionMismatch ||
                        e.code() == ErrorCode::InvalidParameter || e.code() == ErrorCode::InvalidGeometry;
    return config ? kExitConfig : kExitAborted;
  }
  return 0;
}
