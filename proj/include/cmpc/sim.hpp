#pragma once

// Closed-loop simulation, scenario files, run logs and metrics.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cmpc/cmpc.hpp"
#include "cmpc/track.hpp"
#include "cmpc/vehicle_model.hpp"

namespace cmpc {

inline constexpr int kSchemaVersion = 1;

struct PathSpec {
  enum class Kind { LeftTurn, Straight, Samples };
  Kind kind{Kind::LeftTurn};
  double radius{20};
  double entry_length{40};
  double exit_length{40};
  double length{100};  // Straight only
  double half_width{3};
  std::vector<PathSample> samples;  // Samples only

  Path build() const;
};

struct Scenario {
  std::string name;
  PathSpec path;
  FrictionMap friction{0.25};
  std::vector<SpeedSample> speed{{0.0, 5.0}};
  double speed_gain{2.0};  // 1/s, proportional speed tracking
  VehicleParams vehicle;
  ControllerConfig controller;
  VehicleState initial;
  double duration{22};
  std::uint64_t seed{0};
  // Standard deviations of the seeded perturbation of the initial e and dpsi.
  double jitter_e{0};
  double jitter_dpsi{0};

  Scenario();
  SpeedProfile speed_profile() const { return SpeedProfile(speed, vehicle.ux_min); }
  /// Throws InvalidParameter.
  void validate() const;
};

/// Parses a scenario document. `base_dir` resolves a vehicle file reference.
Scenario scenario_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
/// Self-contained echo: the vehicle is written inline.
nlohmann::json scenario_to_json(const Scenario& scenario);
Scenario load_scenario(const std::filesystem::path& file);

VehicleParams vehicle_from_json(const nlohmann::json& doc);
nlohmann::json vehicle_to_json(const VehicleParams& params);

struct TickRecord {
  int tick{0};
  double t{0};
  VehicleState state;
  double mu{0};  // ground-truth surface friction at state.s
  double delta{0};
  bool hold{false};
  QpStatus status{QpStatus::NumericalError};
  int iterations{0};
  double solve_ms{0};
  double residual{0};
  double objective{0};
  double sigma_stab_nom{0};
  double sigma_env_nom{0};
  double sigma_stab_c{0};
  double sigma_env_c{0};
};

struct HorizonRecord {
  int tick{0};
  Branch branch{Branch::Nominal};
  int stage{0};
  double t{0};
  double s{0};
  double Ux{0};
  double kappa{0};
  MpcState x{MpcState::Zero()};
  double u{0};  // NaN at the terminal stage
  double sigma_stab{0};
  double sigma_env{0};
};

enum class RunOutcome { Completed, SolverFailure, NonFinite };
const char* to_string(RunOutcome outcome);

struct RunLog {
  Scenario scenario;
  std::vector<TickRecord> ticks;
  std::vector<HorizonRecord> horizons;
  RunOutcome outcome{RunOutcome::Completed};
  std::string diagnostic;
  bool reached_end{false};
};

/// Called after every controller step, before the plant is advanced.
using TickObserver = std::function<void(const TickRecord&, const StepResult&)>;

struct RunOptions {
  bool record_horizons{true};
  TickObserver observer;
};

RunLog run_closed_loop(const Scenario& scenario, const RunOptions& options = {});

/// Initial state after the seeded jitter.
VehicleState initial_state(const Scenario& scenario);

/// Longitudinal forces of the speed-tracking law, split evenly over the axles.
ControlInput plant_input(const Scenario& scenario, const VehicleState& state, double delta);

/// Advances the plant one controller tick on the scenario's ground truth.
VehicleState plant_step(const Scenario& scenario, const Path& path, const VehicleState& state, double delta);

/// Re-drives the plant from `commands`, one per tick. Controller settings play no part.
std::vector<VehicleState> replay_commands(const Scenario& scenario, const std::vector<double>& commands);

struct Metrics {
  double max_boundary_violation{0};  // m
  double max_abs_e_pre_turn{0};      // m
  double max_outward_pre_turn{0};    // m, toward the outside of the first curve
  double yaw_violation_area{0};      // rad/s * s
  double sideslip_violation_area{0}; // rad * s
  double mean_solve_ms{0};
  double max_solve_ms{0};
  double max_sigma_env_contingency{0};
  double max_residual{0};
  int ticks{0};
  int unsolved_ticks{0};
  bool completed{false};
};

Metrics compute_metrics(const RunLog& log, const Scenario& scenario);
nlohmann::json metrics_to_json(const Metrics& metrics);

/// Writes ticks.csv, horizons.csv and run.json into `dir`.
void write_log(const RunLog& log, const std::filesystem::path& dir);
/// Reads a run directory back. Horizons are read only if `with_horizons`.
RunLog read_log(const std::filesystem::path& dir, bool with_horizons = false);

extern const std::vector<std::string> kTickColumns;
extern const std::vector<std::string> kHorizonColumns;

}  // namespace cmpc
