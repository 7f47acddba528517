#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "cmpc/envelopes.hpp"
#include "cmpc/sim.hpp"

namespace cmpc {

const char* to_string(RunOutcome outcome) {
  switch (outcome) {
    case RunOutcome::Completed: return "completed";
    case RunOutcome::SolverFailure: return "solver_failure";
    case RunOutcome::NonFinite: return "non_finite";
  }
  return "unknown";
}

VehicleState initial_state(const Scenario& scenario) {
  VehicleState x = scenario.initial;
  if (scenario.jitter_e > 0 || scenario.jitter_dpsi > 0) {
    std::mt19937_64 rng(scenario.seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    x.e += scenario.jitter_e * unit(rng);
    x.dpsi += scenario.jitter_dpsi * unit(rng);
  }
  return x;
}

ControlInput plant_input(const Scenario& scenario, const VehicleState& state, double delta) {
  const VehicleParams& p = scenario.vehicle;
  const double mu = friction_at(scenario.friction, state.s);
  const double target = scenario.speed_profile().at(state.s);
  const double fx = p.m * scenario.speed_gain * (target - state.Ux);
  ControlInput u;
  u.delta = delta;
  u.Fxf = std::clamp(0.5 * fx, -mu * p.static_load_front(), mu * p.static_load_front());
  u.Fxr = std::clamp(0.5 * fx, -mu * p.static_load_rear(), mu * p.static_load_rear());
  return u;
}

VehicleState plant_step(const Scenario& scenario, const Path& path, const VehicleState& state, double delta) {
  return integrate_plant(
      state, plant_input(scenario, state, delta), scenario.controller.tick(), scenario.vehicle,
      [&](double s) { return curvature_at(path, s); }, [&](double s) { return friction_at(scenario.friction, s); });
}

namespace {

double max_slack(const std::vector<double>& v) { return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end()); }

void record_horizons(int tick, const StepResult& step, std::vector<HorizonRecord>& out) {
  auto branch = [&](Branch b, const BranchSolution& sol) {
    for (std::size_t k = 0; k < sol.x.size(); ++k) {
      const StageSample& smp = step.model.samples[k];
      HorizonRecord h;
      h.tick = tick;
      h.branch = b;
      h.stage = static_cast<int>(k);
      h.t = smp.t;
      h.s = smp.s;
      h.Ux = smp.Ux;
      h.kappa = smp.kappa;
      h.x = sol.x[k];
      h.u = k < sol.u.size() ? sol.u[k] : std::numeric_limits<double>::quiet_NaN();
      h.sigma_stab = sol.sigma_stab[k];
      h.sigma_env = sol.sigma_env[k];
      out.push_back(h);
    }
  };
  branch(Branch::Nominal, step.solution.nominal);
  if (!step.solution.contingency.x.empty()) branch(Branch::Contingency, step.solution.contingency);
}

}  // namespace

RunLog run_closed_loop(const Scenario& scenario, const RunOptions& options) {
  scenario.validate();
  const Path path = scenario.path.build();
  Controller controller(scenario.controller, scenario.vehicle, path, scenario.speed_profile());
  controller.reset(0.0);

  RunLog log;
  log.scenario = scenario;
  const double tick = scenario.controller.tick();
  const int max_ticks = static_cast<int>(std::ceil(scenario.duration / tick - 1e-9));
  VehicleState x = initial_state(scenario);

  for (int i = 0; i < max_ticks; ++i) {
    if (x.s > path.total_length()) {
      log.reached_end = true;
      break;
    }
    StepResult step;
    try {
      step = controller.step(x);
    } catch (const Error& e) {
      log.outcome = e.code() == ErrorCode::NonFinite ? RunOutcome::NonFinite : RunOutcome::SolverFailure;
      log.diagnostic = "tick " + std::to_string(i) + ": " + e.what();
      return log;
    }

    TickRecord rec;
    rec.tick = i;
    rec.t = i * tick;
    rec.state = x;
    rec.mu = friction_at(scenario.friction, x.s);
    rec.delta = step.delta;
    rec.hold = step.hold_last_command;
    rec.status = step.solution.status;
    rec.iterations = step.solution.iterations;
    rec.solve_ms = step.solve_ms;
    rec.residual = step.solution.residuals.max();
    rec.objective = step.solution.objective;
    rec.sigma_stab_nom = max_slack(step.solution.nominal.sigma_stab);
    rec.sigma_env_nom = max_slack(step.solution.nominal.sigma_env);
    rec.sigma_stab_c = max_slack(step.solution.contingency.sigma_stab);
    rec.sigma_env_c = max_slack(step.solution.contingency.sigma_env);
    log.ticks.push_back(rec);
    if (options.record_horizons) record_horizons(i, step, log.horizons);
    if (options.observer) options.observer(rec, step);

    if (step.hold_last_command) {
      log.outcome = RunOutcome::SolverFailure;
      log.diagnostic = "tick " + std::to_string(i) + ": " + std::to_string(scenario.controller.max_failures) +
                       " consecutive solver failures, last status " + to_string(step.solution.status);
      return log;
    }
    try {
      x = plant_step(scenario, path, x, step.delta);
    } catch (const Error& e) {
      log.outcome = RunOutcome::NonFinite;
      log.diagnostic = "tick " + std::to_string(i) + ": " + e.what();
      return log;
    }
  }
  if (x.s > path.total_length()) log.reached_end = true;
  return log;
}

std::vector<VehicleState> replay_commands(const Scenario& scenario, const std::vector<double>& commands) {
  const Path path = scenario.path.build();
  std::vector<VehicleState> states{initial_state(scenario)};
  for (double delta : commands) states.push_back(plant_step(scenario, path, states.back(), delta));
  return states;
}

Metrics compute_metrics(const RunLog& log, const Scenario& scenario) {
  Metrics m;
  const Path path = scenario.path.build();
  const double tick = scenario.controller.tick();
  const double curve_start = path.first_curve_start();
  double outward = 0.0;
  for (const auto& p : path.samples()) {
    if (p.kappa != 0.0) {
      outward = p.kappa > 0 ? -1.0 : 1.0;
      break;
    }
  }

  double solve_total = 0.0;
  for (const TickRecord& t : log.ticks) {
    const VehicleState& x = t.state;
    const double s = std::clamp(x.s, 0.0, path.total_length());
    const LateralBounds b = bounds_at(path, s);
    m.max_boundary_violation = std::max({m.max_boundary_violation, x.e - b.e_max, b.e_min - x.e});
    if (x.s < curve_start) {
      m.max_abs_e_pre_turn = std::max(m.max_abs_e_pre_turn, std::abs(x.e));
      m.max_outward_pre_turn = std::max(m.max_outward_pre_turn, outward * x.e);
    }
    const Envelope stab = stability_envelope(x.Ux, t.mu, scenario.vehicle);
    const MpcState xm = to_mpc_state(x);
    double yaw = 0.0, slip = 0.0;
    for (std::size_t i = 0; i < stab.rows.size(); ++i) {
      const double excess = std::max(0.0, stab.rows[i].h.dot(xm) - stab.rows[i].g);
      (i < 2 ? yaw : slip) = std::max(i < 2 ? yaw : slip, excess);
    }
    m.yaw_violation_area += yaw * tick;
    m.sideslip_violation_area += slip * tick;
    solve_total += t.solve_ms;
    m.max_solve_ms = std::max(m.max_solve_ms, t.solve_ms);
    m.max_sigma_env_contingency = std::max(m.max_sigma_env_contingency, t.sigma_env_c);
    m.max_residual = std::max(m.max_residual, t.residual);
    if (t.status != QpStatus::Solved) ++m.unsolved_ticks;
  }
  m.ticks = static_cast<int>(log.ticks.size());
  m.mean_solve_ms = m.ticks > 0 ? solve_total / m.ticks : 0.0;
  m.completed = log.outcome == RunOutcome::Completed;
  return m;
}

nlohmann::json metrics_to_json(const Metrics& m) {
  return {{"max_boundary_violation", m.max_boundary_violation},
          {"max_abs_e_pre_turn", m.max_abs_e_pre_turn},
          {"max_outward_pre_turn", m.max_outward_pre_turn},
          {"yaw_violation_area", m.yaw_violation_area},
          {"sideslip_violation_area", m.sideslip_violation_area},
          {"mean_solve_ms", m.mean_solve_ms},
          {"max_solve_ms", m.max_solve_ms},
          {"max_sigma_env_contingency", m.max_sigma_env_contingency},
          {"max_residual", m.max_residual},
          {"ticks", m.ticks},
          {"unsolved_ticks", m.unsolved_ticks},
          {"completed", m.completed}};
}

}  // namespace cmpc
