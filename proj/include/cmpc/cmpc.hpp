#pragma once

// Dual-horizon contingency MPC: a nominal branch that tracks the path and a
// contingency branch that must stay viable under a second friction
// assumption. Both branches share the first steering command. The
// deterministic controller (DMPC) is the same problem with the contingency
// branch removed.

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cmpc/envelopes.hpp"
#include "cmpc/linearize.hpp"
#include "cmpc/qp.hpp"
#include "cmpc/track.hpp"
#include "cmpc/vehicle_model.hpp"

namespace cmpc {

enum class ControllerKind { CMPC, DMPC };
enum class Branch { Nominal = 0, Contingency = 1 };

const char* to_string(ControllerKind kind);
ControllerKind controller_kind_from_string(const std::string& name);

struct Weights {
  Eigen::Matrix4d Q{Eigen::Vector4d(0.0, 0.0, 1.0, 1.0).asDiagonal()};
  double R{0.01};
  double W_stab{50.0};
  double W_env{500.0};
  double W_slip{200.0};
  double delta_max{0.35};      // rad
  double slew_rate_max{0.6};   // rad/s
  // Tire linearization slips are projected into +/- this fraction of the
  // saturation slip. Predicted slips are held below tangent_peak_slip.
  double support_fraction{0.6};

  void validate() const;
};

/// Row of h'x + h_delta * delta <= g over one stage's state and input.
struct SlipRow {
  Eigen::Vector4d h{Eigen::Vector4d::Zero()};
  double h_delta{0};
  double g{0};
};

struct StageEnvelopes {
  std::vector<Envelope> stability;      // one per stage, k = 0..N
  std::vector<Envelope> environmental;  // one per stage, k = 0..N
  // |alpha| <= tangent_peak_slip on both axles, linearized at each stage's
  // operating point, k = 0..N-1.
  std::vector<std::array<SlipRow, 4>> tire_slip;
};

/// Rows front+, front-, rear+, rear- of the slip bound linearized at `op` for
/// tires at friction `mu`.
std::array<SlipRow, 4> tire_slip_rows(const OperatingPoint& op, const VehicleParams& params, double mu,
                                      double support_fraction);

/// Per-stage envelopes along the predicted schedule of `model` for one branch.
StageEnvelopes build_envelopes(const HorizonModel& model, const Path& path, const VehicleParams& params,
                               double mu, double support_fraction, Branch branch = Branch::Nominal);

/// Maps (branch, stage, quantity) to decision-variable positions. The first
/// input is a single variable shared by both branches.
class IndexMap {
 public:
  IndexMap(int stages, bool with_contingency);

  int stages() const { return stages_; }
  bool with_contingency() const { return with_contingency_; }
  int num_branches() const { return with_contingency_ ? 2 : 1; }
  int num_variables() const { return num_variables_; }

  int state(Branch b, int k, int component) const;
  int input(Branch b, int k) const;
  /// Slacks exist for stages k = 1..N (x^0 is fixed by the measurement).
  int slack(Branch b, int k, EnvelopeChannel channel) const;

 private:
  int branch_offset(Branch b) const;

  int stages_;
  bool with_contingency_;
  int state_block_;
  int input_offset_;
  int slack_offset_;
  int num_variables_;
};

/// Which inequality rows belong to an envelope channel at (branch, stage).
struct EnvelopeRowRange {
  Branch branch;
  int stage;
  EnvelopeChannel channel;
  int first_row;
  int num_rows;
};

struct CmpcProblem {
  QpProblem qp;
  IndexMap index;
  ControllerKind kind;
  std::vector<EnvelopeRowRange> envelope_rows;
  std::vector<double> slew_limits;  // per input transition k = 0..N-1
};

CmpcProblem assemble_qp(const HorizonModel& model, const StageEnvelopes& nominal_env,
                        const StageEnvelopes& contingency_env, const Weights& weights, const VehicleState& state0,
                        double u_prev, ControllerKind kind, double tick);

struct BranchSolution {
  std::vector<MpcState> x;           // N + 1
  std::vector<double> u;             // N
  std::vector<double> sigma_stab;    // N + 1, entry 0 unused (zero)
  std::vector<double> sigma_env;     // N + 1, entry 0 unused (zero)
  std::vector<double> sigma_slip;    // N + 1, entry 0 unused (zero)
};

struct CmpcSolution {
  BranchSolution nominal;
  BranchSolution contingency;  // empty for DMPC
  double objective{0};
  QpStatus status{QpStatus::NumericalError};
  int iterations{0};
  KktResiduals residuals{};
  QpSolution raw;  // primal-dual vector for warm starts and KKT audits

  double first_command() const { return nominal.u.front(); }
};

CmpcSolution extract_solution(const CmpcProblem& problem, const QpSolution& qp);

/// Sum of inequality multipliers on the rows of one envelope channel.
double channel_multiplier_sum(const CmpcProblem& problem, const CmpcSolution& solution, Branch branch, int stage,
                              EnvelopeChannel channel);

CmpcSolution solve_cmpc(const CmpcProblem& problem, const QpSettings& settings,
                        const std::optional<QpWarmStart>& warm = std::nullopt);

/// Moves both branches forward by `elapsed` seconds on the stage time grid,
/// holding the final value past the end.
HorizonGuess warm_start_shift(const CmpcSolution& prev, double elapsed, const HorizonSpec& spec);

struct ControllerConfig {
  ControllerKind kind{ControllerKind::CMPC};
  HorizonSpec horizon{};
  Weights weights{};
  double nominal_mu{0.25};
  double contingency_mu{0.10};
  QpSettings qp{};
  int max_failures{3};
  // Seed the QP solver with the previous primal-dual solution. Operating
  // points always come from the previous solution.
  bool warm_start{false};

  double tick() const { return horizon.dt_short; }
};

struct StepResult {
  double delta{0};
  CmpcSolution solution;
  HorizonModel model;
  std::shared_ptr<const CmpcProblem> problem;
  bool hold_last_command{false};
  double solve_ms{0};
};

/// Receding-horizon steering controller. Keeps the previous solution between
/// ticks, so one instance serves one closed loop.
class Controller {
 public:
  Controller(ControllerConfig config, VehicleParams params, Path path, SpeedProfile speed);

  StepResult step(const VehicleState& state);
  void reset(double initial_command = 0.0);

  const ControllerConfig& config() const { return config_; }
  double last_command() const { return last_command_; }

 private:
  ControllerConfig config_;
  VehicleParams params_;
  Path path_;
  SpeedProfile speed_;
  std::optional<CmpcSolution> previous_;  // last converged solution
  int ticks_since_previous_{0};
  double last_command_{0};
  int consecutive_failures_{0};
};

}  // namespace cmpc
