#pragma once

// Successive linearization of the bicycle model about a previous horizon and
// exact ZOH/FOH discretization into affine stage models.

#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "cmpc/track.hpp"
#include "cmpc/vehicle_model.hpp"

namespace cmpc {

/// MPC state x = [Uy, r, dpsi, e].
using MpcState = Eigen::Vector4d;

namespace mpc_index {
inline constexpr int Uy = 0;
inline constexpr int r = 1;
inline constexpr int dpsi = 2;
inline constexpr int e = 3;
}  // namespace mpc_index

inline MpcState to_mpc_state(const VehicleState& x) { return {x.Uy, x.r, x.dpsi, x.e}; }

struct HorizonSpec {
  int n_short{10};
  double dt_short{0.02};
  int n_long{40};
  double dt_long{0.3};

  int stages() const { return n_short + n_long; }
  double duration(int k) const { return k < n_short ? dt_short : dt_long; }
  /// Start time of stage k relative to the current tick; valid for k in [0, stages()].
  double time(int k) const;
  void validate() const;
};

/// Affine tire Fy ~ Fy_bar - C_bar * (alpha - alpha_bar).
struct TireLinearization {
  double C_bar;
  double Fy_bar;
  double alpha_bar{0};
};

TireLinearization linearize_tire(double alpha_bar, const TireParams& tire);

/// Linearizes at alpha clamped to +/- fraction * saturation slip, so the
/// tangent keeps a nonzero slope when the operating point is saturated.
TireLinearization linearize_tire_projected(double alpha, const TireParams& tire, double fraction);

/// Slip at which the tangent taken at the projection bound reaches the peak
/// force mu * Fz. Beyond it the affine tire over-predicts the available force.
double tangent_peak_slip(const TireParams& tire, double support_fraction);

struct OperatingPoint {
  VehicleState state;  // Ux is the stage speed from the speed profile
  double delta{0};
  double alpha_f{0};
  double alpha_r{0};
  TireLinearization front{};
  TireLinearization rear{};
};

/// `support_fraction` below 1 projects each axle's linearization slip into
/// +/- support_fraction * saturation slip.
OperatingPoint make_operating_point(const VehicleState& state, double delta, const VehicleParams& params,
                                    double support_fraction = 1.0);

struct ContinuousModel {
  Eigen::Matrix4d A;
  Eigen::Vector4d B;
  Eigen::Vector4d C;
};

/// Lateral subsystem (Uy, r, dpsi, e) with the affine tires substituted. Exact at
/// the operating point: f(op) = A x_op + B delta_op + C.
ContinuousModel continuous_jacobians(const OperatingPoint& op, const VehicleParams& params, double kappa);

/// The affine-tire lateral dynamics that `continuous_jacobians` differentiates.
Eigen::Vector4d affine_tire_dynamics(const OperatingPoint& op, const VehicleParams& params, double kappa,
                                     const MpcState& x, double delta);

enum class Hold { ZOH, FOH };

/// x[k+1] = A x[k] + B0 u[k] + B1 u[k+1] + C. B1 is zero under ZOH.
struct StageModel {
  Eigen::Matrix4d A;
  Eigen::Vector4d B0;
  Eigen::Vector4d B1;
  Eigen::Vector4d C;
  double dt{0};
  Hold hold{Hold::ZOH};
};

StageModel discretize(const ContinuousModel& model, double dt, Hold hold);

/// Previous (time-shifted) horizon of one branch: 51 states and 50 inputs.
struct BranchTrajectory {
  std::vector<MpcState> x;
  std::vector<double> u;
};

struct HorizonGuess {
  BranchTrajectory nominal;
  BranchTrajectory contingency;
};

/// Operating points for a first solve: the current lateral state held over the
/// horizon with zero steering.
HorizonGuess straight_line_guess(const VehicleState& state0, const HorizonSpec& spec);

struct StageSample {
  double t;
  double s;
  double Ux;
  double kappa;
};

struct HorizonModel {
  std::vector<StageModel> nominal;
  std::vector<StageModel> contingency;  // empty when only the nominal branch is built
  std::vector<StageSample> samples;     // stages + 1 entries
  std::vector<OperatingPoint> nominal_ops;
  std::vector<OperatingPoint> contingency_ops;
};

/// Predicted (t, s, Ux, kappa) along the horizon. s advances with the speed
/// profile only; lookups past the path end reuse the end sample.
std::vector<StageSample> predict_schedule(const VehicleState& state0, const Path& path, const SpeedProfile& speed,
                                          const HorizonSpec& spec);

HorizonModel build_horizon_models(const std::optional<HorizonGuess>& prev, const VehicleState& state0,
                                  const Path& path, const SpeedProfile& speed, const VehicleParams& params,
                                  double nominal_mu, double contingency_mu, const HorizonSpec& spec,
                                  bool with_contingency = true, double support_fraction = 1.0);

}  // namespace cmpc
