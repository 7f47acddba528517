#include "cmpc/linearize.hpp"

#include <algorithm>
#include <cmath>

#include <unsupported/Eigen/MatrixFunctions>

namespace cmpc {

double HorizonSpec::time(int k) const {
  if (k <= n_short) return k * dt_short;
  return n_short * dt_short + (k - n_short) * dt_long;
}

void HorizonSpec::validate() const {
  if (n_short < 0 || n_long < 0 || stages() < 1 || !(dt_short > 0) || !(dt_long > 0)) {
    throw Error(ErrorCode::InvalidParameter, "horizon needs at least one stage and positive step lengths");
  }
}

TireLinearization linearize_tire(double alpha_bar, const TireParams& tire) {
  const double limit = tire.mu * tire.Fz;
  const double fy = std::clamp(fiala_lateral_force(alpha_bar, tire), -limit, limit);
  const double c_bar = std::max(0.0, -fiala_force_slope(alpha_bar, tire));
  return {c_bar, fy, alpha_bar};
}

TireLinearization linearize_tire_projected(double alpha, const TireParams& tire, double fraction) {
  if (!(fraction > 0 && fraction <= 1)) throw Error(ErrorCode::InvalidParameter, "support fraction must lie in (0, 1]");
  const double bound = fraction * tire.saturation_slip();
  return linearize_tire(std::clamp(alpha, -bound, bound), tire);
}

double tangent_peak_slip(const TireParams& tire, double support_fraction) {
  const double support = support_fraction * tire.saturation_slip();
  const TireLinearization lin = linearize_tire_projected(support, tire, support_fraction);
  if (!(lin.C_bar > 0)) return support;
  return support + (tire.mu * tire.Fz + lin.Fy_bar) / lin.C_bar;
}

OperatingPoint make_operating_point(const VehicleState& state, double delta, const VehicleParams& params,
                                    double support_fraction) {
  OperatingPoint op;
  op.state = state;
  op.delta = delta;
  const auto alpha = slip_angles(state, delta, params);
  op.alpha_f = alpha.front;
  op.alpha_r = alpha.rear;
  op.front = linearize_tire_projected(alpha.front, params.front_tire, support_fraction);
  op.rear = linearize_tire_projected(alpha.rear, params.rear_tire, support_fraction);
  return op;
}

Eigen::Vector4d affine_tire_dynamics(const OperatingPoint& op, const VehicleParams& p, double kappa,
                                     const MpcState& x, double delta) {
  VehicleState st = op.state;
  st.Uy = x(mpc_index::Uy);
  st.r = x(mpc_index::r);
  const auto alpha = slip_angles(st, delta, p);
  const double fyf = op.front.Fy_bar - op.front.C_bar * (alpha.front - op.front.alpha_bar);
  const double fyr = op.rear.Fy_bar - op.rear.C_bar * (alpha.rear - op.rear.alpha_bar);
  const double ux = op.state.Ux;
  Eigen::Vector4d dx;
  dx(mpc_index::Uy) = (fyf + fyr) / p.m - st.r * ux;
  dx(mpc_index::r) = (p.a * fyf - p.b * fyr) / p.Iz;
  dx(mpc_index::dpsi) = st.r - kappa * ux;
  dx(mpc_index::e) = st.Uy + ux * x(mpc_index::dpsi);
  return dx;
}

ContinuousModel continuous_jacobians(const OperatingPoint& op, const VehicleParams& p, double kappa) {
  const double ux = op.state.Ux;
  if (!(ux >= p.ux_min)) throw Error(ErrorCode::UxTooSmall, "Ux = " + std::to_string(ux));
  const double uy = op.state.Uy;
  const double r = op.state.r;

  // d alpha / d(Uy) for each axle, from the atan in the slip-angle definitions.
  const double vf = uy + p.a * r;
  const double vr = uy - p.b * r;
  const double gf = ux / (ux * ux + vf * vf);
  const double gr = ux / (ux * ux + vr * vr);
  const double cf = op.front.C_bar;
  const double cr = op.rear.C_bar;

  ContinuousModel model;
  auto& A = model.A;
  A.setZero();
  A(0, 0) = (-cf * gf - cr * gr) / p.m;
  A(0, 1) = (-cf * p.a * gf + cr * p.b * gr) / p.m - ux;
  A(1, 0) = (-p.a * cf * gf + p.b * cr * gr) / p.Iz;
  A(1, 1) = (-p.a * p.a * cf * gf - p.b * p.b * cr * gr) / p.Iz;
  A(2, 1) = 1.0;
  A(3, 0) = 1.0;
  A(3, 2) = ux;

  model.B << cf / p.m, p.a * cf / p.Iz, 0.0, 0.0;

  const MpcState x_op = to_mpc_state(op.state);
  const Eigen::Vector4d f_op = affine_tire_dynamics(op, p, kappa, x_op, op.delta);
  model.C = f_op - A * x_op - model.B * op.delta;
  return model;
}

StageModel discretize(const ContinuousModel& model, double dt, Hold hold) {
  if (!(dt > 0)) throw Error(ErrorCode::InvalidParameter, "discretization step must be positive");

  // Augmented state [x; u; w; c] with u' = w / dt, w' = 0, c' = 0 and
  // x' = A x + B u + C c. Under ZOH the w column is ignored.
  Eigen::Matrix<double, 7, 7> M = Eigen::Matrix<double, 7, 7>::Zero();
  M.topLeftCorner<4, 4>() = model.A;
  M.block<4, 1>(0, 4) = model.B;
  M.block<4, 1>(0, 6) = model.C;
  M(4, 5) = 1.0 / dt;
  const Eigen::Matrix<double, 7, 7> E = (M * dt).exp();

  StageModel stage;
  stage.dt = dt;
  stage.hold = hold;
  stage.A = E.topLeftCorner<4, 4>();
  stage.C = E.block<4, 1>(0, 6);
  const Eigen::Vector4d gamma_u = E.block<4, 1>(0, 4);
  if (hold == Hold::ZOH) {
    stage.B0 = gamma_u;
    stage.B1.setZero();
  } else {
    // x(dt) = A x + gamma_u u0 + gamma_w (u1 - u0) + C
    const Eigen::Vector4d gamma_w = E.block<4, 1>(0, 5);
    stage.B0 = gamma_u - gamma_w;
    stage.B1 = gamma_w;
  }
  if (!stage.A.allFinite() || !stage.B0.allFinite() || !stage.B1.allFinite() || !stage.C.allFinite()) {
    throw Error(ErrorCode::NonFinite, "stage discretization overflowed");
  }
  return stage;
}

HorizonGuess straight_line_guess(const VehicleState& state0, const HorizonSpec& spec) {
  BranchTrajectory branch;
  branch.x.assign(spec.stages() + 1, to_mpc_state(state0));
  branch.u.assign(spec.stages(), 0.0);
  return {branch, branch};
}

std::vector<StageSample> predict_schedule(const VehicleState& state0, const Path& path, const SpeedProfile& speed,
                                          const HorizonSpec& spec) {
  const double s_max = path.total_length();
  auto lookup_s = [&](double s) { return std::clamp(s, 0.0, s_max); };

  std::vector<StageSample> out(spec.stages() + 1);
  double s = state0.s;
  for (int k = 0; k <= spec.stages(); ++k) {
    const double ux = k == 0 ? state0.Ux : speed.at(lookup_s(s));
    out[k] = {spec.time(k), s, ux, curvature_at(path, lookup_s(s))};
    if (k < spec.stages()) s += ux * spec.duration(k);
  }
  return out;
}

namespace {

void build_branch(const BranchTrajectory& guess, const VehicleState& state0,
                  const std::vector<StageSample>& samples, const VehicleParams& params, const HorizonSpec& spec,
                  double support_fraction, std::vector<StageModel>& stages, std::vector<OperatingPoint>& ops) {
  const int n = spec.stages();
  if (static_cast<int>(guess.x.size()) != n + 1 || static_cast<int>(guess.u.size()) != n) {
    throw Error(ErrorCode::DimensionMismatch, "previous horizon does not match the horizon spec");
  }
  stages.resize(n);
  ops.resize(n);
  for (int k = 0; k < n; ++k) {
    VehicleState st = state0;
    // Stage 0 is linearized at the measured state, later stages at the guess.
    if (k > 0) {
      st.Uy = guess.x[k](mpc_index::Uy);
      st.r = guess.x[k](mpc_index::r);
      st.dpsi = guess.x[k](mpc_index::dpsi);
      st.e = guess.x[k](mpc_index::e);
    }
    st.s = samples[k].s;
    st.Ux = samples[k].Ux;
    ops[k] = make_operating_point(st, guess.u[k], params, support_fraction);
    const ContinuousModel model = continuous_jacobians(ops[k], params, samples[k].kappa);
    stages[k] = discretize(model, spec.duration(k), k < spec.n_short ? Hold::ZOH : Hold::FOH);
  }
}

}  // namespace

HorizonModel build_horizon_models(const std::optional<HorizonGuess>& prev, const VehicleState& state0,
                                  const Path& path, const SpeedProfile& speed, const VehicleParams& params,
                                  double nominal_mu, double contingency_mu, const HorizonSpec& spec,
                                  bool with_contingency, double support_fraction) {
  spec.validate();
  const HorizonGuess guess = prev ? *prev : straight_line_guess(state0, spec);

  HorizonModel model;
  model.samples = predict_schedule(state0, path, speed, spec);
  build_branch(guess.nominal, state0, model.samples, with_friction(params, nominal_mu), spec, support_fraction, model.nominal,
               model.nominal_ops);
  if (with_contingency) {
    build_branch(guess.contingency, state0, model.samples, with_friction(params, contingency_mu), spec,
                 support_fraction, model.contingency, model.contingency_ops);
  }
  return model;
}

}  // namespace cmpc
