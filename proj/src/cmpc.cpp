#include "cmpc/cmpc.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace cmpc {

using Eigen::Triplet;
using Eigen::VectorXd;

const char* to_string(ControllerKind kind) { return kind == ControllerKind::CMPC ? "cmpc" : "dmpc"; }

ControllerKind controller_kind_from_string(const std::string& name) {
  if (name == "cmpc" || name == "CMPC") return ControllerKind::CMPC;
  if (name == "dmpc" || name == "DMPC") return ControllerKind::DMPC;
  throw Error(ErrorCode::InvalidParameter, "unknown controller kind '" + name + "'");
}

void Weights::validate() const {
  const Eigen::Matrix4d sym = 0.5 * (Q + Q.transpose());
  if ((Q - Q.transpose()).cwiseAbs().maxCoeff() > 1e-12 ||
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d>(sym).eigenvalues().minCoeff() < -1e-12) {
    throw Error(ErrorCode::InvalidParameter, "Q must be symmetric positive semidefinite");
  }
  if (!(R > 0)) throw Error(ErrorCode::InvalidParameter, "R must be positive");
  if (!(W_env > W_stab && W_stab > 0)) throw Error(ErrorCode::InvalidParameter, "weights need W_env > W_stab > 0");
  if (!(W_slip > 0)) throw Error(ErrorCode::InvalidParameter, "W_slip must be positive");
  if (!(delta_max > 0)) throw Error(ErrorCode::InfeasibleBox, "delta_max must be positive");
  if (!(slew_rate_max > 0)) throw Error(ErrorCode::InfeasibleBox, "slew_rate_max must be positive");
  if (!(support_fraction > 0 && support_fraction <= 1)) {
    throw Error(ErrorCode::InvalidParameter, "support_fraction must lie in (0, 1]");
  }
}

namespace {

// |atan(v / Ux) - delta| <= limit linearized at the operating point, where
// v = Uy + lever * r.
std::array<SlipRow, 2> slip_rows(const OperatingPoint& op, double lever, double alpha_op, double delta_gain,
                                 double limit) {
  const double ux = op.state.Ux;
  const double v = op.state.Uy + lever * op.state.r;
  const double gain = ux / (ux * ux + v * v);
  SlipRow upper;
  upper.h(mpc_index::Uy) = gain;
  upper.h(mpc_index::r) = gain * lever;
  upper.h_delta = -delta_gain;
  const double offset = alpha_op - gain * v + delta_gain * op.delta;
  upper.g = limit - offset;
  SlipRow lower;
  lower.h = -upper.h;
  lower.h_delta = delta_gain;
  lower.g = limit + offset;
  return {upper, lower};
}

}  // namespace

std::array<SlipRow, 4> tire_slip_rows(const OperatingPoint& op, const VehicleParams& params, double mu,
                                      double support_fraction) {
  TireParams front = params.front_tire;
  TireParams rear = params.rear_tire;
  front.mu = mu;
  rear.mu = mu;
  const auto f = slip_rows(op, params.a, op.alpha_f, 1.0, tangent_peak_slip(front, support_fraction));
  const auto r = slip_rows(op, -params.b, op.alpha_r, 0.0, tangent_peak_slip(rear, support_fraction));
  return {f[0], f[1], r[0], r[1]};
}

StageEnvelopes build_envelopes(const HorizonModel& model, const Path& path, const VehicleParams& params,
                               double mu, double support_fraction, Branch branch) {
  StageEnvelopes out;
  const double s_max = path.total_length();
  for (const auto& sample : model.samples) {
    out.stability.push_back(stability_envelope(sample.Ux, mu, params));
    out.environmental.push_back(environmental_envelope(path, std::clamp(sample.s, 0.0, s_max)));
  }
  const auto& ops = branch == Branch::Nominal ? model.nominal_ops : model.contingency_ops;
  for (const auto& op : ops) out.tire_slip.push_back(tire_slip_rows(op, params, mu, support_fraction));
  return out;
}

// ---------------------------------------------------------------------------
// Index map

IndexMap::IndexMap(int stages, bool with_contingency)
    : stages_(stages), with_contingency_(with_contingency), state_block_((stages + 1) * 4) {
  if (stages < 1) throw Error(ErrorCode::DimensionMismatch, "horizon needs at least one stage");
  input_offset_ = num_branches() * state_block_;
  const int inputs = stages_ + (num_branches() - 1) * (stages_ - 1);
  slack_offset_ = input_offset_ + inputs;
  num_variables_ = slack_offset_ + num_branches() * stages_ * kNumChannels;
}

int IndexMap::branch_offset(Branch b) const {
  if (b == Branch::Contingency && !with_contingency_) {
    throw Error(ErrorCode::DimensionMismatch, "problem has no contingency branch");
  }
  return static_cast<int>(b);
}

int IndexMap::state(Branch b, int k, int component) const {
  return branch_offset(b) * state_block_ + k * 4 + component;
}

int IndexMap::input(Branch b, int k) const {
  const int branch = branch_offset(b);
  if (k == 0) return input_offset_;
  if (branch == 0) return input_offset_ + k;
  return input_offset_ + stages_ + (k - 1);
}

int IndexMap::slack(Branch b, int k, EnvelopeChannel channel) const {
  const int branch = branch_offset(b);
  return slack_offset_ + (branch * stages_ + (k - 1)) * kNumChannels + static_cast<int>(channel);
}

// ---------------------------------------------------------------------------
// Assembly

namespace {

struct RowBuilder {
  std::vector<Triplet<double>> entries;
  std::vector<double> rhs;

  int add_row(double bound) {
    rhs.push_back(bound);
    return static_cast<int>(rhs.size()) - 1;
  }
  void coeff(int row, int col, double v) {
    if (v != 0.0) entries.emplace_back(row, col, v);
  }
  SparseMatrix matrix(int cols) const {
    SparseMatrix m(static_cast<Eigen::Index>(rhs.size()), cols);
    m.setFromTriplets(entries.begin(), entries.end());
    return m;
  }
  VectorXd vector() const { return Eigen::Map<const VectorXd>(rhs.data(), static_cast<Eigen::Index>(rhs.size())); }
};

void add_quadratic(std::vector<Triplet<double>>& p, const IndexMap& idx, Branch b, int k, const Eigen::Matrix4d& Q) {
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      if (Q(i, j) != 0.0) p.emplace_back(idx.state(b, k, i), idx.state(b, k, j), 2.0 * Q(i, j));
    }
  }
}

}  // namespace

CmpcProblem assemble_qp(const HorizonModel& model, const StageEnvelopes& nominal_env,
                        const StageEnvelopes& contingency_env, const Weights& weights, const VehicleState& state0,
                        double u_prev, ControllerKind kind, double tick) {
  weights.validate();
  if (!std::isfinite(u_prev)) throw Error(ErrorCode::InvalidParameter, "previous command must be finite");
  const bool contingency = kind == ControllerKind::CMPC;
  const int n = static_cast<int>(model.nominal.size());
  if (n < 1 || static_cast<int>(model.samples.size()) != n + 1 ||
      (contingency && static_cast<int>(model.contingency.size()) != n)) {
    throw Error(ErrorCode::DimensionMismatch, "horizon model stages are incomplete");
  }
  auto check_env = [&](const StageEnvelopes& env) {
    if (static_cast<int>(env.stability.size()) != n + 1 || static_cast<int>(env.environmental.size()) != n + 1 ||
        static_cast<int>(env.tire_slip.size()) != n) {
      throw Error(ErrorCode::DimensionMismatch, "expected one envelope per stage");
    }
  };
  check_env(nominal_env);
  if (contingency) check_env(contingency_env);

  CmpcProblem out{QpProblem{}, IndexMap(n, contingency), kind, {}, {}};
  const IndexMap& idx = out.index;
  const int nv = idx.num_variables();
  const std::vector<Branch> branches =
      contingency ? std::vector<Branch>{Branch::Nominal, Branch::Contingency} : std::vector<Branch>{Branch::Nominal};

  // Cost.
  std::vector<Triplet<double>> p;
  VectorXd q = VectorXd::Zero(nv);
  double constant = 0.0;
  for (int k = 0; k <= n; ++k) add_quadratic(p, idx, Branch::Nominal, k, weights.Q);
  add_quadratic(p, idx, contingency ? Branch::Contingency : Branch::Nominal, n, weights.Q);

  // Slew penalty on the nominal inputs; v^0 is referenced to the deployed command.
  const int u0 = idx.input(Branch::Nominal, 0);
  p.emplace_back(u0, u0, 2.0 * weights.R);
  q(u0) += -2.0 * weights.R * u_prev;
  constant += weights.R * u_prev * u_prev;
  for (int k = 1; k < n; ++k) {
    const int a = idx.input(Branch::Nominal, k);
    const int b = idx.input(Branch::Nominal, k - 1);
    p.emplace_back(a, a, 2.0 * weights.R);
    p.emplace_back(b, b, 2.0 * weights.R);
    p.emplace_back(a, b, -2.0 * weights.R);
    p.emplace_back(b, a, -2.0 * weights.R);
  }
  for (Branch br : branches) {
    for (int k = 1; k <= n; ++k) {
      q(idx.slack(br, k, EnvelopeChannel::Stability)) = weights.W_stab;
      q(idx.slack(br, k, EnvelopeChannel::Environmental)) = weights.W_env;
      q(idx.slack(br, k, EnvelopeChannel::TireSlip)) = weights.W_slip;
    }
  }

  // Dynamics and initial condition.
  RowBuilder eq;
  const MpcState x0 = to_mpc_state(state0);
  for (Branch br : branches) {
    const auto& stages = br == Branch::Nominal ? model.nominal : model.contingency;
    for (int i = 0; i < 4; ++i) {
      const int row = eq.add_row(x0(i));
      eq.coeff(row, idx.state(br, 0, i), 1.0);
    }
    for (int k = 0; k < n; ++k) {
      const StageModel& st = stages[k];
      // The last stage has no successor input; its ramp target is held at u^{N-1}.
      const bool last = k + 1 == n;
      for (int i = 0; i < 4; ++i) {
        const int row = eq.add_row(st.C(i));
        eq.coeff(row, idx.state(br, k + 1, i), 1.0);
        for (int j = 0; j < 4; ++j) eq.coeff(row, idx.state(br, k, j), -st.A(i, j));
        if (last) {
          eq.coeff(row, idx.input(br, k), -(st.B0(i) + st.B1(i)));
        } else {
          eq.coeff(row, idx.input(br, k), -st.B0(i));
          eq.coeff(row, idx.input(br, k + 1), -st.B1(i));
        }
      }
    }
  }

  RowBuilder in;
  // Steering box, once per decision variable.
  auto box = [&](int col) {
    in.coeff(in.add_row(weights.delta_max), col, 1.0);
    in.coeff(in.add_row(weights.delta_max), col, -1.0);
  };
  box(u0);
  for (Branch br : branches) {
    for (int k = 1; k < n; ++k) box(idx.input(br, k));
  }

  // Slew limits scale with the time between consecutive inputs.
  out.slew_limits.resize(n);
  out.slew_limits[0] = weights.slew_rate_max * tick;
  for (int k = 1; k < n; ++k) out.slew_limits[k] = weights.slew_rate_max * (model.samples[k].t - model.samples[k - 1].t);
  in.coeff(in.add_row(out.slew_limits[0] + u_prev), u0, 1.0);
  in.coeff(in.add_row(out.slew_limits[0] - u_prev), u0, -1.0);
  for (Branch br : branches) {
    for (int k = 1; k < n; ++k) {
      const int a = idx.input(br, k);
      const int b = idx.input(br, k - 1);
      int row = in.add_row(out.slew_limits[k]);
      in.coeff(row, a, 1.0);
      in.coeff(row, b, -1.0);
      row = in.add_row(out.slew_limits[k]);
      in.coeff(row, a, -1.0);
      in.coeff(row, b, 1.0);
    }
  }

  // Soft envelopes for k = 1..N with one slack per (branch, stage, channel).
  for (Branch br : branches) {
    const StageEnvelopes& env = br == Branch::Nominal ? nominal_env : contingency_env;
    for (int k = 1; k <= n; ++k) {
      for (const Envelope* e : {&env.stability[k], &env.environmental[k]}) {
        const int slack = idx.slack(br, k, e->channel);
        const int first = static_cast<int>(in.rhs.size());
        for (const HalfSpace& hs : e->rows) {
          const int row = in.add_row(hs.g);
          for (int j = 0; j < 4; ++j) in.coeff(row, idx.state(br, k, j), hs.h(j));
          in.coeff(row, slack, -1.0);
        }
        out.envelope_rows.push_back({br, k, e->channel, first, static_cast<int>(e->rows.size())});
      }
      // The last stage reuses the final input and its operating point.
      const int j_in = std::min(k, n - 1);
      const int slack = idx.slack(br, k, EnvelopeChannel::TireSlip);
      const int first = static_cast<int>(in.rhs.size());
      for (const SlipRow& sr : env.tire_slip[j_in]) {
        const int row = in.add_row(sr.g);
        for (int j = 0; j < 4; ++j) in.coeff(row, idx.state(br, k, j), sr.h(j));
        if (sr.h_delta != 0.0) in.coeff(row, idx.input(br, j_in), sr.h_delta);
        in.coeff(row, slack, -1.0);
      }
      out.envelope_rows.push_back({br, k, EnvelopeChannel::TireSlip, first, 4});
    }
  }
  for (Branch br : branches) {
    for (int k = 1; k <= n; ++k) {
      for (EnvelopeChannel ch :
           {EnvelopeChannel::Stability, EnvelopeChannel::Environmental, EnvelopeChannel::TireSlip}) {
        in.coeff(in.add_row(0.0), idx.slack(br, k, ch), -1.0);
      }
    }
  }

  QpProblem& qp = out.qp;
  qp.P.resize(nv, nv);
  qp.P.setFromTriplets(p.begin(), p.end());
  qp.q = q;
  qp.constant = constant;
  qp.A = eq.matrix(nv);
  qp.b = eq.vector();
  qp.G = in.matrix(nv);
  qp.h = in.vector();
  qp.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Solution handling

CmpcSolution extract_solution(const CmpcProblem& problem, const QpSolution& qp) {
  const IndexMap& idx = problem.index;
  const int n = idx.stages();
  CmpcSolution sol;
  auto fill = [&](Branch br, BranchSolution& out) {
    out.x.resize(n + 1);
    out.u.resize(n);
    out.sigma_stab.assign(n + 1, 0.0);
    out.sigma_env.assign(n + 1, 0.0);
    out.sigma_slip.assign(n + 1, 0.0);
    for (int k = 0; k <= n; ++k) {
      for (int i = 0; i < 4; ++i) out.x[k](i) = qp.z(idx.state(br, k, i));
    }
    for (int k = 0; k < n; ++k) out.u[k] = qp.z(idx.input(br, k));
    for (int k = 1; k <= n; ++k) {
      out.sigma_stab[k] = qp.z(idx.slack(br, k, EnvelopeChannel::Stability));
      out.sigma_env[k] = qp.z(idx.slack(br, k, EnvelopeChannel::Environmental));
      out.sigma_slip[k] = qp.z(idx.slack(br, k, EnvelopeChannel::TireSlip));
    }
  };
  fill(Branch::Nominal, sol.nominal);
  if (idx.with_contingency()) fill(Branch::Contingency, sol.contingency);
  sol.objective = qp.objective;
  sol.status = qp.status;
  sol.iterations = qp.iterations;
  sol.residuals = qp.residuals;
  sol.raw = qp;
  return sol;
}

double channel_multiplier_sum(const CmpcProblem& problem, const CmpcSolution& solution, Branch branch, int stage,
                              EnvelopeChannel channel) {
  for (const auto& range : problem.envelope_rows) {
    if (range.branch == branch && range.stage == stage && range.channel == channel) {
      return solution.raw.lambda.segment(range.first_row, range.num_rows).sum();
    }
  }
  throw Error(ErrorCode::OutOfRange, "no envelope rows for the requested stage");
}

CmpcSolution solve_cmpc(const CmpcProblem& problem, const QpSettings& settings,
                        const std::optional<QpWarmStart>& warm) {
  return extract_solution(problem, solve_qp(problem.qp, settings, warm));
}

namespace {

template <typename T>
T interpolate(const std::vector<T>& values, const std::vector<double>& times, double t) {
  if (t <= times.front()) return values.front();
  if (t >= times[values.size() - 1]) return values.back();
  auto it = std::upper_bound(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(values.size()), t);
  const std::size_t i = static_cast<std::size_t>(it - times.begin()) - 1;
  const double w = (t - times[i]) / (times[i + 1] - times[i]);
  if (w == 0.0) return values[i];
  return values[i] + w * (values[i + 1] - values[i]);
}

BranchTrajectory shift_branch(const BranchSolution& prev, double elapsed, const std::vector<double>& times) {
  BranchTrajectory out;
  const std::size_t n = prev.u.size();
  out.x.resize(n + 1);
  out.u.resize(n);
  for (std::size_t k = 0; k <= n; ++k) out.x[k] = interpolate(prev.x, times, times[k] + elapsed);
  for (std::size_t k = 0; k < n; ++k) out.u[k] = interpolate(prev.u, times, times[k] + elapsed);
  return out;
}

}  // namespace

HorizonGuess warm_start_shift(const CmpcSolution& prev, double elapsed, const HorizonSpec& spec) {
  std::vector<double> times(spec.stages() + 1);
  for (int k = 0; k <= spec.stages(); ++k) times[k] = spec.time(k);
  HorizonGuess guess;
  guess.nominal = shift_branch(prev.nominal, elapsed, times);
  guess.contingency =
      prev.contingency.x.empty() ? guess.nominal : shift_branch(prev.contingency, elapsed, times);
  return guess;
}

// ---------------------------------------------------------------------------
// Controller

Controller::Controller(ControllerConfig config, VehicleParams params, Path path, SpeedProfile speed)
    : config_(std::move(config)), params_(std::move(params)), path_(std::move(path)), speed_(std::move(speed)) {
  config_.horizon.validate();
  config_.weights.validate();
}

void Controller::reset(double initial_command) {
  previous_.reset();
  ticks_since_previous_ = 0;
  last_command_ = initial_command;
  consecutive_failures_ = 0;
}

StepResult Controller::step(const VehicleState& state) {
  const HorizonSpec& spec = config_.horizon;
  const bool contingency = config_.kind == ControllerKind::CMPC;

  std::optional<HorizonGuess> guess;
  if (previous_) guess = warm_start_shift(*previous_, config_.tick() * (ticks_since_previous_ + 1), spec);

  StepResult out;
  out.model = build_horizon_models(guess, state, path_, speed_, params_, config_.nominal_mu,
                                   config_.contingency_mu, spec, contingency, config_.weights.support_fraction);
  const StageEnvelopes env_nom = build_envelopes(out.model, path_, params_, config_.nominal_mu,
                                                 config_.weights.support_fraction);
  const StageEnvelopes env_c = contingency ? build_envelopes(out.model, path_, params_, config_.contingency_mu,
                                                            config_.weights.support_fraction, Branch::Contingency)
                                            : StageEnvelopes{};
  out.problem = std::make_shared<const CmpcProblem>(
      assemble_qp(out.model, env_nom, env_c, config_.weights, state, last_command_, config_.kind, config_.tick()));
  const CmpcProblem& problem = *out.problem;

  std::optional<QpWarmStart> warm;
  if (config_.warm_start && previous_ && previous_->raw.z.size() == problem.qp.num_variables()) {
    warm = QpWarmStart{previous_->raw.z, previous_->raw.y, previous_->raw.lambda};
  }

  const auto t0 = std::chrono::steady_clock::now();
  out.solution = solve_cmpc(problem, config_.qp, warm);
  out.solve_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  if (out.solution.status == QpStatus::Solved) {
    consecutive_failures_ = 0;
  } else {
    ++consecutive_failures_;
  }
  if (consecutive_failures_ >= config_.max_failures) {
    out.hold_last_command = true;
    out.delta = last_command_;
  } else {
    out.delta = std::clamp(out.solution.first_command(), -config_.weights.delta_max, config_.weights.delta_max);
  }
  last_command_ = out.delta;
  if (out.solution.status == QpStatus::Solved) {
    previous_ = out.solution;
    ticks_since_previous_ = 0;
  } else {
    ++ticks_since_previous_;
  }
  return out;
}

}  // namespace cmpc
