#include <set>

#include "doctest.h"
#include "support.hpp"

using namespace cmpc;
using Eigen::Vector4d;

namespace {

struct Instance {
  HorizonModel model;
  StageEnvelopes nominal;
  StageEnvelopes contingency;
  CmpcProblem problem;
};

Instance make_instance(const VehicleState& x0, double nominal_mu, double contingency_mu, ControllerKind kind,
                       const Weights& w = {}, double u_prev = 0.0,
                       const std::optional<HorizonGuess>& guess = std::nullopt) {
  const VehicleParams p = test::hatchback();
  const Path path = build_left_turn_scenario(20, 40, 40, 3);
  const SpeedProfile speed = SpeedProfile::constant(5.0);
  const HorizonSpec spec;
  const bool cmpc = kind == ControllerKind::CMPC;
  HorizonModel model =
      build_horizon_models(guess, x0, path, speed, p, nominal_mu, contingency_mu, spec, cmpc, w.support_fraction);
  StageEnvelopes nom = build_envelopes(model, path, p, nominal_mu, w.support_fraction);
  StageEnvelopes c = cmpc ? build_envelopes(model, path, p, contingency_mu, w.support_fraction, Branch::Contingency)
                          : StageEnvelopes{};
  CmpcProblem problem = assemble_qp(model, nom, c, w, x0, u_prev, kind, spec.dt_short);
  return {std::move(model), std::move(nom), std::move(c), std::move(problem)};
}

VehicleState state_at(double s, double e, double dpsi = 0.0) {
  VehicleState x;
  x.s = s;
  x.e = e;
  x.dpsi = dpsi;
  x.Ux = 5.0;
  return x;
}

// Indices of inequality rows of the envelope channels that hold with equality.
std::set<int> active_envelope_rows(const CmpcProblem& problem, const CmpcSolution& sol, double tol) {
  const Eigen::VectorXd slack = problem.qp.h - problem.qp.G * sol.raw.z;
  std::set<int> active;
  for (const auto& range : problem.envelope_rows) {
    for (int i = range.first_row; i < range.first_row + range.num_rows; ++i) {
      if (slack(i) < tol) active.insert(i);
    }
  }
  return active;
}

}  // namespace

TEST_CASE("default weights") {
  const Weights w;
  CHECK(w.Q == Eigen::Matrix4d(Vector4d(0, 0, 1, 1).asDiagonal()));
  CHECK(w.R == 0.01);
  CHECK(w.W_stab == 50.0);
  CHECK(w.W_env == 500.0);
  CHECK(w.delta_max == 0.35);
  CHECK(w.slew_rate_max == 0.6);
}

TEST_CASE("weights validation") {
  Weights w;
  w.delta_max = 0.0;
  try {
    w.validate();
    FAIL("expected InfeasibleBox");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InfeasibleBox);
  }
  w = {};
  w.W_env = 10.0;
  CHECK_THROWS_AS(w.validate(), Error);
  w = {};
  w.R = 0.0;
  CHECK_THROWS_AS(w.validate(), Error);
}

TEST_CASE("index map is a bijection with one shared first input") {
  const int n = 50;
  for (bool cont : {true, false}) {
    const IndexMap idx(n, cont);
    const int branches = cont ? 2 : 1;
    // Counting oracle: 4 states per stage 0..N per branch, N inputs for the
    // first branch plus N - 1 for the second, three slacks per stage 1..N.
    const int expected = branches * (n + 1) * 4 + (n + (branches - 1) * (n - 1)) + branches * n * kNumChannels;
    CHECK(idx.num_variables() == expected);

    std::set<int> seen;
    int visits = 0;
    std::vector<Branch> bs{Branch::Nominal};
    if (cont) bs.push_back(Branch::Contingency);
    for (Branch b : bs) {
      for (int k = 0; k <= n; ++k) {
        for (int i = 0; i < 4; ++i, ++visits) seen.insert(idx.state(b, k, i));
      }
      for (int k = 0; k < n; ++k) {
        if (b == Branch::Contingency && k == 0) continue;
        seen.insert(idx.input(b, k));
        ++visits;
      }
      for (int k = 1; k <= n; ++k) {
        for (auto ch : {EnvelopeChannel::Stability, EnvelopeChannel::Environmental, EnvelopeChannel::TireSlip}) {
          seen.insert(idx.slack(b, k, ch));
          ++visits;
        }
      }
    }
    CHECK(visits == expected);
    CHECK(static_cast<int>(seen.size()) == expected);
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == expected - 1);
    if (cont) {
      CHECK(idx.input(Branch::Nominal, 0) == idx.input(Branch::Contingency, 0));
      for (int k = 1; k < n; ++k) CHECK(idx.input(Branch::Nominal, k) != idx.input(Branch::Contingency, k));
    } else {
      CHECK_THROWS_AS(idx.input(Branch::Contingency, 1), Error);
    }
  }
  CHECK(IndexMap(50, true).num_variables() == 2 * 51 * 4 + 99 + 300);
}

TEST_CASE("assembled cost carries Q, R and the slack weights") {
  const Instance c = make_instance(state_at(10, 0.5), 0.25, 0.10, ControllerKind::CMPC);
  const IndexMap& idx = c.problem.index;
  const QpProblem& qp = c.problem.qp;
  auto P = [&](int i, int j) { return qp.P.coeff(i, j); };
  // Nominal e at a running stage: Q only. Nominal terminal: running Q; contingency terminal: Q.
  CHECK(P(idx.state(Branch::Nominal, 5, 3), idx.state(Branch::Nominal, 5, 3)) == doctest::Approx(2.0));
  CHECK(P(idx.state(Branch::Nominal, 50, 2), idx.state(Branch::Nominal, 50, 2)) == doctest::Approx(2.0));
  CHECK(P(idx.state(Branch::Contingency, 50, 3), idx.state(Branch::Contingency, 50, 3)) == doctest::Approx(2.0));
  CHECK(P(idx.state(Branch::Contingency, 25, 3), idx.state(Branch::Contingency, 25, 3)) == 0.0);
  CHECK(P(idx.state(Branch::Nominal, 5, 0), idx.state(Branch::Nominal, 5, 0)) == 0.0);
  // Slew on nominal inputs only.
  CHECK(P(idx.input(Branch::Nominal, 3), idx.input(Branch::Nominal, 3)) == doctest::Approx(4 * 0.01));
  CHECK(P(idx.input(Branch::Contingency, 3), idx.input(Branch::Contingency, 3)) == 0.0);
  CHECK(qp.q(idx.slack(Branch::Contingency, 7, EnvelopeChannel::Stability)) == 50.0);
  CHECK(qp.q(idx.slack(Branch::Contingency, 7, EnvelopeChannel::Environmental)) == 500.0);
  CHECK(qp.q(idx.slack(Branch::Nominal, 7, EnvelopeChannel::TireSlip)) == Weights{}.W_slip);

  // The slew limit follows the time between inputs.
  CHECK(c.problem.slew_limits[0] == doctest::Approx(0.6 * 0.02));
  CHECK(c.problem.slew_limits[5] == doctest::Approx(0.6 * 0.02));
  CHECK(c.problem.slew_limits[10] == doctest::Approx(0.6 * 0.02));
  CHECK(c.problem.slew_limits[11] == doctest::Approx(0.6 * 0.3));
}

TEST_CASE("DMPC drops the contingency branch and moves terminal Q to the nominal branch") {
  const Instance d = make_instance(state_at(10, 0.5), 0.25, 0.10, ControllerKind::DMPC);
  const IndexMap& idx = d.problem.index;
  CHECK_FALSE(idx.with_contingency());
  CHECK(idx.num_variables() == 51 * 4 + 50 + 50 * 3);
  CHECK(d.problem.qp.P.coeff(idx.state(Branch::Nominal, 50, 3), idx.state(Branch::Nominal, 50, 3)) ==
        doctest::Approx(4.0));
  for (const auto& range : d.problem.envelope_rows) CHECK(range.branch == Branch::Nominal);
}

TEST_CASE("assembly rejects inconsistent inputs") {
  Instance c = make_instance(state_at(10, 0.0), 0.25, 0.10, ControllerKind::CMPC);
  StageEnvelopes short_env = c.nominal;
  short_env.stability.pop_back();
  try {
    assemble_qp(c.model, short_env, c.contingency, Weights{}, state_at(10, 0), 0.0, ControllerKind::CMPC, 0.02);
    FAIL("expected DimensionMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DimensionMismatch);
  }
  Weights w;
  w.delta_max = -1;
  CHECK_THROWS_AS(
      assemble_qp(c.model, c.nominal, c.contingency, w, state_at(10, 0), 0.0, ControllerKind::CMPC, 0.02), Error);
}

TEST_CASE("solved CMPC instance shares its first command and meets the KKT tolerance") {
  const Instance c = make_instance(state_at(30, 0.5, 0.02), 0.25, 0.10, ControllerKind::CMPC);
  const CmpcSolution sol = solve_cmpc(c.problem, QpSettings{});
  REQUIRE(sol.status == QpStatus::Solved);
  CHECK(sol.nominal.u[0] == sol.contingency.u[0]);
  CHECK(sol.residuals.max() <= 1e-6);
  CHECK(sol.nominal.x.size() == 51);
  CHECK(sol.contingency.u.size() == 50);
  for (int k = 1; k <= 50; ++k) {
    CHECK(sol.nominal.sigma_env[k] >= -1e-8);
    CHECK(sol.contingency.sigma_stab[k] >= -1e-8);
  }
  // x^0 equals the measurement.
  CHECK((sol.nominal.x[0] - to_mpc_state(state_at(30, 0.5, 0.02))).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((sol.contingency.x[0] - sol.nominal.x[0]).cwiseAbs().maxCoeff() < 1e-8);

  // Determinism.
  const CmpcSolution again = solve_cmpc(c.problem, QpSettings{});
  CHECK(again.raw.z == sol.raw.z);
  CHECK(again.objective == sol.objective);
}

TEST_CASE("zero-error straight running commands zero steering") {
  Weights w;
  const VehicleParams p = test::hatchback();
  ControllerConfig cfg;
  Controller ctl(cfg, p, Path({{0, 0, -3, 3}, {200, 0, -3, 3}}), SpeedProfile::constant(5.0));
  ctl.reset();
  for (int i = 0; i < 5; ++i) {
    const StepResult r = ctl.step(state_at(10 + 0.1 * i, 0.0));
    REQUIRE(r.solution.status == QpStatus::Solved);
    CHECK(std::abs(r.delta) <= 1e-6);
  }
}

TEST_CASE("slacks vanish when the hard-constrained problem is feasible") {
  for (double e : {-0.5, 0.0, 0.8}) {
    const Instance c = make_instance(state_at(5, e), 0.25, 0.25, ControllerKind::CMPC);
    // Same problem with every slack pinned at zero.
    QpProblem hard = c.problem.qp;
    const IndexMap& idx = c.problem.index;
    std::vector<Eigen::Triplet<double>> t;
    for (int k = 0; k < hard.G.outerSize(); ++k) {
      for (SparseMatrix::InnerIterator it(hard.G, k); it; ++it) t.emplace_back(it.row(), it.col(), it.value());
    }
    std::vector<double> h(hard.h.data(), hard.h.data() + hard.h.size());
    for (Branch b : {Branch::Nominal, Branch::Contingency}) {
      for (int k = 1; k <= 50; ++k) {
        for (auto ch : {EnvelopeChannel::Stability, EnvelopeChannel::Environmental, EnvelopeChannel::TireSlip}) {
          t.emplace_back(static_cast<int>(h.size()), idx.slack(b, k, ch), 1.0);
          h.push_back(0.0);
        }
      }
    }
    hard.G.resize(static_cast<Eigen::Index>(h.size()), hard.G.cols());
    hard.G.setFromTriplets(t.begin(), t.end());
    hard.h = Eigen::Map<Eigen::VectorXd>(h.data(), static_cast<Eigen::Index>(h.size()));
    const QpSolution pinned = solve_qp(hard);
    REQUIRE(pinned.converged());

    const CmpcSolution soft = solve_cmpc(c.problem, QpSettings{});
    REQUIRE(soft.status == QpStatus::Solved);
    for (const BranchSolution* b : {&soft.nominal, &soft.contingency}) {
      for (int k = 1; k <= 50; ++k) {
        CHECK(b->sigma_stab[k] <= 1e-6);
        CHECK(b->sigma_env[k] <= 1e-6);
        CHECK(b->sigma_slip[k] <= 1e-6);
      }
    }
    CHECK(soft.objective == doctest::Approx(pinned.objective).epsilon(1e-6));
  }
}

TEST_CASE("scaling the envelope weights keeps the active set when slacks are zero") {
  for (double e : {-0.8, 0.3, 1.2}) {
    const Instance base = make_instance(state_at(35, e), 0.25, 0.10, ControllerKind::CMPC);
    const CmpcSolution a = solve_cmpc(base.problem, QpSettings{});
    REQUIRE(a.status == QpStatus::Solved);
    double max_slack = 0;
    for (const BranchSolution* b : {&a.nominal, &a.contingency}) {
      for (int k = 1; k <= 50; ++k) max_slack = std::max({max_slack, b->sigma_stab[k], b->sigma_env[k]});
    }
    if (max_slack > 1e-6) continue;
    Weights w;
    w.W_stab *= 10;
    w.W_env *= 10;
    const Instance scaled = make_instance(state_at(35, e), 0.25, 0.10, ControllerKind::CMPC, w);
    const CmpcSolution b = solve_cmpc(scaled.problem, QpSettings{});
    REQUIRE(b.status == QpStatus::Solved);
    CHECK(active_envelope_rows(base.problem, a, 1e-7) == active_envelope_rows(scaled.problem, b, 1e-7));
  }
}

TEST_CASE("raising contingency friction to the nominal value never raises the objective") {
  auto g = test::rng(53);
  int compared = 0;
  for (int trial = 0; trial < 20; ++trial) {
    VehicleState x0 = state_at(test::uniform(g, 10, 60), test::uniform(g, -1.5, 1.5), test::uniform(g, -0.05, 0.05));
    x0.Uy = test::uniform(g, -0.1, 0.1);
    x0.r = test::uniform(g, -0.1, 0.1);
    const Instance strict = make_instance(x0, 0.25, 0.10, ControllerKind::CMPC);
    const Instance relaxed = make_instance(x0, 0.25, 0.25, ControllerKind::CMPC);
    const CmpcSolution a = solve_cmpc(strict.problem, QpSettings{});
    const CmpcSolution b = solve_cmpc(relaxed.problem, QpSettings{});
    REQUIRE(a.status == QpStatus::Solved);
    REQUIRE(b.status == QpStatus::Solved);
    CHECK(b.objective <= a.objective + 1e-7 * (1 + std::abs(a.objective)));
    ++compared;
  }
  CHECK(compared == 20);
}

TEST_CASE("channel multipliers are exposed per stage") {
  const Instance c = make_instance(state_at(30, 2.9), 0.25, 0.10, ControllerKind::CMPC);
  const CmpcSolution sol = solve_cmpc(c.problem, QpSettings{});
  REQUIRE(sol.status == QpStatus::Solved);
  for (int k = 1; k <= 50; ++k) {
    CHECK(channel_multiplier_sum(c.problem, sol, Branch::Nominal, k, EnvelopeChannel::Environmental) >= -1e-9);
  }
  CHECK_THROWS_AS(channel_multiplier_sum(c.problem, sol, Branch::Nominal, 0, EnvelopeChannel::Stability), Error);
}

TEST_CASE("tire slip rows linearize the slip angles at the operating point") {
  const VehicleParams p = test::hatchback();
  auto g = test::rng(59);
  for (int trial = 0; trial < 50; ++trial) {
    VehicleState st = state_at(0, 0);
    st.Ux = test::uniform(g, 3, 10);
    st.Uy = test::uniform(g, -0.3, 0.3);
    st.r = test::uniform(g, -0.3, 0.3);
    const double delta = test::uniform(g, -0.1, 0.1);
    const OperatingPoint op = make_operating_point(st, delta, p, 0.6);
    const auto rows = tire_slip_rows(op, p, 0.1, 0.6);
    TireParams front = p.front_tire, rear = p.rear_tire;
    front.mu = rear.mu = 0.1;
    const double lim_f = tangent_peak_slip(front, 0.6);
    const double lim_r = tangent_peak_slip(rear, 0.6);
    const Vector4d x = to_mpc_state(st);
    auto value = [&](const SlipRow& r) { return r.h.dot(x) + r.h_delta * delta - r.g; };
    REQUIRE(value(rows[0]) == doctest::Approx(op.alpha_f - lim_f));
    REQUIRE(value(rows[1]) == doctest::Approx(-op.alpha_f - lim_f));
    REQUIRE(value(rows[2]) == doctest::Approx(op.alpha_r - lim_r));
    REQUIRE(value(rows[3]) == doctest::Approx(-op.alpha_r - lim_r));

    // Gradients against finite differences of the slip-angle definitions.
    const double h = 1e-7;
    auto slips = [&](double uy, double r, double d) {
      VehicleState s = st;
      s.Uy = uy;
      s.r = r;
      return slip_angles(s, d, p);
    };
    const double dfu = (slips(st.Uy + h, st.r, delta).front - slips(st.Uy - h, st.r, delta).front) / (2 * h);
    const double dfr = (slips(st.Uy, st.r + h, delta).front - slips(st.Uy, st.r - h, delta).front) / (2 * h);
    const double drr = (slips(st.Uy, st.r + h, delta).rear - slips(st.Uy, st.r - h, delta).rear) / (2 * h);
    REQUIRE(rows[0].h(mpc_index::Uy) == doctest::Approx(dfu).epsilon(1e-6));
    REQUIRE(rows[0].h(mpc_index::r) == doctest::Approx(dfr).epsilon(1e-6));
    REQUIRE(rows[0].h_delta == -1.0);
    REQUIRE(rows[2].h(mpc_index::r) == doctest::Approx(drr).epsilon(1e-6));
    REQUIRE(rows[2].h_delta == 0.0);
  }
}

TEST_CASE("stage models track the affine-tire model at controller operating points") {
  const VehicleParams p = test::hatchback();
  const Path path = build_left_turn_scenario(20, 40, 40, 3);
  const HorizonSpec spec;
  auto rk4 = [](auto f, Vector4d x, double dt, int steps) {
    const double h = dt / steps;
    for (int i = 0; i < steps; ++i) {
      const Vector4d k1 = f(x);
      const Vector4d k2 = f(x + 0.5 * h * k1);
      const Vector4d k3 = f(x + 0.5 * h * k2);
      const Vector4d k4 = f(x + h * k3);
      x += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    return x;
  };
  int checked = 0;
  for (const VehicleState& x0 : {state_at(25, 0.5, 0.02), state_at(35, -0.3), state_at(45, 0.2, 0.1)}) {
    const Instance c = make_instance(x0, 0.25, 0.10, ControllerKind::CMPC);
    const CmpcSolution sol = solve_cmpc(c.problem, QpSettings{});
    REQUIRE(sol.status == QpStatus::Solved);
    const HorizonGuess guess = warm_start_shift(sol, spec.dt_short, spec);
    const HorizonModel m = build_horizon_models(guess, x0, path, SpeedProfile::constant(5.0), p, 0.25, 0.10, spec,
                                                true, Weights{}.support_fraction);
    for (int b = 0; b < 2; ++b) {
      const auto& ops = b == 0 ? m.nominal_ops : m.contingency_ops;
      const auto& stages = b == 0 ? m.nominal : m.contingency;
      const VehicleParams pb = with_friction(p, b == 0 ? 0.25 : 0.10);
      for (int k = 0; k < spec.stages(); ++k) {
        const OperatingPoint& op = ops[k];
        const double kappa = m.samples[k].kappa;
        const StageModel& st = stages[k];
        auto f = [&](const Vector4d& x) { return affine_tire_dynamics(op, pb, kappa, x, op.delta); };
        const Vector4d xop = to_mpc_state(op.state);
        const Vector4d pred = st.A * xop + (st.B0 + st.B1) * op.delta + st.C;
        INFO("branch ", b, " stage ", k);
        REQUIRE((pred - rk4(f, xop, st.dt, 600)).cwiseAbs().maxCoeff() < (st.dt < 0.1 ? 1e-6 : 1e-3));
        ++checked;
      }
    }
  }
  CHECK(checked == 3 * 2 * 50);
}

TEST_CASE("warm start shift") {
  const HorizonSpec spec;
  const int n = spec.stages();
  CmpcSolution prev;
  for (BranchSolution* b : {&prev.nominal, &prev.contingency}) {
    b->x.resize(n + 1);
    b->u.resize(n);
  }
  // Linear in time: value = slope * t.
  for (int k = 0; k <= n; ++k) {
    const double t = spec.time(k);
    prev.nominal.x[k] = Vector4d::Constant(t);
    prev.contingency.x[k] = Vector4d::Constant(2 * t);
    if (k < n) {
      prev.nominal.u[k] = t;
      prev.contingency.u[k] = -t;
    }
  }

  SUBCASE("grid-aligned shift moves the short segment by one stage") {
    const HorizonGuess g = warm_start_shift(prev, spec.dt_short, spec);
    for (int k = 0; k < spec.n_short; ++k) {
      CHECK((g.nominal.x[k] - prev.nominal.x[k + 1]).cwiseAbs().maxCoeff() < 1e-12);
      CHECK(g.contingency.u[k] == doctest::Approx(prev.contingency.u[k + 1]));
    }
    CHECK(g.nominal.x[n] == prev.nominal.x[n]);
  }

  SUBCASE("half-step shift lands on midpoints") {
    const HorizonGuess g = warm_start_shift(prev, spec.dt_short / 2, spec);
    for (int k = 0; k < spec.n_short; ++k) {
      CHECK(g.nominal.x[k](0) == doctest::Approx(0.5 * (prev.nominal.x[k](0) + prev.nominal.x[k + 1](0))));
      CHECK(g.contingency.x[k](3) == doctest::Approx(0.5 * (prev.contingency.x[k](3) + prev.contingency.x[k + 1](3))));
    }
    for (int k = spec.n_short; k < n; ++k) CHECK(g.nominal.x[k](1) == doctest::Approx(spec.time(k) + 0.01));
    CHECK(g.nominal.u[n - 1] == prev.nominal.u[n - 1]);
  }

  SUBCASE("constant trajectories are unchanged") {
    CmpcSolution flat = prev;
    for (BranchSolution* b : {&flat.nominal, &flat.contingency}) {
      for (auto& x : b->x) x = Vector4d(0.1, -0.2, 0.03, 1.5);
      for (auto& u : b->u) u = 0.07;
    }
    const HorizonGuess g = warm_start_shift(flat, 0.013, spec);
    for (int k = 0; k <= n; ++k) CHECK(g.contingency.x[k] == flat.contingency.x[k]);
    for (int k = 0; k < n; ++k) CHECK(g.nominal.u[k] == flat.nominal.u[k]);
  }
}

TEST_CASE("controller holds the last command after repeated failures") {
  ControllerConfig cfg;
  cfg.qp.max_iterations = 1;
  cfg.qp.acceptable_tol = 0;
  cfg.max_failures = 3;
  Controller ctl(cfg, test::hatchback(), build_left_turn_scenario(20, 40, 40, 3), SpeedProfile::constant(5.0));
  ctl.reset(0.02);
  StepResult r;
  for (int i = 0; i < 3; ++i) {
    r = ctl.step(state_at(10, 1.0));
    CHECK(r.solution.status != QpStatus::Solved);
    CHECK(r.hold_last_command == (i == 2));
  }
  CHECK(r.delta == ctl.last_command());
}
