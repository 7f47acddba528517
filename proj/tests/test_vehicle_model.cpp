#include <cmath>

#include "doctest.h"
#include "support.hpp"

using namespace cmpc;

namespace {

// Brush polynomial written out independently in long double.
long double brush_force(long double alpha, long double C, long double mu, long double Fz) {
  const long double sat = std::atan(3.0L * mu * Fz / C);
  if (std::fabs(alpha) > sat) return alpha > 0 ? -mu * Fz : mu * Fz;
  const long double z = std::tan(alpha);
  const long double k = C * z;
  return -k + k * std::fabs(k) / (3.0L * mu * Fz) - k * k * k / (27.0L * mu * mu * Fz * Fz);
}

TireParams tire(double C, double mu, double Fz) { return {C, mu, Fz}; }

}  // namespace

TEST_CASE("slip angles on hand-evaluated states") {
  VehicleParams p = test::hatchback();
  VehicleState x;
  x.Ux = 5;
  auto a = slip_angles(x, 0.0, p);
  CHECK(a.front == 0.0);
  CHECK(a.rear == 0.0);

  x = {};
  x.Ux = 10;
  x.Uy = 1;
  a = slip_angles(x, 0.0, p);
  CHECK(a.front == doctest::Approx(0.09967).epsilon(1e-4));
  CHECK(a.rear == doctest::Approx(0.09967).epsilon(1e-4));

  p.a = 1.2;
  p.b = 1.4;
  x = {};
  x.Ux = 5;
  x.r = 0.5;
  a = slip_angles(x, 0.1, p);
  CHECK(a.front == doctest::Approx(std::atan(0.12) - 0.1).epsilon(1e-12));
  CHECK(a.front == doctest::Approx(0.01943).epsilon(1e-3));
  CHECK(a.rear == doctest::Approx(-0.13909).epsilon(1e-4));
}

TEST_CASE("slip angles reject speeds below ux_min") {
  const VehicleParams p = test::hatchback();
  VehicleState x;
  x.Ux = 0.4;
  try {
    slip_angles(x, 0.0, p);
    FAIL("expected UxTooSmall");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::UxTooSmall);
  }
}

TEST_CASE("Fiala force at reference points") {
  const TireParams t = tire(80000, 0.25, 5000);
  CHECK(fiala_lateral_force(0.0, t) == 0.0);
  CHECK(t.saturation_slip() == doctest::Approx(std::atan(0.046875)));
  CHECK(t.saturation_slip() == doctest::Approx(0.04684).epsilon(1e-4));
  CHECK(fiala_lateral_force(0.2, t) == -1250.0);
  CHECK(fiala_lateral_force(0.02, t) ==
        doctest::Approx(static_cast<double>(brush_force(0.02L, 80000, 0.25, 5000))).epsilon(1e-13));
}

TEST_CASE("Fiala force matches the long double oracle across the curve") {
  auto g = test::rng(11);
  for (int i = 0; i < 2000; ++i) {
    const TireParams t = tire(test::uniform(g, 2e4, 2e5), test::uniform(g, 0.05, 1.2), test::uniform(g, 1e3, 1e4));
    const double alpha = test::uniform(g, -1.5, 1.5) * t.saturation_slip();
    const double want = static_cast<double>(brush_force(alpha, t.C, t.mu, t.Fz));
    REQUIRE(std::abs(fiala_lateral_force(alpha, t) - want) <= 1e-9 * t.mu * t.Fz);
  }
}

TEST_CASE("Fiala force is bounded, odd and monotone") {
  auto g = test::rng(7);
  for (int i = 0; i < 10000; ++i) {
    const TireParams t = tire(test::uniform(g, 2e4, 2e5), test::uniform(g, 0.05, 1.2), test::uniform(g, 1e3, 1e4));
    const double alpha = test::uniform(g, -0.6, 0.6);
    const double fy = fiala_lateral_force(alpha, t);
    REQUIRE(std::abs(fy) <= t.mu * t.Fz);
    REQUIRE(fiala_lateral_force(-alpha, t) == -fy);
  }
  const TireParams t = tire(80000, 0.1, 7000);
  const double sat = t.saturation_slip();
  double prev = fiala_lateral_force(-sat, t);
  for (int i = 1; i <= 4000; ++i) {
    const double fy = fiala_lateral_force(-sat + 2 * sat * i / 4000.0, t);
    REQUIRE(fy <= prev);
    prev = fy;
  }
}

TEST_CASE("Fiala force is continuous with zero slope at saturation") {
  const TireParams t = tire(80000, 0.25, 5000);
  const double sat = t.saturation_slip();
  CHECK(fiala_lateral_force(sat, t) == doctest::Approx(-t.mu * t.Fz).epsilon(1e-12));
  CHECK(std::abs(fiala_force_slope(sat * (1 - 1e-12), t)) < 1e-3);
}

TEST_CASE("analytic tire slope matches central differences") {
  auto g = test::rng(3);
  int checked = 0;
  while (checked < 100) {
    const TireParams t = tire(test::uniform(g, 2e4, 2e5), test::uniform(g, 0.05, 1.2), test::uniform(g, 1e3, 1e4));
    const double sat = t.saturation_slip();
    const double alpha = test::uniform(g, -1.2, 1.2) * sat;
    if (std::abs(std::abs(alpha) - sat) < 1e-3) continue;
    const double h = 1e-7 * std::max(1e-3, sat);
    const double fd = (fiala_lateral_force(alpha + h, t) - fiala_lateral_force(alpha - h, t)) / (2 * h);
    const double slope = fiala_force_slope(alpha, t);
    REQUIRE(std::abs(slope - fd) <= 1e-5 * std::max(std::abs(fd), 1e-3 * t.C));
    ++checked;
  }
}

TEST_CASE("state derivative examples") {
  const VehicleParams p = test::hatchback();
  VehicleState x;
  x.Ux = 5;
  VehicleState dx = state_derivative(x, ControlInput{}, p, 0.0);
  CHECK(dx.s == 5.0);
  CHECK(dx.e == 0.0);
  CHECK(dx.dpsi == 0.0);
  CHECK(dx.Ux == 0.0);
  CHECK(dx.Uy == 0.0);
  CHECK(dx.r == 0.0);

  x.Uy = 0.5;
  x.dpsi = 0.1;
  dx = state_derivative(x, ControlInput{}, p, 0.0);
  CHECK(dx.s == doctest::Approx(4.95));
  CHECK(dx.e == doctest::Approx(1.0));

  x = {};
  x.Ux = 5;
  dx = state_derivative(x, ControlInput{}, p, 0.05);
  CHECK(dx.dpsi == doctest::Approx(-0.25));
}

TEST_CASE("plant integration on a straight road") {
  const VehicleParams p = test::hatchback();
  VehicleState x;
  x.Ux = 5;
  x.e = 0.3;
  x.dpsi = 0.0;
  const VehicleState y = integrate_plant(x, ControlInput{}, 0.02, p, [](double) { return 0.0; },
                                         [](double) { return 0.25; });
  CHECK(y.s == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(y.e == x.e);
  CHECK(y.dpsi == x.dpsi);
}

TEST_CASE("plant rejects steps longer than one controller tick") {
  const VehicleParams p = test::hatchback();
  VehicleState x;
  x.Ux = 5;
  CHECK_THROWS_AS(integrate_plant(x, ControlInput{}, 0.05, p, [](double) { return 0.0; }, [](double) { return 0.25; }),
                  Error);
}

TEST_CASE("steady cornering is a fixed point of the plant") {
  // Solve the lateral equations for (Uy, delta) with r = kappa Ux by Newton.
  const VehicleParams p = test::hatchback(0.25);
  const double kappa = 0.05, ux = 5.0;
  VehicleState x;
  x.Ux = ux;
  x.r = kappa * ux;
  // Kinematic starting point: zero rear slip, Ackermann steering.
  x.Uy = p.b * x.r;
  double delta = p.wheelbase() * kappa;
  for (int it = 0; it < 50; ++it) {
    auto residual = [&](double uy, double d) {
      VehicleState s = x;
      s.Uy = uy;
      const VehicleState dx = state_derivative(s, ControlInput{d, 0, 0}, p, kappa);
      return Eigen::Vector2d(dx.Uy, dx.r);
    };
    const Eigen::Vector2d f = residual(x.Uy, delta);
    const double h = 1e-7;
    Eigen::Matrix2d J;
    J.col(0) = (residual(x.Uy + h, delta) - residual(x.Uy - h, delta)) / (2 * h);
    J.col(1) = (residual(x.Uy, delta + h) - residual(x.Uy, delta - h)) / (2 * h);
    const Eigen::Vector2d step = J.partialPivLu().solve(-f);
    x.Uy += step(0);
    delta += step(1);
  }
  x.dpsi = -x.Uy / ux;  // keeps e constant
  const double fx = -p.m * x.r * x.Uy;  // keeps Ux constant
  const ControlInput u{delta, 0.5 * fx, 0.5 * fx};
  const VehicleState dx = state_derivative(x, u, p, kappa);
  REQUIRE(std::abs(dx.Uy) < 1e-9);
  REQUIRE(std::abs(dx.r) < 1e-9);

  const VehicleState y = integrate_plant(x, u, 0.02, p, [&](double) { return kappa; }, [](double) { return 0.25; });
  CHECK(std::abs(y.e - x.e) < 1e-6);
  CHECK(std::abs(y.dpsi - x.dpsi) < 1e-6);
  CHECK(std::abs(y.Ux - x.Ux) < 1e-6);
  CHECK(std::abs(y.Uy - x.Uy) < 1e-6);
  CHECK(std::abs(y.r - x.r) < 1e-6);
}

TEST_CASE("RK4 plant agrees with a fine Euler oracle") {
  auto g = test::rng(5);
  const VehicleParams p = test::hatchback(0.25);
  auto kappa = [](double s) { return 0.03 + 0.001 * s; };
  auto mu = [](double) { return 0.25; };
  for (int trial = 0; trial < 10; ++trial) {
    VehicleState x;
    x.s = test::uniform(g, 0, 2);
    x.e = test::uniform(g, -1, 1);
    x.dpsi = test::uniform(g, -0.1, 0.1);
    x.Ux = test::uniform(g, 4, 8);
    x.Uy = test::uniform(g, -0.3, 0.3);
    x.r = test::uniform(g, -0.3, 0.3);
    const ControlInput u{test::uniform(g, -0.1, 0.1), test::uniform(g, -500, 500), test::uniform(g, -500, 500)};
    const double dt = 0.02;
    const VehicleState y = integrate_plant(x, u, dt, p, kappa, mu);

    VehicleStateT<long double> z{x.s, x.e, x.dpsi, x.Ux, x.Uy, x.r};
    const auto pl = make_vehicle_params<long double>(p.m, p.Iz, p.a, p.b, p.g, p.front_tire.C, p.rear_tire.C,
                                                     0.25L, 0.25L);
    const ControlInputT<long double> ul{u.delta, u.Fxf, u.Fxr};
    const int steps = 1000;
    for (int i = 0; i < steps; ++i) {
      const auto dz = state_derivative(z, ul, pl, static_cast<long double>(kappa(static_cast<double>(z.s))));
      z = axpy(z, static_cast<long double>(dt / steps), dz);
    }
    const double scale = std::max({1.0, std::abs(x.s), std::abs(x.Ux)});
    CHECK(std::abs(y.s - static_cast<double>(z.s)) <= 1e-6 * scale);
    CHECK(std::abs(y.e - static_cast<double>(z.e)) <= 1e-6 * scale);
    CHECK(std::abs(y.dpsi - static_cast<double>(z.dpsi)) <= 1e-6 * scale);
    CHECK(std::abs(y.Ux - static_cast<double>(z.Ux)) <= 1e-6 * scale);
    CHECK(std::abs(y.Uy - static_cast<double>(z.Uy)) <= 1e-6 * scale);
    CHECK(std::abs(y.r - static_cast<double>(z.r)) <= 1e-6 * scale);
  }
}

TEST_CASE("vehicle parameters derive axle loads from statics") {
  const VehicleParams p = test::hatchback();
  CHECK(p.front_tire.Fz + p.rear_tire.Fz == doctest::Approx(p.m * p.g));
  CHECK(p.front_tire.Fz == doctest::Approx(1500 * 9.81 * 1.42 / 2.46));
  CHECK_THROWS_AS(make_vehicle_params(-1.0, 2250.0, 1.04, 1.42, 9.81, 8e4, 8e4, 0.25, 0.25), Error);
  CHECK_THROWS_AS(make_vehicle_params(1500.0, 2250.0, 1.04, 1.42, 9.81, 8e4, 8e4, 1.5, 0.25), Error);
}
