#pragma once

// Planar bicycle model in path coordinates with Fiala brush tires.
//
// Everything here is templated on the scalar type so that the same equations
// can be evaluated in extended precision by the test oracles.

#include <cmath>
#include <functional>
#include <string>
#include <utility>

#include "cmpc/errors.hpp"

namespace cmpc {

template <typename Scalar>
struct TireParamsT {
  Scalar C{80000};  // cornering stiffness, N/rad
  Scalar mu{1};     // friction coefficient
  Scalar Fz{5000};  // normal load, N

  /// Slip angle at which the brush model reaches full sliding.
  Scalar saturation_slip() const {
    using std::atan;
    return atan(Scalar(3) * mu * Fz / C);
  }

  bool valid() const { return C > 0 && mu > 0 && mu <= Scalar(1.2) && Fz > 0; }
};

template <typename Scalar>
struct VehicleParamsT {
  Scalar m{1500};
  Scalar Iz{2250};
  Scalar a{1.04};
  Scalar b{1.42};
  Scalar g{9.81};
  TireParamsT<Scalar> front_tire{};
  TireParamsT<Scalar> rear_tire{};
  // Below this speed the slip-angle expressions are treated as singular.
  Scalar ux_min{0.5};

  Scalar wheelbase() const { return a + b; }
  Scalar static_load_front() const { return m * g * b / (a + b); }
  Scalar static_load_rear() const { return m * g * a / (a + b); }
};

template <typename Scalar>
struct VehicleStateT {
  Scalar s{0};     // path progress, m
  Scalar e{0};     // lateral error, m (positive left of the path)
  Scalar dpsi{0};  // heading error, rad
  Scalar Ux{0};    // longitudinal speed, m/s
  Scalar Uy{0};    // lateral speed, m/s
  Scalar r{0};     // yaw rate, rad/s
};

template <typename Scalar>
struct ControlInputT {
  Scalar delta{0};  // road-wheel angle, rad
  Scalar Fxf{0};    // N
  Scalar Fxr{0};    // N
};

using TireParams = TireParamsT<double>;
using VehicleParams = VehicleParamsT<double>;
using VehicleState = VehicleStateT<double>;
using ControlInput = ControlInputT<double>;

/// Builds a parameter set whose axle loads come from statics.
template <typename Scalar>
VehicleParamsT<Scalar> make_vehicle_params(Scalar m, Scalar Iz, Scalar a, Scalar b, Scalar g,
                                           Scalar C_front, Scalar C_rear, Scalar mu_front,
                                           Scalar mu_rear) {
  VehicleParamsT<Scalar> p;
  p.m = m;
  p.Iz = Iz;
  p.a = a;
  p.b = b;
  p.g = g;
  if (!(m > 0 && Iz > 0 && a > 0 && b > 0 && g > 0)) {
    throw Error(ErrorCode::InvalidParameter, "vehicle mass, inertia, geometry and gravity must be positive");
  }
  p.front_tire = {C_front, mu_front, p.static_load_front()};
  p.rear_tire = {C_rear, mu_rear, p.static_load_rear()};
  if (!p.front_tire.valid() || !p.rear_tire.valid()) {
    throw Error(ErrorCode::InvalidParameter, "tire parameters require C > 0, 0 < mu <= 1.2, Fz > 0");
  }
  return p;
}

/// Same vehicle on a different surface: both axles get `mu`, stiffness unchanged.
template <typename Scalar>
VehicleParamsT<Scalar> with_friction(VehicleParamsT<Scalar> params, Scalar mu) {
  params.front_tire.mu = mu;
  params.rear_tire.mu = mu;
  return params;
}

template <typename Scalar>
struct SlipAngles {
  Scalar front;
  Scalar rear;
};

template <typename Scalar>
SlipAngles<Scalar> slip_angles(const VehicleStateT<Scalar>& state, Scalar delta,
                               const VehicleParamsT<Scalar>& params) {
  using std::atan;
  if (!(state.Ux >= params.ux_min)) {
    throw Error(ErrorCode::UxTooSmall, "Ux = " + std::to_string(static_cast<double>(state.Ux)));
  }
  return {atan((state.Uy + params.a * state.r) / state.Ux) - delta,
          atan((state.Uy - params.b * state.r) / state.Ux)};
}

/// Fiala brush tire lateral force. Odd in alpha, saturates at -mu*Fz*sign(alpha).
template <typename Scalar>
Scalar fiala_lateral_force(Scalar alpha, const TireParamsT<Scalar>& tire) {
  using std::abs;
  using std::tan;
  const Scalar mu_fz = tire.mu * tire.Fz;
  if (abs(alpha) > tire.saturation_slip()) {
    return alpha > 0 ? -mu_fz : mu_fz;
  }
  const Scalar t = tan(alpha);
  const Scalar c = tire.C;
  return -c * t + c * c / (Scalar(3) * mu_fz) * abs(t) * t -
         c * c * c / (Scalar(27) * mu_fz * mu_fz) * t * t * t;
}

/// dFy/dalpha of the brush model; zero on the saturated branch.
template <typename Scalar>
Scalar fiala_force_slope(Scalar alpha, const TireParamsT<Scalar>& tire) {
  using std::abs;
  using std::cos;
  using std::tan;
  if (abs(alpha) > tire.saturation_slip()) {
    return Scalar(0);
  }
  const Scalar mu_fz = tire.mu * tire.Fz;
  const Scalar t = tan(alpha);
  const Scalar c = tire.C;
  const Scalar sec2 = Scalar(1) / (cos(alpha) * cos(alpha));
  return (-c + Scalar(2) * c * c / (Scalar(3) * mu_fz) * abs(t) -
          c * c * c / (Scalar(9) * mu_fz * mu_fz) * t * t) *
         sec2;
}

/// Time derivative of the full six-state model.
template <typename Scalar>
VehicleStateT<Scalar> state_derivative(const VehicleStateT<Scalar>& x, const ControlInputT<Scalar>& u,
                                       const VehicleParamsT<Scalar>& p, Scalar kappa) {
  const auto alpha = slip_angles(x, u.delta, p);
  const Scalar fyf = fiala_lateral_force(alpha.front, p.front_tire);
  const Scalar fyr = fiala_lateral_force(alpha.rear, p.rear_tire);

  VehicleStateT<Scalar> dx;
  dx.s = x.Ux - x.Uy * x.dpsi;
  dx.e = x.Uy + x.Ux * x.dpsi;
  dx.dpsi = x.r - kappa * x.Ux;
  dx.Ux = (u.Fxf + u.Fxr) / p.m + x.r * x.Uy;
  dx.Uy = (fyf + fyr) / p.m - x.r * x.Ux;
  dx.r = (p.a * fyf - p.b * fyr) / p.Iz;
  return dx;
}

template <typename Scalar>
VehicleStateT<Scalar> axpy(const VehicleStateT<Scalar>& x, Scalar h, const VehicleStateT<Scalar>& dx) {
  return {x.s + h * dx.s,   x.e + h * dx.e,   x.dpsi + h * dx.dpsi,
          x.Ux + h * dx.Ux, x.Uy + h * dx.Uy, x.r + h * dx.r};
}

template <typename Scalar>
bool is_finite(const VehicleStateT<Scalar>& x) {
  using std::isfinite;
  return isfinite(x.s) && isfinite(x.e) && isfinite(x.dpsi) && isfinite(x.Ux) && isfinite(x.Uy) &&
         isfinite(x.r);
}

using LookupFn = std::function<double(double)>;

inline constexpr double kMaxPlantStep = 0.02;
inline constexpr double kPlantSubstep = 1e-3;

/// Propagates the plant over `dt` with RK4 substeps of at most 1 ms. Curvature
/// and surface friction are sampled at the start of each substep.
VehicleState integrate_plant(const VehicleState& state, const ControlInput& input, double dt,
                             const VehicleParams& params, const LookupFn& kappa_at,
                             const LookupFn& mu_at);

}  // namespace cmpc
