#include "cmpc/vehicle_model.hpp"

#include <cmath>

namespace cmpc {

VehicleState integrate_plant(const VehicleState& state, const ControlInput& input, double dt,
                             const VehicleParams& params, const LookupFn& kappa_at,
                             const LookupFn& mu_at) {
  if (!(dt > 0.0) || dt > kMaxPlantStep + 1e-12) {
    throw Error(ErrorCode::InvalidParameter, "plant step must be in (0, 0.02] s");
  }
  const int substeps = static_cast<int>(std::ceil(dt / kPlantSubstep - 1e-9));
  const double h = dt / substeps;

  VehicleState x = state;
  for (int i = 0; i < substeps; ++i) {
    const double kappa = kappa_at(x.s);
    const VehicleParams local = with_friction(params, mu_at(x.s));
    const VehicleState k1 = state_derivative(x, input, local, kappa);
    const VehicleState k2 = state_derivative(axpy(x, 0.5 * h, k1), input, local, kappa);
    const VehicleState k3 = state_derivative(axpy(x, 0.5 * h, k2), input, local, kappa);
    const VehicleState k4 = state_derivative(axpy(x, h, k3), input, local, kappa);
    x.s += h / 6.0 * (k1.s + 2.0 * k2.s + 2.0 * k3.s + k4.s);
    x.e += h / 6.0 * (k1.e + 2.0 * k2.e + 2.0 * k3.e + k4.e);
    x.dpsi += h / 6.0 * (k1.dpsi + 2.0 * k2.dpsi + 2.0 * k3.dpsi + k4.dpsi);
    x.Ux += h / 6.0 * (k1.Ux + 2.0 * k2.Ux + 2.0 * k3.Ux + k4.Ux);
    x.Uy += h / 6.0 * (k1.Uy + 2.0 * k2.Uy + 2.0 * k3.Uy + k4.Uy);
    x.r += h / 6.0 * (k1.r + 2.0 * k2.r + 2.0 * k3.r + k4.r);
    if (!is_finite(x)) {
      throw Error(ErrorCode::NonFinite, "plant integration diverged");
    }
  }
  return x;
}

}  // namespace cmpc
