#include "cmpc/envelopes.hpp"

#include <algorithm>
#include <cmath>

#include "cmpc/linearize.hpp"

namespace cmpc {

double Envelope::violation(const Eigen::Vector4d& x) const {
  double worst = 0.0;
  for (const auto& row : rows) worst = std::max(worst, row.h.dot(x) - row.g);
  return worst;
}

Envelope stability_envelope(double Ux, double mu, const VehicleParams& params) {
  if (!(Ux >= params.ux_min)) throw Error(ErrorCode::UxTooSmall, "Ux = " + std::to_string(Ux));
  TireParams rear = params.rear_tire;
  rear.mu = mu;
  const double r_max = mu * params.g / Ux;
  const double alpha_peak = rear.saturation_slip();

  Envelope env;
  env.channel = EnvelopeChannel::Stability;
  Eigen::Vector4d h = Eigen::Vector4d::Zero();
  h(mpc_index::r) = 1.0;
  env.rows.push_back({h, r_max});
  env.rows.push_back({-h, r_max});

  h.setZero();
  h(mpc_index::Uy) = 1.0 / Ux;
  h(mpc_index::r) = -params.b / Ux;
  env.rows.push_back({h, alpha_peak});
  env.rows.push_back({-h, alpha_peak});
  return env;
}

Envelope environmental_envelope(const Path& path, double s) {
  const LateralBounds b = bounds_at(path, s);
  Envelope env;
  env.channel = EnvelopeChannel::Environmental;
  Eigen::Vector4d h = Eigen::Vector4d::Zero();
  h(mpc_index::e) = 1.0;
  env.rows.push_back({h, b.e_max});
  env.rows.push_back({-h, -b.e_min});
  return env;
}

}  // namespace cmpc
