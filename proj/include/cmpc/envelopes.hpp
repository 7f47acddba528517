#pragma once

#include <vector>

#include <Eigen/Dense>

#include "cmpc/track.hpp"
#include "cmpc/vehicle_model.hpp"

namespace cmpc {

// TireSlip holds the linearized slips where the affine tire model stays valid.
enum class EnvelopeChannel { Stability, Environmental, TireSlip };
inline constexpr int kNumChannels = 3;

struct HalfSpace {
  Eigen::Vector4d h;  // over x = [Uy, r, dpsi, e]
  double g;           // h . x <= g (+ slack)
};

/// Soft polytope H x <= G + sigma sharing one slack per channel.
struct Envelope {
  std::vector<HalfSpace> rows;
  EnvelopeChannel channel{EnvelopeChannel::Stability};

  /// Largest positive row residual max(0, h.x - g).
  double violation(const Eigen::Vector4d& x) const;
};

/// Yaw-rate bound |r| <= mu g / Ux and rear-slip bound |Uy/Ux - b r/Ux| <= alpha_peak,
/// where alpha_peak is the Fiala saturation angle of the rear tire at `mu`. Rows
/// are ordered r+, r-, beta+, beta-.
Envelope stability_envelope(double Ux, double mu, const VehicleParams& params);

/// e <= e_max(s) and -e <= -e_min(s).
Envelope environmental_envelope(const Path& path, double s);

}  // namespace cmpc
