#pragma once

#include <vector>

namespace cmpc {

struct PathSample {
  double s;
  double kappa;
  double e_min;
  double e_max;
};

struct LateralBounds {
  double e_min;
  double e_max;
};

/// Reference path in curvilinear coordinates. Curvature and road-edge bounds
/// are piecewise linear in s and clamped at both ends.
class Path {
 public:
  // Queries may overshoot the ends by this much before OutOfRange is raised.
  static constexpr double kOvershoot = 10.0;

  explicit Path(std::vector<PathSample> samples);

  const std::vector<PathSample>& samples() const { return samples_; }
  double total_length() const { return samples_.back().s; }

  /// s of the last straight sample before the first curved segment; the
  /// path length if the path is straight throughout.
  double first_curve_start() const;

 private:
  std::vector<PathSample> samples_;
};

double curvature_at(const Path& path, double s);
LateralBounds bounds_at(const Path& path, double s);

/// Straight entry, 90 degree left arc of constant curvature, straight exit.
Path build_left_turn_scenario(double radius, double entry_len, double exit_len, double half_width);

// Length over which a curvature step is linearly blended in generated paths.
inline constexpr double kCurvatureStepLength = 1e-3;

struct FrictionZone {
  double s_start;
  double s_end;
  double mu;
};

/// Friction varies with s only. Zones are half-open intervals [s_start, s_end).
class FrictionMap {
 public:
  FrictionMap(double default_mu, std::vector<FrictionZone> zones = {});

  double default_mu() const { return default_mu_; }
  const std::vector<FrictionZone>& zones() const { return zones_; }

 private:
  double default_mu_;
  std::vector<FrictionZone> zones_;
};

double friction_at(const FrictionMap& map, double s);

struct SpeedSample {
  double s;
  double Ux;
};

class SpeedProfile {
 public:
  explicit SpeedProfile(std::vector<SpeedSample> samples, double ux_min = 0.5);
  static SpeedProfile constant(double Ux) { return SpeedProfile({{0.0, Ux}}); }

  const std::vector<SpeedSample>& samples() const { return samples_; }
  double at(double s) const;

 private:
  std::vector<SpeedSample> samples_;
};

}  // namespace cmpc
