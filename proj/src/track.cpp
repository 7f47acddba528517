#include "cmpc/track.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "cmpc/errors.hpp"

namespace cmpc {

namespace {

// Index i such that samples[i].s <= s < samples[i + 1].s, clamped to valid segments.
template <typename Sample>
std::size_t segment_index(const std::vector<Sample>& samples, double s) {
  auto it = std::upper_bound(samples.begin(), samples.end(), s,
                             [](double value, const Sample& sample) { return value < sample.s; });
  if (it == samples.begin()) return 0;
  return std::min<std::size_t>(static_cast<std::size_t>(it - samples.begin()) - 1, samples.size() - 1);
}

double lerp_weight(double s0, double s1, double s) { return std::clamp((s - s0) / (s1 - s0), 0.0, 1.0); }

void check_range(const Path& path, double s) {
  if (!std::isfinite(s) || s < -Path::kOvershoot || s > path.total_length() + Path::kOvershoot) {
    std::ostringstream msg;
    msg << "s = " << s << " outside path [0, " << path.total_length() << "]";
    throw Error(ErrorCode::OutOfRange, msg.str());
  }
}

}  // namespace

Path::Path(std::vector<PathSample> samples) : samples_(std::move(samples)) {
  if (samples_.empty()) throw Error(ErrorCode::InvalidGeometry, "path needs at least one sample");
  if (samples_.front().s != 0.0) throw Error(ErrorCode::InvalidGeometry, "path must start at s = 0");
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    const auto& p = samples_[i];
    if (!std::isfinite(p.kappa) || !(p.e_min < 0.0 && 0.0 < p.e_max)) {
      throw Error(ErrorCode::InvalidGeometry, "sample " + std::to_string(i) + " needs e_min < 0 < e_max");
    }
    if (i > 0 && !(p.s > samples_[i - 1].s)) {
      throw Error(ErrorCode::InvalidGeometry, "path s must be strictly increasing");
    }
  }
}

double Path::first_curve_start() const {
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    if (samples_[i].kappa != 0.0) return i == 0 ? 0.0 : samples_[i - 1].s;
  }
  return total_length();
}

double curvature_at(const Path& path, double s) {
  check_range(path, s);
  const auto& p = path.samples();
  const std::size_t i = segment_index(p, s);
  if (i + 1 >= p.size()) return p.back().kappa;
  const double w = lerp_weight(p[i].s, p[i + 1].s, s);
  if (w == 0.0) return p[i].kappa;
  return p[i].kappa + w * (p[i + 1].kappa - p[i].kappa);
}

LateralBounds bounds_at(const Path& path, double s) {
  check_range(path, s);
  const auto& p = path.samples();
  const std::size_t i = segment_index(p, s);
  if (i + 1 >= p.size()) return {p.back().e_min, p.back().e_max};
  const double w = lerp_weight(p[i].s, p[i + 1].s, s);
  if (w == 0.0) return {p[i].e_min, p[i].e_max};
  return {p[i].e_min + w * (p[i + 1].e_min - p[i].e_min), p[i].e_max + w * (p[i + 1].e_max - p[i].e_max)};
}

Path build_left_turn_scenario(double radius, double entry_len, double exit_len, double half_width) {
  if (!(radius > 0 && entry_len > 0 && exit_len > 0 && half_width > 0)) {
    throw Error(ErrorCode::InvalidGeometry, "left turn arguments must be positive");
  }
  const double kappa = 1.0 / radius;
  const double arc = std::numbers::pi * radius / 2.0;
  const double arc_start = entry_len;
  const double arc_end = entry_len + arc;
  const double hw = half_width;
  return Path({
      {0.0, 0.0, -hw, hw},
      {arc_start - kCurvatureStepLength, 0.0, -hw, hw},
      {arc_start, kappa, -hw, hw},
      {arc_end, kappa, -hw, hw},
      {arc_end + kCurvatureStepLength, 0.0, -hw, hw},
      {arc_end + exit_len, 0.0, -hw, hw},
  });
}

FrictionMap::FrictionMap(double default_mu, std::vector<FrictionZone> zones)
    : default_mu_(default_mu), zones_(std::move(zones)) {
  auto valid_mu = [](double mu) { return mu > 0.0 && mu <= 1.2; };
  if (!valid_mu(default_mu_)) throw Error(ErrorCode::InvalidParameter, "default mu must be in (0, 1.2]");
  std::sort(zones_.begin(), zones_.end(),
            [](const FrictionZone& l, const FrictionZone& r) { return l.s_start < r.s_start; });
  for (std::size_t i = 0; i < zones_.size(); ++i) {
    if (!valid_mu(zones_[i].mu)) throw Error(ErrorCode::InvalidParameter, "zone mu must be in (0, 1.2]");
    if (!(zones_[i].s_end > zones_[i].s_start)) throw Error(ErrorCode::InvalidParameter, "empty friction zone");
    if (i > 0 && zones_[i].s_start < zones_[i - 1].s_end) {
      throw Error(ErrorCode::InvalidParameter, "friction zones overlap");
    }
  }
}

double friction_at(const FrictionMap& map, double s) {
  for (const auto& z : map.zones()) {
    if (s >= z.s_start && s < z.s_end) return z.mu;
  }
  return map.default_mu();
}

SpeedProfile::SpeedProfile(std::vector<SpeedSample> samples, double ux_min) : samples_(std::move(samples)) {
  if (samples_.empty()) throw Error(ErrorCode::InvalidParameter, "speed profile needs samples");
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    if (!(samples_[i].Ux >= ux_min)) throw Error(ErrorCode::InvalidParameter, "speed profile below Ux_min");
    if (i > 0 && !(samples_[i].s > samples_[i - 1].s)) {
      throw Error(ErrorCode::InvalidParameter, "speed profile s must be increasing");
    }
  }
}

double SpeedProfile::at(double s) const {
  const std::size_t i = segment_index(samples_, s);
  if (i + 1 >= samples_.size()) return samples_.back().Ux;
  if (s <= samples_.front().s) return samples_.front().Ux;
  const double w = lerp_weight(samples_[i].s, samples_[i + 1].s, s);
  return samples_[i].Ux + w * (samples_[i + 1].Ux - samples_[i].Ux);
}

}  // namespace cmpc
