#pragma once

// Scripted oracle driver: pure-pursuit steering plus a longitudinal
// controller that respects curve speed limits, red lights, and obstacles
// reported by the forward corridor sensor. Used for dataset collection and
// as the solvability baseline in the benchmarks.

#include <algorithm>
#include <cmath>
#include <optional>

#include "cadre/common.hpp"
#include "cadre/sim.hpp"

namespace cadre::sim {

struct AutopilotConfig {
  double cruise = 6.0;          // m/s on open road
  double lookahead_base = 3.0;  // m
  double lookahead_gain = 0.8;  // s (scaled by speed)
  double lookahead_max = 12.0;
  double lat_accel_max = 1.8;   // m/s^2 budget for curve speed
  double curve_preview = 16.0;  // m of route scanned for curvature
  double red_stop_at = 3.0;     // m before the junction entry to hold
  double red_slow_gain = 0.6;   // (m/s) per metre beyond the hold point
  double obstacle_brake_at = 5.0;   // gap that demands a full brake
  double obstacle_slow_at = 12.0;   // gap below which we track the actor
  double obstacle_follow_gap = 4.0; // desired standoff when following
  double obstacle_follow_gain = 0.7;
  double kp_throttle = 0.5;
  double kp_brake = 0.45;
  double throttle_max = 0.75;
  double coast_band = 0.3;  // m/s of overspeed tolerated before braking
};

struct Controls {
  double steer = 0.0;
  double throttle = 0.0;
  double brake = 0.0;
};

class Autopilot {
 public:
  explicit Autopilot(AutopilotConfig cfg = {}) : cfg_(cfg) {}

  Controls drive(const Simulator& sim) const {
    const EgoState& ego = sim.ego();
    const geom::Polyline& line = sim.route_line();
    const double s0 = sim.progress_s();

    Controls out;
    out.steer = pursue(ego, line, s0);

    double v_target = std::min(cfg_.cruise, curve_limit(line, s0));
    bool hard_brake = false;

    if (auto hold = red_light_distance(sim)) {
      const double room = *hold - cfg_.red_stop_at;
      if (room <= 0.0) {
        v_target = 0.0;
        hard_brake = ego.v > 0.3;
      } else {
        v_target = std::min(v_target, room * cfg_.red_slow_gain);
      }
    }

    // obstacle_ahead() is the bumper gap from the corridor sensor.
    if (auto gap = sim.obstacle_ahead()) {
      if (*gap <= cfg_.obstacle_brake_at) {
        out.throttle = 0.0;
        out.brake = 1.0;
        return out;
      }
      if (*gap < cfg_.obstacle_slow_at) {
        const double follow =
            std::max(0.0, (*gap - cfg_.obstacle_follow_gap)) *
            cfg_.obstacle_follow_gain;
        v_target = std::min(v_target, follow);
      }
    }

    const double err = v_target - ego.v;
    if (hard_brake) {
      out.brake = 1.0;
    } else if (err >= 0.0) {
      out.throttle = clamp(cfg_.kp_throttle * err, 0.0, cfg_.throttle_max);
    } else if (-err > cfg_.coast_band) {
      out.brake = clamp(cfg_.kp_brake * (-err - cfg_.coast_band), 0.0, 1.0);
    }
    return out;
  }

 private:
  // Pure pursuit: aim at the route point one lookahead ahead and pick the
  // wheel angle whose arc passes through it.
  double pursue(const EgoState& ego, const geom::Polyline& line,
                double s0) const {
    const double look = clamp(cfg_.lookahead_base + cfg_.lookahead_gain * ego.v,
                              cfg_.lookahead_base, cfg_.lookahead_max);
    const geom::Vec2 target =
        line.point_at(std::min(s0 + look, line.length()));
    const geom::Vec2 fwd = geom::heading_vec(ego.heading);
    const geom::Vec2 right = fwd.perp_right();
    const geom::Vec2 d = target - ego.pos;
    const double dist2 = std::max(1.0, d.norm2());
    const double lat = d.dot(right);
    const double kappa = 2.0 * lat / dist2;
    const double delta = std::atan(2.5 * kappa);
    return clamp(delta / deg_to_rad(35.0), -1.0, 1.0);
  }

  // Scan the route ahead; tight curvature caps the speed so the required
  // lateral acceleration stays within budget.
  double curve_limit(const geom::Polyline& line, double s0) const {
    const double ds = 2.0;
    double limit = cfg_.cruise;
    geom::Vec2 prev = line.direction_at(s0);
    for (double s = s0 + ds; s <= s0 + cfg_.curve_preview; s += ds) {
      const double sc = std::min(s, line.length());
      const geom::Vec2 cur = line.direction_at(sc);
      const double dh = std::abs(
          wrap_angle(std::atan2(cur.y, cur.x) - std::atan2(prev.y, prev.x)));
      prev = cur;
      const double kappa = dh / ds;
      if (kappa > 1e-4)
        limit = std::min(limit, std::sqrt(cfg_.lat_accel_max / kappa));
      if (sc >= line.length()) break;
    }
    return std::max(limit, 1.2);
  }

  // Distance along the route to the next red-governed junction entry, when
  // one is ahead and in range.
  std::optional<double> red_light_distance(const Simulator& sim) const {
    const double s0 = sim.progress_s();
    for (const auto& c : sim.crossings()) {
      const double dist = c.s_enter - s0;
      if (dist < -1.0) continue;
      if (dist > sim.config().light_range) break;
      const TrafficLight* l = sim.world().light_at(c.node_id);
      if (!l) continue;
      if (l->state_at(sim.time()) == LightState::Red) return dist;
      return std::nullopt;  // governing light is green; drive on
    }
    return std::nullopt;
  }

  AutopilotConfig cfg_;
};

inline Controls autopilot_controls(const Simulator& sim,
                                   const AutopilotConfig& cfg = {}) {
  return Autopilot(cfg).drive(sim);
}

}  // namespace cadre::sim
