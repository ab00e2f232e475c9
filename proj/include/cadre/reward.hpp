#pragma once

// Dense shaping reward (heading / lateral / speed terms) plus sparse
// terminal bonuses. All terms are clamped to [0, 1] individually; the
// dense part is their mean scaled by dense_scale.

#include <algorithm>
#include <optional>

#include "cadre/common.hpp"
#include "cadre/sim.hpp"

namespace cadre::reward {

struct RewardConfig {
  double theta_max_deg = 90.0;  // heading error that zeroes r_theta
  double d_max = 2.5;           // lateral distance that zeroes r_d
  double v_min = 3.0;           // m/s, lower comfort bound
  double v_max = 8.0;           // m/s, upper bound (zero reward at/above)
  double obstacle_d_max = 20.0; // m, detection range used as v_max stand-in
  double dense_scale = 1.0;
  double sparse_bad = -10.0;
  double sparse_success = 10.0;
  // The obstacle-mode speed term substitutes v_min := current speed, which
  // makes the below-target branch identically 1. That is the intended
  // behaviour here; setting this flag replaces v_min with a small positive
  // constant instead so the below-target branch keeps a slope.
  bool corrected_obstacle_mode = false;
  double corrected_v_min = 0.5;
};

struct RewardBreakdown {
  double r_theta = 0.0;
  double r_d = 0.0;
  double r_v = 0.0;
  double dense = 0.0;
  double sparse = 0.0;
  double total = 0.0;
};

inline double heading_term(double theta_deg, const RewardConfig& cfg) {
  return std::max(0.0, 1.0 - std::abs(theta_deg) / cfg.theta_max_deg);
}

inline double lateral_term(double d_m, const RewardConfig& cfg) {
  return std::max(0.0, 1.0 - std::abs(d_m) / cfg.d_max);
}

// Piecewise speed term. Below the target speed the reward ramps up as
// v / v_min (capped at 1); above it the reward falls linearly and hits
// zero at v_max.
inline double speed_term_raw(double v, double v_min, double v_target,
                             double v_max) {
  if (v < v_target) {
    if (v_min == v) return 1.0; // obstacle substitution sets v_min = v
    return std::min(1.0, v / v_min);
  }
  double denom = v_max - v_target;
  if (denom <= 0.0) return 0.0;
  return std::max(0.0, 1.0 - (v - v_target) / denom);
}

inline double speed_term(double v, std::optional<double> obstacle_distance,
                         const RewardConfig& cfg) {
  if (!obstacle_distance.has_value()) {
    double v_target = 0.5 * (cfg.v_min + cfg.v_max);
    return speed_term_raw(v, cfg.v_min, v_target, cfg.v_max);
  }
  double v_min = cfg.corrected_obstacle_mode ? cfg.corrected_v_min : v;
  return speed_term_raw(v, v_min, *obstacle_distance, cfg.obstacle_d_max);
}

inline double sparse_reward(sim::Event event, const RewardConfig& cfg) {
  switch (event) {
    case sim::Event::None:
      return 0.0;
    case sim::Event::Success:
      return cfg.sparse_success;
    case sim::Event::CollisionStatic:
    case sim::Event::CollisionDynamic:
    case sim::Event::Blocked:
    case sim::Event::RouteDeviation:
      return cfg.sparse_bad;
  }
  return 0.0;
}

inline RewardBreakdown compute_reward(double theta_deg, double d_m, double v,
                                      std::optional<double> obstacle_distance,
                                      sim::Event event,
                                      const RewardConfig& cfg = {}) {
  RewardBreakdown out;
  out.r_theta = heading_term(theta_deg, cfg);
  out.r_d = lateral_term(d_m, cfg);
  out.r_v = speed_term(v, obstacle_distance, cfg);
  out.dense = cfg.dense_scale * (out.r_theta + out.r_d + out.r_v) / 3.0;
  out.sparse = sparse_reward(event, cfg);
  out.total = out.dense + out.sparse;
  return out;
}

inline RewardBreakdown step_reward(const sim::StepResult& res,
                                   const RewardConfig& cfg = {}) {
  const auto& m = res.sensors.metrics;
  return compute_reward(m.theta_deg, m.d_m, res.ego.v,
                        res.sensors.obstacle_distance, res.event, cfg);
}

}  // namespace cadre::reward
