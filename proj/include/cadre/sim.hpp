// Deterministic episode simulator: kinematic bicycle ego, scripted traffic,
// scenario obstacles, event detection and sensor rendering.
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cadre/common.hpp"
#include "cadre/geometry.hpp"
#include "cadre/render.hpp"
#include "cadre/traffic.hpp"
#include "cadre/world.hpp"

namespace cadre::sim {

struct SimConfig {
  double dt = 0.1;
  double wheelbase = 2.5;
  double delta_max_deg = 35.0;
  double a_max = 3.0;   // m/s^2 at full throttle
  double b_max = 8.0;   // m/s^2 at full brake
  double drag = 0.05;   // 1/s, linear speed decay
  double ego_length = 4.2;
  double ego_width = 1.9;
  double blocked_after_s = 90.0;
  double blocked_v = 0.1;
  double deviation_max = 2.5;
  double light_range = 18.0;
  double detect_range = 20.0;
  double corridor_half = 2.4;
  CameraConfig camera;
  bool render = true;  // replay-only callers can skip the raster
};

enum class Event {
  None = 0,
  CollisionStatic = 1,
  CollisionDynamic = 2,
  Blocked = 3,
  RouteDeviation = 4,
  Success = 5,
};

inline const char* event_name(Event e) {
  switch (e) {
    case Event::None: return "none";
    case Event::CollisionStatic: return "collision_static";
    case Event::CollisionDynamic: return "collision_dynamic";
    case Event::Blocked: return "blocked";
    case Event::RouteDeviation: return "route_deviation";
    case Event::Success: return "success";
  }
  return "?";
}

struct EgoState {
  geom::Vec2 pos;
  double heading = 0.0;
  double v = 0.0;
  // Last applied controls (post brake-override), fed back as measurements.
  double steer = 0.0;
  double throttle = 0.0;
  double brake = 0.0;
};

struct RouteMetrics {
  double theta_deg = 0.0;  // |heading error| against the local route segment
  double d_m = 0.0;        // lateral distance to the route
  double completion = 0.0; // monotone fraction of arclength covered
};

struct SensorFrame {
  Frame camera;
  LightState light = LightState::None;
  std::optional<double> obstacle_distance;
  RouteMetrics metrics;
  double time = 0.0;
};

struct StepResult {
  EgoState ego;
  Event event = Event::None;
  SensorFrame sensors;
};

struct EpisodeOptions {
  Density density = Density::Empty;
  std::vector<ScenarioSpec> scenarios;
  double start_s = 0.0;
  double start_v = 0.0;
  double start_heading_offset = 0.0;  // radians relative to the route
  int palette_id = 0;
  std::uint64_t seed = 1;
};

class Simulator {
 public:
  Simulator(const WorldMap& world, SimConfig cfg)
      : world_(&world), cfg_(cfg) {
    validate_camera(cfg_.camera);
  }

  void start_episode(const Route& route, const EpisodeOptions& opt) {
    route_ = route;
    line_.reset(route.pts);
    if (line_.length() < 2.0)
      throw InputError("start_episode: route too short");
    crossings_ = find_crossings(*world_, line_);
    opt_ = opt;
    const auto& pals = builtin_palettes();
    if (opt.palette_id < 0 || opt.palette_id >= int(pals.size()))
      throw ConfigError("unknown palette id " + std::to_string(opt.palette_id));
    palette_ = pals[static_cast<std::size_t>(opt.palette_id)];

    progress_ = clamp(opt.start_s, 0.0, line_.length());
    ego_ = EgoState{};
    ego_.pos = line_.point_at(progress_);
    const geom::Vec2 dir = line_.direction_at(progress_);
    ego_.heading =
        wrap_angle(std::atan2(dir.y, dir.x) + opt.start_heading_offset);
    ego_.v = opt.start_v;

    traffic_ = TrafficManager(*world_, opt.density,
                              derive_seed(opt.seed, "traffic"), ego_.pos);
    scenarios_.clear();
    for (const auto& spec : opt.scenarios) {
      ScenarioState st;
      st.spec = spec;
      scenarios_.push_back(st);
    }
    time_ = 0.0;
    steps_ = 0;
    blocked_timer_ = 0.0;
    terminal_ = false;
    last_event_ = Event::None;
    started_ = true;
  }

  StepResult step(double steer, double throttle, double brake) {
    if (!started_) throw InputError("step: no episode started");
    if (terminal_)
      throw InputError("step: episode already ended with " +
                       std::string(event_name(last_event_)));
    validate_control(steer, -1.0, 1.0, "steer");
    validate_control(throttle, 0.0, 1.0, "throttle");
    validate_control(brake, 0.0, 1.0, "brake");
    if (brake > 0.0) throttle = 0.0;  // braking overrides drive torque

    // Kinematic bicycle. Speed first, then yaw with the new speed, then
    // position along the new heading; steer > 0 turns right.
    const double delta = -steer * deg_to_rad(cfg_.delta_max_deg);
    const double accel =
        throttle * cfg_.a_max - brake * cfg_.b_max - cfg_.drag * ego_.v;
    ego_.v = std::max(0.0, ego_.v + accel * cfg_.dt);
    ego_.heading = wrap_angle(
        ego_.heading + (ego_.v / cfg_.wheelbase) * std::tan(delta) * cfg_.dt);
    ego_.pos = ego_.pos + geom::heading_vec(ego_.heading) * (ego_.v * cfg_.dt);
    ego_.steer = steer;
    ego_.throttle = throttle;
    ego_.brake = brake;
    time_ += cfg_.dt;
    ++steps_;

    traffic_.step(cfg_.dt, time_, ego_obb());
    step_scenarios();

    const auto proj = geom::project_polyline(line_, ego_.pos, progress_);
    progress_ = std::max(progress_, proj.s);
    RouteMetrics metrics;
    metrics.d_m = proj.distance;
    const geom::Vec2 rdir = line_.direction_at(proj.s);
    const double route_heading = std::atan2(rdir.y, rdir.x);
    metrics.theta_deg =
        std::abs(rad_to_deg(wrap_angle(ego_.heading - route_heading)));
    metrics.completion = line_.length() > 0.0 ? progress_ / line_.length() : 1.0;

    const Event event = detect_event(metrics);
    if (event != Event::None) terminal_ = true;
    last_event_ = event;

    StepResult out;
    out.ego = ego_;
    out.event = event;
    out.sensors.metrics = metrics;
    out.sensors.time = time_;
    out.sensors.light = governing_light_state();
    out.sensors.obstacle_distance = obstacle_ahead();
    if (cfg_.render)
      out.sensors.camera = render_camera(
          *world_, actor_snapshot(), EgoPose{ego_.pos, ego_.heading},
          cfg_.camera, palette_, time_,
          derive_seed(opt_.seed, "texnoise", steps_));
    return out;
  }

  // Sensor view of the initial state, before any control is applied.
  SensorFrame initial_sensors() {
    if (!started_) throw InputError("initial_sensors: no episode started");
    SensorFrame s;
    const auto proj = geom::project_polyline(line_, ego_.pos, progress_);
    s.metrics.d_m = proj.distance;
    const geom::Vec2 rdir = line_.direction_at(proj.s);
    s.metrics.theta_deg = std::abs(
        rad_to_deg(wrap_angle(ego_.heading - std::atan2(rdir.y, rdir.x))));
    s.metrics.completion =
        line_.length() > 0.0 ? progress_ / line_.length() : 1.0;
    s.time = time_;
    s.light = governing_light_state();
    s.obstacle_distance = obstacle_ahead();
    if (cfg_.render)
      s.camera = render_camera(
          *world_, actor_snapshot(), EgoPose{ego_.pos, ego_.heading},
          cfg_.camera, palette_, time_,
          derive_seed(opt_.seed, "texnoise", steps_));
    return s;
  }

  const EgoState& ego() const { return ego_; }
  const geom::Polyline& route_line() const { return line_; }
  const Route& route() const { return route_; }
  const WorldMap& world() const { return *world_; }
  const SimConfig& config() const { return cfg_; }
  const std::vector<RouteCrossing>& crossings() const { return crossings_; }
  double progress_s() const { return progress_; }
  double time() const { return time_; }
  long steps() const { return steps_; }
  bool terminal() const { return terminal_; }
  Event last_event() const { return last_event_; }

  geom::Obb ego_obb() const {
    return {ego_.pos, ego_.heading, cfg_.ego_length * 0.5,
            cfg_.ego_width * 0.5};
  }

  ActorSnapshot actor_snapshot() const {
    ActorSnapshot snap;
    traffic_.append_snapshot(snap);
    for (const auto& sc : scenarios_) {
      if (sc.phase != 1) continue;
      if (sc.spec.kind == ScenarioKind::VehicleBlock) {
        snap.vehicles.push_back(sc.vehicle_obb());
      } else {
        snap.pedestrians.push_back({sc.ped_pos, kPedestrianRadius});
      }
    }
    return snap;
  }

  // Distance from the ego's front to the nearest dynamic actor inside the
  // forward corridor, when within detection range.
  std::optional<double> obstacle_ahead() const {
    const geom::Vec2 fwd = geom::heading_vec(ego_.heading);
    const geom::Vec2 right = fwd.perp_right();
    double best = 1e18;
    auto consider = [&](geom::Vec2 p, double half_len) {
      const geom::Vec2 d = p - ego_.pos;
      const double ahead = d.dot(fwd);
      const double lat = std::abs(d.dot(right));
      if (ahead <= 0.0 || lat > cfg_.corridor_half) return;
      const double gap =
          std::max(0.0, ahead - cfg_.ego_length * 0.5 - half_len);
      best = std::min(best, gap);
    };
    const ActorSnapshot snap = actor_snapshot();
    for (const auto& v : snap.vehicles) consider(v.center, v.half_len);
    for (const auto& p : snap.pedestrians) consider(p.pos, p.radius);
    if (best <= cfg_.detect_range) return best;
    return std::nullopt;
  }

  // State of the light governing the next junction on the route, if one is
  // within range ahead.
  LightState governing_light_state() const {
    const TrafficLight* l = governing_light();
    return l ? l->state_at(time_) : LightState::None;
  }

  // True when the ego is legitimately stopped at a red light; Blocked does
  // not accrue in this state.
  bool held_by_red_light() const {
    const TrafficLight* l = governing_light();
    return l && l->state_at(time_) == LightState::Red;
  }

 private:
  struct ScenarioState {
    ScenarioSpec spec;
    int phase = 0;  // 0 pending, 1 active, 2 done
    double activated_t = 0.0;
    double veh_s = 0.0;
    double veh_v = 0.0;
    geom::Vec2 veh_pos;
    double veh_heading = 0.0;
    geom::Vec2 ped_pos;
    geom::Vec2 ped_dir;
    double ped_walked = 0.0;
    double ped_total = 0.0;

    geom::Obb vehicle_obb() const {
      const auto& var = vehicle_variants()[static_cast<std::size_t>(
          spec.variant % int(vehicle_variants().size()))];
      return {veh_pos, veh_heading, var.length * 0.5, var.width * 0.5};
    }
  };

  static void validate_control(double v, double lo, double hi,
                               const char* name) {
    if (!std::isfinite(v) || v < lo || v > hi)
      throw InputError(std::string("control ") + name + "=" +
                       std::to_string(v) + " outside [" + std::to_string(lo) +
                       "," + std::to_string(hi) + "]");
  }

  const TrafficLight* governing_light() const {
    for (const auto& c : crossings_) {
      const double dist = c.s_enter - progress_;
      if (dist < -3.0) continue;
      if (dist > cfg_.light_range) break;
      const TrafficLight* l = world_->light_at(c.node_id);
      if (l) return l;
    }
    return nullptr;
  }

  void step_scenarios() {
    for (auto& sc : scenarios_) {
      if (sc.phase == 0 && progress_ >= sc.spec.trigger_s) {
        sc.phase = 1;
        sc.activated_t = time_;
        const double s_spawn =
            std::min(line_.length() - 1.0, sc.spec.trigger_s + sc.spec.ahead_m);
        const geom::Vec2 p = line_.point_at(s_spawn);
        const geom::Vec2 dir = line_.direction_at(s_spawn);
        if (sc.spec.kind == ScenarioKind::VehicleBlock) {
          sc.veh_s = s_spawn;
          sc.veh_v = 0.0;
          sc.veh_pos = p;
          sc.veh_heading = std::atan2(dir.y, dir.x);
        } else {
          // Pedestrian starts on the right sidewalk and crosses leftward
          // through the ego lane.
          const double road_half = 3.5;
          const double lane_off = 1.75;
          sc.ped_pos = p + dir.perp_right() * (road_half - lane_off + 1.2);
          sc.ped_dir = dir.perp_right() * -1.0;
          sc.ped_walked = 0.0;
          sc.ped_total = road_half * 2.0 + 2.4;
        }
      }
      if (sc.phase != 1) continue;
      if (sc.spec.kind == ScenarioKind::VehicleBlock) {
        if (time_ - sc.activated_t >= sc.spec.dwell_s) {
          sc.veh_v = std::min(6.0, sc.veh_v + 2.0 * cfg_.dt);
          sc.veh_s += sc.veh_v * cfg_.dt;
          if (sc.veh_s >= line_.length() - 0.5 ||
              sc.veh_s - (sc.spec.trigger_s + sc.spec.ahead_m) > 45.0) {
            sc.phase = 2;
            continue;
          }
          sc.veh_pos = line_.point_at(sc.veh_s);
          const geom::Vec2 d = line_.direction_at(sc.veh_s);
          sc.veh_heading = std::atan2(d.y, d.x);
        }
      } else {
        const double speed = pedestrian_speeds()[static_cast<std::size_t>(
            sc.spec.variant % int(pedestrian_speeds().size()))];
        sc.ped_pos = sc.ped_pos + sc.ped_dir * (speed * cfg_.dt);
        sc.ped_walked += speed * cfg_.dt;
        if (sc.ped_walked >= sc.ped_total) sc.phase = 2;
      }
    }
  }

  Event detect_event(const RouteMetrics& metrics) {
    const geom::Obb ego = ego_obb();
    for (const auto& b : world_->buildings) {
      const geom::Obb bb{{(b.min.x + b.max.x) * 0.5, (b.min.y + b.max.y) * 0.5},
                         0.0,
                         (b.max.x - b.min.x) * 0.5,
                         (b.max.y - b.min.y) * 0.5};
      if (geom::obb_overlap(ego, bb)) return Event::CollisionStatic;
    }
    const ActorSnapshot snap = actor_snapshot();
    for (const auto& v : snap.vehicles)
      if (geom::obb_overlap(ego, v)) return Event::CollisionDynamic;
    for (const auto& p : snap.pedestrians)
      if (geom::obb_circle_overlap(ego, p.pos, p.radius))
        return Event::CollisionDynamic;

    if (ego_.v < cfg_.blocked_v && !held_by_red_light()) {
      blocked_timer_ += cfg_.dt;
      if (blocked_timer_ >= cfg_.blocked_after_s) return Event::Blocked;
    } else {
      blocked_timer_ = 0.0;
    }

    if (metrics.d_m > cfg_.deviation_max) return Event::RouteDeviation;
    if (metrics.completion >= 1.0 - 1e-9) return Event::Success;
    return Event::None;
  }

  const WorldMap* world_;
  SimConfig cfg_;
  Route route_;
  geom::Polyline line_;
  std::vector<RouteCrossing> crossings_;
  EpisodeOptions opt_;
  Palette palette_;
  TrafficManager traffic_;
  std::vector<ScenarioState> scenarios_;
  EgoState ego_;
  double progress_ = 0.0;
  double time_ = 0.0;
  long steps_ = 0;
  double blocked_timer_ = 0.0;
  bool terminal_ = false;
  bool started_ = false;
  Event last_event_ = Event::None;
};

}  // namespace cadre::sim
