// Background traffic: lane-following vehicles and sidewalk pedestrians.
// Everything is seeded; a fixed (world, density, seed) triple replays the
// exact same actor trajectories.
#pragma once

#include <algorithm>
#include <optional>
#include <vector>

#include "cadre/common.hpp"
#include "cadre/geometry.hpp"
#include "cadre/render.hpp"
#include "cadre/world.hpp"

namespace cadre::sim {

enum class Density { Empty = 0, Regular = 1, Dense = 2 };

inline const char* density_name(Density d) {
  switch (d) {
    case Density::Empty: return "empty";
    case Density::Regular: return "regular";
    case Density::Dense: return "dense";
  }
  return "?";
}

inline Density density_from_name(const std::string& s) {
  if (s == "empty") return Density::Empty;
  if (s == "regular") return Density::Regular;
  if (s == "dense") return Density::Dense;
  throw InputError("unknown traffic density: " + s);
}

struct DensityCounts {
  int vehicles = 0;
  int pedestrians = 0;
};

inline DensityCounts density_counts(Density d) {
  switch (d) {
    case Density::Empty: return {0, 0};
    case Density::Regular: return {10, 10};
    case Density::Dense: return {30, 40};
  }
  return {0, 0};
}

// Road connectivity recovered from world geometry, usable for generated
// and loaded maps alike.
struct LaneGraph {
  const WorldMap* world = nullptr;
  struct RoadInfo {
    int node_front = -1, node_back = -1;
    double length = 0.0;
  };
  std::vector<RoadInfo> roads;
  std::vector<std::vector<int>> node_roads;

  LaneGraph() = default;

  explicit LaneGraph(const WorldMap& w) : world(&w) {
    roads.resize(w.roads.size());
    node_roads.resize(w.intersections.size());
    auto match_node = [&](geom::Vec2 p) {
      for (const auto& n : w.intersections)
        if ((p - n.center).norm() <= n.radius + 1.0) return n.id;
      return -1;
    };
    for (std::size_t i = 0; i < w.roads.size(); ++i) {
      const auto& r = w.roads[i];
      roads[i].node_front = match_node(r.pts.front());
      roads[i].node_back = match_node(r.pts.back());
      roads[i].length = geom::Polyline(r.pts).length();
      for (int nid : {roads[i].node_front, roads[i].node_back})
        if (nid >= 0) node_roads[static_cast<std::size_t>(nid)].push_back(int(i));
    }
  }

  int other_end(int road, int node) const {
    const auto& info = roads[static_cast<std::size_t>(road)];
    return info.node_front == node ? info.node_back : info.node_front;
  }
};

namespace lanes {

// Start and end of the right-hand lane when traversing `road` away from
// node `from`.
inline std::pair<geom::Vec2, geom::Vec2> span(const WorldMap& w, int road,
                                              int from_node) {
  const auto& r = w.roads[static_cast<std::size_t>(road)];
  const geom::Vec2 a = r.pts.front(), b = r.pts.back();
  const geom::Vec2 from_c =
      w.intersections[static_cast<std::size_t>(from_node)].center;
  const bool forward = (a - from_c).norm() < (b - from_c).norm();
  const geom::Vec2 s = forward ? a : b;
  const geom::Vec2 e = forward ? b : a;
  const geom::Vec2 off = (e - s).normalized().perp_right() * (r.width * 0.25);
  return {s + off, e + off};
}

inline void append_turn(std::vector<geom::Vec2>& out, geom::Vec2 in_end,
                        geom::Vec2 in_dir, geom::Vec2 out_start,
                        geom::Vec2 out_dir, double setback) {
  const geom::Vec2 p0 = in_end - in_dir * setback;
  const geom::Vec2 p2 = out_start + out_dir * setback;
  const double denom = in_dir.cross(out_dir);
  geom::Vec2 ctrl = (p0 + p2) * 0.5;
  if (std::abs(denom) > 1e-6) {
    const double t = (p2 - p0).cross(out_dir) / denom;
    ctrl = p0 + in_dir * t;
  }
  const double approx = (ctrl - p0).norm() + (p2 - ctrl).norm();
  auto curve = geom::bezier2(
      p0, ctrl, p2,
      std::max<std::size_t>(4, static_cast<std::size_t>(approx / 1.5)));
  out.insert(out.end(), curve.begin(), curve.end());
}

}  // namespace lanes

// A lane-following path that can grow on demand as its follower advances.
// The graph is passed into every call rather than cached: the manager that
// owns these paths is move-assigned into the simulator, so a stored pointer
// to its graph member would dangle.
class WanderPath {
 public:
  WanderPath() = default;

  WanderPath(const LaneGraph& graph, Rng& rng) {
    const auto& w = *graph.world;
    road_ = int(rng.uniform_int(w.roads.size()));
    const auto& info = graph.roads[static_cast<std::size_t>(road_)];
    from_node_ = rng.uniform01() < 0.5 ? info.node_front : info.node_back;
    if (from_node_ < 0) from_node_ = std::max(info.node_front, info.node_back);
    auto [s, e] = lanes::span(w, road_, from_node_);
    const geom::Vec2 dir = (e - s).normalized();
    const double setback = w.roads[static_cast<std::size_t>(road_)].width * 0.5 + 2.5;
    pts_ = {s + dir * setback, e - dir * setback};
    end_ = e;
    dir_ = dir;
    rebuild();
    grow(graph, rng, 400.0);
  }

  // Extends the walk so at least `margin` meters remain beyond `s`.
  void ensure_ahead(const LaneGraph& graph, double s, double margin,
                    Rng& rng) {
    if (line_.length() - s < margin) grow(graph, rng, margin + 200.0);
  }

  const geom::Polyline& line() const { return line_; }

 private:
  void rebuild() { line_.reset(pts_); }

  void grow(const LaneGraph& graph, Rng& rng, double amount) {
    const auto& w = *graph.world;
    double added = 0.0;
    int guard = 0;
    while (added < amount && guard++ < 64) {
      const int at = graph.other_end(road_, from_node_);
      if (at < 0) break;
      std::vector<int> options;
      for (int r : graph.node_roads[static_cast<std::size_t>(at)])
        if (r != road_) options.push_back(r);
      if (options.empty()) break;
      const int next = options[rng.uniform_int(options.size())];
      auto [s, e] = lanes::span(w, next, at);
      const geom::Vec2 ndir = (e - s).normalized();
      const double setback = w.roads[static_cast<std::size_t>(next)].width * 0.5 + 2.5;
      const std::size_t before = pts_.size();
      lanes::append_turn(pts_, end_, dir_, s, ndir, setback);
      const geom::Vec2 leg_end = e - ndir * setback;
      pts_.push_back(leg_end);
      for (std::size_t i = before; i < pts_.size(); ++i)
        if (i > 0) added += (pts_[i] - pts_[i - 1]).norm();
      end_ = e;
      dir_ = ndir;
      road_ = next;
      from_node_ = at;
    }
    rebuild();
  }

  std::vector<geom::Vec2> pts_;
  geom::Polyline line_;
  geom::Vec2 end_, dir_;
  int road_ = 0;
  int from_node_ = -1;
};

struct TrafficVehicle {
  int variant = 0;
  WanderPath path;
  double s = 0.0;
  double v = 0.0;
  double cruise = 5.0;
  geom::Vec2 pos;
  double heading = 0.0;

  geom::Obb obb() const {
    const auto& var = vehicle_variants()[static_cast<std::size_t>(variant)];
    return {pos, heading, var.length * 0.5, var.width * 0.5};
  }
};

struct SidewalkPedestrian {
  int variant = 0;
  int road = 0;
  double side = 1.0;  // +1 right of centerline, -1 left
  double s = 0.0;
  double dir = 1.0;
  geom::Vec2 pos;
};

class TrafficManager {
 public:
  TrafficManager() = default;

  TrafficManager(const WorldMap& world, Density density, std::uint64_t seed,
                 geom::Vec2 ego_spawn)
      : world_(&world), graph_(world), rng_(seed) {
    const DensityCounts counts = density_counts(density);
    int guard = 0;
    while (int(vehicles_.size()) < counts.vehicles && guard++ < counts.vehicles * 20) {
      TrafficVehicle tv;
      tv.variant = int(rng_.uniform_int(vehicle_variants().size()));
      tv.path = WanderPath(graph_, rng_);
      tv.s = rng_.uniform(5.0, std::max(6.0, tv.path.line().length() * 0.4));
      tv.cruise = rng_.uniform(3.0, 6.5);
      tv.v = tv.cruise * 0.5;
      tv.pos = tv.path.line().point_at(tv.s);
      const geom::Vec2 d = tv.path.line().direction_at(tv.s);
      tv.heading = std::atan2(d.y, d.x);
      if ((tv.pos - ego_spawn).norm() < 15.0) continue;
      bool clash = false;
      for (const auto& other : vehicles_)
        if ((tv.pos - other.pos).norm() < 9.0) clash = true;
      if (clash) continue;
      vehicles_.push_back(std::move(tv));
    }
    for (int i = 0; i < counts.pedestrians; ++i) {
      SidewalkPedestrian p;
      p.variant = int(rng_.uniform_int(pedestrian_speeds().size()));
      p.road = int(rng_.uniform_int(world.roads.size()));
      p.side = rng_.uniform01() < 0.5 ? 1.0 : -1.0;
      const double len = graph_.roads[static_cast<std::size_t>(p.road)].length;
      if (len < 14.0) continue;
      p.s = rng_.uniform(5.0, len - 5.0);
      p.dir = rng_.uniform01() < 0.5 ? 1.0 : -1.0;
      update_ped_pos(p);
      pedestrians_.push_back(p);
    }
  }

  void step(double dt, double sim_time, const geom::Obb& ego) {
    for (auto& tv : vehicles_) {
      tv.path.ensure_ahead(graph_, tv.s, 60.0, rng_);
      double v_des = tv.cruise;

      // Red lights: any red light a short way ahead and roughly on axis.
      const geom::Vec2 fwd = geom::heading_vec(tv.heading);
      for (const auto& l : world_->lights) {
        if (l.state_at(sim_time) != LightState::Red) continue;
        const geom::Vec2 d = l.pos - tv.pos;
        const double ahead = d.dot(fwd);
        if (ahead > 0.0 && ahead < 11.0 && std::abs(d.cross(fwd)) < 8.0)
          v_des = std::min(v_des, std::max(0.0, (ahead - 4.0) * 0.8));
      }

      // Keep distance from anything in the forward corridor.
      double gap = 1e9;
      auto consider = [&](geom::Vec2 p, double half_len) {
        const geom::Vec2 d = p - tv.pos;
        const double ahead = d.dot(fwd);
        const double lat = std::abs(d.cross(fwd));
        if (ahead > 0.5 && ahead < 20.0 && lat < 2.0)
          gap = std::min(gap, ahead - half_len -
                                  vehicle_variants()[static_cast<std::size_t>(tv.variant)].length * 0.5);
      };
      for (const auto& other : vehicles_)
        if (&other != &tv)
          consider(other.pos, vehicle_variants()[static_cast<std::size_t>(other.variant)].length * 0.5);
      consider(ego.center, ego.half_len);
      for (const auto& p : pedestrians_) consider(p.pos, kPedestrianRadius);
      if (gap < 4.0)
        v_des = 0.0;
      else if (gap < 12.0)
        v_des = std::min(v_des, (gap - 4.0) * 0.6);

      const double dv = clamp(v_des - tv.v, -5.0 * dt, 2.0 * dt);
      tv.v = std::max(0.0, tv.v + dv);
      tv.s += tv.v * dt;
      tv.pos = tv.path.line().point_at(tv.s);
      const geom::Vec2 d = tv.path.line().direction_at(tv.s);
      tv.heading = std::atan2(d.y, d.x);
    }
    for (auto& p : pedestrians_) {
      const double speed = pedestrian_speeds()[static_cast<std::size_t>(p.variant)];
      const double len = graph_.roads[static_cast<std::size_t>(p.road)].length;
      p.s += p.dir * speed * dt;
      if (p.s > len - 5.0) {
        p.s = len - 5.0;
        p.dir = -1.0;
      } else if (p.s < 5.0) {
        p.s = 5.0;
        p.dir = 1.0;
      }
      update_ped_pos(p);
    }
  }

  const std::vector<TrafficVehicle>& vehicles() const { return vehicles_; }
  const std::vector<SidewalkPedestrian>& pedestrians() const {
    return pedestrians_;
  }

  void append_snapshot(ActorSnapshot& snap) const {
    for (const auto& tv : vehicles_) snap.vehicles.push_back(tv.obb());
    for (const auto& p : pedestrians_)
      snap.pedestrians.push_back({p.pos, kPedestrianRadius});
  }

 private:
  void update_ped_pos(SidewalkPedestrian& p) {
    const auto& road = world_->roads[static_cast<std::size_t>(p.road)];
    geom::Polyline pl(road.pts);
    const geom::Vec2 c = pl.point_at(p.s);
    const geom::Vec2 d = pl.direction_at(p.s);
    p.pos = c + d.perp_right() * (p.side * (road.width * 0.5 + 0.8));
  }

  const WorldMap* world_ = nullptr;
  LaneGraph graph_;
  Rng rng_{0};
  std::vector<TrafficVehicle> vehicles_;
  std::vector<SidewalkPedestrian> pedestrians_;
};

}  // namespace cadre::sim
