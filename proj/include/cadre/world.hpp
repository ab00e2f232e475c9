// Static driving world: road grid, intersections, traffic lights, buildings,
// long routes and scenario specs. Worlds are generated procedurally from a
// seed and round-trip through JSON.
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cadre/common.hpp"
#include "cadre/geometry.hpp"

namespace cadre::sim {

using geom::Polyline;
using geom::Vec2;

enum class LightState { None = 0, Red = 1, Green = 2 };

enum class Command { Follow = 0, Left = 1, Right = 2, Straight = 3 };

inline const char* command_name(Command c) {
  switch (c) {
    case Command::Follow: return "follow";
    case Command::Left: return "left";
    case Command::Right: return "right";
    case Command::Straight: return "straight";
  }
  return "?";
}

inline Command command_from_name(const std::string& s) {
  if (s == "follow") return Command::Follow;
  if (s == "left") return Command::Left;
  if (s == "right") return Command::Right;
  if (s == "straight") return Command::Straight;
  throw InputError("unknown command: " + s);
}

struct RoadSegment {
  int id = 0;
  std::vector<Vec2> pts;  // centerline
  double width = 7.0;
};

struct IntersectionNode {
  int id = 0;
  Vec2 center;
  double radius = 6.0;
  std::vector<int> roads;
};

struct LightSchedule {
  double green_s = 12.0;
  double red_s = 8.0;
  double offset_s = 0.0;
};

struct TrafficLight {
  int id = 0;
  int intersection = 0;
  Vec2 pos;
  LightSchedule sched;

  // Deterministic phase as a pure function of sim time.
  LightState state_at(double t) const {
    const double period = sched.green_s + sched.red_s;
    double phase = std::fmod(t + sched.offset_s, period);
    if (phase < 0.0) phase += period;
    return phase < sched.green_s ? LightState::Green : LightState::Red;
  }
};

struct Building {
  Vec2 min, max;  // axis-aligned
};

struct Route {
  int id = 0;
  Command command = Command::Follow;
  std::vector<Vec2> pts;

  double length() const { return Polyline(pts).length(); }
};

enum class ScenarioKind { VehicleBlock = 0, PedestrianCross = 1 };

// A scenario plants an obstacle a fixed distance ahead of the trigger point
// once the ego's route progress passes trigger_s.
struct ScenarioSpec {
  ScenarioKind kind = ScenarioKind::VehicleBlock;
  int route_id = 0;
  double trigger_s = 0.0;
  double ahead_m = 20.0;
  int variant = 0;
  double dwell_s = 8.0;  // how long a blocking vehicle stays before leaving
};

struct WorldMap {
  int version = 1;
  std::string name;
  std::uint64_t seed = 0;
  std::vector<RoadSegment> roads;
  std::vector<IntersectionNode> intersections;
  std::vector<TrafficLight> lights;
  std::vector<Building> buildings;
  std::vector<Route> routes;          // long routes
  std::vector<ScenarioSpec> scenarios;  // evaluation scenario set

  const IntersectionNode* node_near(Vec2 p, double extra = 0.0) const {
    for (const auto& n : intersections)
      if ((p - n.center).norm() <= n.radius + extra) return &n;
    return nullptr;
  }

  const TrafficLight* light_at(int intersection_id) const {
    for (const auto& l : lights)
      if (l.intersection == intersection_id) return &l;
    return nullptr;
  }

  // True when p lies on asphalt: within half width of a centerline or
  // inside an intersection disc.
  bool on_road(Vec2 p, double tol = 0.3) const {
    for (const auto& r : roads) {
      for (std::size_t i = 0; i + 1 < r.pts.size(); ++i)
        if (geom::segment_distance(p, r.pts[i], r.pts[i + 1]) <=
            r.width * 0.5 + tol)
          return true;
    }
    return node_near(p, tol) != nullptr;
  }
};

// ---------------------------------------------------------------------------
// Vehicle / pedestrian variant tables
// ---------------------------------------------------------------------------

struct VehicleVariant {
  double length, width;
};

inline const std::array<VehicleVariant, 8>& vehicle_variants() {
  static const std::array<VehicleVariant, 8> v = {{
      {4.4, 1.8}, {3.9, 1.7}, {4.8, 1.9}, {5.2, 2.0},
      {4.1, 1.75}, {6.8, 2.4}, {4.6, 1.85}, {5.9, 2.2},
  }};
  return v;
}

inline const std::array<double, 6>& pedestrian_speeds() {
  static const std::array<double, 6> v = {0.7, 0.9, 1.1, 1.3, 1.5, 1.8};
  return v;
}

constexpr double kPedestrianRadius = 0.35;

// ---------------------------------------------------------------------------
// Procedural generation
// ---------------------------------------------------------------------------

struct WorldGenConfig {
  std::uint64_t seed = 7;
  int grid_x = 5;
  int grid_y = 4;
  double spacing = 80.0;
  double spacing_jitter = 8.0;
  double road_width = 7.0;
  double light_fraction = 0.5;   // of nodes with degree >= 3
  double building_fraction = 0.8;
  int long_routes = 25;
  double route_min_len = 280.0;
  double route_max_len = 520.0;
  double waypoint_spacing = 2.0;
  std::string name = "grid";
};

namespace detail {

// Lane centers sit road_width/4 right of the centerline, giving two
// opposing lanes per road.
inline double lane_offset(double road_width) { return road_width * 0.25; }

struct GridCtx {
  const WorldGenConfig& cfg;
  std::vector<Vec2> nodes;          // grid_x * grid_y
  std::vector<std::pair<int, int>> edges;  // node index pairs, a < b
  std::vector<std::vector<int>> adj;       // node -> edge ids

  int node_id(int i, int j) const { return j * cfg.grid_x + i; }
};

inline GridCtx build_grid(const WorldGenConfig& cfg, Rng& rng) {
  GridCtx g{cfg, {}, {}, {}};
  g.nodes.resize(static_cast<std::size_t>(cfg.grid_x) * cfg.grid_y);
  for (int j = 0; j < cfg.grid_y; ++j)
    for (int i = 0; i < cfg.grid_x; ++i) {
      const double jx = rng.uniform(-cfg.spacing_jitter, cfg.spacing_jitter);
      const double jy = rng.uniform(-cfg.spacing_jitter, cfg.spacing_jitter);
      g.nodes[static_cast<std::size_t>(g.node_id(i, j))] =
          Vec2{i * cfg.spacing + jx, j * cfg.spacing + jy};
    }
  for (int j = 0; j < cfg.grid_y; ++j)
    for (int i = 0; i + 1 < cfg.grid_x; ++i)
      g.edges.emplace_back(g.node_id(i, j), g.node_id(i + 1, j));
  for (int j = 0; j + 1 < cfg.grid_y; ++j)
    for (int i = 0; i < cfg.grid_x; ++i)
      g.edges.emplace_back(g.node_id(i, j), g.node_id(i, j + 1));
  g.adj.resize(g.nodes.size());
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    g.adj[static_cast<std::size_t>(g.edges[e].first)].push_back(int(e));
    g.adj[static_cast<std::size_t>(g.edges[e].second)].push_back(int(e));
  }
  return g;
}

// Waypoints for one directed edge traversal, lane-offset to the right,
// from `from` node to the other endpoint.
inline std::pair<Vec2, Vec2> lane_span(const GridCtx& g, int edge, int from) {
  const auto [a, b] = g.edges[static_cast<std::size_t>(edge)];
  const Vec2 pa = g.nodes[static_cast<std::size_t>(a)];
  const Vec2 pb = g.nodes[static_cast<std::size_t>(b)];
  const Vec2 dir = ((from == a ? pb : pa) - (from == a ? pa : pb)).normalized();
  const Vec2 off = dir.perp_right() * lane_offset(g.cfg.road_width);
  const Vec2 s = (from == a ? pa : pb) + off;
  const Vec2 e = (from == a ? pb : pa) + off;
  return {s, e};
}

// Connects the end of one directed lane to the start of the next through
// an intersection, blending with a quadratic Bezier between setback points.
inline void append_turn(std::vector<Vec2>& out, Vec2 in_end, Vec2 in_dir,
                        Vec2 out_start, Vec2 out_dir, double setback) {
  const Vec2 p0 = in_end - in_dir * setback;
  const Vec2 p2 = out_start + out_dir * setback;
  // Control point: intersection of the two lane lines; collinear lanes
  // degenerate to the midpoint.
  const double denom = in_dir.cross(out_dir);
  Vec2 ctrl = (p0 + p2) * 0.5;
  if (std::abs(denom) > 1e-6) {
    const double t = (p2 - p0).cross(out_dir) / denom;
    ctrl = p0 + in_dir * t;
  }
  const double approx_len = (ctrl - p0).norm() + (p2 - ctrl).norm();
  const std::size_t n =
      std::max<std::size_t>(4, static_cast<std::size_t>(approx_len / 1.5));
  auto curve = geom::bezier2(p0, ctrl, p2, n);
  out.insert(out.end(), curve.begin(), curve.end());
}

}  // namespace detail

inline WorldMap generate_world(const WorldGenConfig& cfg) {
  if (cfg.grid_x < 3 || cfg.grid_y < 3)
    throw ConfigError("world grid must be at least 3x3 to provide turns");
  WorldMap w;
  w.seed = cfg.seed;
  w.name = cfg.name;
  Rng rng(derive_seed(cfg.seed, "world-gen"));
  auto grid = detail::build_grid(cfg, rng);

  for (std::size_t e = 0; e < grid.edges.size(); ++e) {
    RoadSegment r;
    r.id = int(e);
    r.width = cfg.road_width;
    r.pts = {grid.nodes[static_cast<std::size_t>(grid.edges[e].first)],
             grid.nodes[static_cast<std::size_t>(grid.edges[e].second)]};
    w.roads.push_back(std::move(r));
  }
  for (std::size_t n = 0; n < grid.nodes.size(); ++n) {
    IntersectionNode node;
    node.id = int(n);
    node.center = grid.nodes[n];
    node.radius = cfg.road_width * 0.9;
    for (int e : grid.adj[n]) node.roads.push_back(e);
    w.intersections.push_back(std::move(node));
  }

  // Lights at a seeded subset of junctions with at least three roads.
  int light_id = 0;
  for (const auto& node : w.intersections) {
    if (node.roads.size() < 3) continue;
    if (rng.uniform01() >= cfg.light_fraction) continue;
    TrafficLight l;
    l.id = light_id++;
    l.intersection = node.id;
    l.pos = node.center;
    l.sched.green_s = 10.0 + rng.uniform(0.0, 4.0);
    l.sched.red_s = 6.0 + rng.uniform(0.0, 4.0);
    l.sched.offset_s = rng.uniform(0.0, l.sched.green_s + l.sched.red_s);
    w.lights.push_back(l);
  }

  // One building block per grid cell, inset from the surrounding roads.
  for (int j = 0; j + 1 < cfg.grid_y; ++j)
    for (int i = 0; i + 1 < cfg.grid_x; ++i) {
      if (rng.uniform01() >= cfg.building_fraction) continue;
      const Vec2 n00 = grid.nodes[static_cast<std::size_t>(grid.node_id(i, j))];
      const Vec2 n11 =
          grid.nodes[static_cast<std::size_t>(grid.node_id(i + 1, j + 1))];
      const Vec2 n10 = grid.nodes[static_cast<std::size_t>(grid.node_id(i + 1, j))];
      const Vec2 n01 = grid.nodes[static_cast<std::size_t>(grid.node_id(i, j + 1))];
      const double margin = cfg.road_width * 0.5 + rng.uniform(1.5, 3.0);
      Building b;
      b.min = {std::max(n00.x, n01.x) + margin, std::max(n00.y, n10.y) + margin};
      b.max = {std::min(n10.x, n11.x) - margin, std::min(n01.y, n11.y) - margin};
      if (b.max.x - b.min.x > 8.0 && b.max.y - b.min.y > 8.0)
        w.buildings.push_back(b);
    }

  // Long routes: seeded random walks over the grid, lane-following with
  // Bezier blends through junctions.
  const double setback = cfg.road_width * 0.5 + 2.5;
  int guard = 0;
  while (int(w.routes.size()) < cfg.long_routes && guard++ < cfg.long_routes * 40) {
    const int start_edge = int(rng.uniform_int(grid.edges.size()));
    const int from =
        rng.uniform01() < 0.5 ? grid.edges[static_cast<std::size_t>(start_edge)].first
                              : grid.edges[static_cast<std::size_t>(start_edge)].second;
    const double target_len =
        rng.uniform(cfg.route_min_len + 2.0, cfg.route_max_len - 2.0);

    std::vector<Vec2> pts;
    int edge = start_edge, node = from;
    double walked = 0.0;
    auto [s0, e0] = detail::lane_span(grid, edge, node);
    const Vec2 first_dir = (e0 - s0).normalized();
    pts.push_back(s0 + first_dir * setback);
    Vec2 prev_end = e0;
    Vec2 prev_dir = first_dir;
    pts.push_back(prev_end - prev_dir * setback);
    walked += (pts[1] - pts[0]).norm();
    while (walked < target_len) {
      const auto [a, b] = grid.edges[static_cast<std::size_t>(edge)];
      const int at = (node == a) ? b : a;
      std::vector<int> options;
      for (int e2 : grid.adj[static_cast<std::size_t>(at)])
        if (e2 != edge) options.push_back(e2);
      if (options.empty()) break;
      const int next = options[rng.uniform_int(options.size())];
      auto [s1, e1] = detail::lane_span(grid, next, at);
      const Vec2 next_dir = (e1 - s1).normalized();
      detail::append_turn(pts, prev_end, prev_dir, s1, next_dir, setback);
      const Vec2 leg_end = e1 - next_dir * setback;
      walked += (leg_end - pts.back()).norm();
      pts.push_back(leg_end);
      prev_end = e1;
      prev_dir = next_dir;
      edge = next;
      node = at;
    }
    // The walk overshoots its target by up to one grid leg; trim the built
    // polyline back so every long route length lands inside the band.
    geom::Polyline full(pts);
    if (full.length() < cfg.route_min_len + 2.0) continue;
    const double cut_len = std::min(full.length(), target_len);
    std::vector<Vec2> cut;
    for (double sc = 0.0; sc < cut_len; sc += 1.0)
      cut.push_back(full.point_at(sc));
    cut.push_back(full.point_at(cut_len));
    Route r;
    r.id = int(w.routes.size());
    r.command = Command::Follow;
    r.pts = geom::resample(cut, cfg.waypoint_spacing);
    w.routes.push_back(std::move(r));
  }
  if (int(w.routes.size()) < cfg.long_routes)
    throw ConfigError("world generation could not produce enough routes");

  // Evaluation scenario set: every vehicle and pedestrian variant appears
  // once, spread over the long routes.
  for (int v = 0; v < int(vehicle_variants().size()); ++v) {
    ScenarioSpec s;
    s.kind = ScenarioKind::VehicleBlock;
    s.route_id = v % int(w.routes.size());
    const double len = w.routes[static_cast<std::size_t>(s.route_id)].length();
    s.trigger_s = rng.uniform(0.2, 0.5) * len;
    s.variant = v;
    s.dwell_s = 6.0 + rng.uniform(0.0, 4.0);
    w.scenarios.push_back(s);
  }
  for (int v = 0; v < int(pedestrian_speeds().size()); ++v) {
    ScenarioSpec s;
    s.kind = ScenarioKind::PedestrianCross;
    s.route_id = (v + 3) % int(w.routes.size());
    const double len = w.routes[static_cast<std::size_t>(s.route_id)].length();
    s.trigger_s = rng.uniform(0.2, 0.5) * len;
    s.variant = v;
    w.scenarios.push_back(s);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Route structure analysis
// ---------------------------------------------------------------------------

// A junction crossing along a route: the arclength interval where the route
// runs inside an intersection disc, plus the turn classification.
struct RouteCrossing {
  int node_id = 0;
  double s_enter = 0.0;
  double s_exit = 0.0;
  Command turn = Command::Straight;
};

inline std::vector<RouteCrossing> find_crossings(const WorldMap& w,
                                                 const Polyline& route) {
  std::vector<RouteCrossing> out;
  const double len = route.length();
  const double step = 1.0;
  int current = -1;
  double enter_s = 0.0;
  auto classify = [&](double s0, double s1) {
    const Vec2 h0 = route.direction_at(std::max(0.0, s0 - 4.0));
    const Vec2 h1 = route.direction_at(std::min(len, s1 + 4.0));
    const double dh = std::atan2(h0.cross(h1), h0.dot(h1));
    if (dh > deg_to_rad(30.0)) return Command::Left;
    if (dh < -deg_to_rad(30.0)) return Command::Right;
    return Command::Straight;
  };
  for (double s = 0.0; s <= len; s += step) {
    const Vec2 p = route.point_at(s);
    const IntersectionNode* n = w.node_near(p);
    const int id = n ? n->id : -1;
    if (id != current) {
      if (current >= 0) {
        RouteCrossing c;
        c.node_id = current;
        c.s_enter = enter_s;
        c.s_exit = s - step;
        c.turn = classify(c.s_enter, c.s_exit);
        out.push_back(c);
      }
      current = id;
      enter_s = s;
    }
  }
  if (current >= 0) {
    RouteCrossing c;
    c.node_id = current;
    c.s_enter = enter_s;
    c.s_exit = len;
    c.turn = classify(c.s_enter, c.s_exit);
    out.push_back(c);
  }
  return out;
}

// Extracts the sub-route between arclengths [s0, s1].
inline Route cut_route(const Route& r, double s0, double s1, int new_id,
                       Command cmd, double spacing = 2.0) {
  Polyline pl(r.pts);
  s0 = clamp(s0, 0.0, pl.length());
  s1 = clamp(s1, 0.0, pl.length());
  if (s1 - s0 < 1.0) throw InputError("cut_route: empty span");
  const double span = s1 - s0;
  // Distribute waypoints evenly so every gap stays within [1, 5] m.
  const std::size_t n = std::max<std::size_t>(
      2, static_cast<std::size_t>(std::round(span / spacing)) + 1);
  std::vector<Vec2> pts;
  pts.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    pts.push_back(pl.point_at(s0 + span * double(i) / double(n - 1)));
  Route out;
  out.id = new_id;
  out.command = cmd;
  out.pts = std::move(pts);
  return out;
}

// Splits the long routes into short training routes, balanced across the
// four command tags. Turn legs run mid-edge to mid-edge around a single
// junction; follow legs sit entirely between junctions. Lengths land in
// [min_len, max_len].
inline std::vector<Route> build_short_routes(const WorldMap& w,
                                             std::uint64_t seed,
                                             int per_command = 28,
                                             double min_len = 50.0,
                                             double max_len = 200.0) {
  struct Candidate {
    int route_idx;
    double s0, s1;
    Command cmd;
  };
  std::vector<Candidate> cands;

  for (std::size_t ri = 0; ri < w.routes.size(); ++ri) {
    const Route& r = w.routes[ri];
    Polyline pl(r.pts);
    const double len = pl.length();
    const auto cross = find_crossings(w, pl);

    auto add = [&](double s0, double s1, Command cmd) {
      s0 = clamp(s0, 0.0, len);
      s1 = clamp(s1, 0.0, len);
      double span = s1 - s0;
      // Half-metre margins absorb the chord shrinkage of the resampled
      // polyline so measured lengths stay inside [min_len, max_len].
      const double hi = max_len - 0.5;
      if (span > hi) {  // trim symmetrically around the centre
        const double c = 0.5 * (s0 + s1);
        s0 = c - hi * 0.5;
        s1 = c + hi * 0.5;
        span = hi;
      }
      if (span < min_len + 0.5) return;
      cands.push_back({int(ri), s0, s1, cmd});
    };

    for (std::size_t ci = 0; ci < cross.size(); ++ci) {
      const auto& c = cross[ci];
      const double prev_mid =
          ci == 0 ? 0.0 : 0.5 * (cross[ci - 1].s_exit + c.s_enter);
      const double next_mid =
          ci + 1 == cross.size() ? len
                                 : 0.5 * (c.s_exit + cross[ci + 1].s_enter);
      add(prev_mid, next_mid, c.turn);
      // junction-free gap after this crossing
      const double gap_end =
          ci + 1 == cross.size() ? len : cross[ci + 1].s_enter - 2.0;
      add(c.s_exit + 2.0, gap_end, Command::Follow);
    }
    if (cross.empty()) add(0.0, len, Command::Follow);
    else add(0.0, cross.front().s_enter - 2.0, Command::Follow);
  }

  std::vector<Route> out;
  int next_id = 1000;
  for (Command cmd : {Command::Follow, Command::Left, Command::Right,
                      Command::Straight}) {
    std::vector<Candidate> pool;
    for (const auto& c : cands)
      if (c.cmd == cmd) pool.push_back(c);
    if (int(pool.size()) < per_command)
      throw ConfigError(std::string("unbalanceable command distribution: ") +
                        command_name(cmd) + " has " +
                        std::to_string(pool.size()) + " candidates, need " +
                        std::to_string(per_command));
    // Seeded shuffle spreads picks across routes instead of front-loading.
    Rng rng(derive_seed(seed, "short_routes", int(cmd)));
    for (std::size_t i = pool.size(); i > 1; --i)
      std::swap(pool[i - 1], pool[rng.uniform_int(i)]);
    for (int i = 0; i < per_command; ++i) {
      const auto& c = pool[static_cast<std::size_t>(i)];
      out.push_back(
          cut_route(w.routes[static_cast<std::size_t>(c.route_idx)], c.s0,
                    c.s1, next_id++, cmd));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Validation and JSON round trip
// ---------------------------------------------------------------------------

inline void validate_world(const WorldMap& w) {
  if (w.roads.empty()) throw ConfigError("world has no roads");
  for (const auto& r : w.roads) {
    if (r.pts.size() < 2) throw ConfigError("road without geometry");
    if (!(r.width > 0.0)) throw ConfigError("road with non-positive width");
    for (const auto& p : r.pts)
      if (!std::isfinite(p.x) || !std::isfinite(p.y))
        throw ConfigError("non-finite road coordinate");
  }
  for (const auto& l : w.lights) {
    if (!(l.sched.green_s > 0.0) || !(l.sched.red_s > 0.0))
      throw ConfigError("light with non-positive phase");
  }
  for (const auto& r : w.routes) {
    if (r.pts.size() < 2) throw ConfigError("route without waypoints");
    for (const auto& p : r.pts) {
      if (!std::isfinite(p.x) || !std::isfinite(p.y))
        throw ConfigError("non-finite route waypoint");
      if (!w.on_road(p, 0.5))
        throw ConfigError("route " + std::to_string(r.id) +
                          " leaves the road network");
    }
  }
  for (const auto& s : w.scenarios) {
    if (s.route_id < 0 || s.route_id >= int(w.routes.size()))
      throw ConfigError("scenario references unknown route");
  }
}

inline nlohmann::json world_to_json(const WorldMap& w) {
  nlohmann::json j;
  j["version"] = w.version;
  j["name"] = w.name;
  j["seed"] = w.seed;
  auto pts_to_json = [](const std::vector<Vec2>& pts) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& p : pts) a.push_back({p.x, p.y});
    return a;
  };
  j["roads"] = nlohmann::json::array();
  for (const auto& r : w.roads)
    j["roads"].push_back(
        {{"id", r.id}, {"width", r.width}, {"pts", pts_to_json(r.pts)}});
  j["intersections"] = nlohmann::json::array();
  for (const auto& n : w.intersections)
    j["intersections"].push_back({{"id", n.id},
                                  {"center", {n.center.x, n.center.y}},
                                  {"radius", n.radius},
                                  {"roads", n.roads}});
  j["lights"] = nlohmann::json::array();
  for (const auto& l : w.lights)
    j["lights"].push_back({{"id", l.id},
                           {"intersection", l.intersection},
                           {"pos", {l.pos.x, l.pos.y}},
                           {"green_s", l.sched.green_s},
                           {"red_s", l.sched.red_s},
                           {"offset_s", l.sched.offset_s}});
  j["buildings"] = nlohmann::json::array();
  for (const auto& b : w.buildings)
    j["buildings"].push_back(
        {{"min", {b.min.x, b.min.y}}, {"max", {b.max.x, b.max.y}}});
  j["routes"] = nlohmann::json::array();
  for (const auto& r : w.routes)
    j["routes"].push_back({{"id", r.id},
                           {"command", command_name(r.command)},
                           {"pts", pts_to_json(r.pts)}});
  j["scenarios"] = nlohmann::json::array();
  for (const auto& s : w.scenarios)
    j["scenarios"].push_back(
        {{"kind", s.kind == ScenarioKind::VehicleBlock ? "vehicle_block"
                                                       : "pedestrian_cross"},
         {"route", s.route_id},
         {"trigger_s", s.trigger_s},
         {"ahead_m", s.ahead_m},
         {"variant", s.variant},
         {"dwell_s", s.dwell_s}});
  return j;
}

inline WorldMap world_from_json(const nlohmann::json& j) {
  WorldMap w;
  try {
    w.version = j.at("version").get<int>();
    if (w.version != 1)
      throw ConfigError("unsupported world version " +
                        std::to_string(w.version));
    w.name = j.value("name", "");
    w.seed = j.value("seed", 0ULL);
    auto pts_from = [](const nlohmann::json& a) {
      std::vector<Vec2> pts;
      for (const auto& p : a) pts.push_back({p.at(0), p.at(1)});
      return pts;
    };
    for (const auto& r : j.at("roads")) {
      RoadSegment seg;
      seg.id = r.at("id");
      seg.width = r.at("width");
      seg.pts = pts_from(r.at("pts"));
      w.roads.push_back(std::move(seg));
    }
    for (const auto& n : j.value("intersections", nlohmann::json::array())) {
      IntersectionNode node;
      node.id = n.at("id");
      node.center = {n.at("center").at(0), n.at("center").at(1)};
      node.radius = n.at("radius");
      node.roads = n.value("roads", std::vector<int>{});
      w.intersections.push_back(std::move(node));
    }
    for (const auto& l : j.value("lights", nlohmann::json::array())) {
      TrafficLight light;
      light.id = l.at("id");
      light.intersection = l.at("intersection");
      light.pos = {l.at("pos").at(0), l.at("pos").at(1)};
      light.sched.green_s = l.at("green_s");
      light.sched.red_s = l.at("red_s");
      light.sched.offset_s = l.at("offset_s");
      w.lights.push_back(light);
    }
    for (const auto& b : j.value("buildings", nlohmann::json::array())) {
      Building bd;
      bd.min = {b.at("min").at(0), b.at("min").at(1)};
      bd.max = {b.at("max").at(0), b.at("max").at(1)};
      w.buildings.push_back(bd);
    }
    for (const auto& r : j.value("routes", nlohmann::json::array())) {
      Route route;
      route.id = r.at("id");
      route.command = command_from_name(r.at("command"));
      route.pts = pts_from(r.at("pts"));
      w.routes.push_back(std::move(route));
    }
    for (const auto& s : j.value("scenarios", nlohmann::json::array())) {
      ScenarioSpec spec;
      spec.kind = s.at("kind") == "vehicle_block"
                      ? ScenarioKind::VehicleBlock
                      : ScenarioKind::PedestrianCross;
      spec.route_id = s.at("route");
      spec.trigger_s = s.at("trigger_s");
      spec.ahead_m = s.value("ahead_m", 20.0);
      spec.variant = s.at("variant");
      spec.dwell_s = s.value("dwell_s", 8.0);
      w.scenarios.push_back(spec);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed world file: ") + e.what());
  }
  validate_world(w);
  return w;
}

inline void save_world(const WorldMap& w, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << world_to_json(w).dump(1) << "\n";
}

inline WorldMap load_world(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed world file " + path + ": " + e.what());
  }
  return world_from_json(j);
}

}  // namespace cadre::sim
