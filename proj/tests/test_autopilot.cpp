#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cadre/autopilot.hpp"
#include "cadre/sim.hpp"
#include "cadre/world.hpp"

using namespace cadre;
using namespace cadre::sim;
using geom::Vec2;

namespace {

WorldMap straight_world(double len = 400.0) {
  WorldMap w;
  w.name = "straight";
  RoadSegment r;
  r.id = 0;
  r.pts = {{0.0, 0.0}, {len, 0.0}};
  w.roads.push_back(r);
  Route rt;
  rt.id = 0;
  rt.command = Command::Follow;
  rt.pts = geom::resample({{5.0, 0.0}, {len - 5.0, 0.0}}, 2.0);
  w.routes.push_back(rt);
  return w;
}

SimConfig fast_cfg() {
  SimConfig cfg;
  cfg.render = false;
  return cfg;
}

// Drives until the episode ends; returns the terminal event.
Event run_to_end(Simulator& s, const Autopilot& ap, int max_steps = 6000) {
  Event ev = Event::None;
  for (int i = 0; i < max_steps && !s.terminal(); ++i) {
    const Controls c = ap.drive(s);
    ev = s.step(c.steer, c.throttle, c.brake).event;
  }
  return ev;
}

}  // namespace

TEST_CASE("autopilot on a straight empty road") {
  WorldMap w = straight_world();
  Simulator s(w, fast_cfg());
  EpisodeOptions opt;
  opt.start_s = 10.0;
  s.start_episode(w.routes[0], opt);

  Autopilot ap;
  for (int i = 0; i < 150; ++i) {
    const Controls c = ap.drive(s);
    CHECK(std::abs(c.steer) < 0.05);
    CHECK(c.throttle > 0.0);
    CHECK(c.brake == 0.0);
    s.step(c.steer, c.throttle, c.brake);
  }
  CHECK(s.ego().v > 4.0);
  CHECK(s.ego().v < 6.5);
  CHECK(std::abs(s.ego().pos.y) < 0.05);
}

TEST_CASE("autopilot brakes hard at a 5 m obstacle") {
  WorldMap w = straight_world();
  Simulator s(w, fast_cfg());
  EpisodeOptions opt;
  opt.start_s = 10.0;
  ScenarioSpec sc;
  sc.kind = ScenarioKind::VehicleBlock;
  sc.trigger_s = 10.0;
  sc.dwell_s = 60.0;  // blocker stays put for this test
  opt.scenarios.push_back(sc);
  s.start_episode(w.routes[0], opt);

  Autopilot ap;
  bool braked_at_five = false;
  for (int i = 0; i < 600 && !s.terminal(); ++i) {
    const Controls c = ap.drive(s);
    const auto gap = s.obstacle_ahead();
    if (gap.has_value() && *gap <= 5.0) {
      REQUIRE(c.brake == 1.0);
      REQUIRE(c.throttle == 0.0);
      braked_at_five = true;
    }
    s.step(c.steer, c.throttle, c.brake);
    if (braked_at_five && s.ego().v == 0.0) break;
  }
  CHECK(braked_at_five);
  CHECK_FALSE(s.terminal());  // never hit the blocker
  CHECK(s.ego().v == 0.0);
}

TEST_CASE("autopilot clears a vehicle block scenario") {
  WorldMap w = straight_world();
  Simulator s(w, fast_cfg());
  EpisodeOptions opt;
  opt.start_s = 10.0;
  ScenarioSpec sc;
  sc.kind = ScenarioKind::VehicleBlock;
  sc.trigger_s = 30.0;
  sc.dwell_s = 6.0;
  opt.scenarios.push_back(sc);
  s.start_episode(w.routes[0], opt);

  CHECK(run_to_end(s, Autopilot()) == Event::Success);
}

TEST_CASE("autopilot yields to a crossing pedestrian") {
  WorldMap w = straight_world();
  Simulator s(w, fast_cfg());
  EpisodeOptions opt;
  opt.start_s = 10.0;
  ScenarioSpec sc;
  sc.kind = ScenarioKind::PedestrianCross;
  sc.trigger_s = 40.0;
  sc.variant = 2;
  opt.scenarios.push_back(sc);
  s.start_episode(w.routes[0], opt);

  CHECK(run_to_end(s, Autopilot()) == Event::Success);
}

TEST_CASE("autopilot waits out a red light") {
  WorldMap w = straight_world();
  RoadSegment cross;
  cross.id = 1;
  cross.pts = {{150, -60}, {150, 60}};
  w.roads.push_back(cross);
  IntersectionNode n;
  n.id = 0;
  n.center = {150, 0};
  n.radius = 6.0;
  n.roads = {0, 1};
  w.intersections.push_back(n);
  TrafficLight l;
  l.id = 0;
  l.intersection = 0;
  l.pos = {150, 0};
  l.sched = {60.0, 30.0, 60.0};  // red for the first 30 s, then green
  w.lights.push_back(l);

  Simulator s(w, fast_cfg());
  EpisodeOptions opt;
  opt.start_s = 10.0;
  s.start_episode(w.routes[0], opt);

  Autopilot ap;
  bool stopped_at_red = false;
  double stop_x = 0.0;
  Event ev = Event::None;
  for (int i = 0; i < 3000 && !s.terminal(); ++i) {
    const Controls c = ap.drive(s);
    auto res = s.step(c.steer, c.throttle, c.brake);
    ev = res.event;
    if (res.sensors.light == LightState::Red && s.ego().v < 0.05) {
      stopped_at_red = true;
      stop_x = s.ego().pos.x;
    }
  }
  CHECK(stopped_at_red);
  CHECK(stop_x < 144.0);  // held before the junction disc
  CHECK(ev == Event::Success);
}

TEST_CASE("autopilot completes every generated short route") {
  WorldMap w = generate_world(WorldGenConfig{});
  auto shorts = build_short_routes(w, 99);
  REQUIRE(shorts.size() == 112);

  Simulator s(w, fast_cfg());
  Autopilot ap;
  int ok = 0;
  std::vector<int> failed;
  for (const auto& r : shorts) {
    EpisodeOptions opt;
    opt.seed = 50 + std::uint64_t(r.id);
    s.start_episode(r, opt);
    const Event ev = run_to_end(s, ap);
    if (ev == Event::Success) ++ok;
    else failed.push_back(r.id);
  }
  INFO("failed route ids: " << [&] {
    std::string out;
    for (int id : failed) out += std::to_string(id) + " ";
    return out;
  }());
  CHECK(ok == 112);
}
