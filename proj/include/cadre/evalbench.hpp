#pragma once

// Evaluation benchmarks. A small driver abstraction covers the scripted
// autopilot, the trained cascade, the perception-only mode, and a degenerate
// always-brake baseline; on top of it sit the traffic benchmark (three
// densities crossed with seen/unseen map palettes on a held-out map) and the
// scenario avoidance suite. Per-route time limits are derived from a clean
// autopilot reference pass rather than fixed constants.

#include <algorithm>
#include <cstdio>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cadre/agent.hpp"
#include "cadre/autopilot.hpp"
#include "cadre/copm.hpp"
#include "cadre/obspipe.hpp"
#include "cadre/reward.hpp"
#include "cadre/sim.hpp"

namespace cadre::bench {

// ---------------------------------------------------------------------------
// Drivers
// ---------------------------------------------------------------------------

class Driver {
 public:
  virtual ~Driver() = default;
  virtual std::string name() const = 0;
  // Called at the start of every episode.
  virtual void reset() {}
  // Camera-free drivers let the suites skip rasterisation entirely.
  virtual bool needs_camera() const { return false; }
  virtual sim::Controls act(const sim::Simulator& s,
                            const sim::SensorFrame& sensors) = 0;
};

class AutopilotDriver : public Driver {
 public:
  explicit AutopilotDriver(sim::AutopilotConfig cfg = {}) : pilot_(cfg) {}
  std::string name() const override { return "autopilot"; }
  sim::Controls act(const sim::Simulator& s,
                    const sim::SensorFrame&) override {
    return pilot_.drive(s);
  }

 private:
  sim::Autopilot pilot_;
};

// Always decelerates; the floor any useful policy has to clear.
class ZeroDriver : public Driver {
 public:
  std::string name() const override { return "zero"; }
  sim::Controls act(const sim::Simulator&, const sim::SensorFrame&) override {
    return sim::Controls{0.0, 0.0, 1.0};
  }
};

// Frozen perception feeding the trained policy. Evaluation defaults to the
// greedy action so reports are reproducible without an action seed.
class AgentDriver : public Driver {
 public:
  AgentDriver(const std::string& copm_base, const std::string& policy_base,
              const sim::CameraConfig& camera, bool greedy = true,
              std::uint64_t seed = 1)
      : greedy_(greedy), rng_(derive_seed(seed, "eval_act")) {
    copm_ = std::make_unique<copm::CopmNet>(
        copm::CopmNet::config_from_meta(nn::read_checkpoint_meta(copm_base)),
        0);
    copm_->load(copm_base);
    const std::size_t pixels =
        static_cast<std::size_t>(camera.h) * camera.w;
    if (copm_->input_size() != pixels * obs::kModelChannels)
      throw LoadError("perception checkpoint does not match the camera");
    camera_ = camera;
    policy_ = std::make_unique<agent::PolicyNet>(
        agent::PolicyNet::config_from_meta(
            nn::read_checkpoint_meta(policy_base)),
        0);
    policy_->load(policy_base);
    if (policy_->config().input_dim !=
        agent::kMeasurementDim + copm_->z_dim())
      throw LoadError(
          "policy and perception checkpoints belong to different cascades");
    buf_ = std::make_unique<agent::FrameBuffer>(policy_->config().input_dim);
  }

  std::string name() const override { return "agent"; }
  bool needs_camera() const override { return true; }
  void reset() override { buf_->reset(); }

  sim::Controls act(const sim::Simulator& s,
                    const sim::SensorFrame& sensors) override {
    obs::Measurements m;
    const sim::EgoState& ego = s.ego();
    m.prev_steer = ego.steer;
    m.prev_throttle = ego.throttle;
    m.prev_brake = ego.brake;
    m.v = ego.v;
    m.theta_deg = sensors.metrics.theta_deg;
    m.d_m = sensors.metrics.d_m;
    const std::vector<double> input = obs::make_model_input(
        sensors.camera.rgb, obs::lookahead_waypoints(s), camera_);
    buf_->push(agent::assemble_state(m, copm_->infer(input)));
    const agent::PolicyNet::Evaluation ev =
        policy_->evaluate(buf_->window());
    const agent::SampledAction sa = agent::sample_action(
        ev.steer_logits, ev.long_logits, rng_, greedy_);
    const agent::Controls c = agent::decode_action(sa.action);
    return sim::Controls{c.steer, c.throttle, c.brake};
  }

 private:
  bool greedy_;
  Rng rng_;
  sim::CameraConfig camera_;
  std::unique_ptr<copm::CopmNet> copm_;
  std::unique_ptr<agent::PolicyNet> policy_;
  std::unique_ptr<agent::FrameBuffer> buf_;
};

// Perception-only mode: steer and throttle straight off the control heads,
// with the hard-brake override near obstacles.
class CopmDriver : public Driver {
 public:
  CopmDriver(const std::string& copm_base, const sim::CameraConfig& camera) {
    copm_ = std::make_unique<copm::CopmNet>(
        copm::CopmNet::config_from_meta(nn::read_checkpoint_meta(copm_base)),
        0);
    copm_->load(copm_base);
    if (copm_->config().visual_only)
      throw LoadError(
          "a visual-only perception checkpoint has no control heads");
    const std::size_t pixels =
        static_cast<std::size_t>(camera.h) * camera.w;
    if (copm_->input_size() != pixels * obs::kModelChannels)
      throw LoadError("perception checkpoint does not match the camera");
    camera_ = camera;
  }

  std::string name() const override { return "copm"; }
  bool needs_camera() const override { return true; }

  sim::Controls act(const sim::Simulator& s,
                    const sim::SensorFrame& sensors) override {
    const std::vector<double> input = obs::make_model_input(
        sensors.camera.rgb, obs::lookahead_waypoints(s), camera_);
    const copm::CopmNet::Prediction p = copm_->predict(input);
    const copm::DriveCommand c =
        copm::copm_drive(p, sensors.obstacle_distance.has_value());
    return sim::Controls{c.steer, c.throttle, c.brake};
  }

 private:
  sim::CameraConfig camera_;
  std::unique_ptr<copm::CopmNet> copm_;
};

// ---------------------------------------------------------------------------
// Episode runner
// ---------------------------------------------------------------------------

struct TraceRow {
  long step = 0;
  double x = 0.0, y = 0.0, heading = 0.0, v = 0.0;
  double steer = 0.0, throttle = 0.0, brake = 0.0;
  reward::RewardBreakdown reward;
  double completion = 0.0;
  sim::Event event = sim::Event::None;
};

struct EpisodeResult {
  bool success = false;
  double completion = 0.0;
  sim::Event event = sim::Event::None;  // None after a timeout
  long steps = 0;
  long max_steps = 0;
  double episode_return = 0.0;
};

// Runs one episode to its terminal event or the step limit. When `rows` is
// given, every step is recorded for trace dumps.
inline EpisodeResult run_episode(sim::Simulator& s, const sim::Route& route,
                                 const sim::EpisodeOptions& opt,
                                 Driver& driver, long max_steps,
                                 const reward::RewardConfig& rcfg = {},
                                 std::vector<TraceRow>* rows = nullptr) {
  if (max_steps < 1) throw InputError("run_episode: step limit must be >= 1");
  s.start_episode(route, opt);
  driver.reset();
  sim::SensorFrame sensors = s.initial_sensors();

  EpisodeResult res;
  res.max_steps = max_steps;
  while (res.steps < max_steps) {
    const sim::Controls c = driver.act(s, sensors);
    const sim::StepResult sr = s.step(c.steer, c.throttle, c.brake);
    const reward::RewardBreakdown rb = reward::step_reward(sr, rcfg);
    ++res.steps;
    res.episode_return += rb.total;
    res.completion = sr.sensors.metrics.completion;
    res.event = sr.event;
    sensors = sr.sensors;
    if (rows) {
      TraceRow row;
      row.step = res.steps;
      row.x = sr.ego.pos.x;
      row.y = sr.ego.pos.y;
      row.heading = sr.ego.heading;
      row.v = sr.ego.v;
      row.steer = sr.ego.steer;
      row.throttle = sr.ego.throttle;
      row.brake = sr.ego.brake;
      row.reward = rb;
      row.completion = sr.sensors.metrics.completion;
      row.event = sr.event;
      rows->push_back(row);
    }
    if (sr.event != sim::Event::None) break;
  }
  res.success = res.event == sim::Event::Success;
  return res;
}

// Clean autopilot pass used as the per-route time reference: empty traffic,
// no scenarios, rendering off. Routes the autopilot cannot finish fall back
// to a walking-pace bound.
inline long autopilot_reference_steps(const sim::WorldMap& world,
                                      const sim::Route& route,
                                      const sim::SimConfig& scfg,
                                      std::uint64_t seed, long cap_steps) {
  sim::SimConfig ref_cfg = scfg;
  ref_cfg.render = false;
  sim::Simulator s(world, ref_cfg);
  AutopilotDriver pilot;
  sim::EpisodeOptions opt;
  opt.density = sim::Density::Empty;
  opt.seed = derive_seed(seed, "timeout_ref");
  const EpisodeResult res =
      run_episode(s, route, opt, pilot, cap_steps);
  if (res.success) return res.steps;
  return std::min<long>(
      cap_steps,
      static_cast<long>(route.length() / (1.0 * scfg.dt)) + 1);
}

// ---------------------------------------------------------------------------
// Benchmark report
// ---------------------------------------------------------------------------

struct RouteOutcome {
  int route_id = 0;
  std::string condition;  // density name or scenario kind
  std::string split;      // "train" / "test" palettes; "-" for avoidance
  int palette_id = 0;
  int repetition = 0;
  bool success = false;
  double completion = 0.0;
  sim::Event event = sim::Event::None;
  long steps = 0;
  long max_steps = 0;
  double episode_return = 0.0;
};

struct Aggregate {
  std::string condition;
  std::string split;
  int episodes = 0;
  double success_rate = 0.0;
  double avg_completion = 0.0;
};

struct BenchmarkReport {
  std::string suite;
  std::string driver;
  std::vector<RouteOutcome> outcomes;
  std::vector<Aggregate> aggregates;

  const Aggregate* find(const std::string& condition,
                        const std::string& split) const {
    for (const auto& a : aggregates)
      if (a.condition == condition && a.split == split) return &a;
    return nullptr;
  }
};

namespace detail {

inline void aggregate_outcomes(BenchmarkReport& rep) {
  for (const auto& o : rep.outcomes) {
    Aggregate* slot = nullptr;
    for (auto& a : rep.aggregates)
      if (a.condition == o.condition && a.split == o.split) slot = &a;
    if (!slot) {
      rep.aggregates.push_back(Aggregate{o.condition, o.split, 0, 0.0, 0.0});
      slot = &rep.aggregates.back();
    }
    ++slot->episodes;
    slot->success_rate += o.success ? 1.0 : 0.0;
    slot->avg_completion += o.completion;
  }
  for (auto& a : rep.aggregates) {
    a.success_rate /= a.episodes;
    a.avg_completion /= a.episodes;
  }
}

}  // namespace detail

inline nlohmann::json report_to_json(const BenchmarkReport& rep) {
  nlohmann::json j;
  j["suite"] = rep.suite;
  j["driver"] = rep.driver;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& o : rep.outcomes) {
    nlohmann::json r;
    r["route"] = o.route_id;
    r["condition"] = o.condition;
    r["split"] = o.split;
    r["palette"] = o.palette_id;
    r["rep"] = o.repetition;
    r["success"] = o.success ? 1 : 0;
    r["completion"] = o.completion;
    r["event"] = sim::event_name(o.event);
    r["steps"] = o.steps;
    r["max_steps"] = o.max_steps;
    r["return"] = o.episode_return;
    rows.push_back(r);
  }
  j["outcomes"] = rows;
  nlohmann::json aggs = nlohmann::json::array();
  for (const auto& a : rep.aggregates) {
    nlohmann::json r;
    r["condition"] = a.condition;
    r["split"] = a.split;
    r["episodes"] = a.episodes;
    r["success_rate"] = a.success_rate;
    r["avg_completion"] = a.avg_completion;
    aggs.push_back(r);
  }
  j["aggregates"] = aggs;
  return j;
}

inline std::string report_table(const BenchmarkReport& rep) {
  std::string out = rep.suite + " / " + rep.driver + "\n";
  char line[128];
  std::snprintf(line, sizeof(line), "%-18s %-6s %9s %9s %9s\n", "condition",
                "split", "episodes", "success", "compl");
  out += line;
  for (const auto& a : rep.aggregates) {
    std::snprintf(line, sizeof(line), "%-18s %-6s %9d %9.3f %9.3f\n",
                  a.condition.c_str(), a.split.c_str(), a.episodes,
                  a.success_rate, a.avg_completion);
    out += line;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

struct SuiteOptions {
  std::uint64_t seed = 1;
  int max_routes = 0;        // 0: every long route (traffic suite)
  int repetitions = 3;       // avoidance suite
  double timeout_factor = 3.0;
  long timeout_cap = 20000;
  reward::RewardConfig reward;
};

// Traffic benchmark on the held-out map: {empty, regular, dense} crossed
// with the seen/unseen palette split.
inline BenchmarkReport run_traffic_suite(const sim::WorldMap& world,
                                         Driver& driver,
                                         const sim::SimConfig& scfg,
                                         const SuiteOptions& opt = {}) {
  BenchmarkReport rep;
  rep.suite = "nocrash-analog";
  rep.driver = driver.name();

  sim::SimConfig run_cfg = scfg;
  run_cfg.render = driver.needs_camera();
  sim::Simulator s(world, run_cfg);

  std::size_t n_routes = world.routes.size();
  if (opt.max_routes > 0)
    n_routes = std::min<std::size_t>(n_routes,
                                     static_cast<std::size_t>(opt.max_routes));

  const sim::Density densities[3] = {sim::Density::Empty,
                                     sim::Density::Regular,
                                     sim::Density::Dense};
  for (std::size_t ri = 0; ri < n_routes; ++ri) {
    const sim::Route& route = world.routes[ri];
    const long ref = autopilot_reference_steps(world, route, scfg, opt.seed,
                                               opt.timeout_cap);
    const long limit = std::min<long>(
        opt.timeout_cap,
        static_cast<long>(opt.timeout_factor * static_cast<double>(ref)) + 1);
    int condition_idx = 0;
    for (const sim::Density d : densities) {
      for (const bool test_split : {false, true}) {
        const std::vector<sim::Palette> pals = sim::palette_split(test_split);
        const sim::Palette& pal = pals[ri % pals.size()];
        sim::EpisodeOptions ep;
        ep.density = d;
        ep.palette_id = pal.id;
        ep.seed = derive_seed(opt.seed, "traffic",
                              static_cast<std::uint64_t>(route.id),
                              static_cast<std::uint64_t>(condition_idx));
        const EpisodeResult res =
            run_episode(s, route, ep, driver, limit, opt.reward);
        RouteOutcome o;
        o.route_id = route.id;
        o.condition = sim::density_name(d);
        o.split = test_split ? "test" : "train";
        o.palette_id = pal.id;
        o.success = res.success;
        o.completion = res.completion;
        o.event = res.event;
        o.steps = res.steps;
        o.max_steps = res.max_steps;
        o.episode_return = res.episode_return;
        rep.outcomes.push_back(o);
        ++condition_idx;
      }
    }
  }
  detail::aggregate_outcomes(rep);
  return rep;
}

// Every predefined vehicle-block and pedestrian-cross scenario, repeated
// with fresh seeds, on empty roads so the scenario is the only obstacle.
inline BenchmarkReport run_avoidance_suite(const sim::WorldMap& world,
                                           Driver& driver,
                                           const sim::SimConfig& scfg,
                                           const SuiteOptions& opt = {}) {
  if (world.scenarios.empty())
    throw InputError("avoidance suite: the map defines no scenarios");
  BenchmarkReport rep;
  rep.suite = "avoidance";
  rep.driver = driver.name();

  sim::SimConfig run_cfg = scfg;
  run_cfg.render = driver.needs_camera();
  sim::Simulator s(world, run_cfg);

  for (std::size_t si = 0; si < world.scenarios.size(); ++si) {
    const sim::ScenarioSpec& spec = world.scenarios[si];
    const sim::Route& route =
        world.routes.at(static_cast<std::size_t>(spec.route_id));
    const long ref = autopilot_reference_steps(world, route, scfg, opt.seed,
                                               opt.timeout_cap);
    const long limit = std::min<long>(
        opt.timeout_cap,
        static_cast<long>(opt.timeout_factor * static_cast<double>(ref)) + 1);
    for (int rep_i = 0; rep_i < opt.repetitions; ++rep_i) {
      sim::EpisodeOptions ep;
      ep.density = sim::Density::Empty;
      ep.scenarios = {spec};
      ep.seed = derive_seed(opt.seed, "avoidance",
                            static_cast<std::uint64_t>(si),
                            static_cast<std::uint64_t>(rep_i));
      const EpisodeResult res =
          run_episode(s, route, ep, driver, limit, opt.reward);
      RouteOutcome o;
      o.route_id = route.id;
      o.condition = spec.kind == sim::ScenarioKind::VehicleBlock
                        ? "vehicle-block"
                        : "pedestrian-cross";
      o.split = "-";
      o.palette_id = 0;
      o.repetition = rep_i;
      o.success = res.success;
      o.completion = res.completion;
      o.event = res.event;
      o.steps = res.steps;
      o.max_steps = res.max_steps;
      o.episode_return = res.episode_return;
      rep.outcomes.push_back(o);
    }
  }
  detail::aggregate_outcomes(rep);
  return rep;
}

// ---------------------------------------------------------------------------
// Episode traces
// ---------------------------------------------------------------------------

struct TraceResult {
  std::vector<TraceRow> rows;
  EpisodeResult episode;
};

inline TraceResult run_trace(const sim::WorldMap& world,
                             const sim::Route& route,
                             const sim::EpisodeOptions& opt, Driver& driver,
                             const sim::SimConfig& scfg, long max_steps,
                             const reward::RewardConfig& rcfg = {}) {
  sim::SimConfig run_cfg = scfg;
  run_cfg.render = driver.needs_camera();
  sim::Simulator s(world, run_cfg);
  TraceResult out;
  out.episode =
      run_episode(s, route, opt, driver, max_steps, rcfg, &out.rows);
  return out;
}

inline nlohmann::json trace_row_to_json(const TraceRow& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["x"] = r.x;
  j["y"] = r.y;
  j["heading"] = r.heading;
  j["v"] = r.v;
  j["steer"] = r.steer;
  j["throttle"] = r.throttle;
  j["brake"] = r.brake;
  j["r_theta"] = r.reward.r_theta;
  j["r_d"] = r.reward.r_d;
  j["r_v"] = r.reward.r_v;
  j["dense"] = r.reward.dense;
  j["sparse"] = r.reward.sparse;
  j["total"] = r.reward.total;
  j["completion"] = r.completion;
  j["event"] = sim::event_name(r.event);
  return j;
}

}  // namespace cadre::bench
