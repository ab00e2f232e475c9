#pragma once

// Run configuration for the command-line tool. One JSON file drives every
// stage; each command reads the sections it needs and ignores the rest.
// Parsing is strict: an unknown section or key is a hard error, so typos
// fail loudly instead of silently falling back to defaults. Every run can
// echo its fully resolved configuration (defaults included), and the echo
// parses back to the same configuration.

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "cadre/agent.hpp"
#include "cadre/copm.hpp"
#include "cadre/disttrain.hpp"
#include "cadre/obspipe.hpp"
#include "cadre/reward.hpp"
#include "cadre/sim.hpp"

namespace cadre::cfg {

// Defaults are sized for a single desk machine: a coarse 32x48 raster at
// 1.4 m/px and a slim perception net. The full-scale settings are plain
// config edits, nothing else changes.
struct RunConfig {
  struct Sim {
    std::uint64_t map_seed = 7;        // training map
    std::uint64_t test_map_seed = 1007;  // held-out evaluation map
    double dt = 0.1;
    double blocked_after_s = 90.0;
    int camera_h = 32;
    int camera_w = 48;
    double camera_m_per_px = 1.4;
  } sim;

  struct Obspipe {
    double noise_probability = 0.7;
    double noise_lambda = 10.0;
    double throttle_floor = 0.75;
    double throttle_below = 0.3;
    int samples = 2000;
    std::uint64_t seed = 1;
    int sample_stride = 1;
    int max_episode_steps = 2000;
    std::vector<std::string> densities{"empty", "regular", "dense"};
  } obspipe;

  struct Copm {
    int base_width = 8;
    int d_att = 64;
    bool no_coatt = false;
    bool visual_only = false;
    double lambda_rou = 0.5;
    double lambda_cam = 1.0;
    double lambda_lig = 0.1;
    double lambda_ste = 0.1;
    double lambda_thro = 0.1;
    int epochs = 20;
    int batch_size = 16;
    double lr = 1e-3;
    std::uint64_t seed = 1;
    int checkpoint_every = 0;
    double holdout = 0.1;  // fraction of samples held out for accuracy
  } copm;

  reward::RewardConfig reward;

  struct Agent {
    agent::PpoConfig ppo;
    std::size_t hidden = 64;
    bool use_lstm = true;
  } agent;

  struct Dist {
    int workers = 4;
    int iterations = 10;
    std::uint64_t seed = 1;
    int per_command = 28;
    double route_min_len = 50.0;
    double route_max_len = 200.0;
    bool attach_scenarios = true;
    std::string density = "empty";
    int palette_id = 0;
    int checkpoint_every = 0;
    std::string transport = "in-process";
  } dist;

  struct Paths {
    std::string dataset = "data/dataset";
    std::string copm_checkpoint = "data/copm";
    std::string policy_checkpoint = "data/policy";
    std::string metrics = "data/metrics.jsonl";
    std::string timings = "data/timings.txt";
    std::string report = "data/report.json";
    std::string trace = "data/trace.jsonl";
  } paths;
};

namespace detail {

// Tracks which keys a section consumed so leftovers can be rejected.
class SectionReader {
 public:
  SectionReader(const nlohmann::json& j, std::string name)
      : j_(j), name_(std::move(name)) {
    if (!j_.is_object())
      throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <typename T>
  T get(const std::string& key, const T& def) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return def;
    try {
      return it->get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key " + name_ + "." + key +
                        " has the wrong type");
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        throw ConfigError("unknown config key " + name_ + "." + it.key());
  }

 private:
  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

inline const nlohmann::json& section(const nlohmann::json& root,
                                     const char* name) {
  static const nlohmann::json empty = nlohmann::json::object();
  const auto it = root.find(name);
  return it == root.end() ? empty : *it;
}

}  // namespace detail

// density_from_name reports bad input; coming from a config file it is a
// config mistake, so rethrow it as one.
inline sim::Density parse_density(const std::string& name) {
  try {
    return sim::density_from_name(name);
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
}

inline RunConfig run_config_from_json(const nlohmann::json& root) {
  if (!root.is_object())
    throw ConfigError("config root must be a JSON object");
  static const std::set<std::string> known{
      "sim", "obspipe", "copm", "reward", "agent", "disttrain", "paths"};
  for (auto it = root.begin(); it != root.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("unknown config section '" + it.key() + "'");

  RunConfig rc;
  {
    detail::SectionReader r(detail::section(root, "sim"), "sim");
    auto& s = rc.sim;
    s.map_seed = r.get<std::uint64_t>("map_seed", s.map_seed);
    s.test_map_seed = r.get<std::uint64_t>("test_map_seed", s.test_map_seed);
    s.dt = r.get<double>("dt", s.dt);
    s.blocked_after_s = r.get<double>("blocked_after_s", s.blocked_after_s);
    s.camera_h = r.get<int>("camera_h", s.camera_h);
    s.camera_w = r.get<int>("camera_w", s.camera_w);
    s.camera_m_per_px = r.get<double>("camera_m_per_px", s.camera_m_per_px);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "obspipe"), "obspipe");
    auto& o = rc.obspipe;
    o.noise_probability =
        r.get<double>("noise_probability", o.noise_probability);
    o.noise_lambda = r.get<double>("noise_lambda", o.noise_lambda);
    o.throttle_floor = r.get<double>("throttle_floor", o.throttle_floor);
    o.throttle_below = r.get<double>("throttle_below", o.throttle_below);
    o.samples = r.get<int>("samples", o.samples);
    o.seed = r.get<std::uint64_t>("seed", o.seed);
    o.sample_stride = r.get<int>("sample_stride", o.sample_stride);
    o.max_episode_steps =
        r.get<int>("max_episode_steps", o.max_episode_steps);
    o.densities = r.get<std::vector<std::string>>("densities", o.densities);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "copm"), "copm");
    auto& c = rc.copm;
    c.base_width = r.get<int>("base_width", c.base_width);
    c.d_att = r.get<int>("d_att", c.d_att);
    c.no_coatt = r.get<bool>("no_coatt", c.no_coatt);
    c.visual_only = r.get<bool>("visual_only", c.visual_only);
    c.lambda_rou = r.get<double>("lambda_rou", c.lambda_rou);
    c.lambda_cam = r.get<double>("lambda_cam", c.lambda_cam);
    c.lambda_lig = r.get<double>("lambda_lig", c.lambda_lig);
    c.lambda_ste = r.get<double>("lambda_ste", c.lambda_ste);
    c.lambda_thro = r.get<double>("lambda_thro", c.lambda_thro);
    c.epochs = r.get<int>("epochs", c.epochs);
    c.batch_size = r.get<int>("batch_size", c.batch_size);
    c.lr = r.get<double>("lr", c.lr);
    c.seed = r.get<std::uint64_t>("seed", c.seed);
    c.checkpoint_every = r.get<int>("checkpoint_every", c.checkpoint_every);
    c.holdout = r.get<double>("holdout", c.holdout);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "reward"), "reward");
    auto& w = rc.reward;
    w.theta_max_deg = r.get<double>("theta_max_deg", w.theta_max_deg);
    w.d_max = r.get<double>("d_max", w.d_max);
    w.v_min = r.get<double>("v_min", w.v_min);
    w.v_max = r.get<double>("v_max", w.v_max);
    w.obstacle_d_max = r.get<double>("obstacle_d_max", w.obstacle_d_max);
    w.dense_scale = r.get<double>("dense_scale", w.dense_scale);
    w.sparse_bad = r.get<double>("sparse_bad", w.sparse_bad);
    w.sparse_success = r.get<double>("sparse_success", w.sparse_success);
    w.corrected_obstacle_mode =
        r.get<bool>("corrected_obstacle_mode", w.corrected_obstacle_mode);
    w.corrected_v_min = r.get<double>("corrected_v_min", w.corrected_v_min);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "agent"), "agent");
    auto& a = rc.agent;
    a.ppo.clip_eps = r.get<double>("clip_eps", a.ppo.clip_eps);
    a.ppo.gamma = r.get<double>("gamma", a.ppo.gamma);
    a.ppo.epochs = r.get<int>("ppo_epochs", a.ppo.epochs);
    a.ppo.value_coef = r.get<double>("value_coef", a.ppo.value_coef);
    a.ppo.entropy_coef = r.get<double>("entropy_coef", a.ppo.entropy_coef);
    a.ppo.horizon = r.get<int>("horizon", a.ppo.horizon);
    a.ppo.minibatch = r.get<int>("minibatch", a.ppo.minibatch);
    a.ppo.lr = r.get<double>("lr", a.ppo.lr);
    a.ppo.adv_eps = r.get<double>("adv_eps", a.ppo.adv_eps);
    a.hidden = r.get<std::size_t>("hidden", a.hidden);
    a.use_lstm = r.get<bool>("use_lstm", a.use_lstm);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "disttrain"), "disttrain");
    auto& d = rc.dist;
    d.workers = r.get<int>("workers", d.workers);
    d.iterations = r.get<int>("iterations", d.iterations);
    d.seed = r.get<std::uint64_t>("seed", d.seed);
    d.per_command = r.get<int>("per_command", d.per_command);
    d.route_min_len = r.get<double>("route_min_len", d.route_min_len);
    d.route_max_len = r.get<double>("route_max_len", d.route_max_len);
    d.attach_scenarios =
        r.get<bool>("attach_scenarios", d.attach_scenarios);
    d.density = r.get<std::string>("density", d.density);
    d.palette_id = r.get<int>("palette_id", d.palette_id);
    d.checkpoint_every = r.get<int>("checkpoint_every", d.checkpoint_every);
    d.transport = r.get<std::string>("transport", d.transport);
    r.finish();
  }
  {
    detail::SectionReader r(detail::section(root, "paths"), "paths");
    auto& p = rc.paths;
    p.dataset = r.get<std::string>("dataset", p.dataset);
    p.copm_checkpoint =
        r.get<std::string>("copm_checkpoint", p.copm_checkpoint);
    p.policy_checkpoint =
        r.get<std::string>("policy_checkpoint", p.policy_checkpoint);
    p.metrics = r.get<std::string>("metrics", p.metrics);
    p.timings = r.get<std::string>("timings", p.timings);
    p.report = r.get<std::string>("report", p.report);
    p.trace = r.get<std::string>("trace", p.trace);
    r.finish();
  }

  // Fail fast on values the stages would reject much later.
  sim::validate_camera(sim::CameraConfig{rc.sim.camera_h, rc.sim.camera_w,
                                         rc.sim.camera_m_per_px});
  parse_density(rc.dist.density);
  dist::transport_from_name(rc.dist.transport);
  for (const auto& name : rc.obspipe.densities) parse_density(name);
  if (rc.obspipe.densities.empty())
    throw ConfigError("obspipe.densities must not be empty");
  if (!(rc.copm.holdout >= 0.0 && rc.copm.holdout < 1.0))
    throw ConfigError("copm.holdout must be in [0, 1)");
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " +
                      e.what());
  }
  return run_config_from_json(j);
}

// Full echo with every default resolved. Round-trips through
// run_config_from_json.
inline nlohmann::json run_config_to_json(const RunConfig& rc) {
  nlohmann::json j;
  j["sim"] = {{"map_seed", rc.sim.map_seed},
              {"test_map_seed", rc.sim.test_map_seed},
              {"dt", rc.sim.dt},
              {"blocked_after_s", rc.sim.blocked_after_s},
              {"camera_h", rc.sim.camera_h},
              {"camera_w", rc.sim.camera_w},
              {"camera_m_per_px", rc.sim.camera_m_per_px}};
  j["obspipe"] = {{"noise_probability", rc.obspipe.noise_probability},
                  {"noise_lambda", rc.obspipe.noise_lambda},
                  {"throttle_floor", rc.obspipe.throttle_floor},
                  {"throttle_below", rc.obspipe.throttle_below},
                  {"samples", rc.obspipe.samples},
                  {"seed", rc.obspipe.seed},
                  {"sample_stride", rc.obspipe.sample_stride},
                  {"max_episode_steps", rc.obspipe.max_episode_steps},
                  {"densities", rc.obspipe.densities}};
  j["copm"] = {{"base_width", rc.copm.base_width},
               {"d_att", rc.copm.d_att},
               {"no_coatt", rc.copm.no_coatt},
               {"visual_only", rc.copm.visual_only},
               {"lambda_rou", rc.copm.lambda_rou},
               {"lambda_cam", rc.copm.lambda_cam},
               {"lambda_lig", rc.copm.lambda_lig},
               {"lambda_ste", rc.copm.lambda_ste},
               {"lambda_thro", rc.copm.lambda_thro},
               {"epochs", rc.copm.epochs},
               {"batch_size", rc.copm.batch_size},
               {"lr", rc.copm.lr},
               {"seed", rc.copm.seed},
               {"checkpoint_every", rc.copm.checkpoint_every},
               {"holdout", rc.copm.holdout}};
  j["reward"] = {{"theta_max_deg", rc.reward.theta_max_deg},
                 {"d_max", rc.reward.d_max},
                 {"v_min", rc.reward.v_min},
                 {"v_max", rc.reward.v_max},
                 {"obstacle_d_max", rc.reward.obstacle_d_max},
                 {"dense_scale", rc.reward.dense_scale},
                 {"sparse_bad", rc.reward.sparse_bad},
                 {"sparse_success", rc.reward.sparse_success},
                 {"corrected_obstacle_mode", rc.reward.corrected_obstacle_mode},
                 {"corrected_v_min", rc.reward.corrected_v_min}};
  j["agent"] = {{"clip_eps", rc.agent.ppo.clip_eps},
                {"gamma", rc.agent.ppo.gamma},
                {"ppo_epochs", rc.agent.ppo.epochs},
                {"value_coef", rc.agent.ppo.value_coef},
                {"entropy_coef", rc.agent.ppo.entropy_coef},
                {"horizon", rc.agent.ppo.horizon},
                {"minibatch", rc.agent.ppo.minibatch},
                {"lr", rc.agent.ppo.lr},
                {"adv_eps", rc.agent.ppo.adv_eps},
                {"hidden", rc.agent.hidden},
                {"use_lstm", rc.agent.use_lstm}};
  j["disttrain"] = {{"workers", rc.dist.workers},
                    {"iterations", rc.dist.iterations},
                    {"seed", rc.dist.seed},
                    {"per_command", rc.dist.per_command},
                    {"route_min_len", rc.dist.route_min_len},
                    {"route_max_len", rc.dist.route_max_len},
                    {"attach_scenarios", rc.dist.attach_scenarios},
                    {"density", rc.dist.density},
                    {"palette_id", rc.dist.palette_id},
                    {"checkpoint_every", rc.dist.checkpoint_every},
                    {"transport", rc.dist.transport}};
  j["paths"] = {{"dataset", rc.paths.dataset},
                {"copm_checkpoint", rc.paths.copm_checkpoint},
                {"policy_checkpoint", rc.paths.policy_checkpoint},
                {"metrics", rc.paths.metrics},
                {"timings", rc.paths.timings},
                {"report", rc.paths.report},
                {"trace", rc.paths.trace}};
  return j;
}

inline void write_config_echo(const RunConfig& rc, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write config echo to " + path);
  out << run_config_to_json(rc).dump(2) << "\n";
}

// --- converters into the per-module configs ---------------------------------

inline sim::CameraConfig camera_config(const RunConfig& rc) {
  return sim::CameraConfig{rc.sim.camera_h, rc.sim.camera_w,
                           rc.sim.camera_m_per_px};
}

inline sim::SimConfig sim_config(const RunConfig& rc) {
  sim::SimConfig s;
  s.dt = rc.sim.dt;
  s.blocked_after_s = rc.sim.blocked_after_s;
  s.camera = camera_config(rc);
  return s;
}

inline sim::WorldGenConfig world_config(const RunConfig& rc, bool test) {
  sim::WorldGenConfig w;
  w.seed = test ? rc.sim.test_map_seed : rc.sim.map_seed;
  w.name = test ? "test" : "train";
  return w;
}

inline obs::CollectConfig collect_config(const RunConfig& rc) {
  obs::CollectConfig c;
  c.camera = camera_config(rc);
  c.noise.probability = rc.obspipe.noise_probability;
  c.noise.lambda_st = rc.obspipe.noise_lambda;
  c.noise.throttle_floor = rc.obspipe.throttle_floor;
  c.noise.throttle_below = rc.obspipe.throttle_below;
  c.densities.clear();
  for (const auto& name : rc.obspipe.densities)
    c.densities.push_back(parse_density(name));
  c.sample_stride = rc.obspipe.sample_stride;
  c.max_episode_steps = rc.obspipe.max_episode_steps;
  return c;
}

inline copm::CopmConfig copm_config(const RunConfig& rc) {
  copm::CopmConfig c;
  c.height = rc.sim.camera_h;
  c.width = rc.sim.camera_w;
  c.base_width = rc.copm.base_width;
  c.d_att = rc.copm.d_att;
  c.no_coatt = rc.copm.no_coatt;
  c.visual_only = rc.copm.visual_only;
  c.lambda.rou = rc.copm.lambda_rou;
  c.lambda.cam = rc.copm.lambda_cam;
  c.lambda.lig = rc.copm.lambda_lig;
  c.lambda.ste = rc.copm.lambda_ste;
  c.lambda.thro = rc.copm.lambda_thro;
  return c;
}

inline copm::TrainConfig copm_train_config(const RunConfig& rc) {
  copm::TrainConfig t;
  t.epochs = rc.copm.epochs;
  t.batch_size = rc.copm.batch_size;
  t.lr = rc.copm.lr;
  t.seed = rc.copm.seed;
  t.checkpoint_base = rc.paths.copm_checkpoint;
  t.checkpoint_every = rc.copm.checkpoint_every;
  return t;
}

inline dist::DistConfig dist_config(const RunConfig& rc) {
  dist::DistConfig d;
  d.workers = rc.dist.workers;
  d.seed = rc.dist.seed;
  d.iterations = rc.dist.iterations;
  d.ppo = rc.agent.ppo;
  d.hidden = rc.agent.hidden;
  d.use_lstm = rc.agent.use_lstm;
  d.sim = sim_config(rc);
  d.reward = rc.reward;
  d.density = parse_density(rc.dist.density);
  d.palette_id = rc.dist.palette_id;
  d.schedule.per_command = rc.dist.per_command;
  d.schedule.min_len = rc.dist.route_min_len;
  d.schedule.max_len = rc.dist.route_max_len;
  d.schedule.attach_scenarios = rc.dist.attach_scenarios;
  d.copm_checkpoint = rc.paths.copm_checkpoint;
  d.checkpoint_base = rc.paths.policy_checkpoint;
  d.checkpoint_every = rc.dist.checkpoint_every;
  d.metrics_path = rc.paths.metrics;
  d.timings_path = rc.paths.timings;
  d.transport = dist::transport_from_name(rc.dist.transport);
  return d;
}

}  // namespace cadre::cfg
