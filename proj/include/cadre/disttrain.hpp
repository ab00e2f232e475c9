#pragma once

// Chief-worker distributed PPO training. N workers roll out episodes on
// disjoint route assignments, compute local gradients against a shared
// parameter snapshot, and send them to the chief, which averages by sample
// count, applies one Adam step, and broadcasts the new snapshot. The loop is
// synchronous: every parameter used within an iteration comes from the same
// snapshot, so results are reproducible bit-for-bit for a fixed seed and
// worker count regardless of thread scheduling.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <fstream>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "cadre/agent.hpp"
#include "cadre/copm.hpp"
#include "cadre/obspipe.hpp"
#include "cadre/reward.hpp"
#include "cadre/sim.hpp"

#include "httplib.h"

namespace cadre::dist {

using nn::Tensor;

enum class Transport { kInProcess = 0, kSocket = 1 };

inline const char* transport_name(Transport t) {
  return t == Transport::kSocket ? "socket" : "in-process";
}

inline Transport transport_from_name(const std::string& s) {
  if (s == "in-process") return Transport::kInProcess;
  if (s == "socket") return Transport::kSocket;
  throw ConfigError("unknown transport '" + s + "'");
}

// ---------------------------------------------------------------------------
// Gradient bundles and parameter snapshots
// ---------------------------------------------------------------------------

struct GradientBundle {
  int iteration = 0;
  int worker = 0;
  std::vector<double> grads;  // flat, aligned with the policy registry order
  std::size_t samples = 0;    // transitions behind the gradient
  double mean_reward = 0.0;
  double completion = 0.0;    // mean final completion over attempted routes
};

struct ParamSnapshot {
  int iteration = 0;
  std::vector<double> values;
};

// Binary wire format. Doubles are copied verbatim so a round trip through
// the socket transport cannot perturb results.
namespace wire {

inline void put_u64(std::string& s, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  s.append(buf, 8);
}

inline void put_f64(std::string& s, double v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  s.append(buf, 8);
}

struct Reader {
  const std::string& s;
  std::size_t pos = 0;

  std::uint64_t u64() {
    if (pos + 8 > s.size()) throw IoError("bundle payload truncated");
    std::uint64_t v;
    std::memcpy(&v, s.data() + pos, 8);
    pos += 8;
    return v;
  }
  double f64() {
    if (pos + 8 > s.size()) throw IoError("bundle payload truncated");
    double v;
    std::memcpy(&v, s.data() + pos, 8);
    pos += 8;
    return v;
  }
};

}  // namespace wire

inline std::string serialize_bundle(const GradientBundle& b) {
  std::string s = "CDB1";
  wire::put_u64(s, static_cast<std::uint64_t>(b.iteration));
  wire::put_u64(s, static_cast<std::uint64_t>(b.worker));
  wire::put_u64(s, b.samples);
  wire::put_f64(s, b.mean_reward);
  wire::put_f64(s, b.completion);
  wire::put_u64(s, b.grads.size());
  for (double g : b.grads) wire::put_f64(s, g);
  return s;
}

inline GradientBundle parse_bundle(const std::string& s) {
  if (s.size() < 4 || s.compare(0, 4, "CDB1") != 0)
    throw IoError("not a gradient bundle payload");
  wire::Reader r{s, 4};
  GradientBundle b;
  b.iteration = static_cast<int>(r.u64());
  b.worker = static_cast<int>(r.u64());
  b.samples = r.u64();
  b.mean_reward = r.f64();
  b.completion = r.f64();
  const std::uint64_t n = r.u64();
  b.grads.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) b.grads[i] = r.f64();
  if (r.pos != s.size()) throw IoError("trailing bytes in bundle payload");
  return b;
}

inline std::string serialize_snapshot(const ParamSnapshot& p) {
  std::string s = "CDS1";
  wire::put_u64(s, static_cast<std::uint64_t>(p.iteration));
  wire::put_u64(s, p.values.size());
  for (double v : p.values) wire::put_f64(s, v);
  return s;
}

inline ParamSnapshot parse_snapshot(const std::string& s) {
  if (s.size() < 4 || s.compare(0, 4, "CDS1") != 0)
    throw IoError("not a parameter snapshot payload");
  wire::Reader r{s, 4};
  ParamSnapshot p;
  p.iteration = static_cast<int>(r.u64());
  const std::uint64_t n = r.u64();
  p.values.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) p.values[i] = r.f64();
  if (r.pos != s.size()) throw IoError("trailing bytes in snapshot payload");
  return p;
}

// ---------------------------------------------------------------------------
// Training schedule
// ---------------------------------------------------------------------------

struct ShortRoute {
  sim::Route route;
  std::vector<sim::ScenarioSpec> scenarios;
};

struct ScheduleConfig {
  int per_command = 28;  // 4 commands x 28 = 112 short routes
  double min_len = 50.0;
  double max_len = 200.0;
  bool attach_scenarios = true;
};

struct TrainingSchedule {
  std::vector<ShortRoute> routes;
  std::vector<std::vector<int>> assignment;  // worker -> route indices
  int resume_cap = 5;  // failure resumes per route per iteration
};

// Splits the long routes into a command-balanced short-route set, plants one
// avoidance scenario per route at a seeded trigger point, and deals routes
// round-robin across workers.
inline TrainingSchedule build_schedule(const sim::WorldMap& world,
                                       std::uint64_t seed, int workers,
                                       const ScheduleConfig& cfg = {}) {
  if (workers < 1) throw ConfigError("build_schedule: need at least 1 worker");
  std::vector<sim::Route> shorts = sim::build_short_routes(
      world, seed, cfg.per_command, cfg.min_len, cfg.max_len);
  if (static_cast<int>(shorts.size()) < workers)
    throw ConfigError("build_schedule: fewer routes than workers");

  TrainingSchedule out;
  out.routes.reserve(shorts.size());
  Rng rng(derive_seed(seed, "scenarios"));
  for (auto& r : shorts) {
    ShortRoute sr;
    sr.route = std::move(r);
    if (cfg.attach_scenarios) {
      const double len = sr.route.length();
      sim::ScenarioSpec spec;
      spec.kind = rng.uniform01() < 0.5 ? sim::ScenarioKind::VehicleBlock
                                        : sim::ScenarioKind::PedestrianCross;
      spec.route_id = sr.route.id;
      spec.trigger_s = rng.uniform(0.25, 0.6) * len;
      spec.ahead_m = rng.uniform(16.0, 24.0);
      spec.variant = static_cast<int>(rng.uniform_int(6));
      sr.scenarios.push_back(spec);
    }
    out.routes.push_back(std::move(sr));
  }
  out.assignment.assign(static_cast<std::size_t>(workers), {});
  for (std::size_t i = 0; i < out.routes.size(); ++i)
    out.assignment[i % static_cast<std::size_t>(workers)].push_back(
        static_cast<int>(i));
  return out;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct DistConfig {
  int workers = 4;
  std::uint64_t seed = 1;
  int iterations = 10;  // chief steps; the sample budget is
                        // iterations * workers * ppo.horizon
  agent::PpoConfig ppo;
  std::size_t hidden = 64;
  bool use_lstm = true;
  sim::SimConfig sim;
  reward::RewardConfig reward;
  sim::Density density = sim::Density::Empty;
  int palette_id = 0;
  ScheduleConfig schedule;
  std::string copm_checkpoint;  // frozen perception weights (required)
  std::string checkpoint_base;  // policy checkpoints (optional)
  int checkpoint_every = 0;     // iterations; 0 disables periodic saves
  // Metrics are line-delimited JSON and contain no wall-clock data, so two
  // runs with the same config produce byte-identical files. Timing goes to
  // the separate sidecar.
  std::string metrics_path;
  std::string timings_path;
  Transport transport = Transport::kInProcess;
  // Test hook: makes a worker throw on its first fault_count attempts of the
  // given iteration, to exercise the retry path.
  int fault_iteration = -1;
  int fault_worker = -1;
  int fault_count = 0;
};

inline void validate_dist_config(const DistConfig& c) {
  if (c.workers < 1) throw ConfigError("dist: need at least 1 worker");
  if (c.iterations < 1) throw ConfigError("dist: need at least 1 iteration");
  if (c.hidden == 0) throw ConfigError("dist: hidden must be > 0");
  if (c.checkpoint_every < 0)
    throw ConfigError("dist: checkpoint_every must be >= 0");
  agent::validate_ppo_config(c.ppo);
  sim::validate_camera(c.sim.camera);
}

// ---------------------------------------------------------------------------
// Local gradient computation
// ---------------------------------------------------------------------------

struct LocalBatch {
  std::vector<agent::Transition> transitions;
  std::vector<double> returns;
  std::vector<double> advantages;
};

// Accumulated PPO gradient over the batch at fixed parameters. Every
// minibatch pass contributes weight |mb| / (n * epochs), so the result is
// exactly the gradient of the mean loss over the whole batch; this is what
// makes the chief's sample-count-weighted average over disjoint worker
// batches equal the single-worker full-batch gradient.
inline std::vector<double> ppo_gradient(
    agent::PolicyNet& net, const LocalBatch& batch,
    const agent::PpoConfig& cfg, std::uint64_t shuffle_seed,
    agent::PpoLossBreakdown* breakdown = nullptr) {
  const std::size_t n = batch.transitions.size();
  if (n == 0) throw InputError("ppo_gradient: empty batch");
  if (batch.returns.size() != n || batch.advantages.size() != n)
    throw DimensionError("ppo_gradient: returns/advantages length mismatch");

  net.params().zero_grad();
  agent::PpoLossBreakdown acc;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t mb = std::min<std::size_t>(
      static_cast<std::size_t>(cfg.minibatch), n);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(shuffle_seed, "epoch", static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(i)]);
    for (std::size_t beg = 0; beg < n; beg += mb) {
      const std::size_t m = std::min(mb, n - beg);
      std::vector<agent::Transition> chunk;
      std::vector<double> rets, advs;
      chunk.reserve(m);
      rets.reserve(m);
      advs.reserve(m);
      for (std::size_t k = 0; k < m; ++k) {
        const std::size_t j = order[beg + k];
        chunk.push_back(batch.transitions[j]);
        rets.push_back(batch.returns[j]);
        advs.push_back(batch.advantages[j]);
      }
      agent::PpoLossBreakdown bd;
      Tensor loss = agent::ppo_loss(net, chunk, rets, advs, cfg, &bd);
      const double w = static_cast<double>(m) /
                       (static_cast<double>(n) * cfg.epochs);
      Tensor scaled = nn::scale(loss, w);
      net.tape().backward(scaled);
      net.tape().clear();
      acc.policy += w * bd.policy;
      acc.value += w * bd.value;
      acc.entropy += w * bd.entropy;
      acc.total += w * bd.total;
    }
  }
  if (breakdown) *breakdown = acc;
  return net.params().flatten_grads();
}

// ---------------------------------------------------------------------------
// Worker
// ---------------------------------------------------------------------------

// Everything one worker needs to roll out and compute gradients: its own
// frozen perception net, policy replica, and simulator. Nothing here is
// shared with other workers, so workers can run on concurrent threads.
class WorkerEnv {
 public:
  WorkerEnv(int id, const sim::WorldMap& world, const TrainingSchedule& sched,
            const DistConfig& cfg)
      : id_(id), world_(&world), sched_(&sched), cfg_(&cfg) {
    validate_dist_config(cfg);
    if (cfg.copm_checkpoint.empty())
      throw ConfigError("worker: perception checkpoint path required");
    nn::CheckpointInfo info;
    copm_ = std::make_unique<copm::CopmNet>(
        copm::CopmNet::config_from_meta(
            nn::read_checkpoint_meta(cfg.copm_checkpoint)),
        0);
    copm_->load(cfg.copm_checkpoint);
    const std::size_t cam_pixels =
        static_cast<std::size_t>(cfg.sim.camera.h) * cfg.sim.camera.w;
    if (copm_->input_size() != cam_pixels * obs::kModelChannels)
      throw LoadError(
          "perception checkpoint input shape does not match the camera");
    input_dim_ = agent::kMeasurementDim + copm_->z_dim();
    agent::PolicyConfig pc;
    pc.input_dim = input_dim_;
    pc.hidden = cfg.hidden;
    pc.use_lstm = cfg.use_lstm;
    policy_ = std::make_unique<agent::PolicyNet>(
        pc, derive_seed(cfg.seed, "policy"));
    sim_ = std::make_unique<sim::Simulator>(world, cfg.sim);
    if (sched.assignment.size() <= static_cast<std::size_t>(id_) ||
        sched.assignment[static_cast<std::size_t>(id_)].empty())
      throw ConfigError("worker " + std::to_string(id_) +
                        " has no assigned routes");
  }

  int id() const { return id_; }
  std::size_t input_dim() const { return input_dim_; }
  std::size_t param_count() const { return policy_->params().total_size(); }
  std::uint64_t copm_hash() const { return copm_->params().value_hash(); }
  agent::PolicyNet& policy() { return *policy_; }

  // One full worker iteration: load the snapshot, roll out up to horizon
  // transitions across the assigned routes (resuming from the failure
  // location after bad events), then compute the local PPO gradient.
  GradientBundle run_iteration(const ParamSnapshot& snap,
                               std::atomic<int>* fault_budget = nullptr) {
    const int iteration = snap.iteration;
    if (fault_budget && cfg_->fault_count > 0 && id_ == cfg_->fault_worker &&
        iteration == cfg_->fault_iteration && fault_budget->fetch_sub(1) > 0)
      throw std::runtime_error("injected worker fault (test hook)");
    if (cfg_->ppo.horizon < 1)
      throw InputError("worker iteration needs a positive horizon");
    policy_->params().load_values(snap.values);

    const auto& assigned = sched_->assignment[static_cast<std::size_t>(id_)];
    const std::size_t horizon = static_cast<std::size_t>(cfg_->ppo.horizon);
    Rng act_rng(derive_seed(cfg_->seed, "act",
                            static_cast<std::uint64_t>(id_),
                            static_cast<std::uint64_t>(iteration)));
    std::vector<agent::Transition> traj;
    traj.reserve(horizon);
    std::vector<double> route_completions;
    agent::FrameBuffer buf(input_dim_);
    double tail_value = 0.0;
    double partial_completion = 0.0;
    int route_ordinal = 0;
    std::uint64_t ep_counter = 0;

    while (traj.size() < horizon) {
      const int ridx = assigned[static_cast<std::size_t>(
          (iteration + route_ordinal) % static_cast<int>(assigned.size()))];
      const ShortRoute& sr = sched_->routes[static_cast<std::size_t>(ridx)];
      double start_s = 0.0;
      int resumes = 0;
      double final_completion = 0.0;
      bool route_done = false;
      bool cut = false;

      while (!route_done && traj.size() < horizon) {
        sim::EpisodeOptions opt;
        opt.density = cfg_->density;
        opt.scenarios = sr.scenarios;
        opt.start_s = start_s;
        opt.palette_id = cfg_->palette_id;
        opt.seed = derive_seed(cfg_->seed, "episode",
                               static_cast<std::uint64_t>(id_) * 1000003u +
                                   static_cast<std::uint64_t>(iteration),
                               ep_counter++);
        sim_->start_episode(sr.route, opt);
        buf.reset();
        sim::SensorFrame sensors = sim_->initial_sensors();
        sim::Event last_event = sim::Event::None;

        while (last_event == sim::Event::None && traj.size() < horizon) {
          const std::vector<double> window = observe(sensors, buf);
          const agent::PolicyNet::Evaluation ev = policy_->evaluate(window);
          const agent::SampledAction sa =
              agent::sample_action(ev.steer_logits, ev.long_logits, act_rng);
          const agent::Controls c = agent::decode_action(sa.action);
          const sim::StepResult res = sim_->step(c.steer, c.throttle, c.brake);
          const reward::RewardBreakdown rb =
              reward::step_reward(res, cfg_->reward);

          agent::Transition tr;
          tr.window = window;
          tr.action = sa.action;
          tr.log_prob = sa.log_prob;
          tr.value = ev.value;
          tr.reward = rb.total;
          tr.done = res.event != sim::Event::None;
          traj.push_back(std::move(tr));

          last_event = res.event;
          sensors = res.sensors;
          final_completion = res.sensors.metrics.completion;
        }

        if (last_event == sim::Event::None) {
          // Horizon cut mid-episode: bootstrap from the next state's value.
          const std::vector<double> window = observe(sensors, buf);
          tail_value = policy_->evaluate(window).value;
          cut = true;
          break;
        }
        if (last_event == sim::Event::Success) {
          route_done = true;
        } else if (resumes < sched_->resume_cap) {
          ++resumes;
          start_s = sim_->progress_s();
        } else {
          route_done = true;
        }
      }
      // Only attempts that reached a terminal event count toward the
      // completion metric; an attempt truncated by the rollout window says
      // nothing about how far the policy would have driven. Keep the last
      // partial value as a fallback so the metric is defined even when the
      // window is shorter than every episode.
      if (cut)
        partial_completion = final_completion;
      else
        route_completions.push_back(final_completion);
      ++route_ordinal;
    }
    if (route_completions.empty())
      route_completions.push_back(partial_completion);

    const agent::AdvantageResult adv = agent::compute_advantages(
        traj, cfg_->ppo.gamma, tail_value, cfg_->ppo.adv_eps);
    LocalBatch batch;
    batch.transitions = std::move(traj);
    batch.returns = adv.returns;
    batch.advantages = adv.advantages;

    GradientBundle b;
    b.iteration = iteration;
    b.worker = id_;
    b.samples = batch.transitions.size();
    double reward_sum = 0.0;
    for (const auto& tr : batch.transitions) reward_sum += tr.reward;
    b.mean_reward = reward_sum / static_cast<double>(batch.transitions.size());
    double comp_sum = 0.0;
    for (double c : route_completions) comp_sum += c;
    b.completion = comp_sum / static_cast<double>(route_completions.size());
    b.grads = ppo_gradient(*policy_, batch, cfg_->ppo,
                           derive_seed(cfg_->seed, "shuffle",
                                       static_cast<std::uint64_t>(id_),
                                       static_cast<std::uint64_t>(iteration)));
    return b;
  }

 private:
  // Perception + measurement fusion for the current frame, pushed into the
  // rolling window.
  std::vector<double> observe(const sim::SensorFrame& sensors,
                              agent::FrameBuffer& buf) {
    obs::Measurements m;
    const sim::EgoState& ego = sim_->ego();
    m.prev_steer = ego.steer;
    m.prev_throttle = ego.throttle;
    m.prev_brake = ego.brake;
    m.v = ego.v;
    m.theta_deg = sensors.metrics.theta_deg;
    m.d_m = sensors.metrics.d_m;
    const std::vector<geom::Vec2> wps = obs::lookahead_waypoints(*sim_);
    const std::vector<double> input =
        obs::make_model_input(sensors.camera.rgb, wps, cfg_->sim.camera);
    buf.push(agent::assemble_state(m, copm_->infer(input)));
    return buf.window();
  }

  int id_;
  const sim::WorldMap* world_;
  const TrainingSchedule* sched_;
  const DistConfig* cfg_;
  std::unique_ptr<copm::CopmNet> copm_;
  std::unique_ptr<agent::PolicyNet> policy_;
  std::unique_ptr<sim::Simulator> sim_;
  std::size_t input_dim_ = 0;
};

inline GradientBundle worker_iteration(WorkerEnv& env,
                                       const ParamSnapshot& snap) {
  return env.run_iteration(snap);
}

// ---------------------------------------------------------------------------
// Chief
// ---------------------------------------------------------------------------

// Validates one bundle per worker for the expected iteration and averages
// the gradients weighted by sample count. Accumulation runs in worker-id
// order so the result does not depend on arrival order.
inline std::vector<double> weighted_average(
    const std::vector<GradientBundle>& bundles, std::size_t param_count,
    int workers, int iteration) {
  if (static_cast<int>(bundles.size()) != workers)
    throw SyncError("chief: expected " + std::to_string(workers) +
                    " bundles, got " + std::to_string(bundles.size()));
  std::vector<const GradientBundle*> by_worker(
      static_cast<std::size_t>(workers), nullptr);
  for (const auto& b : bundles) {
    if (b.iteration != iteration)
      throw SyncError("chief: bundle for iteration " +
                      std::to_string(b.iteration) + " during iteration " +
                      std::to_string(iteration));
    if (b.worker < 0 || b.worker >= workers)
      throw SyncError("chief: bundle from unknown worker " +
                      std::to_string(b.worker));
    if (by_worker[static_cast<std::size_t>(b.worker)])
      throw SyncError("chief: duplicate bundle from worker " +
                      std::to_string(b.worker));
    if (b.grads.size() != param_count)
      throw DimensionError("chief: gradient length " +
                           std::to_string(b.grads.size()) + ", expected " +
                           std::to_string(param_count));
    if (b.samples == 0)
      throw SyncError("chief: bundle from worker " +
                      std::to_string(b.worker) + " carries no samples");
    by_worker[static_cast<std::size_t>(b.worker)] = &b;
  }
  double total = 0.0;
  for (const auto* b : by_worker) total += static_cast<double>(b->samples);
  std::vector<double> avg(param_count, 0.0);
  for (const auto* b : by_worker) {
    const double w = static_cast<double>(b->samples) / total;
    for (std::size_t i = 0; i < param_count; ++i) avg[i] += w * b->grads[i];
  }
  return avg;
}

class Chief {
 public:
  Chief(agent::PolicyNet& net, const agent::PpoConfig& ppo) : net_(&net) {
    nn::AdamConfig ac;
    ac.lr = ppo.lr;
    opt_ = std::make_unique<nn::Adam>(net.params(), ac);
  }

  // One synchronization point: average, Adam step, broadcast snapshot.
  std::vector<double> step(const std::vector<GradientBundle>& bundles,
                           int workers, int iteration) {
    const std::vector<double> avg = weighted_average(
        bundles, net_->params().total_size(), workers, iteration);
    net_->params().load_grads(avg);
    opt_->step(net_->params());
    ++steps_;
    return net_->params().flatten_values();
  }

  long steps() const { return steps_; }

 private:
  agent::PolicyNet* net_;
  std::unique_ptr<nn::Adam> opt_;
  long steps_ = 0;
};

// ---------------------------------------------------------------------------
// Transports
// ---------------------------------------------------------------------------

namespace detail {

// Loopback HTTP hub for the socket transport. The chief publishes the
// snapshot before workers start, workers GET it and POST their bundles
// back. Payloads ride the binary wire format, so socket and in-process
// runs produce identical numbers.
class SocketHub {
 public:
  explicit SocketHub(int workers) : workers_(workers) {
    server_.Post("/bundle",
                 [this](const httplib::Request& req, httplib::Response& res) {
                   {
                     std::lock_guard<std::mutex> lock(mu_);
                     inbox_.push_back(parse_bundle(req.body));
                   }
                   cv_.notify_all();
                   res.set_content("ok", "text/plain");
                 });
    server_.Get("/snapshot",
                [this](const httplib::Request&, httplib::Response& res) {
                  std::lock_guard<std::mutex> lock(mu_);
                  res.set_content(snapshot_blob_, "application/octet-stream");
                });
    port_ = server_.bind_to_any_port("127.0.0.1");
    if (port_ <= 0)
      throw IoError("socket transport: cannot bind a loopback port");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~SocketHub() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }

  void publish(const ParamSnapshot& snap) {
    std::lock_guard<std::mutex> lock(mu_);
    snapshot_blob_ = serialize_snapshot(snap);
    inbox_.clear();
    failures_.clear();
  }

  void fail(int worker, const std::string& what) {
    {
      std::lock_guard<std::mutex> lock(mu_);
      failures_.push_back("worker " + std::to_string(worker) + ": " + what);
    }
    cv_.notify_all();
  }

  // Blocks until every worker reported either a bundle or a failure.
  std::vector<GradientBundle> gather() {
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [this] {
      return inbox_.size() + failures_.size() >=
             static_cast<std::size_t>(workers_);
    });
    if (!failures_.empty()) throw std::runtime_error(failures_.front());
    return inbox_;
  }

 private:
  int workers_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::mutex mu_;
  std::condition_variable cv_;
  std::string snapshot_blob_;
  std::vector<GradientBundle> inbox_;
  std::vector<std::string> failures_;
};

inline std::vector<GradientBundle> run_workers_inprocess(
    std::vector<std::unique_ptr<WorkerEnv>>& envs, const ParamSnapshot& snap,
    std::atomic<int>* fault_budget) {
  const std::size_t n = envs.size();
  std::vector<std::optional<GradientBundle>> slots(n);
  std::vector<std::string> errors(n);
  std::vector<std::thread> threads;
  threads.reserve(n);
  for (std::size_t w = 0; w < n; ++w)
    threads.emplace_back([&, w] {
      try {
        slots[w] = envs[w]->run_iteration(snap, fault_budget);
      } catch (const std::exception& e) {
        errors[w] = e.what();
      }
    });
  for (auto& t : threads) t.join();
  std::vector<GradientBundle> out;
  out.reserve(n);
  for (std::size_t w = 0; w < n; ++w) {
    if (!slots[w])
      throw std::runtime_error("worker " + std::to_string(w) +
                               ": " + errors[w]);
    out.push_back(std::move(*slots[w]));
  }
  return out;
}

inline std::vector<GradientBundle> run_workers_socket(
    std::vector<std::unique_ptr<WorkerEnv>>& envs, const ParamSnapshot& snap,
    std::atomic<int>* fault_budget, SocketHub& hub) {
  hub.publish(snap);
  std::vector<std::thread> threads;
  threads.reserve(envs.size());
  for (auto& env : envs)
    threads.emplace_back([&hub, &env, fault_budget] {
      try {
        httplib::Client cli("127.0.0.1", hub.port());
        auto sres = cli.Get("/snapshot");
        if (!sres || sres->status != 200)
          throw IoError("snapshot fetch failed");
        const ParamSnapshot remote = parse_snapshot(sres->body);
        const GradientBundle b = env->run_iteration(remote, fault_budget);
        auto pres = cli.Post("/bundle", serialize_bundle(b),
                             "application/octet-stream");
        if (!pres || pres->status != 200)
          throw IoError("bundle upload failed");
      } catch (const std::exception& e) {
        hub.fail(env->id(), e.what());
      }
    });
  for (auto& t : threads) t.join();
  return hub.gather();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct WorkerStat {
  int worker = 0;
  std::size_t samples = 0;
  double mean_reward = 0.0;
  double completion = 0.0;
};

struct IterationRow {
  int iteration = 0;        // 1-based, strictly increasing
  double completion = 0.0;  // sample-weighted over workers
  double mean_reward = 0.0;
  std::uint64_t params_hash = 0;  // post-step snapshot
  std::vector<WorkerStat> workers;
};

inline nlohmann::json row_to_json(const IterationRow& row) {
  nlohmann::json j;
  j["iteration"] = row.iteration;
  j["completion"] = row.completion;
  j["mean_reward"] = row.mean_reward;
  j["params"] = hash_hex(row.params_hash);
  nlohmann::json ws = nlohmann::json::array();
  for (const auto& w : row.workers) {
    nlohmann::json e;
    e["id"] = w.worker;
    e["samples"] = w.samples;
    e["mean_reward"] = w.mean_reward;
    e["completion"] = w.completion;
    ws.push_back(e);
  }
  j["workers"] = ws;
  return j;
}

struct TrainResult {
  std::vector<IterationRow> rows;
  long chief_steps = 0;
  double best_completion = 0.0;
  int best_iteration = 0;
  std::uint64_t copm_hash_before = 0;
  std::uint64_t copm_hash_after = 0;
  std::vector<double> final_params;
  std::string policy_checkpoint;  // final save path, when configured
};

inline TrainResult train(const sim::WorldMap& world, const DistConfig& cfg) {
  validate_dist_config(cfg);
  if (cfg.copm_checkpoint.empty())
    throw ConfigError("train: perception checkpoint path required");

  const TrainingSchedule sched = build_schedule(
      world, derive_seed(cfg.seed, "schedule"), cfg.workers, cfg.schedule);
  std::vector<std::unique_ptr<WorkerEnv>> envs;
  envs.reserve(static_cast<std::size_t>(cfg.workers));
  for (int w = 0; w < cfg.workers; ++w)
    envs.push_back(std::make_unique<WorkerEnv>(w, world, sched, cfg));

  TrainResult out;
  out.copm_hash_before = envs[0]->copm_hash();

  agent::PolicyConfig pc;
  pc.input_dim = envs[0]->input_dim();
  pc.hidden = cfg.hidden;
  pc.use_lstm = cfg.use_lstm;
  auto chief_net = std::make_unique<agent::PolicyNet>(
      pc, derive_seed(cfg.seed, "policy"));
  Chief chief(*chief_net, cfg.ppo);

  std::ofstream metrics, timings;
  if (!cfg.metrics_path.empty()) {
    metrics.open(cfg.metrics_path, std::ios::trunc);
    if (!metrics) throw IoError("cannot open " + cfg.metrics_path);
  }
  if (!cfg.timings_path.empty()) {
    timings.open(cfg.timings_path, std::ios::trunc);
    if (!timings) throw IoError("cannot open " + cfg.timings_path);
  }

  std::atomic<int> fault_budget{cfg.fault_count};
  std::optional<detail::SocketHub> hub;
  if (cfg.transport == Transport::kSocket) hub.emplace(cfg.workers);

  for (int it = 0; it < cfg.iterations; ++it) {
    const ParamSnapshot snap{it, chief_net->params().flatten_values()};
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<GradientBundle> bundles;
    for (int attempt = 0;; ++attempt) {
      try {
        bundles = hub ? detail::run_workers_socket(envs, snap, &fault_budget,
                                                   *hub)
                      : detail::run_workers_inprocess(envs, snap,
                                                      &fault_budget);
        break;
      } catch (const std::exception& e) {
        if (attempt >= 1)
          throw std::runtime_error(
              "training aborted: iteration " + std::to_string(it + 1) +
              " failed twice (" + e.what() + ")");
        if (timings)
          timings << "iteration " << (it + 1) << " retry after: " << e.what()
                  << "\n";
      }
    }

    chief.step(bundles, cfg.workers, it);

    IterationRow row;
    row.iteration = it + 1;
    double total = 0.0;
    for (const auto& b : bundles) {
      WorkerStat ws;
      ws.worker = b.worker;
      ws.samples = b.samples;
      ws.mean_reward = b.mean_reward;
      ws.completion = b.completion;
      row.workers.push_back(ws);
      const double n = static_cast<double>(b.samples);
      row.completion += n * b.completion;
      row.mean_reward += n * b.mean_reward;
      total += n;
    }
    std::sort(row.workers.begin(), row.workers.end(),
              [](const WorkerStat& a, const WorkerStat& b) {
                return a.worker < b.worker;
              });
    row.completion /= total;
    row.mean_reward /= total;
    row.params_hash = chief_net->params().value_hash();
    out.rows.push_back(row);

    if (metrics) {
      metrics << row_to_json(row).dump() << "\n";
      metrics.flush();
    }
    if (timings) {
      const double ms = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t0)
                            .count();
      timings << "iteration " << (it + 1) << " wall_ms " << ms << "\n";
      timings.flush();
    }

    if (out.rows.size() == 1 || row.completion > out.best_completion) {
      out.best_completion = row.completion;
      out.best_iteration = row.iteration;
      if (!cfg.checkpoint_base.empty())
        chief_net->save(cfg.checkpoint_base + ".best", row.iteration);
    }
    if (!cfg.checkpoint_base.empty() && cfg.checkpoint_every > 0 &&
        (it + 1) % cfg.checkpoint_every == 0)
      chief_net->save(cfg.checkpoint_base + ".i" + std::to_string(it + 1),
                      row.iteration);
  }

  out.chief_steps = chief.steps();
  for (const auto& env : envs)
    if (env->copm_hash() != out.copm_hash_before)
      throw std::logic_error("frozen perception parameters changed");
  out.copm_hash_after = envs[0]->copm_hash();
  out.final_params = chief_net->params().flatten_values();
  if (!cfg.checkpoint_base.empty()) {
    out.policy_checkpoint = cfg.checkpoint_base + ".final";
    chief_net->save(out.policy_checkpoint, cfg.iterations);
  }
  return out;
}

}  // namespace cadre::dist
