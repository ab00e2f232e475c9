// cadre command line front end. Five subcommands cover the pipeline: collect
// (expert dataset), train-copm (offline perception), train-ppo (distributed
// policy training on the frozen perception), eval (benchmark suites on the
// held-out map), and trace (single-episode replay dump). Every run writes a
// fully resolved config echo next to its primary output so results can be
// reproduced from the echo alone.
//
// Exit codes: 0 success, 2 usage (bad flags, bad config, missing inputs),
// 3 stage order (PPO before perception training), 4 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cadre/config.hpp"
#include "cadre/evalbench.hpp"

namespace fs = std::filesystem;
using namespace cadre;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StageOrderError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// CADRE_LOG=quiet|info|debug; default info. debug additionally prints the
// resolved config to stdout.
int log_level() {
  const char* v = std::getenv("CADRE_LOG");
  if (!v) return 1;
  const std::string s(v);
  if (s == "quiet") return 0;
  if (s == "debug") return 2;
  return 1;
}

void echo_config(const cfg::RunConfig& rc, const std::string& path) {
  cfg::write_config_echo(rc, path);
  if (log_level() >= 2)
    std::cout << cfg::run_config_to_json(rc).dump(2) << "\n";
  if (log_level() >= 1) std::cout << "config echo: " << path << "\n";
}

bool checkpoint_exists(const std::string& base) {
  return fs::exists(base + ".json") && fs::exists(base + ".bin");
}

// Accepts either an exact checkpoint base or the base a training run was
// given (in which case the `.final` save is picked up).
std::string resolve_checkpoint(const std::string& base, const char* what) {
  if (checkpoint_exists(base)) return base;
  if (checkpoint_exists(base + ".final")) return base + ".final";
  throw UsageError(std::string(what) + " checkpoint not found at " + base);
}

std::unique_ptr<bench::Driver> make_driver(const std::string& name,
                                           const cfg::RunConfig& rc,
                                           const std::string& policy_base,
                                           const std::string& copm_base,
                                           std::uint64_t seed) {
  if (name == "autopilot") return std::make_unique<bench::AutopilotDriver>();
  if (name == "zero") return std::make_unique<bench::ZeroDriver>();
  if (name == "copm")
    return std::make_unique<bench::CopmDriver>(
        resolve_checkpoint(copm_base, "perception"), cfg::camera_config(rc));
  if (name == "agent")
    return std::make_unique<bench::AgentDriver>(
        resolve_checkpoint(copm_base, "perception"),
        resolve_checkpoint(policy_base, "policy"), cfg::camera_config(rc),
        /*greedy=*/true, seed);
  throw UsageError("unknown driver '" + name +
                   "' (expected agent, copm, autopilot, or zero)");
}

void ensure_parent_dir(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

// --- collect ----------------------------------------------------------------

int cmd_collect(const cfg::RunConfig& rc, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const sim::WorldMap world = sim::generate_world(cfg::world_config(rc, false));
  const obs::Manifest m =
      obs::collect_dataset(world, world.routes, rc.obspipe.samples,
                           rc.obspipe.seed, out_dir, cfg::collect_config(rc));
  echo_config(rc, out_dir + "/run_config.json");
  std::cout << "collected " << m.count << " samples into " << out_dir << "\n";
  std::cout << "manifest hash " << obs::manifest_hash(m) << "\n";
  return 0;
}

// --- train-copm ---------------------------------------------------------------

int cmd_train_copm(const cfg::RunConfig& rc, const std::string& dataset_dir,
                   const std::string& out_base) {
  const obs::DatasetStore store = obs::DatasetStore::load(dataset_dir);

  // The net is sized from the dataset it will be trained on, not from the
  // camera section, so stale configs cannot produce a mismatched model.
  copm::CopmConfig cc = cfg::copm_config(rc);
  cc.height = store.camera.h;
  cc.width = store.camera.w;

  // Seeded shuffle, then the tail fraction becomes the holdout split.
  std::vector<std::size_t> order(store.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(rc.copm.seed, "holdout"));
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.uniform_int(i)]);
  const std::size_t n_hold =
      static_cast<std::size_t>(rc.copm.holdout *
                               static_cast<double>(order.size()));
  std::vector<obs::DatasetSample> train_set, hold_set;
  train_set.reserve(order.size() - n_hold);
  hold_set.reserve(n_hold);
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < order.size() - n_hold ? train_set : hold_set)
        .push_back(store.samples[order[i]]);
  if (train_set.empty()) throw UsageError("dataset too small to train on");

  ensure_parent_dir(out_base);
  auto net = std::make_unique<copm::CopmNet>(cc, derive_seed(rc.copm.seed,
                                                             "copm_init"));
  copm::TrainConfig tc = cfg::copm_train_config(rc);
  tc.checkpoint_base = out_base;
  const copm::TrainResult res = copm::train_offline(*net, train_set, tc);

  if (log_level() >= 1)
    for (const auto& e : res.epochs)
      std::cout << "epoch " << e.epoch << " loss " << e.mean.total << "\n";
  const double first = res.epochs.front().mean.total;
  const double last = res.epochs.back().mean.total;
  std::cout << "loss " << first << " -> " << last << " over "
            << res.epochs.size() << " epochs (" << res.steps << " steps)\n";
  const double acc =
      copm::seg_pixel_accuracy(*net, hold_set.empty() ? train_set : hold_set);
  std::cout << (hold_set.empty() ? "train" : "holdout")
            << " segmentation pixel accuracy " << acc << "\n";
  echo_config(rc, out_base + ".config.json");
  std::cout << "perception checkpoint " << out_base << "\n";
  return 0;
}

// --- train-ppo ----------------------------------------------------------------

int cmd_train_ppo(const cfg::RunConfig& rc, const std::string& copm_base,
                  const std::string& out_base) {
  if (!checkpoint_exists(copm_base))
    throw StageOrderError("perception checkpoint " + copm_base +
                          " not found; run train-copm first");
  ensure_parent_dir(out_base);
  ensure_parent_dir(rc.paths.metrics);
  const sim::WorldMap world = sim::generate_world(cfg::world_config(rc, false));
  dist::DistConfig dc = cfg::dist_config(rc);
  dc.copm_checkpoint = copm_base;
  dc.checkpoint_base = out_base;
  const dist::TrainResult res = dist::train(world, dc);

  if (log_level() >= 1)
    for (const auto& row : res.rows)
      std::cout << "iteration " << row.iteration << " completion "
                << row.completion << " mean_reward " << row.mean_reward
                << "\n";
  std::cout << "best completion " << res.best_completion << " at iteration "
            << res.best_iteration << "\n";
  std::cout << "perception frozen: "
            << (res.copm_hash_before == res.copm_hash_after ? "yes" : "NO")
            << "\n";
  echo_config(rc, out_base + ".config.json");
  std::cout << "policy checkpoint " << res.policy_checkpoint << "\n";
  return 0;
}

// --- eval ---------------------------------------------------------------------

int cmd_eval(const cfg::RunConfig& rc, const std::string& suite,
             const std::string& driver_name, const std::string& policy_base,
             const std::string& copm_base, int max_routes, int reps,
             std::uint64_t seed, const std::string& out_path) {
  const std::unique_ptr<bench::Driver> driver =
      make_driver(driver_name, rc, policy_base, copm_base, seed);
  const sim::WorldMap world = sim::generate_world(cfg::world_config(rc, true));
  const sim::SimConfig scfg = cfg::sim_config(rc);
  bench::SuiteOptions opt;
  opt.seed = seed;
  opt.max_routes = max_routes;
  opt.repetitions = reps;
  opt.reward = rc.reward;

  bench::BenchmarkReport rep;
  if (suite == "nocrash-analog")
    rep = bench::run_traffic_suite(world, *driver, scfg, opt);
  else if (suite == "avoidance")
    rep = bench::run_avoidance_suite(world, *driver, scfg, opt);
  else
    throw UsageError("unknown suite '" + suite +
                     "' (expected nocrash-analog or avoidance)");

  ensure_parent_dir(out_path);
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw IoError("cannot write report to " + out_path);
  out << bench::report_to_json(rep).dump(2) << "\n";
  std::cout << bench::report_table(rep);
  echo_config(rc, out_path + ".config.json");
  std::cout << "report " << out_path << "\n";
  return 0;
}

// --- trace --------------------------------------------------------------------

int cmd_trace(const cfg::RunConfig& rc, int route_id,
              const std::string& driver_name, const std::string& policy_base,
              const std::string& copm_base, const std::string& density,
              bool test_map, std::uint64_t seed, long max_steps,
              const std::string& out_path) {
  const std::unique_ptr<bench::Driver> driver =
      make_driver(driver_name, rc, policy_base, copm_base, seed);
  const sim::WorldMap world =
      sim::generate_world(cfg::world_config(rc, test_map));
  const sim::Route* route = nullptr;
  for (const auto& r : world.routes)
    if (r.id == route_id) route = &r;
  if (!route)
    throw UsageError("unknown route id " + std::to_string(route_id) +
                     " (map has " + std::to_string(world.routes.size()) +
                     " routes)");

  const sim::SimConfig scfg = cfg::sim_config(rc);
  sim::EpisodeOptions ep;
  ep.density = cfg::parse_density(density);
  ep.seed = seed;
  long limit = max_steps;
  if (limit <= 0) {
    const long ref =
        bench::autopilot_reference_steps(world, *route, scfg, seed, 20000);
    limit = 3 * ref + 1;
  }
  const bench::TraceResult tr =
      bench::run_trace(world, *route, ep, *driver, scfg, limit, rc.reward);

  ensure_parent_dir(out_path);
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw IoError("cannot write trace to " + out_path);
  for (const auto& row : tr.rows)
    out << bench::trace_row_to_json(row).dump() << "\n";

  nlohmann::json summary;
  summary["route"] = route_id;
  summary["driver"] = driver->name();
  summary["steps"] = tr.episode.steps;
  summary["return"] = tr.episode.episode_return;
  summary["completion"] = tr.episode.completion;
  summary["event"] = sim::event_name(tr.episode.event);
  summary["success"] = tr.episode.success ? 1 : 0;
  std::ofstream sout(out_path + ".summary.json", std::ios::trunc);
  if (!sout) throw IoError("cannot write trace summary for " + out_path);
  sout << summary.dump(2) << "\n";

  std::cout << "trace " << out_path << ": " << tr.episode.steps << " steps, "
            << "return " << tr.episode.episode_return << ", completion "
            << tr.episode.completion << ", event "
            << sim::event_name(tr.episode.event) << "\n";
  echo_config(rc, out_path + ".config.json");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cadre: cascaded driving RL pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "JSON run configuration")
      ->check(CLI::ExistingFile);

  // collect
  auto* c_collect = app.add_subcommand("collect", "record an expert dataset");
  std::string collect_out;
  int collect_samples = -1;
  std::int64_t collect_seed = -1;
  c_collect->add_option("--out", collect_out, "dataset directory")->required();
  c_collect->add_option("--samples", collect_samples, "sample budget");
  c_collect->add_option("--seed", collect_seed, "collection seed");

  // train-copm
  auto* c_copm = app.add_subcommand("train-copm", "train the perception net");
  std::string copm_dataset, copm_out;
  int copm_epochs = -1;
  bool copm_no_coatt = false, copm_visual_only = false;
  c_copm->add_option("--dataset", copm_dataset, "dataset directory");
  c_copm->add_option("--out", copm_out, "checkpoint base path");
  c_copm->add_option("--epochs", copm_epochs, "training epochs");
  c_copm->add_flag("--no-coatt", copm_no_coatt,
                   "ablation: drop the cross-branch attention");
  c_copm->add_flag("--visual-only", copm_visual_only,
                   "ablation: vision branch only");

  // train-ppo
  auto* c_ppo = app.add_subcommand("train-ppo", "train the driving policy");
  std::string ppo_copm, ppo_out, ppo_transport;
  int ppo_workers = -1, ppo_iterations = -1;
  bool ppo_no_lstm = false;
  c_ppo->add_option("--copm", ppo_copm, "frozen perception checkpoint base");
  c_ppo->add_option("--out", ppo_out, "policy checkpoint base path");
  c_ppo->add_option("--workers", ppo_workers, "worker count");
  c_ppo->add_option("--iterations", ppo_iterations, "training iterations");
  c_ppo->add_option("--transport", ppo_transport,
                    "worker transport: in-process or socket");
  c_ppo->add_flag("--no-lstm", ppo_no_lstm,
                  "ablation: feed-forward policy on the newest frame");

  // eval
  auto* c_eval = app.add_subcommand("eval", "run a benchmark suite");
  std::string eval_suite = "nocrash-analog", eval_driver = "agent";
  std::string eval_policy, eval_copm, eval_out;
  int eval_max_routes = 0, eval_reps = 3;
  std::int64_t eval_seed = 1;
  c_eval->add_option("--suite", eval_suite,
                     "nocrash-analog (default) or avoidance");
  c_eval->add_option("--driver", eval_driver,
                     "agent (default), copm, autopilot, or zero");
  c_eval->add_option("--policy", eval_policy, "policy checkpoint base");
  c_eval->add_option("--copm", eval_copm, "perception checkpoint base");
  c_eval->add_option("--max-routes", eval_max_routes,
                     "limit the traffic suite to the first N routes");
  c_eval->add_option("--reps", eval_reps, "avoidance repetitions per scenario");
  c_eval->add_option("--seed", eval_seed, "evaluation seed");
  c_eval->add_option("--out", eval_out, "report path");

  // trace
  auto* c_trace = app.add_subcommand("trace", "replay one episode to a file");
  int trace_route = -1;
  std::string trace_driver = "autopilot", trace_density = "empty";
  std::string trace_policy, trace_copm, trace_out;
  bool trace_test_map = false;
  std::int64_t trace_seed = 1;
  long trace_max_steps = 0;
  c_trace->add_option("--route", trace_route, "route id to replay")
      ->required();
  c_trace->add_option("--driver", trace_driver,
                      "agent, copm, autopilot (default), or zero");
  c_trace->add_option("--density", trace_density,
                      "traffic density: empty, regular, dense");
  c_trace->add_flag("--test-map", trace_test_map,
                    "replay on the held-out map instead of the training map");
  c_trace->add_option("--policy", trace_policy, "policy checkpoint base");
  c_trace->add_option("--copm", trace_copm, "perception checkpoint base");
  c_trace->add_option("--seed", trace_seed, "episode seed");
  c_trace->add_option("--max-steps", trace_max_steps,
                      "step limit (default: 3x the autopilot reference)");
  c_trace->add_option("--out", trace_out, "trace output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    cfg::RunConfig rc = config_path.empty() ? cfg::RunConfig{}
                                            : cfg::load_run_config(config_path);
    if (*c_collect) {
      if (collect_samples >= 0) rc.obspipe.samples = collect_samples;
      if (collect_seed >= 0)
        rc.obspipe.seed = static_cast<std::uint64_t>(collect_seed);
      return cmd_collect(rc, collect_out);
    }
    if (*c_copm) {
      if (copm_epochs >= 0) rc.copm.epochs = copm_epochs;
      if (copm_no_coatt) rc.copm.no_coatt = true;
      if (copm_visual_only) rc.copm.visual_only = true;
      return cmd_train_copm(
          rc, copm_dataset.empty() ? rc.paths.dataset : copm_dataset,
          copm_out.empty() ? rc.paths.copm_checkpoint : copm_out);
    }
    if (*c_ppo) {
      if (ppo_workers >= 0) rc.dist.workers = ppo_workers;
      if (ppo_iterations >= 0) rc.dist.iterations = ppo_iterations;
      if (!ppo_transport.empty()) rc.dist.transport = ppo_transport;
      if (ppo_no_lstm) rc.agent.use_lstm = false;
      return cmd_train_ppo(
          rc, ppo_copm.empty() ? rc.paths.copm_checkpoint : ppo_copm,
          ppo_out.empty() ? rc.paths.policy_checkpoint : ppo_out);
    }
    if (*c_eval)
      return cmd_eval(
          rc, eval_suite, eval_driver,
          eval_policy.empty() ? rc.paths.policy_checkpoint : eval_policy,
          eval_copm.empty() ? rc.paths.copm_checkpoint : eval_copm,
          eval_max_routes, eval_reps,
          static_cast<std::uint64_t>(eval_seed),
          eval_out.empty() ? rc.paths.report : eval_out);
    if (*c_trace)
      return cmd_trace(
          rc, trace_route, trace_driver,
          trace_policy.empty() ? rc.paths.policy_checkpoint : trace_policy,
          trace_copm.empty() ? rc.paths.copm_checkpoint : trace_copm,
          trace_density, trace_test_map,
          static_cast<std::uint64_t>(trace_seed), trace_max_steps,
          trace_out.empty() ? rc.paths.trace : trace_out);
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const StageOrderError& e) {
    std::cerr << "stage-order error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
