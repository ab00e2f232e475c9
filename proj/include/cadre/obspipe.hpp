#pragma once

// Observation assembly and offline dataset collection: waypoint lookahead,
// route-image rasterization, channel stacking, expert-noise augmentation,
// and the binary shard format the perception trainer reads back.

#include <array>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cadre/autopilot.hpp"
#include "cadre/common.hpp"
#include "cadre/render.hpp"
#include "cadre/sim.hpp"
#include "cadre/world.hpp"

namespace cadre::obs {

// Scalar measurement vector fed to the policy alongside the latent feature.
struct Measurements {
  double prev_steer = 0.0;
  double prev_throttle = 0.0;
  double prev_brake = 0.0;
  double v = 0.0;
  double theta_deg = 0.0;
  double d_m = 0.0;

  std::array<double, 6> as_array() const {
    return {prev_steer, prev_throttle, prev_brake, v, theta_deg, d_m};
  }
};

inline void validate_measurements(const Measurements& m) {
  for (double x : m.as_array())
    if (!std::isfinite(x)) throw InputError("measurement not finite");
  if (m.v < 0.0 || m.d_m < 0.0 || m.theta_deg < 0.0 || m.theta_deg > 180.0)
    throw InputError("measurement out of range");
}

struct Observation {
  std::vector<double> camera;        // [3, H, W]
  Measurements m;
  std::vector<geom::Vec2> waypoints;  // ego frame, metres
};

constexpr int kModelChannels = 6;  // camera rgb ++ route-image rgb

// Next-K route waypoints ahead of the current progress, ego frame.
inline std::vector<geom::Vec2> lookahead_waypoints(const sim::Simulator& s,
                                                   int k = 10,
                                                   double spacing = 2.0) {
  if (k < 2) throw InputError("lookahead_waypoints: need k >= 2");
  const auto& line = s.route_line();
  const sim::EgoPose pose{s.ego().pos, s.ego().heading};
  std::vector<geom::Vec2> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int i = 1; i <= k; ++i) {
    const double sk = std::min(s.progress_s() + spacing * i, line.length());
    out.push_back(sim::world_to_ego(pose, line.point_at(sk)));
  }
  return out;
}

inline Observation make_observation(const sim::Simulator& s,
                                    const sim::SensorFrame& sensors,
                                    const Measurements& m) {
  Observation o;
  o.camera = sensors.camera.rgb;
  o.m = m;
  o.waypoints = lookahead_waypoints(s);
  validate_measurements(o.m);
  return o;
}

// Camera channels stacked with the rendered route image: [6, H, W].
inline std::vector<double> make_model_input(const std::vector<double>& camera,
                                            const std::vector<geom::Vec2>& wps,
                                            const sim::CameraConfig& cam) {
  const std::size_t npix = static_cast<std::size_t>(cam.h) * cam.w;
  if (camera.size() != npix * 3)
    throw DimensionError("make_model_input: camera raster size mismatch");
  std::vector<double> input(npix * kModelChannels);
  std::copy(camera.begin(), camera.end(), input.begin());
  const std::vector<double> route = sim::render_route_image(wps, cam);
  std::copy(route.begin(), route.end(), input.begin() + std::ptrdiff_t(npix * 3));
  return input;
}

// ---------------------------------------------------------------------------
// Expert-noise augmentation
// ---------------------------------------------------------------------------

struct NoiseConfig {
  double probability = 0.7;
  double lambda_st = 10.0;       // steer noise scale; saturates by design
  double throttle_floor = 0.75;  // substituted when throttle is low
  double throttle_below = 0.3;
};

struct NoiseResult {
  double steer = 0.0;
  double throttle = 0.0;
  bool injected = false;
};

// Steer perturbation for a given uniform draw; at u = 0.5 the noise term is
// exactly zero. The scale saturates most injected steers at the clamp.
inline double noised_steer(double steer, double u, const NoiseConfig& cfg = {}) {
  return clamp(steer + cfg.lambda_st * (2.0 * u - 1.0), -1.0, 1.0);
}

inline double noised_throttle(double throttle, const NoiseConfig& cfg = {}) {
  return throttle < cfg.throttle_below ? cfg.throttle_floor : throttle;
}

// Draw order is fixed (gate, then steer u); reruns with the same rng state
// reproduce the exact same stream.
inline NoiseResult inject_noise(double steer, double throttle, Rng& rng,
                                const NoiseConfig& cfg = {}) {
  NoiseResult r;
  r.steer = steer;
  r.throttle = throttle;
  if (rng.uniform01() >= cfg.probability) return r;
  r.injected = true;
  r.steer = noised_steer(steer, rng.uniform01(), cfg);
  r.throttle = noised_throttle(throttle, cfg);
  return r;
}

// ---------------------------------------------------------------------------
// Dataset shard format
// ---------------------------------------------------------------------------
//
// Shard layout (all little-endian):
//   magic "CADREDS1" | u32 version | u32 count | u32 h | u32 w
//   | u32 channels | u32 seg_classes | u32 light_classes | u32 reserved
// followed by `count` fixed-width records:
//   u8 injected | u8 light | u8 pad[6]
//   | f64 expert_steer | f64 expert_throttle
//   | f64 applied_steer | f64 applied_throttle | f64 applied_brake
//   | f64 input[channels*h*w] | u8 seg[h*w]
// The route-image reconstruction target is input channels 3..5; it is not
// duplicated on disk.

constexpr char kShardMagic[8] = {'C', 'A', 'D', 'R', 'E', 'D', 'S', '1'};
constexpr std::uint32_t kDatasetVersion = 1;

struct DatasetSample {
  bool injected = false;
  std::uint8_t light = 0;  // none / red / green
  double expert_steer = 0.0;
  double expert_throttle = 0.0;
  double applied_steer = 0.0;
  double applied_throttle = 0.0;
  double applied_brake = 0.0;
  std::vector<double> input;    // [6, H, W]
  std::vector<std::uint8_t> seg;  // [H, W]
};

inline std::size_t record_bytes(const sim::CameraConfig& cam) {
  const std::size_t npix = static_cast<std::size_t>(cam.h) * cam.w;
  return 8 + 5 * sizeof(double) + npix * kModelChannels * sizeof(double) +
         npix;
}

static_assert(std::endian::native == std::endian::little,
              "dataset shards assume a little-endian host");

class ShardWriter {
 public:
  ShardWriter(const std::string& path, const sim::CameraConfig& cam)
      : path_(path), cam_(cam), out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot open shard for writing: " + path);
    write_header(0);
  }

  ~ShardWriter() {
    if (!finalized_) {
      out_.close();
      std::remove(path_.c_str());  // never leave partial shards behind
    }
  }

  void append(const DatasetSample& s) {
    const std::size_t npix = static_cast<std::size_t>(cam_.h) * cam_.w;
    if (s.input.size() != npix * kModelChannels || s.seg.size() != npix)
      throw DimensionError("shard append: sample raster size mismatch");
    std::uint8_t head[8] = {};
    head[0] = s.injected ? 1 : 0;
    head[1] = s.light;
    out_.write(reinterpret_cast<const char*>(head), 8);
    const double scalars[5] = {s.expert_steer, s.expert_throttle,
                               s.applied_steer, s.applied_throttle,
                               s.applied_brake};
    out_.write(reinterpret_cast<const char*>(scalars), sizeof(scalars));
    out_.write(reinterpret_cast<const char*>(s.input.data()),
               std::streamsize(s.input.size() * sizeof(double)));
    out_.write(reinterpret_cast<const char*>(s.seg.data()),
               std::streamsize(s.seg.size()));
    if (!out_) throw IoError("shard write failed: " + path_);
    ++count_;
  }

  // Seals the shard: seeks back and patches the record count.
  std::uint32_t finalize() {
    write_header(count_);
    out_.close();
    if (!out_) throw IoError("shard finalize failed: " + path_);
    finalized_ = true;
    return count_;
  }

  std::uint32_t count() const { return count_; }

 private:
  void write_header(std::uint32_t count) {
    out_.seekp(0);
    out_.write(kShardMagic, 8);
    const std::uint32_t fields[8] = {kDatasetVersion,
                                     count,
                                     std::uint32_t(cam_.h),
                                     std::uint32_t(cam_.w),
                                     std::uint32_t(kModelChannels),
                                     std::uint32_t(sim::kCamClasses),
                                     std::uint32_t(sim::kLightClasses),
                                     0};
    out_.write(reinterpret_cast<const char*>(fields), sizeof(fields));
    out_.seekp(0, std::ios::end);
  }

  std::string path_;
  sim::CameraConfig cam_;
  std::ofstream out_;
  std::uint32_t count_ = 0;
  bool finalized_ = false;
};

inline std::vector<DatasetSample> read_shard(const std::string& path,
                                             sim::CameraConfig* cam_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open shard: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kShardMagic, 8) != 0)
    throw LoadError("bad shard magic: " + path);
  std::uint32_t fields[8];
  in.read(reinterpret_cast<char*>(fields), sizeof(fields));
  if (!in) throw LoadError("truncated shard header: " + path);
  if (fields[0] != kDatasetVersion)
    throw LoadError("unsupported shard version " + std::to_string(fields[0]));
  if (fields[4] != kModelChannels || fields[5] != sim::kCamClasses)
    throw LoadError("shard channel layout mismatch: " + path);
  const std::uint32_t count = fields[1];
  sim::CameraConfig cam{int(fields[2]), int(fields[3]), 1.0};
  if (cam_out) *cam_out = cam;
  const std::size_t npix = static_cast<std::size_t>(cam.h) * cam.w;

  std::vector<DatasetSample> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    DatasetSample s;
    std::uint8_t head[8];
    in.read(reinterpret_cast<char*>(head), 8);
    s.injected = head[0] != 0;
    s.light = head[1];
    double scalars[5];
    in.read(reinterpret_cast<char*>(scalars), sizeof(scalars));
    s.expert_steer = scalars[0];
    s.expert_throttle = scalars[1];
    s.applied_steer = scalars[2];
    s.applied_throttle = scalars[3];
    s.applied_brake = scalars[4];
    s.input.resize(npix * kModelChannels);
    in.read(reinterpret_cast<char*>(s.input.data()),
            std::streamsize(s.input.size() * sizeof(double)));
    s.seg.resize(npix);
    in.read(reinterpret_cast<char*>(s.seg.data()), std::streamsize(npix));
    if (!in) throw LoadError("truncated shard record in " + path);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Collection
// ---------------------------------------------------------------------------

struct CollectConfig {
  sim::CameraConfig camera{64, 96, 0.75};
  NoiseConfig noise;
  std::vector<sim::Density> densities{sim::Density::Empty,
                                      sim::Density::Regular,
                                      sim::Density::Dense};
  int samples_per_shard = 512;
  int sample_stride = 1;     // record every n-th frame
  int max_episode_steps = 2000;
  int resume_cap = 5;        // per route+density combination
  int waypoint_count = 10;
  double waypoint_spacing = 2.0;
};

struct Manifest {
  std::uint32_t format_version = kDatasetVersion;
  std::uint64_t seed = 0;
  std::uint32_t count = 0;
  int h = 0, w = 0;
  double m_per_px = 0.0;
  std::vector<std::pair<std::string, std::uint32_t>> shards;  // file, count
};

inline nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json j;
  j["format_version"] = m.format_version;
  j["seed"] = m.seed;
  j["count"] = m.count;
  j["camera"] = {{"h", m.h}, {"w", m.w}, {"m_per_px", m.m_per_px}};
  j["channels"] = kModelChannels;
  j["seg_classes"] = sim::kCamClasses;
  j["light_classes"] = sim::kLightClasses;
  auto arr = nlohmann::json::array();
  for (const auto& [file, count] : m.shards)
    arr.push_back({{"file", file}, {"count", count}});
  j["shards"] = arr;
  return j;
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  Manifest m;
  m.format_version = j.at("format_version").get<std::uint32_t>();
  if (m.format_version != kDatasetVersion)
    throw LoadError("unsupported dataset manifest version");
  m.seed = j.at("seed").get<std::uint64_t>();
  m.count = j.at("count").get<std::uint32_t>();
  m.h = j.at("camera").at("h").get<int>();
  m.w = j.at("camera").at("w").get<int>();
  m.m_per_px = j.at("camera").at("m_per_px").get<double>();
  for (const auto& s : j.at("shards"))
    m.shards.emplace_back(s.at("file").get<std::string>(),
                          s.at("count").get<std::uint32_t>());
  return m;
}

inline std::string manifest_hash(const Manifest& m) {
  return hash_hex(fnv1a64(manifest_to_json(m).dump()));
}

// Drives the autopilot with per-frame noise injection over routes x
// densities until the sample budget is met. Deterministic for a fixed
// (seed, config, world, routes).
inline Manifest collect_dataset(const sim::WorldMap& world,
                                const std::vector<sim::Route>& routes,
                                int budget, std::uint64_t seed,
                                const std::string& out_dir,
                                const CollectConfig& cfg = {}) {
  if (budget < 1) throw InputError("collect_dataset: budget must be >= 1");
  if (routes.empty()) throw InputError("collect_dataset: no routes");
  sim::validate_camera(cfg.camera);

  sim::SimConfig scfg;
  scfg.camera = cfg.camera;
  sim::Simulator s(world, scfg);
  sim::Autopilot pilot;
  const auto train_palettes = sim::palette_split(false);

  Manifest man;
  man.seed = seed;
  man.h = cfg.camera.h;
  man.w = cfg.camera.w;
  man.m_per_px = cfg.camera.m_per_px;

  std::optional<ShardWriter> shard;
  int shard_idx = 0;
  auto open_shard = [&] {
    char name[32];
    std::snprintf(name, sizeof(name), "shard-%04d.bin", shard_idx);
    shard.emplace(out_dir + "/" + name, cfg.camera);
    man.shards.emplace_back(name, 0);
  };
  auto close_shard = [&] {
    if (!shard) return;
    man.shards.back().second = shard->finalize();
    shard.reset();
    ++shard_idx;
  };

  int written = 0;
  std::size_t combo = 0;
  const std::size_t n_combos = routes.size() * cfg.densities.size();

  while (written < budget) {
    const sim::Route& route = routes[combo % routes.size()];
    const sim::Density density =
        cfg.densities[(combo / routes.size()) % cfg.densities.size()];
    const std::uint64_t combo_seed = derive_seed(seed, "collect", combo);
    combo = (combo + 1) % n_combos;

    Rng noise_rng(derive_seed(combo_seed, "noise"));
    double resume_s = 0.0;

    for (int attempt = 0; attempt <= cfg.resume_cap && written < budget;
         ++attempt) {
      sim::EpisodeOptions opt;
      opt.density = density;
      opt.seed = derive_seed(combo_seed, "episode", std::uint64_t(attempt));
      opt.start_s = resume_s;
      opt.palette_id =
          train_palettes[std::size_t(opt.seed % train_palettes.size())].id;
      s.start_episode(route, opt);

      int step = 0;
      sim::SensorFrame sensors = s.initial_sensors();
      while (!s.terminal() && step < cfg.max_episode_steps &&
             written < budget) {
        const sim::Controls expert = pilot.drive(s);
        const NoiseResult applied =
            inject_noise(expert.steer, expert.throttle, noise_rng, cfg.noise);

        if (step % cfg.sample_stride == 0) {
          const auto wps = lookahead_waypoints(s, cfg.waypoint_count,
                                               cfg.waypoint_spacing);
          DatasetSample sample;
          sample.injected = applied.injected;
          sample.light = std::uint8_t(sensors.light);
          sample.expert_steer = expert.steer;
          sample.expert_throttle = expert.throttle;
          sample.applied_steer = applied.steer;
          sample.applied_throttle = applied.throttle;
          sample.applied_brake = expert.brake;
          sample.input =
              make_model_input(sensors.camera.rgb, wps, cfg.camera);
          sample.seg = sensors.camera.cls;
          if (!shard || int(shard->count()) >= cfg.samples_per_shard) {
            close_shard();
            open_shard();
          }
          shard->append(sample);
          ++written;
        }

        auto res = s.step(applied.steer, applied.throttle, expert.brake);
        sensors = std::move(res.sensors);
        ++step;
      }

      if (s.terminal() && s.last_event() != sim::Event::Success) {
        resume_s = clamp(s.progress_s(), 0.0, s.route_line().length() - 5.0);
        continue;  // resume from the failure location
      }
      break;  // success, step cap, or budget reached
    }
  }

  close_shard();
  man.count = std::uint32_t(written);

  std::ofstream mf(out_dir + "/manifest.json");
  if (!mf) throw IoError("cannot write dataset manifest in " + out_dir);
  mf << manifest_to_json(man).dump(1) << "\n";
  if (!mf.good()) throw IoError("dataset manifest write failed");
  return man;
}

// Whole-dataset RAM load used by the perception trainer.
struct DatasetStore {
  Manifest manifest;
  sim::CameraConfig camera;
  std::vector<DatasetSample> samples;

  static DatasetStore load(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw IoError("cannot open dataset manifest in " + dir);
    nlohmann::json j;
    try {
      mf >> j;
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(std::string("bad dataset manifest: ") + e.what());
    }
    DatasetStore st;
    st.manifest = manifest_from_json(j);
    st.camera = {st.manifest.h, st.manifest.w, st.manifest.m_per_px};
    for (const auto& [file, count] : st.manifest.shards) {
      auto recs = read_shard(dir + "/" + file);
      if (recs.size() != count)
        throw LoadError("shard count mismatch in " + file);
      for (auto& r : recs) st.samples.push_back(std::move(r));
    }
    if (st.samples.size() != st.manifest.count)
      throw LoadError("dataset count mismatch against manifest");
    return st;
  }
};

}  // namespace cadre::obs
