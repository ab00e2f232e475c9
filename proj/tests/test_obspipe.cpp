#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cadre/obspipe.hpp"

using namespace cadre;
using namespace cadre::obs;
using geom::Vec2;

namespace {

sim::WorldMap straight_world(double len = 400.0) {
  sim::WorldMap w;
  w.name = "straight";
  sim::RoadSegment r;
  r.id = 0;
  r.pts = {{0.0, 0.0}, {len, 0.0}};
  w.roads.push_back(r);
  sim::Route rt;
  rt.id = 0;
  rt.command = sim::Command::Follow;
  rt.pts = geom::resample({{5.0, 0.0}, {len - 5.0, 0.0}}, 2.0);
  w.routes.push_back(rt);
  return w;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct TempDir {
  std::string path;
  explicit TempDir(const std::string& name) : path("/tmp/" + name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("steer noise rule") {
  NoiseConfig cfg;
  CHECK(noised_steer(0.3, 0.5, cfg) == 0.3);  // midpoint draw adds nothing
  CHECK(noised_steer(0.05, 0.6, cfg) == 1.0);  // 0.05 + 2.0 clamps
  CHECK(noised_steer(-0.1, 0.4, cfg) == -1.0);
  CHECK(noised_steer(0.0, 1.0, cfg) == 1.0);
  CHECK(noised_steer(0.0, 0.0, cfg) == -1.0);
  // a midpoint-adjacent draw stays inside the clamp
  CHECK(noised_steer(0.0, 0.52, cfg) == Catch::Approx(0.4).margin(1e-12));
}

TEST_CASE("throttle noise rule") {
  NoiseConfig cfg;
  CHECK(noised_throttle(0.2, cfg) == 0.75);
  CHECK(noised_throttle(0.29, cfg) == 0.75);
  CHECK(noised_throttle(0.3, cfg) == 0.3);  // boundary passes through
  CHECK(noised_throttle(0.6, cfg) == 0.6);
}

TEST_CASE("injection statistics over 10000 draws") {
  NoiseConfig cfg;
  Rng rng(99);
  int injected = 0;
  for (int i = 0; i < 10000; ++i) {
    auto r = inject_noise(0.1, 0.5, rng, cfg);
    if (r.injected) {
      ++injected;
      CHECK(r.throttle == 0.5);  // >= 0.3, untouched
      CHECK(r.steer >= -1.0);
      CHECK(r.steer <= 1.0);
    } else {
      CHECK(r.steer == 0.1);
      CHECK(r.throttle == 0.5);
    }
  }
  const double frac = injected / 10000.0;
  CHECK(frac >= 0.67);
  CHECK(frac <= 0.73);
}

TEST_CASE("lookahead waypoints on a straight route") {
  sim::WorldMap w = straight_world();
  sim::SimConfig cfg;
  cfg.render = false;
  sim::Simulator s(w, cfg);
  sim::EpisodeOptions opt;
  opt.start_s = 50.0;
  s.start_episode(w.routes[0], opt);

  auto wps = lookahead_waypoints(s, 10, 2.0);
  REQUIRE(wps.size() == 10);
  for (int i = 0; i < 10; ++i) {
    CHECK(wps[std::size_t(i)].x == Catch::Approx(2.0 * (i + 1)).margin(1e-9));
    CHECK(wps[std::size_t(i)].y == Catch::Approx(0.0).margin(1e-9));
  }

  SECTION("clamped at the route end") {
    sim::EpisodeOptions near_end;
    near_end.start_s = s.route_line().length() - 4.0;
    s.start_episode(w.routes[0], near_end);
    auto tail = lookahead_waypoints(s, 10, 2.0);
    REQUIRE(tail.size() == 10);
    CHECK(tail.back().x == Catch::Approx(4.0).margin(1e-9));
    CHECK(tail[5].x == tail[9].x);  // clamped duplicates
  }

  SECTION("k below 2 is rejected") {
    CHECK_THROWS_AS(lookahead_waypoints(s, 1, 2.0), InputError);
  }
}

TEST_CASE("model input stacks camera and route channels") {
  sim::WorldMap w = straight_world();
  sim::SimConfig cfg;  // default camera 64x96
  sim::Simulator s(w, cfg);
  sim::EpisodeOptions opt;
  opt.start_s = 50.0;
  s.start_episode(w.routes[0], opt);

  auto sensors = s.initial_sensors();
  auto wps = lookahead_waypoints(s);
  auto input = make_model_input(sensors.camera.rgb, wps, cfg.camera);
  const std::size_t npix = std::size_t(cfg.camera.h) * cfg.camera.w;
  REQUIRE(input.size() == npix * 6);

  for (double v : input) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }
  // camera channels copied verbatim
  for (std::size_t i = 0; i < npix * 3; ++i)
    REQUIRE(input[i] == sensors.camera.rgb[i]);
  // route channel has the straight-ahead line at the centre columns
  int white = 0;
  for (int r = 0; r < cfg.camera.h; ++r)
    for (int c = 0; c < cfg.camera.w; ++c)
      if (input[npix * 3 + std::size_t(r) * cfg.camera.w + c] == 1.0) {
        ++white;
        CHECK((c == 47 || c == 48));
      }
  CHECK(white > 10);

  SECTION("wrong camera size is rejected") {
    CHECK_THROWS_AS(make_model_input(std::vector<double>(7, 0.0), wps,
                                     cfg.camera),
                    DimensionError);
  }
}

TEST_CASE("route image and camera share the pixel grid") {
  sim::CameraConfig cam;  // 64x96 at 0.75
  sim::WorldMap empty;
  sim::EgoPose pose{{30.0, -12.0}, 0.7};

  // A pedestrian parked 10 m straight ahead of the ego...
  sim::ActorSnapshot snap;
  snap.pedestrians.push_back({sim::ego_to_world(pose, {10.0, 0.0}), 0.6});
  sim::Frame fr = sim::render_camera(empty, snap, pose, cam,
                                     sim::builtin_palettes()[0], 0.0, 3);
  // ...and a route waypoint at the same ego-frame spot.
  auto route = sim::render_route_image({{10.0, 0.0}, {12.0, 0.0}}, cam);

  bool overlap = false;
  for (int r = 0; r < cam.h; ++r)
    for (int c = 0; c < cam.w; ++c) {
      const std::size_t i = std::size_t(r) * cam.w + c;
      if (fr.cls[i] == sim::kPedestrian && route[i] == 1.0) overlap = true;
    }
  CHECK(overlap);
}

TEST_CASE("shard round trip is bit exact") {
  TempDir dir("cadre_shard_test");
  sim::CameraConfig cam{16, 16, 1.0};
  const std::size_t npix = 256;

  Rng rng(7);
  std::vector<DatasetSample> samples;
  for (int i = 0; i < 3; ++i) {
    DatasetSample s;
    s.injected = i % 2 == 0;
    s.light = std::uint8_t(i % 3);
    s.expert_steer = rng.uniform(-1.0, 1.0);
    s.expert_throttle = rng.uniform01();
    s.applied_steer = i == 0 ? -0.0 : rng.uniform(-1.0, 1.0);
    s.applied_throttle = rng.uniform01();
    s.applied_brake = i == 2 ? 1e-308 : 0.0;
    for (std::size_t p = 0; p < npix * 6; ++p)
      s.input.push_back(rng.uniform01());
    for (std::size_t p = 0; p < npix; ++p)
      s.seg.push_back(std::uint8_t(rng.uniform_int(6)));
    samples.push_back(std::move(s));
  }

  const std::string path = dir.path + "/t.bin";
  {
    ShardWriter w(path, cam);
    for (const auto& s : samples) w.append(s);
    CHECK(w.finalize() == 3);
  }

  sim::CameraConfig cam_read;
  auto back = read_shard(path, &cam_read);
  CHECK(cam_read.h == 16);
  CHECK(cam_read.w == 16);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].injected == samples[i].injected);
    CHECK(back[i].light == samples[i].light);
    CHECK(std::memcmp(&back[i].expert_steer, &samples[i].expert_steer, 8) == 0);
    CHECK(std::memcmp(&back[i].applied_steer, &samples[i].applied_steer, 8) ==
          0);
    CHECK(std::memcmp(&back[i].applied_brake, &samples[i].applied_brake, 8) ==
          0);
    REQUIRE(back[i].input.size() == samples[i].input.size());
    CHECK(std::memcmp(back[i].input.data(), samples[i].input.data(),
                      samples[i].input.size() * 8) == 0);
    CHECK(back[i].seg == samples[i].seg);
  }

  SECTION("corrupt magic is rejected") {
    std::string bytes = read_file(path);
    bytes[0] = 'X';
    std::ofstream out(path, std::ios::binary);
    out << bytes;
    out.close();
    CHECK_THROWS_AS(read_shard(path), LoadError);
  }

  SECTION("truncation is rejected") {
    std::string bytes = read_file(path);
    std::ofstream out(path, std::ios::binary);
    out << bytes.substr(0, bytes.size() - 64);
    out.close();
    CHECK_THROWS_AS(read_shard(path), LoadError);
  }
}

TEST_CASE("abandoned shard writers clean up") {
  TempDir dir("cadre_shard_abandon");
  const std::string path = dir.path + "/drop.bin";
  {
    ShardWriter w(path, {16, 16, 1.0});
    DatasetSample s;
    s.input.assign(256 * 6, 0.0);
    s.seg.assign(256, 0);
    w.append(s);
    // no finalize
  }
  CHECK_FALSE(std::filesystem::exists(path));
}

TEST_CASE("dataset collection is reproducible") {
  sim::WorldMap w = straight_world();
  CollectConfig cfg;
  cfg.camera = {16, 16, 1.5};
  cfg.densities = {sim::Density::Empty};
  cfg.samples_per_shard = 16;

  TempDir a("cadre_collect_a");
  TempDir b("cadre_collect_b");
  Manifest ma = collect_dataset(w, w.routes, 40, 31337, a.path, cfg);
  Manifest mb = collect_dataset(w, w.routes, 40, 31337, b.path, cfg);

  CHECK(ma.count == 40);
  CHECK(manifest_hash(ma) == manifest_hash(mb));
  REQUIRE(ma.shards.size() == 3);  // 16 + 16 + 8
  CHECK(ma.shards[2].second == 8);
  for (const auto& [file, count] : ma.shards)
    CHECK(read_file(a.path + "/" + file) == read_file(b.path + "/" + file));

  SECTION("store loads everything back") {
    DatasetStore st = DatasetStore::load(a.path);
    REQUIRE(st.samples.size() == 40);
    CHECK(st.camera.h == 16);
    int injected = 0, clean = 0;
    for (const auto& s : st.samples) {
      CHECK(s.expert_steer >= -1.0);
      CHECK(s.expert_steer <= 1.0);
      CHECK(s.expert_throttle >= 0.0);
      CHECK(s.expert_throttle <= 1.0);
      CHECK(s.input.size() == 256 * 6);
      CHECK(s.seg.size() == 256);
      if (s.injected) {
        ++injected;
        // the recorded applied controls obey the injection rules exactly
        CHECK(s.applied_throttle ==
              (s.expert_throttle < 0.3 ? 0.75 : s.expert_throttle));
      } else {
        ++clean;
        CHECK(s.applied_steer == s.expert_steer);
        CHECK(s.applied_throttle == s.expert_throttle);
      }
    }
    CHECK(injected > 0);
    CHECK(clean > 0);
  }

  SECTION("bad budget is rejected") {
    CHECK_THROWS_AS(collect_dataset(w, w.routes, 0, 1, a.path, cfg),
                    InputError);
  }
}
