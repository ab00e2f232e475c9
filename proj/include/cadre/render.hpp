// Ego-centered, heading-up top-down rasterization. One pass produces both
// the semantic class map and the color image, so the two always agree
// pixel for pixel. Color comes from a palette table; palette variants plus
// optional texture noise stand in for appearance shifts between training
// and evaluation conditions.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cadre/common.hpp"
#include "cadre/geometry.hpp"
#include "cadre/world.hpp"

namespace cadre::sim {

struct CameraConfig {
  int h = 64;
  int w = 96;
  double m_per_px = 0.75;
};

inline void validate_camera(const CameraConfig& c) {
  if (c.h < 16 || c.w < 16 || c.h % 16 != 0 || c.w % 16 != 0)
    throw ConfigError("camera grid must be a multiple of 16 in both axes");
  if (!(c.m_per_px > 0.0))
    throw ConfigError("camera scale must be positive");
}

// Semantic classes; the fixed 6-way split every consumer relies on.
enum CamClass : std::uint8_t {
  kBackground = 0,
  kRoad = 1,
  kMarking = 2,
  kVehicle = 3,
  kPedestrian = 4,
  kLight = 5,
};
constexpr int kCamClasses = 6;
constexpr int kLightClasses = 3;  // none / red / green

struct Rgb {
  double r = 0.0, g = 0.0, b = 0.0;
};

struct Palette {
  int id = 0;
  bool test_split = false;
  std::array<Rgb, kCamClasses> colors;
  Rgb light_red{0.85, 0.10, 0.10};
  Rgb light_green{0.10, 0.80, 0.15};
  double noise_amp = 0.0;
};

// Four training palettes and two held-out test palettes with shifted hues
// and stronger texture noise.
inline const std::vector<Palette>& builtin_palettes() {
  static const std::vector<Palette> all = [] {
    std::vector<Palette> v;
    auto mk = [](int id, bool test, Rgb bg, Rgb road, Rgb mark, Rgb veh,
                 Rgb ped, Rgb light, double noise) {
      Palette p;
      p.id = id;
      p.test_split = test;
      p.colors = {bg, road, mark, veh, ped, light};
      p.noise_amp = noise;
      return p;
    };
    v.push_back(mk(0, false, {0.13, 0.35, 0.15}, {0.30, 0.30, 0.32},
                   {0.85, 0.85, 0.80}, {0.20, 0.35, 0.80}, {0.90, 0.60, 0.20},
                   {0.50, 0.50, 0.10}, 0.00));
    v.push_back(mk(1, false, {0.20, 0.30, 0.12}, {0.25, 0.25, 0.28},
                   {0.90, 0.90, 0.70}, {0.25, 0.30, 0.75}, {0.85, 0.55, 0.25},
                   {0.45, 0.45, 0.12}, 0.02));
    v.push_back(mk(2, false, {0.10, 0.28, 0.20}, {0.35, 0.34, 0.36},
                   {0.80, 0.80, 0.85}, {0.15, 0.40, 0.85}, {0.95, 0.65, 0.15},
                   {0.55, 0.52, 0.08}, 0.04));
    v.push_back(mk(3, false, {0.16, 0.32, 0.10}, {0.28, 0.29, 0.30},
                   {0.88, 0.82, 0.75}, {0.22, 0.33, 0.78}, {0.88, 0.58, 0.22},
                   {0.48, 0.47, 0.15}, 0.06));
    v.push_back(mk(4, true, {0.25, 0.25, 0.08}, {0.38, 0.36, 0.40},
                   {0.75, 0.78, 0.90}, {0.30, 0.25, 0.70}, {0.80, 0.70, 0.30},
                   {0.60, 0.55, 0.05}, 0.08));
    v.push_back(mk(5, true, {0.08, 0.22, 0.26}, {0.22, 0.24, 0.25},
                   {0.95, 0.88, 0.65}, {0.10, 0.45, 0.90}, {1.00, 0.55, 0.10},
                   {0.40, 0.42, 0.18}, 0.10));
    return v;
  }();
  return all;
}

inline std::vector<Palette> palette_split(bool test) {
  std::vector<Palette> out;
  for (const auto& p : builtin_palettes())
    if (p.test_split == test) out.push_back(p);
  return out;
}

struct EgoPose {
  geom::Vec2 pos;
  double heading = 0.0;
};

// What the rasterizer needs to know about dynamic actors.
struct ActorSnapshot {
  std::vector<geom::Obb> vehicles;
  struct Ped {
    geom::Vec2 pos;
    double radius = kPedestrianRadius;
  };
  std::vector<Ped> pedestrians;
};

// Planar layout: cls is [H][W], rgb is [3][H][W], values in [0,1].
struct Frame {
  int h = 0, w = 0;
  std::vector<std::uint8_t> cls;
  std::vector<double> rgb;
};

namespace detail {

inline double hash01(std::uint64_t key, std::uint64_t idx) {
  std::uint64_t s = key ^ (idx * 0x9e3779b97f4a7c15ULL);
  return static_cast<double>(splitmix64(s) >> 11) * 0x1.0p-53;
}

struct SegCandidate {
  geom::Vec2 a, b;
  double half_width;
  double cum0;  // arclength at a along the parent road
};

}  // namespace detail

// Ego-frame convention: +forward along the heading, +right to its right.
// Pixel row 0 is farthest forward, column 0 is farthest left.
inline geom::Vec2 pixel_to_ego(const CameraConfig& cam, int r, int c) {
  const double f = (cam.h * 0.5 - (r + 0.5)) * cam.m_per_px;
  const double rt = ((c + 0.5) - cam.w * 0.5) * cam.m_per_px;
  return {f, rt};
}

inline geom::Vec2 ego_to_world(const EgoPose& ego, geom::Vec2 fr) {
  const geom::Vec2 fwd = geom::heading_vec(ego.heading);
  const geom::Vec2 right = fwd.perp_right();
  return ego.pos + fwd * fr.x + right * fr.y;
}

inline geom::Vec2 world_to_ego(const EgoPose& ego, geom::Vec2 p) {
  const geom::Vec2 d = p - ego.pos;
  const geom::Vec2 fwd = geom::heading_vec(ego.heading);
  return {d.dot(fwd), d.dot(fwd.perp_right())};
}

inline Frame render_camera(const WorldMap& world, const ActorSnapshot& actors,
                           const EgoPose& ego, const CameraConfig& cam,
                           const Palette& pal, double sim_time,
                           std::uint64_t noise_key = 0) {
  Frame fr;
  fr.h = cam.h;
  fr.w = cam.w;
  const std::size_t npix = static_cast<std::size_t>(cam.h) * cam.w;
  fr.cls.assign(npix, kBackground);
  fr.rgb.assign(npix * 3, 0.0);

  const double view_radius =
      0.5 * std::hypot(cam.h * cam.m_per_px, cam.w * cam.m_per_px) + 5.0;

  // Collect road segments near the view once; the pixel loop only touches
  // these.
  std::vector<detail::SegCandidate> segs;
  for (const auto& road : world.roads) {
    double cum = 0.0;
    for (std::size_t i = 0; i + 1 < road.pts.size(); ++i) {
      const double len = (road.pts[i + 1] - road.pts[i]).norm();
      if (geom::segment_distance(ego.pos, road.pts[i], road.pts[i + 1]) <
          view_radius + road.width)
        segs.push_back({road.pts[i], road.pts[i + 1], road.width * 0.5, cum});
      cum += len;
    }
  }
  std::vector<const IntersectionNode*> nodes;
  std::vector<const TrafficLight*> lights;
  for (const auto& n : world.intersections)
    if ((n.center - ego.pos).norm() < view_radius + n.radius)
      nodes.push_back(&n);
  for (const auto& l : world.lights)
    if ((l.pos - ego.pos).norm() < view_radius + 3.0) lights.push_back(&l);
  std::vector<const geom::Obb*> vehicles;
  for (const auto& v : actors.vehicles)
    if ((v.center - ego.pos).norm() < view_radius + v.half_len)
      vehicles.push_back(&v);
  std::vector<const ActorSnapshot::Ped*> peds;
  for (const auto& p : actors.pedestrians)
    if ((p.pos - ego.pos).norm() < view_radius + p.radius)
      peds.push_back(&p);

  const double mark_half = std::max(0.15, 0.55 * cam.m_per_px);
  constexpr double kLightHalf = 1.3;
  constexpr double kDashPeriod = 6.0;
  constexpr double kDashOn = 3.0;

  for (int r = 0; r < cam.h; ++r) {
    for (int c = 0; c < cam.w; ++c) {
      const geom::Vec2 p = ego_to_world(ego, pixel_to_ego(cam, r, c));
      std::uint8_t cls = kBackground;

      bool is_ped = false;
      for (const auto* pd : peds)
        if ((p - pd->pos).norm2() <= pd->radius * pd->radius) {
          is_ped = true;
          break;
        }
      if (is_ped) {
        cls = kPedestrian;
      } else {
        bool is_vehicle = false;
        for (const auto* v : vehicles)
          if (geom::point_in_obb(p, *v)) {
            is_vehicle = true;
            break;
          }
        if (is_vehicle) {
          cls = kVehicle;
        } else {
          bool is_light = false;
          for (const auto* l : lights)
            if (std::abs(p.x - l->pos.x) <= kLightHalf &&
                std::abs(p.y - l->pos.y) <= kLightHalf) {
              is_light = true;
              break;
            }
          if (is_light) {
            cls = kLight;
          } else {
            bool on_road = false, on_mark = false;
            for (const auto& s : segs) {
              double t;
              const double d = geom::segment_distance(p, s.a, s.b, &t);
              if (d <= s.half_width) {
                on_road = true;
                if (d <= mark_half) {
                  const double along =
                      s.cum0 + t * (s.b - s.a).norm();
                  if (std::fmod(along, kDashPeriod) < kDashOn) on_mark = true;
                }
              }
            }
            if (!on_road)
              for (const auto* n : nodes)
                if ((p - n->center).norm() <= n->radius) {
                  on_road = true;
                  break;
                }
            cls = on_mark ? kMarking : (on_road ? kRoad : kBackground);
          }
        }
      }

      const std::size_t idx = static_cast<std::size_t>(r) * cam.w + c;
      fr.cls[idx] = cls;
      Rgb col = pal.colors[cls];
      if (cls == kLight) {
        bool red = false;
        for (const auto* l : lights)
          if (std::abs(p.x - l->pos.x) <= kLightHalf &&
              std::abs(p.y - l->pos.y) <= kLightHalf) {
            red = l->state_at(sim_time) == LightState::Red;
            break;
          }
        col = red ? pal.light_red : pal.light_green;
      }
      double ch[3] = {col.r, col.g, col.b};
      if (pal.noise_amp > 0.0) {
        for (int k = 0; k < 3; ++k) {
          const double u = detail::hash01(noise_key, idx * 3 + k);
          ch[k] = clamp(ch[k] + pal.noise_amp * (2.0 * u - 1.0), 0.0, 1.0);
        }
      }
      for (int k = 0; k < 3; ++k)
        fr.rgb[static_cast<std::size_t>(k) * npix + idx] = ch[k];
    }
  }
  return fr;
}

// Binary 3-channel route sketch: upcoming waypoints (ego frame, forward /
// right in meters) drawn as a white polyline on black.
inline std::vector<double> render_route_image(
    const std::vector<geom::Vec2>& waypoints_ego, const CameraConfig& cam,
    double line_px = 2.0) {
  if (waypoints_ego.size() < 2)
    throw InputError("render_route_image: need at least 2 waypoints");
  const std::size_t npix = static_cast<std::size_t>(cam.h) * cam.w;
  std::vector<double> img(npix * 3, 0.0);

  // Waypoints to pixel space (row, col), then stamp pixels within the line
  // radius of each segment.
  std::vector<geom::Vec2> px;
  px.reserve(waypoints_ego.size());
  for (const auto& wp : waypoints_ego) {
    const double row = cam.h * 0.5 - wp.x / cam.m_per_px - 0.5;
    const double col = wp.y / cam.m_per_px + cam.w * 0.5 - 0.5;
    px.push_back({row, col});
  }
  const double radius = line_px * 0.5;
  for (std::size_t i = 0; i + 1 < px.size(); ++i) {
    const geom::Vec2 a = px[i], b = px[i + 1];
    const int r0 = std::max(0, int(std::floor(std::min(a.x, b.x) - radius)));
    const int r1 = std::min(cam.h - 1, int(std::ceil(std::max(a.x, b.x) + radius)));
    const int c0 = std::max(0, int(std::floor(std::min(a.y, b.y) - radius)));
    const int c1 = std::min(cam.w - 1, int(std::ceil(std::max(a.y, b.y) + radius)));
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) {
        if (geom::segment_distance({double(r), double(c)}, a, b) <= radius) {
          const std::size_t idx = static_cast<std::size_t>(r) * cam.w + c;
          img[idx] = 1.0;
          img[npix + idx] = 1.0;
          img[2 * npix + idx] = 1.0;
        }
      }
  }
  return img;
}

}  // namespace cadre::sim
