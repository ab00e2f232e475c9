// 2-D geometry primitives for the driving world.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "cadre/common.hpp"

namespace cadre::geom {

struct Vec2 {
  double x = 0.0, y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double c) const { return {x * c, y * c}; }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double cross(Vec2 o) const { return x * o.y - y * o.x; }
  double norm() const { return std::hypot(x, y); }
  double norm2() const { return x * x + y * y; }
  Vec2 normalized() const {
    const double n = norm();
    return n > 0.0 ? Vec2{x / n, y / n} : Vec2{1.0, 0.0};
  }
  // 90 degrees clockwise; the right-hand side of a heading.
  Vec2 perp_right() const { return {y, -x}; }
  bool operator==(const Vec2&) const = default;
};

inline Vec2 heading_vec(double heading) {
  return {std::cos(heading), std::sin(heading)};
}

// Distance from p to segment [a,b]; t_out is the clamped parameter in [0,1].
inline double segment_distance(Vec2 p, Vec2 a, Vec2 b, double* t_out = nullptr) {
  const Vec2 ab = b - a;
  const double len2 = ab.norm2();
  double t = len2 > 0.0 ? clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  if (t_out) *t_out = t;
  return (p - (a + ab * t)).norm();
}

struct Polyline {
  std::vector<Vec2> pts;
  std::vector<double> cum;  // cumulative arclength per point

  explicit Polyline(std::vector<Vec2> points = {}) { reset(std::move(points)); }

  void reset(std::vector<Vec2> points) {
    pts = std::move(points);
    cum.assign(pts.size(), 0.0);
    for (std::size_t i = 1; i < pts.size(); ++i)
      cum[i] = cum[i - 1] + (pts[i] - pts[i - 1]).norm();
  }

  double length() const { return cum.empty() ? 0.0 : cum.back(); }
  std::size_t segments() const { return pts.size() < 2 ? 0 : pts.size() - 1; }

  Vec2 point_at(double s) const {
    if (pts.empty()) return {};
    if (pts.size() == 1 || s <= 0.0) return pts.front();
    if (s >= length()) return pts.back();
    const auto it = std::upper_bound(cum.begin(), cum.end(), s);
    const std::size_t i = static_cast<std::size_t>(it - cum.begin()) - 1;
    const double seg_len = cum[i + 1] - cum[i];
    const double t = seg_len > 0.0 ? (s - cum[i]) / seg_len : 0.0;
    return pts[i] + (pts[i + 1] - pts[i]) * t;
  }

  Vec2 direction_at(double s) const {
    if (segments() == 0) return {1.0, 0.0};
    std::size_t i;
    if (s <= 0.0) {
      i = 0;
    } else if (s >= length()) {
      i = segments() - 1;
    } else {
      const auto it = std::upper_bound(cum.begin(), cum.end(), s);
      i = static_cast<std::size_t>(it - cum.begin()) - 1;
      i = std::min(i, segments() - 1);
    }
    return (pts[i + 1] - pts[i]).normalized();
  }
};

struct Projection {
  double s = 0.0;        // arclength of the closest point
  double distance = 0.0; // lateral distance
  std::size_t seg = 0;   // segment index of the closest point
};

// Projects p onto the polyline. When hint_s >= 0 the search is restricted
// to a window around that arclength, which keeps projections local on
// routes that pass near themselves.
inline Projection project_polyline(const Polyline& pl, Vec2 p,
                                   double hint_s = -1.0,
                                   double window = 40.0) {
  Projection best;
  best.distance = 1e18;
  if (pl.segments() == 0) {
    best.distance = (p - (pl.pts.empty() ? Vec2{} : pl.pts[0])).norm();
    return best;
  }
  double lo = 0.0, hi = pl.length();
  if (hint_s >= 0.0) {
    lo = std::max(0.0, hint_s - window * 0.25);
    hi = std::min(pl.length(), hint_s + window);
  }
  for (std::size_t i = 0; i < pl.segments(); ++i) {
    if (pl.cum[i + 1] < lo || pl.cum[i] > hi) continue;
    double t;
    const double d = segment_distance(p, pl.pts[i], pl.pts[i + 1], &t);
    if (d < best.distance) {
      best.distance = d;
      best.seg = i;
      best.s = pl.cum[i] + t * (pl.cum[i + 1] - pl.cum[i]);
    }
  }
  return best;
}

// Resamples a polyline at roughly the requested spacing, keeping endpoints.
inline std::vector<Vec2> resample(const std::vector<Vec2>& pts,
                                  double spacing) {
  if (pts.size() < 2 || spacing <= 0.0) return pts;
  Polyline pl(pts);
  const double len = pl.length();
  const std::size_t n =
      std::max<std::size_t>(2, static_cast<std::size_t>(std::round(len / spacing)) + 1);
  std::vector<Vec2> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(pl.point_at(len * double(i) / double(n - 1)));
  return out;
}

// Oriented bounding box: center, heading, half length (along heading) and
// half width.
struct Obb {
  Vec2 center;
  double heading = 0.0;
  double half_len = 0.0;
  double half_wid = 0.0;

  Vec2 axis_fwd() const { return heading_vec(heading); }
  Vec2 axis_right() const { return heading_vec(heading).perp_right(); }

  std::array<Vec2, 4> corners() const {
    const Vec2 f = axis_fwd() * half_len;
    const Vec2 r = axis_right() * half_wid;
    return {center + f + r, center + f - r, center - f - r, center - f + r};
  }
};

namespace detail {
inline bool separated_on(Vec2 axis, const Obb& a, const Obb& b) {
  auto project = [&](const Obb& o, double& lo, double& hi) {
    lo = 1e18;
    hi = -1e18;
    for (Vec2 c : o.corners()) {
      const double v = c.dot(axis);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  };
  double alo, ahi, blo, bhi;
  project(a, alo, ahi);
  project(b, blo, bhi);
  return ahi < blo || bhi < alo;
}
}  // namespace detail

inline bool obb_overlap(const Obb& a, const Obb& b) {
  return !(detail::separated_on(a.axis_fwd(), a, b) ||
           detail::separated_on(a.axis_right(), a, b) ||
           detail::separated_on(b.axis_fwd(), a, b) ||
           detail::separated_on(b.axis_right(), a, b));
}

inline bool obb_circle_overlap(const Obb& a, Vec2 c, double r) {
  const Vec2 d = c - a.center;
  const double fx = std::abs(d.dot(a.axis_fwd()));
  const double fy = std::abs(d.dot(a.axis_right()));
  const double cx = std::max(0.0, fx - a.half_len);
  const double cy = std::max(0.0, fy - a.half_wid);
  return cx * cx + cy * cy <= r * r;
}

inline bool point_in_obb(Vec2 p, const Obb& a) {
  const Vec2 d = p - a.center;
  return std::abs(d.dot(a.axis_fwd())) <= a.half_len &&
         std::abs(d.dot(a.axis_right())) <= a.half_wid;
}

// Quadratic Bezier sampled at n points, endpoints included.
inline std::vector<Vec2> bezier2(Vec2 p0, Vec2 p1, Vec2 p2, std::size_t n) {
  std::vector<Vec2> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = double(i) / double(n - 1);
    const double u = 1.0 - t;
    out.push_back(p0 * (u * u) + p1 * (2.0 * u * t) + p2 * (t * t));
  }
  return out;
}

}  // namespace cadre::geom
