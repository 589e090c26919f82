#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "opa/rng.hpp"

namespace opa {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3() = default;
  Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  bool operator==(const Vec3& o) const { return x == o.x && y == o.y && z == o.z; }

  double norm2() const { return x * x + y * y + z * z; }
  double norm() const { return std::sqrt(norm2()); }
};

using Point3 = Vec3;
using PointList = std::vector<Point3>;

inline double squared_distance(const Point3& a, const Point3& b) {
  return (a - b).norm2();
}

inline double normalize_angle(double a) {
  // into [-pi, pi)
  a = std::fmod(a + M_PI, 2.0 * M_PI);
  if (a < 0) a += 2.0 * M_PI;
  return a - M_PI;
}

// Box oriented about the vertical axis: full extents `size`, rotation `yaw`.
struct OrientedBox {
  Point3 center;
  Vec3 size;  // full lengths along local x/y/z
  double yaw = 0.0;
  int class_id = 0;

  bool valid() const {
    return size.x > 0 && size.y > 0 && size.z > 0 && std::isfinite(yaw);
  }

  // world -> box-local (un-normalized) coordinates
  Point3 to_local(const Point3& p) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const Point3 d = p - center;
    return {c * d.x + s * d.y, -s * d.x + c * d.y, d.z};
  }

  Point3 to_world(const Point3& local) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return {center.x + c * local.x - s * local.y,
            center.y + s * local.x + c * local.y, center.z + local.z};
  }

  double volume() const { return size.x * size.y * size.z; }
};

// Record of how an object's points were resampled to a fixed count, so
// predicted displacements can be mapped back to the original points.
struct SampleMapping {
  enum class Direction { down, up, identity };
  Direction direction = Direction::identity;
  // down: the original index of each of the `sampled_count` kept slots.
  // up:   the source original index of each slot (first original_count slots
  //       are 0..original_count-1 in order).
  std::vector<std::size_t> selected;
  std::size_t original_count = 0;
  std::size_t sampled_count = 0;
};

constexpr double kPointInBoxEps = 1e-9;

// Indices of points inside `box`, boundary inclusive, order preserved.
inline std::vector<std::size_t> points_in_box(const PointList& points,
                                              const OrientedBox& box) {
  std::vector<std::size_t> out;
  const Vec3 half = box.size * 0.5;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Point3 u = box.to_local(points[i]);
    if (std::abs(u.x) <= half.x + kPointInBoxEps &&
        std::abs(u.y) <= half.y + kPointInBoxEps &&
        std::abs(u.z) <= half.z + kPointInBoxEps) {
      out.push_back(i);
    }
  }
  return out;
}

// Greedy max-min farthest point sampling. Ties break to the lowest index.
inline std::vector<std::size_t> farthest_point_sampling(const PointList& points,
                                                        std::size_t count,
                                                        std::size_t start = 0) {
  if (count > points.size()) {
    throw std::invalid_argument("farthest_point_sampling: insufficient points");
  }
  if (start >= points.size()) {
    throw std::invalid_argument("farthest_point_sampling: start out of range");
  }
  std::vector<std::size_t> selected;
  selected.reserve(count);
  std::vector<double> min_d2(points.size(), std::numeric_limits<double>::infinity());
  std::size_t current = start;
  selected.push_back(current);
  while (selected.size() < count) {
    std::size_t best = 0;
    double best_d2 = -1.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const double d2 = squared_distance(points[i], points[current]);
      if (d2 < min_d2[i]) min_d2[i] = d2;
      if (min_d2[i] > best_d2) {
        best_d2 = min_d2[i];
        best = i;
      }
    }
    current = best;
    selected.push_back(current);
  }
  selected.resize(count);
  return selected;
}

// Pad `points` with uniformly re-sampled duplicates up to `count` slots.
// Coordinates are never modified.
inline std::pair<PointList, SampleMapping> pad_sample(const PointList& points,
                                                      std::size_t count,
                                                      Rng& rng) {
  if (points.empty()) throw std::invalid_argument("pad_sample: empty object");
  if (points.size() >= count) {
    throw std::invalid_argument("pad_sample: point count must be < count");
  }
  PointList out = points;
  SampleMapping mapping;
  mapping.direction = SampleMapping::Direction::up;
  mapping.original_count = points.size();
  mapping.sampled_count = count;
  mapping.selected.reserve(count);
  for (std::size_t i = 0; i < points.size(); ++i) mapping.selected.push_back(i);
  while (out.size() < count) {
    const std::size_t src = rng.uniform_index(points.size());
    mapping.selected.push_back(src);
    out.push_back(points[src]);
  }
  return {out, mapping};
}

// For the down-sampling case: the sampled-array slot of the nearest selected
// point for every original point (selected points map to themselves). Ties
// break to the lowest original index among equidistant selected points.
inline std::vector<std::size_t> nearest_selected_index(
    const PointList& original, const std::vector<std::size_t>& selected) {
  std::vector<std::size_t> nearest(original.size());
  for (std::size_t i = 0; i < original.size(); ++i) {
    double best_d2 = std::numeric_limits<double>::infinity();
    std::size_t best_slot = 0;
    for (std::size_t s = 0; s < selected.size(); ++s) {
      const double d2 = squared_distance(original[i], original[selected[s]]);
      if (d2 < best_d2 || (d2 == best_d2 && selected[s] < selected[best_slot])) {
        best_d2 = d2;
        best_slot = s;
      }
    }
    nearest[i] = best_slot;  // slot into the sampled array
  }
  return nearest;
}

// Map S x 3 displacements predicted on the sampled object back onto the
// original S_b points. down: nearest selected point's displacement; up: mean
// over the slots that duplicate each original point.
inline std::vector<Vec3> reverse_map_displacements(
    const std::vector<Vec3>& disp, const SampleMapping& mapping,
    const PointList& original_points) {
  if (disp.size() != mapping.sampled_count) {
    throw std::invalid_argument("reverse_map_displacements: length mismatch");
  }
  std::vector<Vec3> out(mapping.original_count);
  switch (mapping.direction) {
    case SampleMapping::Direction::identity:
      out = disp;
      break;
    case SampleMapping::Direction::down: {
      const auto nearest = nearest_selected_index(original_points, mapping.selected);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = disp[nearest[i]];
      break;
    }
    case SampleMapping::Direction::up: {
      std::vector<int> counts(mapping.original_count, 0);
      for (std::size_t slot = 0; slot < mapping.selected.size(); ++slot) {
        const std::size_t src = mapping.selected[slot];
        out[src] = out[src] + disp[slot];
        counts[src] += 1;
      }
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = out[i] * (1.0 / counts[i]);
      }
      break;
    }
  }
  return out;
}

// Clamp a point into `box` along each local axis. Points already inside come
// back bit-identical.
inline Point3 clamp_point_to_box(const Point3& p, const OrientedBox& box) {
  const Vec3 half = box.size * 0.5;
  Point3 u = box.to_local(p);
  bool clamped = false;
  for (int a = 0; a < 3; ++a) {
    if (u[a] < -half[a]) {
      u[a] = -half[a];
      clamped = true;
    } else if (u[a] > half[a]) {
      u[a] = half[a];
      clamped = true;
    }
  }
  return clamped ? box.to_world(u) : p;
}

inline PointList clamp_to_box(const PointList& points, const OrientedBox& box) {
  PointList out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(clamp_point_to_box(p, box));
  return out;
}

// A point cloud with optional ground-truth boxes.
struct Scene {
  std::string id;
  PointList points;
  std::optional<std::vector<OrientedBox>> annotations;
};

enum class GlobalPolicy { none, weak, strong };

// The sampled transform of one global_augment call.
struct GlobalTransform {
  bool identity = true;
  bool flip = false;     // x -> -x
  double rotation = 0.0;  // about z, radians
  double scale = 1.0;

  Point3 apply_point(const Point3& p) const {
    if (identity) return p;
    Point3 q = p;
    if (flip) q.x = -q.x;
    const double c = std::cos(rotation), s = std::sin(rotation);
    q = {c * q.x - s * q.y, s * q.x + c * q.y, q.z};
    return q * scale;
  }

  Point3 invert_point(const Point3& p) const {
    if (identity) return p;
    Point3 q = p * (1.0 / scale);
    const double c = std::cos(rotation), s = std::sin(rotation);
    q = {c * q.x + s * q.y, -s * q.x + c * q.y, q.z};
    if (flip) q.x = -q.x;
    return q;
  }

  OrientedBox apply_box(const OrientedBox& b) const {
    if (identity) return b;
    OrientedBox out = b;
    out.center = apply_point(b.center);
    out.size = b.size * scale;
    double yaw = b.yaw;
    if (flip) yaw = -yaw;
    out.yaw = normalize_angle(yaw + rotation);
    return out;
  }

  OrientedBox invert_box(const OrientedBox& b) const {
    if (identity) return b;
    OrientedBox out = b;
    out.center = invert_point(b.center);
    out.size = b.size * (1.0 / scale);
    double yaw = normalize_angle(b.yaw - rotation);
    if (flip) yaw = -yaw;
    out.yaw = normalize_angle(yaw);
    return out;
  }
};

// Scene-level flip/rotate/scale/jitter applied consistently to points and
// boxes. `none` is a bit-exact identity.
inline std::pair<Scene, GlobalTransform> global_augment(const Scene& scene,
                                                        GlobalPolicy policy,
                                                        Rng& rng) {
  if (policy == GlobalPolicy::none) return {scene, GlobalTransform{}};
  GlobalTransform t;
  t.identity = false;
  t.flip = rng.bernoulli(0.5);
  double jitter_sigma = 0.0;
  if (policy == GlobalPolicy::weak) {
    t.rotation = rng.uniform(-5.0, 5.0) * M_PI / 180.0;
    t.scale = 1.0;
  } else {
    t.rotation = rng.uniform(-30.0, 30.0) * M_PI / 180.0;
    t.scale = rng.uniform(0.85, 1.15);
    jitter_sigma = 0.01;
  }
  Scene out;
  out.id = scene.id;
  out.points.reserve(scene.points.size());
  for (const auto& p : scene.points) {
    Point3 q = t.apply_point(p);
    if (jitter_sigma > 0) {
      q.x += rng.normal(0.0, jitter_sigma);
      q.y += rng.normal(0.0, jitter_sigma);
      q.z += rng.normal(0.0, jitter_sigma);
    }
    out.points.push_back(q);
  }
  if (scene.annotations) {
    std::vector<OrientedBox> boxes;
    boxes.reserve(scene.annotations->size());
    for (const auto& b : *scene.annotations) boxes.push_back(t.apply_box(b));
    out.annotations = std::move(boxes);
  }
  return {out, t};
}

}  // namespace opa
