#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "opa/geometry.hpp"
#include "opa/metrics.hpp"
#include "opa/rng.hpp"

namespace opa {

// Parameters of the synthetic scene generator.
struct SceneSpec {
  double room_half = 3.5;       // room is [-room_half, room_half]^2
  int min_objects = 2;
  int max_objects = 8;
  int num_classes = 6;
  std::size_t total_points = 2048;
  double noise_sigma = 0.005;
  double min_center_distance = 1.4;  // between object centers, xy
  double box_margin = 0.03;          // keeps noisy surface points inside
};

namespace detail {

// class geometry: footprint/height ranges chosen so height alone is a strong
// class cue (the detector classifies from point features plus a global code)
struct ClassShape {
  double foot_lo, foot_hi;    // footprint edge / diameter
  double height_lo, height_hi;
};

inline const ClassShape& class_shape(int cls) {
  static const ClassShape shapes[6] = {
      {0.5, 0.9, 0.28, 0.42},  // 0 cuboid: low slab
      {0.3, 0.5, 1.25, 1.5},   // 1 cylinder: tall thin
      {0.6, 0.9, 0.5, 0.68},   // 2 L-shape
      {0.6, 0.9, 0.75, 0.95},  // 3 T-shape
      {0.5, 0.8, 1.0, 1.2},    // 4 hollow box
      {0.6, 1.0, 0.5, 0.7},    // 5 ramp (wedge)
  };
  return shapes[cls];
}

// Sample one point on the surface of class `cls` in the local frame, with the
// object occupying [-w/2,w/2] x [-d/2,d/2] x [0,h].
inline Point3 sample_class_surface(int cls, double w, double d, double h, Rng& rng) {
  auto on_cuboid = [&](double cw, double cd, double ch, double x0, double y0,
                       double z0) {
    // top + 4 sides, area-weighted
    const double a_top = cw * cd;
    const double a_x = cd * ch, a_y = cw * ch;
    const double total = a_top + 2 * a_x + 2 * a_y;
    double r = rng.uniform(0.0, total);
    double x, y, z;
    if (r < a_top) {
      x = rng.uniform(-cw / 2, cw / 2);
      y = rng.uniform(-cd / 2, cd / 2);
      z = ch;
    } else if ((r -= a_top) < 2 * a_x) {
      x = (r < a_x) ? -cw / 2 : cw / 2;
      y = rng.uniform(-cd / 2, cd / 2);
      z = rng.uniform(0.0, ch);
    } else {
      r -= 2 * a_x;
      x = rng.uniform(-cw / 2, cw / 2);
      y = (r < a_y) ? -cd / 2 : cd / 2;
      z = rng.uniform(0.0, ch);
    }
    return Point3{x0 + x, y0 + y, z0 + z};
  };

  switch (cls) {
    case 0:  // cuboid
      return on_cuboid(w, d, h, 0, 0, 0);
    case 1: {  // cylinder: lateral surface + top disc
      const double radius = 0.5 * std::min(w, d);
      const double a_side = 2 * M_PI * radius * h;
      const double a_top = M_PI * radius * radius;
      if (rng.uniform(0.0, a_side + a_top) < a_side) {
        const double t = rng.uniform(0.0, 2 * M_PI);
        return {radius * std::cos(t), radius * std::sin(t), rng.uniform(0.0, h)};
      }
      const double rr = radius * std::sqrt(rng.uniform());
      const double t = rng.uniform(0.0, 2 * M_PI);
      return {rr * std::cos(t), rr * std::sin(t), h};
    }
    case 2:  // L-shape: full-width base arm + half-width side arm
      if (rng.bernoulli(0.5))
        return on_cuboid(w, d / 2, h, 0, -d / 4, 0);
      return on_cuboid(w / 2, d / 2, h, -w / 4, d / 4, 0);
    case 3:  // T-shape: post + top bar
      if (rng.bernoulli(0.4))
        return on_cuboid(w / 3, d / 3, 0.7 * h, 0, 0, 0);
      return on_cuboid(w, d, 0.3 * h, 0, 0, 0.7 * h);
    case 4: {  // hollow box: four thin walls
      const double t = 0.05;
      const int wall = static_cast<int>(rng.uniform_index(4));
      if (wall < 2)
        return on_cuboid(t, d, h, (wall == 0 ? -1 : 1) * (w - t) / 2, 0, 0);
      return on_cuboid(w, t, h, 0, (wall == 2 ? -1 : 1) * (d - t) / 2, 0);
    }
    default: {  // ramp: wedge rising along +x
      // slanted top + two triangular sides + back wall, sampled by rejection
      // over the wedge volume's surface approximation: pick top face mostly
      const double r = rng.uniform();
      if (r < 0.6) {  // slanted top z = h * (x/w + 0.5)
        const double x = rng.uniform(-w / 2, w / 2);
        return {x, rng.uniform(-d / 2, d / 2), h * (x / w + 0.5)};
      }
      if (r < 0.85) {  // back wall at x = w/2
        return {w / 2, rng.uniform(-d / 2, d / 2), rng.uniform(0.0, h)};
      }
      const double x = rng.uniform(-w / 2, w / 2);  // triangular side
      return {x, rng.bernoulli(0.5) ? -d / 2 : d / 2,
              rng.uniform(0.0, h * (x / w + 0.5))};
    }
  }
}

}  // namespace detail

// Build one synthetic room: floor slab + wall strips + 2..8 surface-sampled
// primitive objects with ground-truth boxes; exactly `total_points` points.
inline Scene generate_scene(Rng& rng, const SceneSpec& spec, const std::string& id) {
  Scene scene;
  scene.id = id;
  std::vector<OrientedBox> boxes;

  const int want = spec.min_objects +
                   static_cast<int>(rng.uniform_index(
                       static_cast<std::size_t>(spec.max_objects - spec.min_objects + 1)));
  struct Placed {
    int cls;
    double w, d, h, yaw;
    Point3 pos;  // base center on the floor
    std::size_t count;
  };
  std::vector<Placed> placed;
  const double place_half = spec.room_half - 0.8;
  for (int i = 0; i < want; ++i) {
    const int cls = static_cast<int>(rng.uniform_index(spec.num_classes));
    const auto& cs = detail::class_shape(cls);
    Placed p;
    p.cls = cls;
    p.w = rng.uniform(cs.foot_lo, cs.foot_hi);
    p.d = rng.uniform(cs.foot_lo, cs.foot_hi);
    p.h = rng.uniform(cs.height_lo, cs.height_hi);
    p.yaw = rng.uniform(-M_PI, M_PI);
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      p.pos = {rng.uniform(-place_half, place_half),
               rng.uniform(-place_half, place_half), 0.0};
      ok = true;
      for (const auto& q : placed) {
        const double dx = p.pos.x - q.pos.x, dy = p.pos.y - q.pos.y;
        if (std::sqrt(dx * dx + dy * dy) < spec.min_center_distance) {
          ok = false;
          break;
        }
      }
    }
    if (!ok) continue;  // placement failed; scene gets fewer objects
    placed.push_back(p);
  }

  // per-object point budget, leaving room for background
  const std::size_t max_obj_total = spec.total_points * 3 / 4;
  const std::size_t per_cap =
      std::min<std::size_t>(600, max_obj_total / std::max<std::size_t>(placed.size(), 1));
  const std::size_t per_min = std::min<std::size_t>(100, per_cap);
  for (auto& p : placed)
    p.count = per_min + rng.uniform_index(per_cap - per_min + 1);

  for (const auto& p : placed) {
    const double cy = std::cos(p.yaw), sy = std::sin(p.yaw);
    for (std::size_t i = 0; i < p.count; ++i) {
      const Point3 l = detail::sample_class_surface(p.cls, p.w, p.d, p.h, rng);
      Point3 q{p.pos.x + cy * l.x - sy * l.y, p.pos.y + sy * l.x + cy * l.y, l.z};
      q.x += rng.normal(0.0, spec.noise_sigma);
      q.y += rng.normal(0.0, spec.noise_sigma);
      q.z += rng.normal(0.0, spec.noise_sigma);
      scene.points.push_back(q);
    }
    OrientedBox b;
    b.center = {p.pos.x, p.pos.y, p.h / 2};
    b.size = {p.w + 2 * spec.box_margin, p.d + 2 * spec.box_margin,
              p.h + 2 * spec.box_margin};
    b.yaw = normalize_angle(p.yaw);
    b.class_id = p.cls;
    boxes.push_back(b);
  }

  // background: floor slab + wall strips
  const std::size_t bg = spec.total_points - scene.points.size();
  const std::size_t floor_n = bg * 7 / 10;
  for (std::size_t i = 0; i < bg; ++i) {
    Point3 q;
    if (i < floor_n) {
      q = {rng.uniform(-spec.room_half, spec.room_half),
           rng.uniform(-spec.room_half, spec.room_half), 0.0};
    } else {
      const int wall = static_cast<int>(rng.uniform_index(4));
      const double along = rng.uniform(-spec.room_half, spec.room_half);
      const double z = rng.uniform(0.0, 2.0);
      if (wall == 0) q = {-spec.room_half, along, z};
      else if (wall == 1) q = {spec.room_half, along, z};
      else if (wall == 2) q = {along, -spec.room_half, z};
      else q = {along, spec.room_half, z};
    }
    q.x += rng.normal(0.0, spec.noise_sigma);
    q.y += rng.normal(0.0, spec.noise_sigma);
    q.z += rng.normal(0.0, spec.noise_sigma);
    scene.points.push_back(q);
  }
  scene.annotations = std::move(boxes);
  return scene;
}

// ---- scene file I/O -------------------------------------------------------

namespace detail {

inline std::string fmt9(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", x);
  return buf;
}

}  // namespace detail

// JSON scene file, coordinates at 9 significant digits.
inline void save_scene(const Scene& scene, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write scene file: " + path);
  out << "{\"id\":\"" << scene.id << "\",\"points\":[";
  for (std::size_t i = 0; i < scene.points.size(); ++i) {
    const auto& p = scene.points[i];
    if (i) out << ",";
    out << "[" << detail::fmt9(p.x) << "," << detail::fmt9(p.y) << ","
        << detail::fmt9(p.z) << "]";
  }
  out << "]";
  if (scene.annotations) {
    out << ",\"boxes\":[";
    for (std::size_t i = 0; i < scene.annotations->size(); ++i) {
      const auto& b = (*scene.annotations)[i];
      if (i) out << ",";
      out << "{\"center\":[" << detail::fmt9(b.center.x) << ","
          << detail::fmt9(b.center.y) << "," << detail::fmt9(b.center.z)
          << "],\"size\":[" << detail::fmt9(b.size.x) << ","
          << detail::fmt9(b.size.y) << "," << detail::fmt9(b.size.z)
          << "],\"yaw\":" << detail::fmt9(b.yaw) << ",\"class\":" << b.class_id
          << "}";
    }
    out << "]";
  }
  out << "}\n";
}

inline Scene load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read scene file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed scene file " + path + ": " + e.what());
  }
  if (!j.contains("points"))
    throw std::runtime_error("malformed scene file " + path +
                             ": missing field 'points'");
  Scene scene;
  scene.id = j.value("id", "");
  for (const auto& p : j["points"]) {
    if (!p.is_array() || p.size() != 3)
      throw std::runtime_error("malformed scene file " + path +
                               ": bad entry in 'points'");
    scene.points.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>()});
  }
  if (j.contains("boxes")) {
    std::vector<OrientedBox> boxes;
    for (const auto& e : j["boxes"]) {
      if (!e.contains("center") || !e.contains("size") || !e.contains("yaw") ||
          !e.contains("class"))
        throw std::runtime_error("malformed scene file " + path +
                                 ": bad entry in 'boxes'");
      OrientedBox b;
      b.center = {e["center"][0].get<double>(), e["center"][1].get<double>(),
                  e["center"][2].get<double>()};
      b.size = {e["size"][0].get<double>(), e["size"][1].get<double>(),
                e["size"][2].get<double>()};
      b.yaw = e["yaw"].get<double>();
      b.class_id = e["class"].get<int>();
      boxes.push_back(b);
    }
    scene.annotations = std::move(boxes);
  }
  return scene;
}

// ---- dataset splits -------------------------------------------------------

struct DatasetSplit {
  std::vector<std::string> labeled;
  std::vector<std::string> unlabeled;
  std::vector<std::string> val;
  double ratio = 0.0;
};

inline DatasetSplit make_split(std::vector<std::string> train_ids,
                               std::vector<std::string> val_ids, double ratio,
                               std::uint64_t seed) {
  if (ratio <= 0.0 || ratio >= 1.0)
    throw std::invalid_argument("make_split: ratio must be in (0, 1)");
  const std::size_t n_labeled =
      static_cast<std::size_t>(std::llround(ratio * static_cast<double>(train_ids.size())));
  if (n_labeled == 0)
    throw std::invalid_argument("make_split: ratio yields zero labeled scenes");
  Rng rng(seed);
  rng.shuffle(train_ids);
  DatasetSplit split;
  split.ratio = ratio;
  split.labeled.assign(train_ids.begin(), train_ids.begin() + n_labeled);
  split.unlabeled.assign(train_ids.begin() + n_labeled, train_ids.end());
  split.val = std::move(val_ids);
  return split;
}

inline void save_split(const DatasetSplit& s, const std::string& path) {
  nlohmann::json j;
  j["labeled"] = s.labeled;
  j["unlabeled"] = s.unlabeled;
  j["val"] = s.val;
  j["ratio"] = s.ratio;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write split file: " + path);
  out << j.dump() << "\n";
}

inline DatasetSplit load_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read split file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed split file " + path + ": " + e.what());
  }
  DatasetSplit s;
  for (const char* field : {"labeled", "unlabeled", "val", "ratio"}) {
    if (!j.contains(field))
      throw std::runtime_error("malformed split file " + path +
                               ": missing field '" + field + "'");
  }
  s.labeled = j["labeled"].get<std::vector<std::string>>();
  s.unlabeled = j["unlabeled"].get<std::vector<std::string>>();
  s.val = j["val"].get<std::vector<std::string>>();
  s.ratio = j["ratio"].get<double>();
  return s;
}

}  // namespace opa
