#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "opa/geometry.hpp"
#include "opa/rng.hpp"
#include "opa/tensor.hpp"

namespace opa {

// One object fed through the augmentation pipeline.
struct ObjectCrop {
  OrientedBox box;
  std::vector<std::size_t> point_indices;  // into the scene (P_b)
  PointList sampled_points;                // box-local normalized, S points
  SampleMapping mapping;
};

// Per-point displacement network: MLP 3->64->128->64->3, tanh output scaled
// by d_max. The final layer starts at zero so a fresh augmentor is a no-op.
struct AugmentorNet {
  // cap per axis as a fraction of the half-extent; 0.2 of the half-extent is
  // 10 % of the box size, the top edge of the displacement histogram
  static constexpr double kDMax = 0.2;

  ad::Network net;

  explicit AugmentorNet(std::uint64_t seed = 2) {
    Rng rng(seed);
    auto he = [&](const char* name, int in, int out, bool zero) {
      ad::Tensor w(in, out);
      if (!zero) {
        const double s = std::sqrt(2.0 / in);
        for (auto& x : w.v) x = rng.normal(0.0, s);
      }
      net.add(name, std::move(w));
      net.add(std::string(name) + "_b", ad::Tensor(1, out));
    };
    he("aug1", 3, 64, false);
    he("aug2", 64, 128, false);
    he("aug3", 128, 64, false);
    he("aug4", 64, 3, true);
  }
};

// Displacement head on a graph over box-local normalized S x 3 points.
inline int forward_displacements_graph(ad::Graph& g, int sampled,
                                       AugmentorNet& a, bool trainable) {
  auto P = [&](const char* name) { return g.param(*a.net.find(name), trainable); };
  int h = g.relu(g.add(g.matmul(sampled, P("aug1")), P("aug1_b")));
  h = g.relu(g.add(g.matmul(h, P("aug2")), P("aug2_b")));
  h = g.relu(g.add(g.matmul(h, P("aug3")), P("aug3_b")));
  const int out = g.tanh_(g.add(g.matmul(h, P("aug4")), P("aug4_b")));
  return g.scale(out, AugmentorNet::kDMax);
}

inline std::vector<Vec3> forward_displacements(const PointList& sampled,
                                               AugmentorNet& a) {
  ad::Graph g;
  ad::Tensor t(static_cast<int>(sampled.size()), 3);
  for (std::size_t i = 0; i < sampled.size(); ++i) {
    t.at(static_cast<int>(i), 0) = sampled[i].x;
    t.at(static_cast<int>(i), 1) = sampled[i].y;
    t.at(static_cast<int>(i), 2) = sampled[i].z;
  }
  const int out = forward_displacements_graph(g, g.constant(std::move(t)), a, false);
  const ad::Tensor& v = g.value(out);
  std::vector<Vec3> disp(sampled.size());
  for (std::size_t i = 0; i < sampled.size(); ++i)
    disp[i] = {v.at(static_cast<int>(i), 0), v.at(static_cast<int>(i), 1),
               v.at(static_cast<int>(i), 2)};
  return disp;
}

// Graph handles of one augment_scene pass.
struct AugmentGraph {
  int scene = -1;  // N x 3 augmented points node
  std::vector<ObjectCrop> crops;
  // per crop: node of the clamped replacement rows and their scene indices
  std::vector<int> replaced_nodes;
};

constexpr std::size_t kMinObjectPoints = 8;

// Full object-level pipeline on a graph: gather object points, resample to S,
// predict displacements, reverse-map, denormalize, clamp into the source box,
// scatter back. Points outside the selected boxes stay bit-identical.
inline AugmentGraph augment_scene_graph(ad::Graph& g, const Scene& scene,
                                        const std::vector<OrientedBox>& boxes,
                                        std::size_t max_objects,
                                        std::size_t sample_count,
                                        AugmentorNet& aug, Rng& rng,
                                        bool trainable) {
  ad::Tensor pts(static_cast<int>(scene.points.size()), 3);
  for (std::size_t i = 0; i < scene.points.size(); ++i) {
    pts.at(static_cast<int>(i), 0) = scene.points[i].x;
    pts.at(static_cast<int>(i), 1) = scene.points[i].y;
    pts.at(static_cast<int>(i), 2) = scene.points[i].z;
  }
  AugmentGraph out;
  out.scene = g.constant(std::move(pts));

  std::size_t augmented = 0;
  for (const auto& box : boxes) {
    if (augmented >= max_objects) break;
    auto idx = points_in_box(scene.points, box);
    if (idx.size() < kMinObjectPoints) continue;  // degenerate, skip
    augmented += 1;

    const Vec3 half = box.size * 0.5;
    PointList local(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const Point3 u = box.to_local(scene.points[idx[i]]);
      local[i] = {u.x / half.x, u.y / half.y, u.z / half.z};
    }

    ObjectCrop crop;
    crop.box = box;
    crop.point_indices = idx;
    if (local.size() > sample_count) {
      crop.mapping.direction = SampleMapping::Direction::down;
      crop.mapping.selected = farthest_point_sampling(local, sample_count, 0);
      crop.mapping.original_count = local.size();
      crop.mapping.sampled_count = sample_count;
      crop.sampled_points.reserve(sample_count);
      for (std::size_t s : crop.mapping.selected)
        crop.sampled_points.push_back(local[s]);
    } else if (local.size() < sample_count) {
      auto [padded, mapping] = pad_sample(local, sample_count, rng);
      crop.mapping = mapping;
      crop.sampled_points = std::move(padded);
    } else {
      crop.mapping.direction = SampleMapping::Direction::identity;
      crop.mapping.original_count = local.size();
      crop.mapping.sampled_count = local.size();
      crop.sampled_points = local;
    }

    ad::Tensor sampled(static_cast<int>(crop.sampled_points.size()), 3);
    for (std::size_t i = 0; i < crop.sampled_points.size(); ++i) {
      sampled.at(static_cast<int>(i), 0) = crop.sampled_points[i].x;
      sampled.at(static_cast<int>(i), 1) = crop.sampled_points[i].y;
      sampled.at(static_cast<int>(i), 2) = crop.sampled_points[i].z;
    }
    const int dhat = forward_displacements_graph(g, g.constant(std::move(sampled)),
                                                 aug, trainable);

    // reverse mapping: S x 3 -> S_b x 3
    int disp;
    switch (crop.mapping.direction) {
      case SampleMapping::Direction::identity:
        disp = dhat;
        break;
      case SampleMapping::Direction::down:
        disp = g.gather(dhat, nearest_selected_index(local, crop.mapping.selected));
        break;
      case SampleMapping::Direction::up: {
        std::vector<std::vector<std::size_t>> groups(crop.mapping.original_count);
        for (std::size_t slot = 0; slot < crop.mapping.selected.size(); ++slot)
          groups[crop.mapping.selected[slot]].push_back(slot);
        disp = g.pool_rows_mean(dhat, std::move(groups));
        break;
      }
    }

    // denormalize to box-local meters, rotate into the world frame
    ad::Tensor half_row(1, 3);
    half_row.at(0, 0) = half.x;
    half_row.at(0, 1) = half.y;
    half_row.at(0, 2) = half.z;
    const int scaled = g.mul(disp, g.constant(std::move(half_row)));
    const double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
    ad::Tensor rot_t(3, 3);  // R(yaw)^T, rows transform right
    rot_t.at(0, 0) = cy;
    rot_t.at(0, 1) = sy;
    rot_t.at(1, 0) = -sy;
    rot_t.at(1, 1) = cy;
    rot_t.at(2, 2) = 1.0;
    const int world_disp = g.matmul(scaled, g.constant(std::move(rot_t)));

    const int moved = g.add(g.gather(out.scene, idx), world_disp);
    const int clamped = g.clamp_to_box_rows(moved, box);
    out.scene = g.scatter_rows(out.scene, idx, clamped);
    out.replaced_nodes.push_back(clamped);
    out.crops.push_back(std::move(crop));
  }
  return out;
}

struct AugmentResult {
  Scene scene;
  std::vector<ObjectCrop> crops;
  // applied world-frame displacement (after clamping) per crop point
  std::vector<std::vector<Vec3>> displacements;
};

inline AugmentResult augment_scene(const Scene& scene,
                                   const std::vector<OrientedBox>& boxes,
                                   std::size_t max_objects,
                                   std::size_t sample_count, AugmentorNet& aug,
                                   Rng& rng) {
  ad::Graph g;
  auto ag = augment_scene_graph(g, scene, boxes, max_objects, sample_count, aug,
                                rng, false);
  AugmentResult out;
  out.scene.id = scene.id;
  out.scene.annotations = scene.annotations;
  const ad::Tensor& pts = g.value(ag.scene);
  out.scene.points.resize(pts.rows);
  for (int i = 0; i < pts.rows; ++i)
    out.scene.points[i] = {pts.at(i, 0), pts.at(i, 1), pts.at(i, 2)};
  out.crops = std::move(ag.crops);
  for (std::size_t ci = 0; ci < out.crops.size(); ++ci) {
    const auto& idx = out.crops[ci].point_indices;
    std::vector<Vec3> d(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i)
      d[i] = out.scene.points[idx[i]] - scene.points[idx[i]];
    out.displacements.push_back(std::move(d));
  }
  return out;
}

// Displacement-ratio histograms per axis: |d_axis| in the box frame over the
// box dimension, 0.5%-wide bins up to 10%; only ratios above 1% are counted.
struct DisplacementHistogram {
  static constexpr double kBinWidth = 0.005;
  static constexpr double kMinRatio = 0.01;
  static constexpr int kNumBins = 20;  // covers [0, 10%]
  std::array<std::vector<long>, 3> counts{
      std::vector<long>(kNumBins, 0), std::vector<long>(kNumBins, 0),
      std::vector<long>(kNumBins, 0)};

  long total() const {
    long t = 0;
    for (const auto& axis : counts)
      for (long c : axis) t += c;
    return t;
  }
};

inline DisplacementHistogram displacement_histogram(
    const std::vector<ObjectCrop>& crops,
    const std::vector<std::vector<Vec3>>& fields) {
  DisplacementHistogram h;
  for (std::size_t ci = 0; ci < crops.size(); ++ci) {
    const OrientedBox& box = crops[ci].box;
    const double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
    for (const Vec3& d : fields[ci]) {
      const Vec3 local{cy * d.x + sy * d.y, -sy * d.x + cy * d.y, d.z};
      for (int a = 0; a < 3; ++a) {
        const double ratio = std::abs(local[a]) / box.size[a];
        if (ratio <= DisplacementHistogram::kMinRatio) continue;
        const int bin = std::min(static_cast<int>(ratio / DisplacementHistogram::kBinWidth),
                                 DisplacementHistogram::kNumBins - 1);
        h.counts[a][bin] += 1;
      }
    }
  }
  return h;
}

}  // namespace opa
