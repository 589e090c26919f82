#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "opa/geometry.hpp"
#include "opa/metrics.hpp"
#include "opa/rng.hpp"
#include "opa/tensor.hpp"

namespace opa {

// One detector output: decoded box parameters plus confidence heads.
struct Proposal {
  Point3 center;            // world frame
  Vec3 size;                // full extents
  double yaw_sin = 0.0;     // normalized (sin, cos)
  double yaw_cos = 1.0;
  std::vector<double> class_probs;
  double objectness = 0.0;  // paper's y_o hat
  double iou_pred = 0.0;

  double yaw() const { return std::atan2(yaw_sin, yaw_cos); }

  OrientedBox box() const {
    OrientedBox b;
    b.center = center;
    b.size = size;
    b.yaw = normalize_angle(yaw());
    int best = 0;
    for (std::size_t c = 1; c < class_probs.size(); ++c)
      if (class_probs[c] > class_probs[best]) best = static_cast<int>(c);
    b.class_id = best;
    return b;
  }

  double max_class_prob() const {
    double m = 0;
    for (double p : class_probs) m = std::max(m, p);
    return m;
  }
};

struct Assignment {
  std::size_t proposal_index = 0;
  int gt_index = -1;
  enum class Kind { positive, negative, ignored } kind = Kind::negative;
};

// Vote-style detector: per-point MLP 3->64->128 on centroid-centered
// coordinates, K=32 FPS seeds, per-seed center vote, proposal head over
// seed + global max-pooled features.
struct DetectorNet {
  static constexpr int kProposals = 32;
  static constexpr int kClasses = 6;
  static constexpr double kPositiveRadius = 0.3;
  static constexpr double kNegativeRadius = 0.6;
  // head output columns
  static constexpr int kColCenter = 0;   // 3
  static constexpr int kColLogSize = 3;  // 3
  static constexpr int kColSin = 6;
  static constexpr int kColCos = 7;
  static constexpr int kColClass = 8;    // kClasses
  static constexpr int kColObj = 8 + kClasses;
  static constexpr int kColIou = 9 + kClasses;
  static constexpr int kOutDim = 10 + kClasses;

  ad::Network net;

  explicit DetectorNet(std::uint64_t seed = 1) {
    Rng rng(seed);
    auto he = [&](const char* name, int in, int out, double gain = 1.0) {
      ad::Tensor w(in, out);
      const double s = gain * std::sqrt(2.0 / in);
      for (auto& x : w.v) x = rng.normal(0.0, s);
      net.add(name, std::move(w));
      net.add(std::string(name) + "_b", ad::Tensor(1, out));
    };
    he("mlp1", 3, 64);
    he("mlp2", 64, 128);
    he("vote1", 128, 64);
    // near-zero output layers: initial votes stay at the seed positions and
    // box refinements start small, so center-distance matching can bootstrap
    he("vote2", 64, 3, 0.01);
    he("head1", 259, 128);
    he("head2", 128, kOutDim, 0.01);
  }
};

// Graph handles of one detect() pass, kept around for loss construction.
struct DetectNodes {
  int head = -1;           // K x kOutDim
  int votes = -1;          // K x 3, centroid-centered frame
  int centroid_node = -1;  // 1 x 3, graph node of the centering offset
  std::vector<std::size_t> seeds;   // indices into the scene points
  Point3 centroid;                  // world-frame centering offset
  std::vector<Point3> seed_points;  // world frame
};

// Build the detector forward pass on `g` over an N x 3 points node.
// `trainable` controls whether gradients flow into the detector parameters.
inline DetectNodes detect_graph(ad::Graph& g, int points, DetectorNet& d,
                                bool trainable) {
  const ad::Tensor& pts = g.value(points);
  const int n = pts.rows;
  if (n < DetectorNet::kProposals)
    throw std::invalid_argument("detect: scene too sparse");

  auto P = [&](const char* name) { return g.param(*d.net.find(name), trainable); };

  // centroid centering grants translation consistency
  ad::Tensor ones(1, n);
  std::fill(ones.v.begin(), ones.v.end(), 1.0 / n);
  const int centroid = g.matmul(g.constant(std::move(ones)), points);  // 1x3
  const int centered = g.add(points, g.scale(centroid, -1.0));

  const int h1 = g.relu(g.add(g.matmul(centered, P("mlp1")), P("mlp1_b")));
  const int feat = g.relu(g.add(g.matmul(h1, P("mlp2")), P("mlp2_b")));

  DetectNodes out;
  const ad::Tensor& cv = g.value(centered);
  PointList centered_pts(n);
  for (int i = 0; i < n; ++i)
    centered_pts[i] = {cv.at(i, 0), cv.at(i, 1), cv.at(i, 2)};
  out.seeds = farthest_point_sampling(centered_pts, DetectorNet::kProposals, 0);
  const ad::Tensor& ctr = g.value(centroid);
  out.centroid_node = centroid;
  out.centroid = {ctr.at(0, 0), ctr.at(0, 1), ctr.at(0, 2)};
  for (std::size_t s : out.seeds)
    out.seed_points.push_back(centered_pts[s] + out.centroid);

  const int seed_feat = g.gather(feat, out.seeds);
  const int seed_xyz = g.gather(centered, out.seeds);
  const int v1 = g.relu(g.add(g.matmul(seed_feat, P("vote1")), P("vote1_b")));
  const int voffset = g.add(g.matmul(v1, P("vote2")), P("vote2_b"));
  out.votes = g.add(seed_xyz, voffset);

  const int gfeat = g.max_pool(feat, 0);  // 1x128
  const int gbc = g.gather(gfeat, std::vector<std::size_t>(DetectorNet::kProposals, 0));
  const int hin = g.concat(g.concat(seed_feat, gbc, 1), out.votes, 1);
  const int hh = g.relu(g.add(g.matmul(hin, P("head1")), P("head1_b")));
  out.head = g.add(g.matmul(hh, P("head2")), P("head2_b"));
  return out;
}

inline std::vector<Proposal> decode_proposals(const ad::Graph& g,
                                              const DetectNodes& nodes) {
  const ad::Tensor& head = g.value(nodes.head);
  const ad::Tensor& votes = g.value(nodes.votes);
  std::vector<Proposal> out(head.rows);
  for (int k = 0; k < head.rows; ++k) {
    Proposal& p = out[k];
    p.center = Point3{votes.at(k, 0) + head.at(k, DetectorNet::kColCenter + 0),
                      votes.at(k, 1) + head.at(k, DetectorNet::kColCenter + 1),
                      votes.at(k, 2) + head.at(k, DetectorNet::kColCenter + 2)} +
               nodes.centroid;
    for (int a = 0; a < 3; ++a) {
      const double ls = std::clamp(head.at(k, DetectorNet::kColLogSize + a), -4.0, 4.0);
      p.size[a] = std::exp(ls);
    }
    const double s = head.at(k, DetectorNet::kColSin);
    const double c = head.at(k, DetectorNet::kColCos);
    const double norm = std::sqrt(s * s + c * c + 1e-12);
    p.yaw_sin = s / norm;
    p.yaw_cos = c / norm;
    p.class_probs.resize(DetectorNet::kClasses);
    double mx = -std::numeric_limits<double>::infinity();
    for (int cc = 0; cc < DetectorNet::kClasses; ++cc)
      mx = std::max(mx, head.at(k, DetectorNet::kColClass + cc));
    double sum = 0;
    for (int cc = 0; cc < DetectorNet::kClasses; ++cc) {
      p.class_probs[cc] = std::exp(head.at(k, DetectorNet::kColClass + cc) - mx);
      sum += p.class_probs[cc];
    }
    for (auto& x : p.class_probs) x /= sum;
    p.objectness = 1.0 / (1.0 + std::exp(-head.at(k, DetectorNet::kColObj)));
    p.iou_pred = 1.0 / (1.0 + std::exp(-head.at(k, DetectorNet::kColIou)));
  }
  return out;
}

// Forward-only convenience entry point.
inline std::vector<Proposal> detect(const PointList& points, DetectorNet& d) {
  ad::Graph g;
  ad::Tensor t(static_cast<int>(points.size()), 3);
  for (std::size_t i = 0; i < points.size(); ++i) {
    t.at(static_cast<int>(i), 0) = points[i].x;
    t.at(static_cast<int>(i), 1) = points[i].y;
    t.at(static_cast<int>(i), 2) = points[i].z;
  }
  const auto nodes = detect_graph(g, g.constant(std::move(t)), d, false);
  return decode_proposals(g, nodes);
}

// Center-distance matching: positive within 0.3 of the nearest GT center,
// negative beyond 0.6 of every GT center, ignored in between.
inline std::vector<Assignment> match(const std::vector<Proposal>& proposals,
                                     const std::vector<OrientedBox>& gt) {
  std::vector<Assignment> out(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    Assignment& a = out[i];
    a.proposal_index = i;
    double best_d = std::numeric_limits<double>::infinity();
    int best_g = -1;
    for (std::size_t gi = 0; gi < gt.size(); ++gi) {
      const double dist = (proposals[i].center - gt[gi].center).norm();
      if (dist < best_d) {
        best_d = dist;
        best_g = static_cast<int>(gi);
      }
    }
    if (best_g >= 0 && best_d <= DetectorNet::kPositiveRadius) {
      a.kind = Assignment::Kind::positive;
      a.gt_index = best_g;
    } else if (best_g >= 0 && best_d <= DetectorNet::kNegativeRadius) {
      a.kind = Assignment::Kind::ignored;
    } else {
      a.kind = Assignment::Kind::negative;
    }
  }
  return out;
}

// Training-time assignment anchored at the vote (cluster) positions rather
// than the refined centers: the refinement head is untrained until positives
// exist, so matching on refined centers cannot bootstrap.
inline std::vector<Assignment> match_votes(const ad::Graph& g,
                                           const DetectNodes& det,
                                           const std::vector<OrientedBox>& gt) {
  const ad::Tensor& votes = g.value(det.votes);
  std::vector<Proposal> anchors(votes.rows);
  for (int k = 0; k < votes.rows; ++k)
    anchors[k].center = Point3{votes.at(k, 0), votes.at(k, 1), votes.at(k, 2)} +
                        det.centroid;
  return match(anchors, gt);
}

// Greedy objectness-ordered NMS with a low-objectness pre-filter.
inline std::vector<Proposal> nms(const std::vector<Proposal>& proposals,
                                 double iou_threshold = 0.25,
                                 double objectness_floor = 0.05) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < proposals.size(); ++i)
    if (proposals[i].objectness >= objectness_floor) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (proposals[a].objectness != proposals[b].objectness)
      return proposals[a].objectness > proposals[b].objectness;
    return a < b;
  });
  std::vector<Proposal> kept;
  std::vector<OrientedBox> kept_boxes;
  for (std::size_t i : order) {
    const OrientedBox b = proposals[i].box();
    bool suppressed = false;
    for (const auto& kb : kept_boxes) {
      if (iou_3d(b, kb) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) {
      kept.push_back(proposals[i]);
      kept_boxes.push_back(b);
    }
  }
  return kept;
}

}  // namespace opa
