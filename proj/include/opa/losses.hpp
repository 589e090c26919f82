#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "opa/detector.hpp"
#include "opa/geometry.hpp"
#include "opa/metrics.hpp"
#include "opa/tensor.hpp"

namespace opa {

struct DetectionLossBreakdown {
  double vote = 0;
  double objectness = 0;
  double center = 0;
  double size = 0;
  double yaw = 0;
  double cls = 0;
  double iou_est = 0;
  double total = 0;
};

// detection-loss component weights (VoteNet-convention stand-ins)
constexpr double kWVote = 1.0;
constexpr double kWObjectness = 0.5;
constexpr double kWBox = 1.0;  // center + size + yaw
constexpr double kWCls = 0.1;
constexpr double kWIouEst = 1.0;

struct DetectionLoss {
  int node = -1;  // scalar graph node
  DetectionLossBreakdown breakdown;
};

// Build the per-scene detection loss L_d on the graph that produced `det`.
inline DetectionLoss detection_loss(ad::Graph& g, const DetectNodes& det,
                                    const std::vector<Proposal>& proposals,
                                    const std::vector<Assignment>& assignments,
                                    const std::vector<OrientedBox>& gt) {
  std::vector<std::size_t> pos, neg;
  std::vector<int> pos_gt;
  for (const auto& a : assignments) {
    if (a.kind == Assignment::Kind::positive) {
      pos.push_back(a.proposal_index);
      pos_gt.push_back(a.gt_index);
    } else if (a.kind == Assignment::Kind::negative) {
      neg.push_back(a.proposal_index);
    }
  }

  const int zero = g.constant(ad::Tensor(0.0));
  DetectionLoss out;
  auto& bd = out.breakdown;

  // objectness: BCE over positives(=1) and negatives(=0), ignored excluded
  int objectness = zero;
  {
    std::vector<std::size_t> rows = pos;
    rows.insert(rows.end(), neg.begin(), neg.end());
    if (!rows.empty()) {
      ad::Tensor targets(static_cast<int>(rows.size()), 1);
      for (std::size_t i = 0; i < pos.size(); ++i) targets.v[i] = 1.0;
      const int logits = g.gather(
          g.select_cols(det.head, DetectorNet::kColObj, DetectorNet::kColObj + 1),
          rows);
      objectness = g.mean(g.bce_with_logits(logits, targets));
    }
  }

  int cls = zero, center = zero, size = zero, yaw = zero, iou_est = zero;
  if (!pos.empty()) {
    // classification on positives
    cls = g.mean(g.cross_entropy(
        g.gather(g.select_cols(det.head, DetectorNet::kColClass,
                               DetectorNet::kColClass + DetectorNet::kClasses),
                 pos),
        [&] {
          std::vector<int> t;
          for (int gi : pos_gt) t.push_back(gt[gi].class_id);
          return t;
        }()));

    // center regression against world-frame targets; the centering offset
    // stays in the graph so the augmented pass back-propagates through it
    {
      const int decoded = g.add(det.votes, g.select_cols(det.head, 0, 3));
      const int world = g.add(g.gather(decoded, pos), det.centroid_node);
      ad::Tensor target(static_cast<int>(pos.size()), 3);
      for (std::size_t i = 0; i < pos.size(); ++i) {
        const Point3 c = gt[pos_gt[i]].center;
        target.at(static_cast<int>(i), 0) = c.x;
        target.at(static_cast<int>(i), 1) = c.y;
        target.at(static_cast<int>(i), 2) = c.z;
      }
      center = g.mean(g.huber(world, target, 1.0));
    }

    // size in log space
    {
      ad::Tensor target(static_cast<int>(pos.size()), 3);
      for (std::size_t i = 0; i < pos.size(); ++i)
        for (int a = 0; a < 3; ++a)
          target.at(static_cast<int>(i), a) = std::log(gt[pos_gt[i]].size[a]);
      size = g.mean(g.huber(
          g.gather(g.select_cols(det.head, DetectorNet::kColLogSize,
                                 DetectorNet::kColLogSize + 3),
                   pos),
          target, 1.0));
    }

    // yaw via normalized (sin, cos)
    {
      const int sc = g.gather(g.select_cols(det.head, DetectorNet::kColSin,
                                            DetectorNet::kColCos + 1),
                              pos);
      const int norm = g.sqrt_(g.add_scalar(
          g.matmul(g.mul(sc, sc), g.constant(ad::Tensor::full(2, 1, 1.0))), 1e-12));
      const int inv = g.concat(g.recip_(norm), g.recip_(norm), 1);
      ad::Tensor target(static_cast<int>(pos.size()), 2);
      for (std::size_t i = 0; i < pos.size(); ++i) {
        target.at(static_cast<int>(i), 0) = std::sin(gt[pos_gt[i]].yaw);
        target.at(static_cast<int>(i), 1) = std::cos(gt[pos_gt[i]].yaw);
      }
      yaw = g.mean(g.huber(g.mul(sc, inv), target, 1.0));
    }

    // predicted IoU vs the actual IoU of the decoded box (target is a label)
    {
      ad::Tensor target(static_cast<int>(pos.size()), 1);
      for (std::size_t i = 0; i < pos.size(); ++i)
        target.v[i] = iou_3d(proposals[pos[i]].box(), gt[pos_gt[i]]);
      const int pred = g.sigmoid(g.gather(
          g.select_cols(det.head, DetectorNet::kColIou, DetectorNet::kColIou + 1),
          pos));
      iou_est = g.mean(g.huber(pred, target, 1.0));
    }
  }

  // votes: seeds lying inside a GT box regress that box's center
  int vote = zero;
  {
    std::vector<std::size_t> vote_rows;
    std::vector<Point3> vote_targets;
    for (std::size_t s = 0; s < det.seed_points.size(); ++s) {
      for (const auto& box : gt) {
        const auto inside = points_in_box({det.seed_points[s]}, box);
        if (!inside.empty()) {
          vote_rows.push_back(s);
          vote_targets.push_back(box.center);
          break;
        }
      }
    }
    if (!vote_rows.empty()) {
      const int world =
          g.add(g.gather(det.votes, vote_rows), det.centroid_node);
      ad::Tensor target(static_cast<int>(vote_rows.size()), 3);
      for (std::size_t i = 0; i < vote_rows.size(); ++i) {
        const Point3 c = vote_targets[i];
        target.at(static_cast<int>(i), 0) = c.x;
        target.at(static_cast<int>(i), 1) = c.y;
        target.at(static_cast<int>(i), 2) = c.z;
      }
      vote = g.mean(g.huber(world, target, 1.0));
    }
  }

  const int box_terms = g.add(g.add(center, size), yaw);
  out.node = g.add(
      g.add(g.add(g.scale(vote, kWVote), g.scale(objectness, kWObjectness)),
            g.add(g.scale(box_terms, kWBox), g.scale(cls, kWCls))),
      g.scale(iou_est, kWIouEst));

  bd.vote = g.value(vote).scalar();
  bd.objectness = g.value(objectness).scalar();
  bd.center = g.value(center).scalar();
  bd.size = g.value(size).scalar();
  bd.yaw = g.value(yaw).scalar();
  bd.cls = g.value(cls).scalar();
  bd.iou_est = g.value(iou_est).scalar();
  bd.total = g.value(out.node).scalar();
  return out;
}

// One matched object's inputs to the rho pace factor.
struct RhoObject {
  double gt_class_prob = 0.0;  // sum_c y_c * y^hat_c
  double objectness = 0.0;     // y^hat_o
};

// rho = max(1, exp(y_o * p_gt)) with the per-object exp terms averaged before
// the floor. `use_objectness=false` is the ablated variant exp(p_gt).
inline double rho(const std::vector<RhoObject>& objects,
                  bool use_objectness = true) {
  if (objects.empty()) return 1.0;
  double sum = 0.0;
  for (const auto& o : objects) {
    const double arg = use_objectness ? o.objectness * o.gt_class_prob
                                      : o.gt_class_prob;
    sum += std::exp(arg);
  }
  return std::max(1.0, sum / static_cast<double>(objects.size()));
}

constexpr double kAugExpClip = 20.0;

// L_A = L_a + lambda * |1 - exp(L_a - rho * L_g)|, exp argument clipped.
// Scalar form for analysis; the graph form below is used in training.
inline double augmentor_loss(double l_a, double l_g, double rho_value,
                             double lambda) {
  const double t = std::clamp(l_a - rho_value * l_g, -kAugExpClip, kAugExpClip);
  return l_a + lambda * std::abs(1.0 - std::exp(t));
}

// Graph form: l_a is a live scalar node; l_g enters as a constant so the
// magnitude term cannot push gradients through the clean-scene pass.
inline int augmentor_loss_graph(ad::Graph& g, int l_a, double l_g,
                                double rho_value, double lambda) {
  const int t = g.clamp_(g.add_scalar(l_a, -rho_value * l_g), -kAugExpClip,
                         kAugExpClip);
  const int mag = g.abs_(g.add_scalar(g.scale(g.exp_(t), -1.0), 1.0));
  return g.add(l_a, g.scale(mag, lambda));
}

// L_D = L_d(x_g, y_g) + L_d(x_a, y_a)
inline double pretrain_detector_loss(double l_g, double l_a) { return l_g + l_a; }

struct SslLossValues {
  double labeled = 0;    // L_l
  double unlabeled = 0;  // L_u
  double total = 0;      // L_SSL
};

inline SslLossValues ssl_losses(double l_labeled_g, double l_labeled_a,
                                double l_unlabeled_g, double l_unlabeled_a) {
  SslLossValues v;
  v.labeled = l_labeled_g + l_labeled_a;
  v.unlabeled = l_unlabeled_g + l_unlabeled_a;
  v.total = v.labeled + v.unlabeled;
  return v;
}

}  // namespace opa
