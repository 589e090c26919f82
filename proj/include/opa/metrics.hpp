#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "opa/geometry.hpp"

namespace opa {

namespace detail {

struct P2 {
  double x, y;
};

inline std::vector<P2> box_footprint(const OrientedBox& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hx = 0.5 * b.size.x, hy = 0.5 * b.size.y;
  std::vector<P2> out;
  out.reserve(4);
  for (const auto& [lx, ly] : std::array<std::array<double, 2>, 4>{
           {{-hx, -hy}, {hx, -hy}, {hx, hy}, {-hx, hy}}}) {
    out.push_back({b.center.x + c * lx - s * ly, b.center.y + s * lx + c * ly});
  }
  return out;
}

// Sutherland-Hodgman clip of convex `subject` against convex `clip`
// (both counter-clockwise).
inline std::vector<P2> clip_convex(std::vector<P2> subject,
                                   const std::vector<P2>& clip) {
  for (std::size_t i = 0; i < clip.size() && !subject.empty(); ++i) {
    const P2 a = clip[i];
    const P2 b = clip[(i + 1) % clip.size()];
    std::vector<P2> out;
    out.reserve(subject.size() + 2);
    // tolerance keeps vertices that graze the clip edge (e.g. identical
    // boxes) from being dropped by floating-point noise
    const double edge_scale =
        std::abs(b.x - a.x) + std::abs(b.y - a.y) + 1.0;
    auto inside = [&](const P2& p) {
      const double margin =
          1e-12 * edge_scale * (std::abs(p.x - a.x) + std::abs(p.y - a.y) + 1.0);
      return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x) >= -margin;
    };
    auto intersect = [&](const P2& p, const P2& q) {
      const double a1 = b.y - a.y, b1 = a.x - b.x;
      const double c1 = a1 * a.x + b1 * a.y;
      const double a2 = q.y - p.y, b2 = p.x - q.x;
      const double c2 = a2 * p.x + b2 * p.y;
      const double det = a1 * b2 - a2 * b1;
      return P2{(b2 * c1 - b1 * c2) / det, (a1 * c2 - a2 * c1) / det};
    };
    for (std::size_t j = 0; j < subject.size(); ++j) {
      const P2 cur = subject[j];
      const P2 nxt = subject[(j + 1) % subject.size()];
      const bool cin = inside(cur), nin = inside(nxt);
      if (cin) {
        out.push_back(cur);
        if (!nin) out.push_back(intersect(cur, nxt));
      } else if (nin) {
        out.push_back(intersect(cur, nxt));
      }
    }
    subject = std::move(out);
  }
  return subject;
}

inline double polygon_area(const std::vector<P2>& poly) {
  if (poly.size() < 3) return 0.0;
  double a = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const P2& p = poly[i];
    const P2& q = poly[(i + 1) % poly.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::abs(a);
}

}  // namespace detail

// Exact 3D IoU for z-axis oriented boxes: 2D footprint intersection by
// polygon clipping times the vertical overlap.
inline double iou_3d(const OrientedBox& a, const OrientedBox& b) {
  const double za0 = a.center.z - 0.5 * a.size.z, za1 = a.center.z + 0.5 * a.size.z;
  const double zb0 = b.center.z - 0.5 * b.size.z, zb1 = b.center.z + 0.5 * b.size.z;
  const double zo = std::min(za1, zb1) - std::max(za0, zb0);
  if (zo <= 0) return 0.0;
  const auto inter2d = detail::clip_convex(detail::box_footprint(a),
                                           detail::box_footprint(b));
  const double inter = detail::polygon_area(inter2d) * zo;
  const double uni = a.volume() + b.volume() - inter;
  return uni > 0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

// One scored detection participating in AP computation.
struct Detection {
  std::string scene_id;
  std::size_t index = 0;  // order within the scene, for tie-breaks
  OrientedBox box;
  int class_id = 0;
  double score = 0.0;
};

struct GroundTruth {
  std::string scene_id;
  OrientedBox box;
  int class_id = 0;
};

// All-point interpolated AP for one class at one IoU threshold.
// Returns -1 when the class has no ground truth (excluded from mAP).
inline double average_precision(std::vector<Detection> dets,
                                const std::vector<GroundTruth>& gts,
                                double iou_threshold, int class_id) {
  std::vector<const GroundTruth*> class_gts;
  for (const auto& g : gts)
    if (g.class_id == class_id) class_gts.push_back(&g);
  if (class_gts.empty()) return -1.0;

  std::erase_if(dets, [&](const Detection& d) { return d.class_id != class_id; });
  std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.scene_id != b.scene_id) return a.scene_id < b.scene_id;
    return a.index < b.index;
  });

  std::vector<bool> matched(class_gts.size(), false);
  std::vector<int> tp(dets.size(), 0);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    double best_iou = 0.0;
    std::size_t best_g = class_gts.size();
    for (std::size_t g = 0; g < class_gts.size(); ++g) {
      if (matched[g] || class_gts[g]->scene_id != dets[i].scene_id) continue;
      const double iou = iou_3d(dets[i].box, class_gts[g]->box);
      if (iou >= iou_threshold && iou > best_iou) {
        best_iou = iou;
        best_g = g;
      }
    }
    if (best_g < class_gts.size()) {
      matched[best_g] = true;
      tp[i] = 1;
    }
  }

  // precision envelope over the recall curve
  const double n_gt = static_cast<double>(class_gts.size());
  std::vector<double> precision(dets.size()), recall(dets.size());
  int cum_tp = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    cum_tp += tp[i];
    precision[i] = static_cast<double>(cum_tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(cum_tp) / n_gt;
  }
  for (std::size_t i = dets.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

struct ClassCounts {
  int tp = 0;
  int fp = 0;
  int gt = 0;
};

struct EvalResult {
  std::map<double, std::map<int, double>> ap;  // threshold -> class -> AP
  double map_25 = 0.0;
  double map_50 = 0.0;
  std::map<int, ClassCounts> counts;  // at the 0.25 threshold
};

// mAP over classes that have at least one ground truth.
inline double mean_ap(const std::map<int, double>& per_class) {
  double sum = 0.0;
  int n = 0;
  for (const auto& [cls, ap] : per_class) {
    if (ap < 0) continue;
    sum += ap;
    n += 1;
  }
  return n > 0 ? sum / n : 0.0;
}

inline EvalResult evaluate_detections(const std::vector<Detection>& dets,
                                      const std::vector<GroundTruth>& gts,
                                      int num_classes,
                                      const std::vector<double>& thresholds = {0.25, 0.5}) {
  EvalResult res;
  for (double t : thresholds) {
    for (int c = 0; c < num_classes; ++c)
      res.ap[t][c] = average_precision(dets, gts, t, c);
  }
  if (res.ap.count(0.25)) res.map_25 = mean_ap(res.ap.at(0.25));
  if (res.ap.count(0.5)) res.map_50 = mean_ap(res.ap.at(0.5));

  // TP/FP/GT counts at 0.25 (per-class greedy matching, score order)
  for (const auto& g : gts) res.counts[g.class_id].gt += 1;
  for (int c = 0; c < num_classes; ++c) {
    std::vector<Detection> cls_dets;
    for (const auto& d : dets)
      if (d.class_id == c) cls_dets.push_back(d);
    std::sort(cls_dets.begin(), cls_dets.end(),
              [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<const GroundTruth*> cls_gts;
    for (const auto& g : gts)
      if (g.class_id == c) cls_gts.push_back(&g);
    std::vector<bool> used(cls_gts.size(), false);
    for (const auto& d : cls_dets) {
      double best = 0;
      std::size_t bg = cls_gts.size();
      for (std::size_t g = 0; g < cls_gts.size(); ++g) {
        if (used[g] || cls_gts[g]->scene_id != d.scene_id) continue;
        const double iou = iou_3d(d.box, cls_gts[g]->box);
        if (iou >= 0.25 && iou > best) {
          best = iou;
          bg = g;
        }
      }
      if (bg < cls_gts.size()) {
        used[bg] = true;
        res.counts[c].tp += 1;
      } else {
        res.counts[c].fp += 1;
      }
    }
  }
  return res;
}

}  // namespace opa
