#pragma once

#include <functional>
#include <stdexcept>
#include <vector>

#include "opa/datakit.hpp"
#include "opa/detector.hpp"
#include "opa/metrics.hpp"

namespace opa {

using ProposalFn =
    std::function<std::vector<Proposal>(const Scene&)>;  // detect + nms

// Score every val scene with `propose` and compute AP/mAP at the thresholds.
// Prediction score = objectness * max class probability.
inline EvalResult evaluate_scenes(const std::vector<Scene>& val,
                                  const ProposalFn& propose,
                                  int num_classes = DetectorNet::kClasses,
                                  const std::vector<double>& thresholds = {0.25, 0.5}) {
  if (val.empty()) throw std::invalid_argument("evaluate: empty validation set");
  std::vector<Detection> dets;
  std::vector<GroundTruth> gts;
  for (const auto& scene : val) {
    if (scene.annotations) {
      for (const auto& b : *scene.annotations)
        gts.push_back({scene.id, b, b.class_id});
    }
    const auto proposals = propose(scene);
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      Detection d;
      d.scene_id = scene.id;
      d.index = i;
      d.box = proposals[i].box();
      d.class_id = d.box.class_id;
      d.score = proposals[i].objectness * proposals[i].max_class_prob();
      dets.push_back(std::move(d));
    }
  }
  return evaluate_detections(dets, gts, num_classes, thresholds);
}

inline EvalResult evaluate(DetectorNet& detector, const std::vector<Scene>& val,
                           const std::vector<double>& thresholds = {0.25, 0.5}) {
  return evaluate_scenes(
      val, [&](const Scene& s) { return nms(detect(s.points, detector)); },
      DetectorNet::kClasses, thresholds);
}

}  // namespace opa
