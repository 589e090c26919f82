#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "opa/augmentor.hpp"
#include "opa/losses.hpp"

using namespace opa;

namespace {

OrientedBox make_box(Point3 c, Vec3 s, double yaw, int cls = 0) {
  OrientedBox b;
  b.center = c;
  b.size = s;
  b.yaw = yaw;
  b.class_id = cls;
  return b;
}

double huber1(double r) {
  const double a = std::abs(r);
  return a <= 1.0 ? 0.5 * r * r : a - 0.5;
}

// Builds hand-made DetectNodes over constant tensors so every loss input is
// explicit.
struct ManualDetect {
  ad::Graph g;
  DetectNodes det;
  std::vector<Proposal> proposals;
};

ManualDetect manual_detect(const ad::Tensor& head, const ad::Tensor& votes,
                           std::vector<Point3> seed_points) {
  ManualDetect m;
  m.det.head = m.g.constant(head);
  m.det.votes = m.g.constant(votes);
  m.det.centroid = {0, 0, 0};
  m.det.centroid_node = m.g.constant(ad::Tensor(1, 3));
  m.det.seed_points = std::move(seed_points);
  m.proposals = decode_proposals(m.g, m.det);
  return m;
}

Scene object_scene(Rng& rng, int n_obj, int pts_per_obj) {
  Scene scene;
  scene.id = "t";
  std::vector<OrientedBox> boxes;
  for (int o = 0; o < n_obj; ++o) {
    const auto box = make_box({3.0 * o, 0, 0.5}, {1, 1, 1},
                              rng.uniform(-M_PI, M_PI), o % 6);
    for (int i = 0; i < pts_per_obj; ++i)
      scene.points.push_back(box.to_world({rng.uniform(-0.45, 0.45),
                                           rng.uniform(-0.45, 0.45),
                                           rng.uniform(-0.45, 0.45)}));
    boxes.push_back(box);
  }
  for (int i = 0; i < 40; ++i)
    scene.points.push_back({rng.uniform(8, 12), rng.uniform(8, 12), 0});
  scene.annotations = boxes;
  return scene;
}

}  // namespace

TEST_CASE("rho analytic cases") {
  CHECK(rho({{1.0, 0.0}}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rho({{1.0, 1.0}}) == doctest::Approx(std::exp(1.0)).epsilon(1e-12));
  CHECK(rho({{0.6, 0.5}}) == doctest::Approx(std::exp(0.3)).epsilon(1e-12));
  CHECK(rho({}) == 1.0);
}

TEST_CASE("rho property sweep: range and monotonicity") {
  Rng rng(71);
  for (int i = 0; i < 20000; ++i) {
    const double yo = rng.uniform(), p = rng.uniform();
    const double r = rho({{p, yo}});
    CHECK(r >= 1.0);
    CHECK(r <= std::exp(1.0) + 1e-12);
    // nondecreasing in each argument
    const double dy = rng.uniform(0, 1.0 - yo);
    const double dp = rng.uniform(0, 1.0 - p);
    CHECK(rho({{p, yo + dy}}) >= r - 1e-12);
    CHECK(rho({{p + dp, yo}}) >= r - 1e-12);
  }
  CHECK(rho({{0.7, 0.0}}) == 1.0);  // exact at zero objectness
}

TEST_CASE("rho ablated variant drops the objectness factor") {
  CHECK(rho({{0.5, 0.2}}, false) == doctest::Approx(std::exp(0.5)).epsilon(1e-12));
}

TEST_CASE("rho averages per-object exp terms before the floor") {
  const double expected =
      std::max(1.0, (std::exp(0.9 * 0.8) + std::exp(0.1 * 0.2)) / 2.0);
  CHECK(rho({{0.8, 0.9}, {0.2, 0.1}}) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("augmentor_loss analytic cases") {
  CHECK(augmentor_loss(2.0, 2.0, 1.0, 0.1) == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(augmentor_loss(2.0, 1.0, 2.0, 0.1) == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(augmentor_loss(1.0, 1.0, 1.5, 0.1) ==
        doctest::Approx(1.0 + 0.1 * (1.0 - std::exp(-0.5))).epsilon(1e-9));
}

TEST_CASE("augmentor_loss reduces to L_a when L_a equals rho * L_g") {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const double lg = rng.uniform(0.1, 5.0);
    const double r = rng.uniform(1.0, std::exp(1.0));
    CHECK(augmentor_loss(r * lg, lg, r, 0.1) == doctest::Approx(r * lg).epsilon(1e-12));
  }
}

TEST_CASE("augmentor_loss graph form matches the scalar form") {
  Rng rng(9);
  for (int i = 0; i < 50; ++i) {
    const double la = rng.uniform(0, 4), lg = rng.uniform(0, 4);
    const double r = rng.uniform(1, 2.7), lam = rng.uniform(0.01, 1);
    ad::Graph g;
    const int node = augmentor_loss_graph(g, g.constant(ad::Tensor(la)), lg, r, lam);
    CHECK(g.value(node).scalar() ==
          doctest::Approx(augmentor_loss(la, lg, r, lam)).epsilon(1e-12));
  }
}

TEST_CASE("pretrain and ssl loss arithmetic") {
  CHECK(pretrain_detector_loss(1.5, 2.5) == 4.0);
  const auto v = ssl_losses(1, 2, 3, 4);
  CHECK(v.labeled == 3);
  CHECK(v.unlabeled == 7);
  CHECK(v.total == 10);
}

TEST_CASE("detection_loss: perfect proposal scores zero everywhere") {
  const auto gt = make_box({1.0, 2.0, 0.5}, {1.2, 0.8, 0.9}, 0.4, 2);
  ad::Tensor head(1, DetectorNet::kOutDim);
  head.at(0, DetectorNet::kColLogSize + 0) = std::log(gt.size.x);
  head.at(0, DetectorNet::kColLogSize + 1) = std::log(gt.size.y);
  head.at(0, DetectorNet::kColLogSize + 2) = std::log(gt.size.z);
  head.at(0, DetectorNet::kColSin) = std::sin(gt.yaw);
  head.at(0, DetectorNet::kColCos) = std::cos(gt.yaw);
  for (int c = 0; c < DetectorNet::kClasses; ++c)
    head.at(0, DetectorNet::kColClass + c) = c == gt.class_id ? 35.0 : -35.0;
  head.at(0, DetectorNet::kColObj) = 35.0;
  head.at(0, DetectorNet::kColIou) = 35.0;
  ad::Tensor votes(1, 3);
  votes.v = {gt.center.x, gt.center.y, gt.center.z};

  auto m = manual_detect(head, votes, {gt.center});
  const auto assignments = match(m.proposals, {gt});
  REQUIRE(assignments[0].kind == Assignment::Kind::positive);
  const auto loss = detection_loss(m.g, m.det, m.proposals, assignments, {gt});
  CHECK(loss.breakdown.vote == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(loss.breakdown.objectness == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(loss.breakdown.center == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(loss.breakdown.size == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(loss.breakdown.yaw == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(loss.breakdown.cls == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(loss.breakdown.iou_est == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(loss.breakdown.total == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("detection_loss: no ground truth leaves only negative objectness") {
  ad::Tensor head(2, DetectorNet::kOutDim);
  head.at(0, DetectorNet::kColObj) = 1.3;
  head.at(1, DetectorNet::kColObj) = -0.4;
  ad::Tensor votes(2, 3);
  auto m = manual_detect(head, votes, {{0, 0, 0}, {1, 1, 1}});
  const auto assignments = match(m.proposals, {});
  const auto loss = detection_loss(m.g, m.det, m.proposals, assignments, {});
  const double expected =
      0.5 * (std::log1p(std::exp(1.3)) + std::log1p(std::exp(-0.4))) * kWObjectness;
  CHECK(loss.breakdown.vote == 0.0);
  CHECK(loss.breakdown.center == 0.0);
  CHECK(loss.breakdown.cls == 0.0);
  CHECK(loss.breakdown.total == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("detection_loss matches a hand-evaluated oracle") {
  const auto gt = make_box({0.5, -0.25, 0.3}, {1.4, 1.0, 0.8}, -0.6, 1);
  // row 0: positive (decoded center within 0.3 of gt); rows 1-2: negative
  ad::Tensor head(3, DetectorNet::kOutDim);
  const double off[3] = {0.1, -0.05, 0.04};
  for (int a = 0; a < 3; ++a) head.at(0, a) = off[a];
  head.at(0, DetectorNet::kColLogSize + 0) = 0.2;
  head.at(0, DetectorNet::kColLogSize + 1) = -0.1;
  head.at(0, DetectorNet::kColLogSize + 2) = -0.3;
  head.at(0, DetectorNet::kColSin) = -0.4;
  head.at(0, DetectorNet::kColCos) = 0.8;
  const double cls_logits[6] = {0.3, 1.1, -0.2, 0.0, 0.5, -1.0};
  for (int c = 0; c < 6; ++c) head.at(0, DetectorNet::kColClass + c) = cls_logits[c];
  head.at(0, DetectorNet::kColObj) = 0.9;
  head.at(0, DetectorNet::kColIou) = -0.2;
  head.at(1, DetectorNet::kColObj) = -1.5;
  head.at(2, DetectorNet::kColObj) = 0.2;
  ad::Tensor votes(3, 3);
  votes.v = {0.45, -0.2, 0.25, 5, 5, 0, -5, 5, 0};

  // seeds: 0 inside gt, others far outside
  auto m = manual_detect(head, votes, {gt.center, {9, 9, 9}, {-9, 9, 9}});
  const auto assignments = match(m.proposals, {gt});
  REQUIRE(assignments[0].kind == Assignment::Kind::positive);
  REQUIRE(assignments[1].kind == Assignment::Kind::negative);
  REQUIRE(assignments[2].kind == Assignment::Kind::negative);
  const auto loss = detection_loss(m.g, m.det, m.proposals, assignments, {gt});

  // independent arithmetic for every term
  const double obj = (std::log1p(std::exp(-0.9)) + std::log1p(std::exp(-1.5)) +
                      std::log1p(std::exp(0.2))) / 3.0;
  double lse = 0;
  for (double l : cls_logits) lse += std::exp(l);
  const double cls = std::log(lse) - cls_logits[1];
  const double center =
      (huber1(votes.v[0] + off[0] - gt.center.x) +
       huber1(votes.v[1] + off[1] - gt.center.y) +
       huber1(votes.v[2] + off[2] - gt.center.z)) / 3.0;
  const double size = (huber1(0.2 - std::log(gt.size.x)) +
                       huber1(-0.1 - std::log(gt.size.y)) +
                       huber1(-0.3 - std::log(gt.size.z))) / 3.0;
  const double n = std::sqrt(0.4 * 0.4 + 0.8 * 0.8);
  const double yaw = (huber1(-0.4 / n - std::sin(gt.yaw)) +
                      huber1(0.8 / n - std::cos(gt.yaw))) / 2.0;
  const double iou_target = iou_3d(m.proposals[0].box(), gt);
  const double iou_est = huber1(1.0 / (1.0 + std::exp(0.2)) - iou_target);
  const double vote = (huber1(votes.v[0] - gt.center.x) +
                       huber1(votes.v[1] - gt.center.y) +
                       huber1(votes.v[2] - gt.center.z)) / 3.0;
  const double total = kWVote * vote + kWObjectness * obj +
                       kWBox * (center + size + yaw) + kWCls * cls +
                       kWIouEst * iou_est;

  CHECK(loss.breakdown.objectness == doctest::Approx(obj).epsilon(1e-9));
  CHECK(loss.breakdown.cls == doctest::Approx(cls).epsilon(1e-9));
  CHECK(loss.breakdown.center == doctest::Approx(center).epsilon(1e-9));
  CHECK(loss.breakdown.size == doctest::Approx(size).epsilon(1e-9));
  CHECK(loss.breakdown.yaw == doctest::Approx(yaw).epsilon(1e-8));
  CHECK(loss.breakdown.iou_est == doctest::Approx(iou_est).epsilon(1e-9));
  CHECK(loss.breakdown.vote == doctest::Approx(vote).epsilon(1e-9));
  CHECK(loss.breakdown.total == doctest::Approx(total).epsilon(1e-8));
}

TEST_CASE("detection_loss breakdown satisfies the weighting identity") {
  Rng rng(17);
  DetectorNet det(5);
  const Scene scene = object_scene(rng, 2, 60);
  ad::Graph g;
  ad::Tensor pts(static_cast<int>(scene.points.size()), 3);
  for (std::size_t i = 0; i < scene.points.size(); ++i) {
    pts.at(static_cast<int>(i), 0) = scene.points[i].x;
    pts.at(static_cast<int>(i), 1) = scene.points[i].y;
    pts.at(static_cast<int>(i), 2) = scene.points[i].z;
  }
  auto nodes = detect_graph(g, g.constant(std::move(pts)), det, false);
  const auto props = decode_proposals(g, nodes);
  const auto loss = detection_loss(g, nodes, props, match(props, *scene.annotations),
                                   *scene.annotations);
  const auto& b = loss.breakdown;
  CHECK(b.total == doctest::Approx(kWVote * b.vote + kWObjectness * b.objectness +
                                   kWBox * (b.center + b.size + b.yaw) +
                                   kWCls * b.cls + kWIouEst * b.iou_est)
                       .epsilon(1e-12));
  CHECK(b.vote >= 0);
  CHECK(b.objectness >= 0);
  CHECK(std::isfinite(b.total));
}

TEST_CASE("gradient routing: L_A never touches the detector") {
  Rng rng(21);
  DetectorNet det(7);
  AugmentorNet aug(9);
  // make the augmentor non-identity so gradients are nontrivial
  Rng wrng(33);
  for (auto& p : aug.net.params)
    for (auto& v : p.value.v) v = wrng.uniform(-0.3, 0.3);
  const Scene scene = object_scene(rng, 2, 50);

  ad::Graph g;
  Rng aug_rng(1);
  const auto ag = augment_scene_graph(g, scene, *scene.annotations, 2, 32, aug,
                                      aug_rng, true);
  auto nodes = detect_graph(g, ag.scene, det, false);  // detector frozen
  const auto props = decode_proposals(g, nodes);
  const auto la = detection_loss(g, nodes, props, match(props, *scene.annotations),
                                 *scene.annotations);
  const int loss = augmentor_loss_graph(g, la.node, 1.0, 1.2, 0.1);
  g.backward(loss);
  g.flush_param_grads();

  double aug_grad_norm = 0;
  for (const auto& p : aug.net.params)
    for (double x : p.grad.v) aug_grad_norm += x * x;
  CHECK(aug_grad_norm > 0.0);  // gradient reaches the augmentor
  for (const auto& p : det.net.params)
    for (double x : p.grad.v) CHECK(x == 0.0);  // and never the detector
}

TEST_CASE("gradient routing: L_D never touches the augmentor") {
  Rng rng(23);
  DetectorNet det(11);
  AugmentorNet aug(13);
  Rng wrng(35);
  for (auto& p : aug.net.params)
    for (auto& v : p.value.v) v = wrng.uniform(-0.3, 0.3);
  const Scene scene = object_scene(rng, 2, 50);

  ad::Graph g;
  Rng aug_rng(2);
  const auto ag = augment_scene_graph(g, scene, *scene.annotations, 2, 32, aug,
                                      aug_rng, false);  // augmentor frozen
  auto nodes = detect_graph(g, ag.scene, det, true);
  const auto props = decode_proposals(g, nodes);
  const auto ld = detection_loss(g, nodes, props, match(props, *scene.annotations),
                                 *scene.annotations);
  g.backward(ld.node);
  g.flush_param_grads();

  double det_grad_norm = 0;
  for (const auto& p : det.net.params)
    for (double x : p.grad.v) det_grad_norm += x * x;
  CHECK(det_grad_norm > 0.0);
  for (const auto& p : aug.net.params)
    for (double x : p.grad.v) CHECK(x == 0.0);
}
