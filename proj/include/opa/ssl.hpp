#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "opa/augmentor.hpp"
#include "opa/datakit.hpp"
#include "opa/detector.hpp"
#include "opa/evaluate.hpp"
#include "opa/losses.hpp"

namespace opa {

// Every tunable of both training stages.
struct TrainConfig {
  double lambda = 0.1;
  std::size_t m_objects = 3;        // M foreground objects per scene
  std::size_t sample_points = 1024; // S points fed to the augmentor

  int pretrain_epochs = 900;
  double pretrain_lr = 0.001;
  std::vector<int> pretrain_decay_epochs = {400, 600, 800};
  std::vector<double> pretrain_decay_factors = {0.1, 0.1, 0.1};
  int warmup_epochs = 100;
  int pretrain_batch = 4;

  int ssl_epochs = 1000;
  double ssl_lr = 0.002;
  std::vector<int> ssl_decay_epochs = {400, 600, 800, 900};
  std::vector<double> ssl_decay_factors = {0.3, 0.3, 0.1, 0.1};
  int labeled_per_batch = 2;
  int unlabeled_per_batch = 4;

  double ema_decay = 0.999;
  double tau_obj = 0.9;
  double tau_cls = 0.9;
  double tau_iou = 0.25;
  int top_k = 6;
  int pick = 3;

  std::uint64_t seed = 1;
  int eval_every = 0;  // 0: evaluate only after the final epoch
  // learned | predefined | jitter0.5 | jitter1 | jitter5 | none
  std::string object_aug = "learned";

  void validate() const {
    if (pick > top_k) throw std::invalid_argument("config: pick > top_k");
    for (double t : {tau_obj, tau_cls, tau_iou})
      if (t < 0 || t > 1) throw std::invalid_argument("config: threshold outside [0,1]");
    if (pretrain_epochs <= warmup_epochs)
      throw std::invalid_argument("config: epochs must exceed warmup");
    if (pretrain_decay_epochs.size() != pretrain_decay_factors.size() ||
        ssl_decay_epochs.size() != ssl_decay_factors.size())
      throw std::invalid_argument("config: decay epochs/factors length mismatch");
  }
};

// key = value config file
inline TrainConfig parse_config(std::istream& in) {
  TrainConfig c;
  std::string line;
  int lineno = 0;
  auto parse_ints = [](const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
    return out;
  };
  auto parse_doubles = [](const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
    return out;
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty()) continue;
    try {
      if (key == "lambda") c.lambda = std::stod(val);
      else if (key == "m_objects") c.m_objects = std::stoul(val);
      else if (key == "sample_points") c.sample_points = std::stoul(val);
      else if (key == "pretrain_epochs") c.pretrain_epochs = std::stoi(val);
      else if (key == "pretrain_lr") c.pretrain_lr = std::stod(val);
      else if (key == "pretrain_decay_epochs") c.pretrain_decay_epochs = parse_ints(val);
      else if (key == "pretrain_decay_factors") c.pretrain_decay_factors = parse_doubles(val);
      else if (key == "warmup_epochs") c.warmup_epochs = std::stoi(val);
      else if (key == "pretrain_batch") c.pretrain_batch = std::stoi(val);
      else if (key == "ssl_epochs") c.ssl_epochs = std::stoi(val);
      else if (key == "ssl_lr") c.ssl_lr = std::stod(val);
      else if (key == "ssl_decay_epochs") c.ssl_decay_epochs = parse_ints(val);
      else if (key == "ssl_decay_factors") c.ssl_decay_factors = parse_doubles(val);
      else if (key == "labeled_per_batch") c.labeled_per_batch = std::stoi(val);
      else if (key == "unlabeled_per_batch") c.unlabeled_per_batch = std::stoi(val);
      else if (key == "ema_decay") c.ema_decay = std::stod(val);
      else if (key == "tau_obj") c.tau_obj = std::stod(val);
      else if (key == "tau_cls") c.tau_cls = std::stod(val);
      else if (key == "tau_iou") c.tau_iou = std::stod(val);
      else if (key == "top_k") c.top_k = std::stoi(val);
      else if (key == "pick") c.pick = std::stoi(val);
      else if (key == "seed") c.seed = std::stoull(val);
      else if (key == "eval_every") c.eval_every = std::stoi(val);
      else if (key == "object_aug") c.object_aug = val;
      else throw std::invalid_argument("unknown key");
    } catch (const std::exception& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  " ('" + key + "'): " + e.what());
    }
  }
  c.validate();
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file: " + path);
  return parse_config(in);
}

inline void save_config(const TrainConfig& c, std::ostream& out) {
  auto join_i = [](const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i)
      s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  auto join_d = [](const std::vector<double>& v) {
    std::ostringstream s;
    for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
    return s.str();
  };
  out << "lambda = " << c.lambda << "\n"
      << "m_objects = " << c.m_objects << "\n"
      << "sample_points = " << c.sample_points << "\n"
      << "pretrain_epochs = " << c.pretrain_epochs << "\n"
      << "pretrain_lr = " << c.pretrain_lr << "\n"
      << "pretrain_decay_epochs = " << join_i(c.pretrain_decay_epochs) << "\n"
      << "pretrain_decay_factors = " << join_d(c.pretrain_decay_factors) << "\n"
      << "warmup_epochs = " << c.warmup_epochs << "\n"
      << "pretrain_batch = " << c.pretrain_batch << "\n"
      << "ssl_epochs = " << c.ssl_epochs << "\n"
      << "ssl_lr = " << c.ssl_lr << "\n"
      << "ssl_decay_epochs = " << join_i(c.ssl_decay_epochs) << "\n"
      << "ssl_decay_factors = " << join_d(c.ssl_decay_factors) << "\n"
      << "labeled_per_batch = " << c.labeled_per_batch << "\n"
      << "unlabeled_per_batch = " << c.unlabeled_per_batch << "\n"
      << "ema_decay = " << c.ema_decay << "\n"
      << "tau_obj = " << c.tau_obj << "\n"
      << "tau_cls = " << c.tau_cls << "\n"
      << "tau_iou = " << c.tau_iou << "\n"
      << "top_k = " << c.top_k << "\n"
      << "pick = " << c.pick << "\n"
      << "seed = " << c.seed << "\n"
      << "eval_every = " << c.eval_every << "\n"
      << "object_aug = " << c.object_aug << "\n";
}

// Stepwise learning-rate decay: factor i applies from decay_epochs[i] onward.
inline double learning_rate(double base, const std::vector<int>& decay_epochs,
                            const std::vector<double>& factors, int epoch) {
  double lr = base;
  for (std::size_t i = 0; i < decay_epochs.size(); ++i)
    if (epoch >= decay_epochs[i]) lr *= factors[i];
  return lr;
}

// Which proposed components are active (Table-style ablation axes).
struct Ablation {
  bool labeled_aug = true;     // object-level augmentation of labeled data
  bool unlabeled_aug = true;   // object-level augmentation of unlabeled data
  bool objectness_rho = true;  // the y_o term inside rho

  static Ablation parse(const std::string& flag) {
    Ablation a;
    if (flag.empty()) return a;
    if (flag == "no-labeled-aug") a.labeled_aug = false;
    else if (flag == "no-unlabeled-aug") a.unlabeled_aug = false;
    else if (flag == "no-objectness-rho") a.objectness_rho = false;
    else if (flag == "no-object-aug") a.labeled_aug = a.unlabeled_aug = false;
    else
      throw std::invalid_argument(
          "unknown ablation '" + flag +
          "'; valid: no-labeled-aug, no-unlabeled-aug, no-objectness-rho, "
          "no-object-aug");
    return a;
  }
};

struct MetricsRow {
  int epoch = 0;
  double l_d = -1, l_a = -1, rho_mean = -1, l_l = -1, l_u = -1;
  double map_25 = -1, map_50 = -1;
};

inline void write_metrics_csv(const std::vector<MetricsRow>& rows,
                              const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write metrics file: " + path);
  out << "epoch,L_D,L_A,rho_mean,L_l,L_u,mAP@0.25,mAP@0.5\n";
  auto cell = [](double v) { return v < 0 ? std::string() : std::to_string(v); };
  for (const auto& r : rows) {
    out << r.epoch << "," << cell(r.l_d) << "," << cell(r.l_a) << ","
        << cell(r.rho_mean) << "," << cell(r.l_l) << "," << cell(r.l_u) << ","
        << cell(r.map_25) << "," << cell(r.map_50) << "\n";
  }
}

// ---- pseudo-labels --------------------------------------------------------

struct PseudoLabel {
  OrientedBox box;
  int class_id = 0;
  double objectness = 0;
  double max_class_prob = 0;
  double iou_pred = 0;

  double confidence() const { return iou_pred * objectness; }
};

// Keep teacher proposals passing all three confidence gates.
inline std::vector<PseudoLabel> filter_pseudo_labels(
    const std::vector<Proposal>& proposals_after_nms, const TrainConfig& cfg) {
  std::vector<PseudoLabel> out;
  for (const auto& p : proposals_after_nms) {
    const double max_cls = p.max_class_prob();
    if (p.objectness < cfg.tau_obj || max_cls < cfg.tau_cls ||
        p.iou_pred < cfg.tau_iou)
      continue;
    PseudoLabel pl;
    pl.box = p.box();
    pl.class_id = pl.box.class_id;
    pl.objectness = p.objectness;
    pl.max_class_prob = max_cls;
    pl.iou_pred = p.iou_pred;
    out.push_back(std::move(pl));
  }
  return out;
}

// Random `pick` of the `top_k` highest-confidence pseudo-labels.
inline std::vector<OrientedBox> select_augmentation_targets(
    const std::vector<PseudoLabel>& labels, int pick, int top_k, Rng& rng) {
  std::vector<std::size_t> order(labels.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return labels[a].confidence() > labels[b].confidence();
  });
  if (order.size() > static_cast<std::size_t>(top_k)) order.resize(top_k);
  std::vector<OrientedBox> out;
  if (order.size() <= static_cast<std::size_t>(pick)) {
    for (std::size_t i : order) out.push_back(labels[i].box);
    return out;
  }
  for (int k = 0; k < pick; ++k) {
    const std::size_t j = rng.uniform_index(order.size());
    out.push_back(labels[order[j]].box);
    order.erase(order.begin() + static_cast<std::ptrdiff_t>(j));
  }
  return out;
}

// teacher <- decay * teacher + (1 - decay) * student, elementwise.
inline void ema_update(ad::Network& teacher, const ad::Network& student,
                       double decay) {
  if (teacher.params.size() != student.params.size())
    throw std::invalid_argument("ema_update: parameter structure mismatch");
  for (std::size_t i = 0; i < teacher.params.size(); ++i) {
    auto& t = teacher.params[i];
    const auto& s = student.params[i];
    if (t.name != s.name || !t.value.same_shape(s.value))
      throw std::invalid_argument("ema_update: parameter structure mismatch at '" +
                                  t.name + "'");
    for (std::size_t j = 0; j < t.value.v.size(); ++j)
      t.value.v[j] = decay * t.value.v[j] + (1.0 - decay) * s.value.v[j];
  }
}

// ---- baseline object-level policies (pre-defined augmentations) ------------

// predefined: per-object scale/flip/rotation in the box frame.
// jitterA: per-point per-axis displacement U(-a, a) * box size.
inline Scene baseline_policies(const Scene& scene, const std::string& policy,
                               Rng& rng) {
  if (policy == "none") return scene;
  double jitter = -1.0;
  if (policy == "jitter0.5") jitter = 0.005;
  else if (policy == "jitter1") jitter = 0.01;
  else if (policy == "jitter5") jitter = 0.05;
  else if (policy != "predefined")
    throw std::invalid_argument("unknown object policy '" + policy + "'");
  Scene out = scene;
  if (!scene.annotations) return out;
  for (const auto& box : *scene.annotations) {
    const auto idx = points_in_box(scene.points, box);
    if (idx.size() < kMinObjectPoints) continue;
    if (jitter >= 0) {
      for (std::size_t i : idx) {
        Point3 p = out.points[i];
        const double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
        Vec3 d_local{rng.uniform(-jitter, jitter) * box.size.x,
                     rng.uniform(-jitter, jitter) * box.size.y,
                     rng.uniform(-jitter, jitter) * box.size.z};
        p.x += cy * d_local.x - sy * d_local.y;
        p.y += sy * d_local.x + cy * d_local.y;
        p.z += d_local.z;
        out.points[i] = clamp_point_to_box(p, box);
      }
    } else {
      const double s = rng.uniform(0.85, 1.15);
      const double r = rng.uniform(-5.0, 5.0) * M_PI / 180.0;
      const bool flip = rng.bernoulli(0.5);
      const double cr = std::cos(r), sr = std::sin(r);
      for (std::size_t i : idx) {
        Point3 u = box.to_local(out.points[i]);
        u.z -= -box.size.z * 0.0;  // rotate about the box center axis
        if (flip) u.x = -u.x;
        u = {cr * u.x - sr * u.y, sr * u.x + cr * u.y, u.z};
        u = u * s;
        out.points[i] = clamp_point_to_box(box.to_world(u), box);
      }
    }
  }
  return out;
}

// ---- the two training stages ----------------------------------------------

namespace detail {

inline ad::Tensor points_tensor(const PointList& pts) {
  ad::Tensor t(static_cast<int>(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    t.at(static_cast<int>(i), 0) = pts[i].x;
    t.at(static_cast<int>(i), 1) = pts[i].y;
    t.at(static_cast<int>(i), 2) = pts[i].z;
  }
  return t;
}

// boxes with enough interior points, shuffled for uniform selection
inline std::vector<OrientedBox> shuffled_eligible_boxes(const Scene& scene,
                                                        Rng& rng) {
  std::vector<OrientedBox> boxes;
  if (!scene.annotations) return boxes;
  for (const auto& b : *scene.annotations)
    if (points_in_box(scene.points, b).size() >= kMinObjectPoints)
      boxes.push_back(b);
  rng.shuffle(boxes);
  return boxes;
}

// Object-level augmentation dispatch honoring the configured policy.
// Returns the scene node id for the graph path, or builds a plain scene for
// baseline policies (non-differentiable; used for detector-only updates).
struct ObjectAug {
  bool graph = false;
  int node = -1;          // when graph
  Scene scene;            // when !graph
};

inline ObjectAug apply_object_aug(ad::Graph& g, const Scene& xg,
                                  const std::vector<OrientedBox>& boxes,
                                  const TrainConfig& cfg, AugmentorNet& aug,
                                  Rng& rng, bool trainable) {
  ObjectAug out;
  if (cfg.object_aug == "learned") {
    out.graph = true;
    out.node = augment_scene_graph(g, xg, boxes, cfg.m_objects,
                                   cfg.sample_points, aug, rng, trainable)
                   .scene;
    return out;
  }
  Scene tmp = xg;
  tmp.annotations = boxes;
  out.scene = baseline_policies(tmp, cfg.object_aug, rng);
  out.scene.annotations = xg.annotations;
  return out;
}

}  // namespace detail

struct PretrainResult {
  DetectorNet detector{0};
  AugmentorNet augmentor{0};
  std::vector<MetricsRow> log;
};

// Invoked at the end of every epoch with the learning rate that governed it;
// lets tests observe parameter state at epoch boundaries.
using EpochObserver = std::function<void(int epoch, double lr,
                                         const DetectorNet& detector,
                                         const AugmentorNet& augmentor)>;

// Fig. 2(a): joint adversarial pre-training on labeled data. During warm-up
// every step trains the detector; afterwards even steps train the detector
// and odd steps the augmentor. `use_object_aug=false` trains the detector on
// globally augmented data only (the pre-training baseline).
inline PretrainResult pretrain(const std::vector<Scene>& labeled,
                               const TrainConfig& cfg,
                               bool use_object_aug = true,
                               bool objectness_rho = true,
                               const std::vector<Scene>* val = nullptr,
                               const EpochObserver& observe = {}) {
  if (labeled.empty()) throw std::invalid_argument("pretrain: empty dataset");
  cfg.validate();
  PretrainResult res;
  res.detector = DetectorNet(cfg.seed + 101);
  res.augmentor = AugmentorNet(cfg.seed + 202);
  Rng rng(cfg.seed);

  long step = 0;
  for (int epoch = 1; epoch <= cfg.pretrain_epochs; ++epoch) {
    const double lr = learning_rate(cfg.pretrain_lr, cfg.pretrain_decay_epochs,
                                    cfg.pretrain_decay_factors, epoch);
    std::vector<std::size_t> order(labeled.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    double epoch_ld = 0, epoch_la = 0, epoch_rho = 0;
    int ld_steps = 0, la_steps = 0;

    for (std::size_t b0 = 0; b0 < order.size();
         b0 += static_cast<std::size_t>(cfg.pretrain_batch)) {
      const std::size_t b1 =
          std::min(order.size(), b0 + static_cast<std::size_t>(cfg.pretrain_batch));
      const bool in_warmup = epoch <= cfg.warmup_epochs;
      const bool detector_step = in_warmup || !use_object_aug || step % 2 == 0;
      step += 1;

      if (detector_step) {
        ad::Graph g;
        int total = g.constant(ad::Tensor(0.0));
        int terms = 0;
        for (std::size_t bi = b0; bi < b1; ++bi) {
          const Scene& raw = labeled[order[bi]];
          auto [xg, tf] = global_augment(raw, GlobalPolicy::strong, rng);
          const auto& gt = *xg.annotations;
          const int pts = g.constant(detail::points_tensor(xg.points));
          auto det = detect_graph(g, pts, res.detector, true);
          const auto props = decode_proposals(g, det);
          const auto lg =
              detection_loss(g, det, props, match_votes(g, det, gt), gt);
          total = g.add(total, lg.node);
          terms += 1;
          if (use_object_aug) {
            const auto boxes = detail::shuffled_eligible_boxes(xg, rng);
            const auto oa = detail::apply_object_aug(g, xg, boxes, cfg,
                                                     res.augmentor, rng, false);
            const int apts = oa.graph
                                 ? oa.node
                                 : g.constant(detail::points_tensor(oa.scene.points));
            auto det_a = detect_graph(g, apts, res.detector, true);
            const auto props_a = decode_proposals(g, det_a);
            const auto la = detection_loss(g, det_a, props_a,
                                           match_votes(g, det_a, gt), gt);
            total = g.add(total, la.node);
            terms += 1;
          }
        }
        total = g.scale(total, 1.0 / terms);
        g.backward(total);
        g.flush_param_grads();
        adam_step(res.detector.net, lr);
        epoch_ld += g.value(total).scalar() * (use_object_aug ? 2.0 : 1.0);
        ld_steps += 1;
      } else {
        // augmentor step: detector frozen, rho from the clean pass
        ad::Graph g;
        int la_total = g.constant(ad::Tensor(0.0));
        double lg_total = 0;
        std::vector<RhoObject> rho_objects;
        int terms = 0;
        for (std::size_t bi = b0; bi < b1; ++bi) {
          const Scene& raw = labeled[order[bi]];
          auto [xg, tf] = global_augment(raw, GlobalPolicy::strong, rng);
          const auto& gt = *xg.annotations;
          const int pts = g.constant(detail::points_tensor(xg.points));
          auto det_g = detect_graph(g, pts, res.detector, false);
          const auto props_g = decode_proposals(g, det_g);
          const auto assign_g = match_votes(g, det_g, gt);
          const auto lg = detection_loss(g, det_g, props_g, assign_g, gt);
          lg_total += lg.breakdown.total;
          for (const auto& a : assign_g) {
            if (a.kind != Assignment::Kind::positive) continue;
            RhoObject ro;
            ro.gt_class_prob = props_g[a.proposal_index].class_probs[gt[a.gt_index].class_id];
            ro.objectness = props_g[a.proposal_index].objectness;
            rho_objects.push_back(ro);
          }
          const auto boxes = detail::shuffled_eligible_boxes(xg, rng);
          const auto ag = augment_scene_graph(g, xg, boxes, cfg.m_objects,
                                              cfg.sample_points, res.augmentor,
                                              rng, true);
          auto det_a = detect_graph(g, ag.scene, res.detector, false);
          const auto props_a = decode_proposals(g, det_a);
          const auto la = detection_loss(g, det_a, props_a,
                                         match_votes(g, det_a, gt), gt);
          la_total = g.add(la_total, la.node);
          terms += 1;
        }
        la_total = g.scale(la_total, 1.0 / terms);
        lg_total /= terms;
        const double rho_value = rho(rho_objects, objectness_rho);
        const int loss =
            augmentor_loss_graph(g, la_total, lg_total, rho_value, cfg.lambda);
        g.backward(loss);
        g.flush_param_grads();
        adam_step(res.augmentor.net, lr);
        epoch_la += g.value(loss).scalar();
        epoch_rho += rho_value;
        la_steps += 1;
      }
    }

    MetricsRow row;
    row.epoch = epoch;
    if (ld_steps) row.l_d = epoch_ld / ld_steps;
    if (la_steps) {
      row.l_a = epoch_la / la_steps;
      row.rho_mean = epoch_rho / la_steps;
    }
    if (val && ((cfg.eval_every > 0 && epoch % cfg.eval_every == 0) ||
                epoch == cfg.pretrain_epochs)) {
      const auto ev = evaluate(res.detector, *val);
      row.map_25 = ev.map_25;
      row.map_50 = ev.map_50;
    }
    res.log.push_back(row);
    if (observe) observe(epoch, lr, res.detector, res.augmentor);
  }
  return res;
}

struct SslResult {
  DetectorNet student{0};
  DetectorNet teacher{0};
  std::vector<MetricsRow> log;
  // per-step (labeled, unlabeled) batch sizes, for conformance checks
  std::vector<std::pair<int, int>> batch_compositions;
};

// Fig. 2(b): teacher-student SSL with a frozen augmentor, EMA teacher and
// filtered pseudo-labels. One epoch passes once over the labeled set.
inline SslResult ssl_train(const std::vector<Scene>& labeled,
                           const std::vector<Scene>& unlabeled,
                           const DetectorNet& pretrained_detector,
                           AugmentorNet& augmentor, const TrainConfig& cfg,
                           const Ablation& ablation = {},
                           const std::vector<Scene>* val = nullptr,
                           const EpochObserver& observe = {}) {
  if (labeled.empty() || unlabeled.empty())
    throw std::invalid_argument("ssl_train: empty dataset");
  cfg.validate();
  SslResult res;
  res.student = pretrained_detector;
  res.teacher = pretrained_detector;
  Rng rng(cfg.seed + 31);

  std::vector<std::size_t> upool(unlabeled.size());
  for (std::size_t i = 0; i < upool.size(); ++i) upool[i] = i;
  rng.shuffle(upool);
  std::size_t ucursor = 0;
  auto next_unlabeled = [&]() {
    if (ucursor >= upool.size()) {
      rng.shuffle(upool);
      ucursor = 0;
    }
    return upool[ucursor++];
  };

  for (int epoch = 1; epoch <= cfg.ssl_epochs; ++epoch) {
    const double lr = learning_rate(cfg.ssl_lr, cfg.ssl_decay_epochs,
                                    cfg.ssl_decay_factors, epoch);
    std::vector<std::size_t> lorder(labeled.size());
    for (std::size_t i = 0; i < lorder.size(); ++i) lorder[i] = i;
    rng.shuffle(lorder);

    double epoch_ll = 0, epoch_lu = 0;
    int steps = 0;

    for (std::size_t b0 = 0; b0 < lorder.size();
         b0 += static_cast<std::size_t>(cfg.labeled_per_batch)) {
      const std::size_t b1 = std::min(
          lorder.size(), b0 + static_cast<std::size_t>(cfg.labeled_per_batch));

      ad::Graph g;
      int ll_total = g.constant(ad::Tensor(0.0));
      int lu_total = g.constant(ad::Tensor(0.0));
      int ll_terms = 0, lu_terms = 0;

      // labeled scenes: strong global + optional object-level augmentation
      for (std::size_t bi = b0; bi < b1; ++bi) {
        const Scene& raw = labeled[lorder[bi]];
        auto [xg, tf] = global_augment(raw, GlobalPolicy::strong, rng);
        const auto& gt = *xg.annotations;
        {
          const int pts = g.constant(detail::points_tensor(xg.points));
          auto det = detect_graph(g, pts, res.student, true);
          const auto props = decode_proposals(g, det);
          ll_total = g.add(ll_total,
                           detection_loss(g, det, props,
                                          match_votes(g, det, gt), gt).node);
          ll_terms += 1;
        }
        if (ablation.labeled_aug && cfg.object_aug != "none") {
          const auto boxes = detail::shuffled_eligible_boxes(xg, rng);
          const auto oa = detail::apply_object_aug(g, xg, boxes, cfg, augmentor,
                                                   rng, false);
          const int apts = oa.graph
                               ? oa.node
                               : g.constant(detail::points_tensor(oa.scene.points));
          auto det = detect_graph(g, apts, res.student, true);
          const auto props = decode_proposals(g, det);
          ll_total = g.add(ll_total,
                           detection_loss(g, det, props,
                                          match_votes(g, det, gt), gt).node);
          ll_terms += 1;
        }
      }

      // unlabeled scenes: teacher pseudo-labels on weak views supervise the
      // student's strong views
      int u_count = 0;
      for (int ui = 0; ui < cfg.unlabeled_per_batch; ++ui) {
        Scene raw = unlabeled[next_unlabeled()];
        raw.annotations.reset();
        auto [weak, weak_tf] = global_augment(raw, GlobalPolicy::weak, rng);
        const auto teacher_props = nms(detect(weak.points, res.teacher));
        const auto pseudo = filter_pseudo_labels(teacher_props, cfg);
        // pseudo boxes back to the raw frame, then through the student view
        std::vector<PseudoLabel> pseudo_raw = pseudo;
        for (auto& pl : pseudo_raw) pl.box = weak_tf.invert_box(pl.box);

        auto [xg, tf] = global_augment(raw, GlobalPolicy::strong, rng);
        std::vector<OrientedBox> pseudo_boxes;
        for (const auto& pl : pseudo_raw) pseudo_boxes.push_back(tf.apply_box(pl.box));
        u_count += 1;
        {
          const int pts = g.constant(detail::points_tensor(xg.points));
          auto det = detect_graph(g, pts, res.student, true);
          const auto props = decode_proposals(g, det);
          lu_total = g.add(lu_total,
                           detection_loss(g, det, props,
                                          match_votes(g, det, pseudo_boxes),
                                          pseudo_boxes)
                               .node);
          lu_terms += 1;
        }
        if (ablation.unlabeled_aug && cfg.object_aug != "none" &&
            !pseudo_boxes.empty()) {
          std::vector<PseudoLabel> pseudo_view = pseudo_raw;
          for (std::size_t i = 0; i < pseudo_view.size(); ++i)
            pseudo_view[i].box = pseudo_boxes[i];
          const auto targets =
              select_augmentation_targets(pseudo_view, cfg.pick, cfg.top_k, rng);
          Scene xg_boxes = xg;
          xg_boxes.annotations = pseudo_boxes;
          const auto oa =
              detail::apply_object_aug(g, xg_boxes, targets, cfg, augmentor, rng, false);
          const int apts = oa.graph
                               ? oa.node
                               : g.constant(detail::points_tensor(oa.scene.points));
          auto det = detect_graph(g, apts, res.student, true);
          const auto props = decode_proposals(g, det);
          lu_total = g.add(lu_total,
                           detection_loss(g, det, props,
                                          match_votes(g, det, pseudo_boxes),
                                          pseudo_boxes)
                               .node);
          lu_terms += 1;
        }
      }

      res.batch_compositions.emplace_back(static_cast<int>(b1 - b0), u_count);

      if (ll_terms) ll_total = g.scale(ll_total, 1.0 / ll_terms);
      if (lu_terms) lu_total = g.scale(lu_total, 1.0 / lu_terms);
      const int loss = g.add(ll_total, lu_total);
      g.backward(loss);
      g.flush_param_grads();
      adam_step(res.student.net, lr);
      ema_update(res.teacher.net, res.student.net, cfg.ema_decay);

      epoch_ll += g.value(ll_total).scalar();
      epoch_lu += g.value(lu_total).scalar();
      steps += 1;
    }

    MetricsRow row;
    row.epoch = epoch;
    row.l_l = steps ? epoch_ll / steps : -1;
    row.l_u = steps ? epoch_lu / steps : -1;
    if (val && ((cfg.eval_every > 0 && epoch % cfg.eval_every == 0) ||
                epoch == cfg.ssl_epochs)) {
      const auto ev = evaluate(res.student, *val);
      row.map_25 = ev.map_25;
      row.map_50 = ev.map_50;
    }
    res.log.push_back(row);
    if (observe) observe(epoch, lr, res.student, augmentor);
  }
  return res;
}

}  // namespace opa
