#pragma once

// Implementation of the `opa` command-line subcommands. Each command is a
// plain function taking parsed options, so tests can call them directly.

#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "opa/datakit.hpp"
#include "opa/report.hpp"
#include "opa/ssl.hpp"

namespace opa::cli {

namespace fs = std::filesystem;

// OPA_SEED in the environment overrides any configured seed.
inline std::optional<std::uint64_t> env_seed() {
  if (const char* s = std::getenv("OPA_SEED")) {
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      throw std::invalid_argument("OPA_SEED is not a valid integer: " +
                                  std::string(s));
    }
  }
  return std::nullopt;
}

inline std::string scene_path(const std::string& data_dir,
                              const std::string& id) {
  return (fs::path(data_dir) / (id + ".json")).string();
}

inline std::vector<Scene> load_scenes(const std::string& data_dir,
                                      const std::vector<std::string>& ids) {
  std::vector<Scene> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(load_scene(scene_path(data_dir, id)));
  return out;
}

// Written to <run_dir>/manifest.json before any training step executes.
inline void write_manifest(const std::string& run_dir,
                           const std::string& command, const TrainConfig& cfg,
                           const nlohmann::json& extra) {
  nlohmann::json j;
  j["command"] = command;
  j["seed"] = cfg.seed;
  std::ostringstream cfg_text;
  save_config(cfg, cfg_text);
  j["config"] = cfg_text.str();
  const std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  j["started_at"] = buf;
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = *it;
  std::ofstream out((fs::path(run_dir) / "manifest.json").string());
  if (!out) throw std::runtime_error("cannot write manifest in " + run_dir);
  out << j.dump(2) << "\n";
}

// ---- gen-data --------------------------------------------------------------

struct GenDataOptions {
  std::string out_dir;
  int train = 200;
  int val = 50;
  double ratio = 0.1;
  std::uint64_t seed = 1;
  SceneSpec spec;
};

inline void gen_data(const GenDataOptions& opt, std::ostream& log = std::cout) {
  fs::create_directories(opt.out_dir);
  std::uint64_t seed = env_seed().value_or(opt.seed);
  Rng rng(seed);
  std::vector<std::string> train_ids, val_ids;
  for (int i = 0; i < opt.train; ++i) {
    const std::string id = "train_" + std::to_string(i);
    save_scene(generate_scene(rng, opt.spec, id), scene_path(opt.out_dir, id));
    train_ids.push_back(id);
  }
  for (int i = 0; i < opt.val; ++i) {
    const std::string id = "val_" + std::to_string(i);
    save_scene(generate_scene(rng, opt.spec, id), scene_path(opt.out_dir, id));
    val_ids.push_back(id);
  }
  const auto split = make_split(train_ids, val_ids, opt.ratio, seed + 9);
  save_split(split, (fs::path(opt.out_dir) / "split.json").string());
  log << "wrote " << opt.train << " train + " << opt.val << " val scenes to "
      << opt.out_dir << " (labeled " << split.labeled.size() << ", unlabeled "
      << split.unlabeled.size() << ")\n";
}

// ---- pretrain ---------------------------------------------------------------

struct PretrainOptions {
  std::string data_dir;
  std::string out_dir;
  std::string config_path;  // optional
  std::string ablate;       // optional
  int epochs_override = -1;
  std::uint64_t seed_override = 0;
  bool has_seed_override = false;
  bool eval_val = true;
};

inline TrainConfig resolve_config(const std::string& config_path,
                                  std::uint64_t seed_override,
                                  bool has_seed_override) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
  if (has_seed_override) cfg.seed = seed_override;
  if (auto s = env_seed()) cfg.seed = *s;
  return cfg;
}

inline void run_pretrain(const PretrainOptions& opt,
                         std::ostream& log = std::cout) {
  TrainConfig cfg =
      resolve_config(opt.config_path, opt.seed_override, opt.has_seed_override);
  if (opt.epochs_override > 0) cfg.pretrain_epochs = opt.epochs_override;
  const Ablation ab = Ablation::parse(opt.ablate);
  const bool use_object_aug = ab.labeled_aug && cfg.object_aug != "none";

  fs::create_directories(opt.out_dir);
  write_manifest(opt.out_dir, "pretrain", cfg,
                 {{"data", opt.data_dir}, {"ablate", opt.ablate}});

  const auto split =
      load_split((fs::path(opt.data_dir) / "split.json").string());
  const auto labeled = load_scenes(opt.data_dir, split.labeled);
  std::vector<Scene> val;
  if (opt.eval_val) val = load_scenes(opt.data_dir, split.val);

  auto res = pretrain(labeled, cfg, use_object_aug, ab.objectness_rho,
                      opt.eval_val ? &val : nullptr);
  save_checkpoint(res.detector.net,
                  (fs::path(opt.out_dir) / "detector.json").string());
  save_checkpoint(res.augmentor.net,
                  (fs::path(opt.out_dir) / "augmentor.json").string());
  write_metrics_csv(res.log, (fs::path(opt.out_dir) / "metrics.csv").string());
  const auto& last = res.log.back();
  log << "pretrain done: epochs=" << cfg.pretrain_epochs;
  if (last.map_25 >= 0)
    log << " mAP@0.25=" << last.map_25 << " mAP@0.5=" << last.map_50;
  log << "\n";
}

// ---- ssl-train --------------------------------------------------------------

struct SslTrainOptions {
  std::string data_dir;
  std::string out_dir;
  std::string detector_ckpt;
  std::string augmentor_ckpt;
  std::string config_path;
  std::string ablate;
  int epochs_override = -1;
  std::uint64_t seed_override = 0;
  bool has_seed_override = false;
  bool eval_val = true;
};

inline void run_ssl_train(const SslTrainOptions& opt,
                          std::ostream& log = std::cout) {
  TrainConfig cfg =
      resolve_config(opt.config_path, opt.seed_override, opt.has_seed_override);
  if (opt.epochs_override > 0) cfg.ssl_epochs = opt.epochs_override;
  const Ablation ab = Ablation::parse(opt.ablate);

  fs::create_directories(opt.out_dir);
  write_manifest(opt.out_dir, "ssl-train", cfg,
                 {{"data", opt.data_dir},
                  {"detector", opt.detector_ckpt},
                  {"augmentor", opt.augmentor_ckpt},
                  {"ablate", opt.ablate}});

  DetectorNet detector(0);
  load_checkpoint(detector.net, opt.detector_ckpt);
  AugmentorNet augmentor(0);
  if (!opt.augmentor_ckpt.empty())
    load_checkpoint(augmentor.net, opt.augmentor_ckpt);

  const auto split =
      load_split((fs::path(opt.data_dir) / "split.json").string());
  const auto labeled = load_scenes(opt.data_dir, split.labeled);
  const auto unlabeled = load_scenes(opt.data_dir, split.unlabeled);
  std::vector<Scene> val;
  if (opt.eval_val) val = load_scenes(opt.data_dir, split.val);

  auto res = ssl_train(labeled, unlabeled, detector, augmentor, cfg, ab,
                       opt.eval_val ? &val : nullptr);
  save_checkpoint(res.student.net,
                  (fs::path(opt.out_dir) / "student.json").string());
  save_checkpoint(res.teacher.net,
                  (fs::path(opt.out_dir) / "teacher.json").string());
  write_metrics_csv(res.log, (fs::path(opt.out_dir) / "metrics.csv").string());
  const auto& last = res.log.back();
  log << "ssl-train done: epochs=" << cfg.ssl_epochs;
  if (last.map_25 >= 0)
    log << " mAP@0.25=" << last.map_25 << " mAP@0.5=" << last.map_50;
  log << "\n";
}

// ---- eval -------------------------------------------------------------------

struct EvalOptions {
  std::string data_dir;
  std::string detector_ckpt;
  std::string out_path;  // optional JSON result
};

inline EvalResult run_eval(const EvalOptions& opt,
                           std::ostream& log = std::cout) {
  DetectorNet detector(0);
  load_checkpoint(detector.net, opt.detector_ckpt);
  const auto split =
      load_split((fs::path(opt.data_dir) / "split.json").string());
  const auto val = load_scenes(opt.data_dir, split.val);
  const auto res = evaluate(detector, val);
  log << "mAP@0.25=" << res.map_25 << " mAP@0.5=" << res.map_50 << "\n";
  for (const auto& [cls, ap] : res.ap.at(0.25))
    log << "  class " << cls << ": AP@0.25=" << ap << " AP@0.5="
        << res.ap.at(0.5).at(cls) << "\n";
  if (!opt.out_path.empty()) {
    nlohmann::json j;
    j["map_25"] = res.map_25;
    j["map_50"] = res.map_50;
    for (const auto& [t, per_class] : res.ap)
      for (const auto& [cls, ap] : per_class)
        j["ap"][std::to_string(t)][std::to_string(cls)] = ap;
    std::ofstream out(opt.out_path);
    if (!out) throw std::runtime_error("cannot write " + opt.out_path);
    out << j.dump(2) << "\n";
  }
  return res;
}

// ---- augment ----------------------------------------------------------------

struct AugmentOptions {
  std::string data_dir;
  std::string out_dir;
  std::string augmentor_ckpt;  // empty: fresh (identity) augmentor
  std::vector<std::string> scene_ids;  // empty: all labeled scenes
  std::size_t max_objects = 3;
  std::size_t sample_points = 1024;
  std::uint64_t seed = 1;
};

// Augments scenes and writes, next to each augmented scene, a sidecar
// `<id>.disp.json` with per-object displacement fields for later reporting.
inline void run_augment(const AugmentOptions& opt,
                        std::ostream& log = std::cout) {
  fs::create_directories(opt.out_dir);
  AugmentorNet aug(opt.seed + 7);
  if (!opt.augmentor_ckpt.empty()) load_checkpoint(aug.net, opt.augmentor_ckpt);
  Rng rng(env_seed().value_or(opt.seed));

  std::vector<std::string> ids = opt.scene_ids;
  if (ids.empty()) {
    const auto split =
        load_split((fs::path(opt.data_dir) / "split.json").string());
    ids = split.labeled;
  }

  long total_points = 0;
  for (const auto& id : ids) {
    const Scene scene = load_scene(scene_path(opt.data_dir, id));
    if (!scene.annotations)
      throw std::runtime_error("scene " + id + " has no annotations");
    auto res = augment_scene(scene, *scene.annotations, opt.max_objects,
                             opt.sample_points, aug, rng);
    save_scene(res.scene, scene_path(opt.out_dir, id));

    nlohmann::json j;
    j["scene"] = id;
    auto& objs = j["objects"];
    objs = nlohmann::json::array();
    for (std::size_t ci = 0; ci < res.crops.size(); ++ci) {
      nlohmann::json o;
      const auto& b = res.crops[ci].box;
      o["box"] = {{"center", {b.center.x, b.center.y, b.center.z}},
                  {"size", {b.size.x, b.size.y, b.size.z}},
                  {"yaw", b.yaw},
                  {"class", b.class_id}};
      auto& d = o["displacements"];
      d = nlohmann::json::array();
      for (const auto& v : res.displacements[ci]) d.push_back({v.x, v.y, v.z});
      objs.push_back(std::move(o));
      total_points += static_cast<long>(res.displacements[ci].size());
    }
    std::ofstream out((fs::path(opt.out_dir) / (id + ".disp.json")).string());
    if (!out) throw std::runtime_error("cannot write sidecar for " + id);
    out << j.dump() << "\n";
  }
  log << "augmented " << ids.size() << " scenes (" << total_points
      << " object points) into " << opt.out_dir << "\n";
}

// ---- report -----------------------------------------------------------------

inline std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read metrics file: " + path);
  std::vector<MetricsRow> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    MetricsRow r;
    double* fields[] = {nullptr, &r.l_d, &r.l_a, &r.rho_mean,
                        &r.l_l,  &r.l_u, &r.map_25, &r.map_50};
    for (int f = 0; f < 8 && std::getline(ss, tok, ','); ++f) {
      if (f == 0) r.epoch = std::stoi(tok);
      else if (!tok.empty()) *fields[f] = std::stod(tok);
    }
    rows.push_back(r);
  }
  return rows;
}

struct ReportOptions {
  std::vector<std::string> run_dirs;    // dirs with metrics.csv (+ manifest)
  std::vector<std::string> histograms;  // dirs or files with *.disp.json
  std::string out_dir;
};

namespace detail_report {

inline std::string run_label(const std::string& dir) {
  const fs::path manifest = fs::path(dir) / "manifest.json";
  std::string label = fs::path(dir).filename().string();
  if (fs::exists(manifest)) {
    std::ifstream in(manifest.string());
    nlohmann::json j;
    in >> j;
    if (j.contains("ablate") && j["ablate"].is_string() &&
        !j["ablate"].get<std::string>().empty())
      label += " [" + j["ablate"].get<std::string>() + "]";
  }
  return label;
}

// Run names grouped across seeds: "foo_seed3" and "foo-s1" collapse to "foo".
inline std::string group_key(const std::string& name) {
  static const std::vector<std::string> suffixes = {"_seed", "-seed", "_s", "-s"};
  for (const auto& suf : suffixes) {
    const auto pos = name.rfind(suf);
    if (pos == std::string::npos) continue;
    const std::string tail = name.substr(pos + suf.size());
    if (!tail.empty() &&
        std::all_of(tail.begin(), tail.end(), [](char c) { return std::isdigit(c); }))
      return name.substr(0, pos);
  }
  return name;
}

inline void accumulate_sidecar(const std::string& file, DisplacementHistogram& h) {
  std::ifstream in(file);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed sidecar " + file + ": " + e.what());
  }
  std::vector<ObjectCrop> crops;
  std::vector<std::vector<Vec3>> fields;
  for (const auto& o : j.at("objects")) {
    ObjectCrop crop;
    const auto& b = o.at("box");
    crop.box.center = {b.at("center")[0], b.at("center")[1], b.at("center")[2]};
    crop.box.size = {b.at("size")[0], b.at("size")[1], b.at("size")[2]};
    crop.box.yaw = b.at("yaw");
    crop.box.class_id = b.at("class");
    std::vector<Vec3> field;
    for (const auto& d : o.at("displacements"))
      field.push_back({d[0], d[1], d[2]});
    crops.push_back(std::move(crop));
    fields.push_back(std::move(field));
  }
  const auto part = displacement_histogram(crops, fields);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < DisplacementHistogram::kNumBins; ++b)
      h.counts[a][b] += part.counts[a][b];
}

}  // namespace detail_report

inline void run_report(const ReportOptions& opt,
                       std::ostream& log = std::cout) {
  fs::create_directories(opt.out_dir);
  int artifacts = 0;

  if (!opt.run_dirs.empty()) {
    std::vector<Curve> map_curves, loss_curves;
    std::map<std::string, RunGroup> groups;
    for (const auto& dir : opt.run_dirs) {
      const auto rows =
          read_metrics_csv((fs::path(dir) / "metrics.csv").string());
      const std::string label = detail_report::run_label(dir);
      Curve cmap{label, {}, {}}, closs{label, {}, {}};
      double final_25 = -1, final_50 = -1;
      for (const auto& r : rows) {
        if (r.map_25 >= 0) {
          cmap.x.push_back(r.epoch);
          cmap.y.push_back(r.map_25);
          final_25 = r.map_25;
          final_50 = r.map_50;
        }
        const double loss = r.l_d >= 0 ? r.l_d : (r.l_l >= 0 ? r.l_l : -1);
        if (loss >= 0) {
          closs.x.push_back(r.epoch);
          closs.y.push_back(loss);
        }
      }
      if (!cmap.x.empty()) map_curves.push_back(std::move(cmap));
      if (!closs.x.empty()) loss_curves.push_back(std::move(closs));
      if (final_25 >= 0) {
        auto& grp = groups[detail_report::group_key(label)];
        grp.name = detail_report::group_key(label);
        grp.map_25.push_back(final_25);
        grp.map_50.push_back(final_50);
      }
    }
    if (!map_curves.empty()) {
      write_text_file(
          (fs::path(opt.out_dir) / "map_curves.svg").string(),
          render_curves_svg(map_curves, "validation mAP@0.25", "epoch", "mAP"));
      ++artifacts;
    }
    if (!loss_curves.empty()) {
      write_text_file(
          (fs::path(opt.out_dir) / "loss_curves.svg").string(),
          render_curves_svg(loss_curves, "training loss", "epoch", "loss"));
      ++artifacts;
    }
    if (!groups.empty()) {
      std::vector<RunGroup> ordered;
      for (auto& [k, g] : groups) ordered.push_back(g);
      write_text_file((fs::path(opt.out_dir) / "comparison.md").string(),
                      comparison_table(ordered));
      ++artifacts;
    }
  }

  if (!opt.histograms.empty()) {
    DisplacementHistogram h;
    for (const auto& entry : opt.histograms) {
      if (fs::is_directory(entry)) {
        for (const auto& f : fs::directory_iterator(entry))
          if (f.path().string().ends_with(".disp.json"))
            detail_report::accumulate_sidecar(f.path().string(), h);
      } else {
        detail_report::accumulate_sidecar(entry, h);
      }
    }
    write_text_file(
        (fs::path(opt.out_dir) / "displacement_histogram.svg").string(),
        render_histogram_svg(h, "object point displacement ratios"));
    ++artifacts;
  }

  log << "report wrote " << artifacts << " artifact(s) to " << opt.out_dir
      << "\n";
}

}  // namespace opa::cli
