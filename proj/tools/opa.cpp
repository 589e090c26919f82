// `opa` — desk-scale adversarial point augmentation toolkit.
//
// Subcommands: gen-data, pretrain, ssl-train, eval, augment, report.

#include <exception>
#include <iostream>

#include <CLI11.hpp>

#include "opa/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"object-level point augmentation for 3D detection"};
  app.require_subcommand(1);

  opa::cli::GenDataOptions gen;
  auto* cmd_gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  cmd_gen->add_option("--out", gen.out_dir, "output directory")->required();
  cmd_gen->add_option("--scenes", gen.train, "number of training scenes");
  cmd_gen->add_option("--val", gen.val, "number of validation scenes");
  cmd_gen->add_option("--ratio", gen.ratio, "labeled fraction of train scenes");
  cmd_gen->add_option("--seed", gen.seed, "random seed");
  cmd_gen->add_option("--points", gen.spec.total_points, "points per scene");

  opa::cli::PretrainOptions pre;
  bool pre_no_eval = false;
  auto* cmd_pre = app.add_subcommand("pretrain", "adversarial pre-training");
  cmd_pre->add_option("--data", pre.data_dir, "dataset directory")->required();
  cmd_pre->add_option("--out", pre.out_dir, "run output directory")->required();
  cmd_pre->add_option("--config", pre.config_path, "key=value config file");
  cmd_pre->add_option("--ablate", pre.ablate, "disable a component");
  cmd_pre->add_option("--epochs", pre.epochs_override, "override epoch count");
  auto* pre_seed = cmd_pre->add_option("--seed", pre.seed_override, "random seed");
  cmd_pre->add_flag("--no-eval", pre_no_eval, "skip validation evaluation");

  opa::cli::SslTrainOptions ssl;
  bool ssl_no_eval = false;
  auto* cmd_ssl = app.add_subcommand("ssl-train", "teacher-student training");
  cmd_ssl->add_option("--data", ssl.data_dir, "dataset directory")->required();
  cmd_ssl->add_option("--out", ssl.out_dir, "run output directory")->required();
  cmd_ssl->add_option("--detector", ssl.detector_ckpt, "pre-trained detector checkpoint")
      ->required();
  cmd_ssl->add_option("--augmentor", ssl.augmentor_ckpt, "pre-trained augmentor checkpoint");
  cmd_ssl->add_option("--config", ssl.config_path, "key=value config file");
  cmd_ssl->add_option("--ablate", ssl.ablate, "disable a component");
  cmd_ssl->add_option("--epochs", ssl.epochs_override, "override epoch count");
  auto* ssl_seed = cmd_ssl->add_option("--seed", ssl.seed_override, "random seed");
  cmd_ssl->add_flag("--no-eval", ssl_no_eval, "skip validation evaluation");

  opa::cli::EvalOptions ev;
  auto* cmd_eval = app.add_subcommand("eval", "evaluate a detector checkpoint");
  cmd_eval->add_option("--data", ev.data_dir, "dataset directory")->required();
  cmd_eval->add_option("--detector", ev.detector_ckpt, "detector checkpoint")
      ->required();
  cmd_eval->add_option("--out", ev.out_path, "write results JSON here");

  opa::cli::AugmentOptions au;
  auto* cmd_aug = app.add_subcommand("augment", "apply the augmentor offline");
  cmd_aug->add_option("--data", au.data_dir, "dataset directory")->required();
  cmd_aug->add_option("--out", au.out_dir, "output directory")->required();
  cmd_aug->add_option("--augmentor", au.augmentor_ckpt, "augmentor checkpoint");
  cmd_aug->add_option("--scenes", au.scene_ids, "scene ids (default: labeled split)");
  cmd_aug->add_option("--max-objects", au.max_objects, "objects per scene");
  cmd_aug->add_option("--sample-points", au.sample_points, "points per object");
  cmd_aug->add_option("--seed", au.seed, "random seed");

  opa::cli::ReportOptions rep;
  auto* cmd_rep = app.add_subcommand("report", "render run comparisons and histograms");
  cmd_rep->add_option("--runs", rep.run_dirs, "run directories with metrics.csv");
  cmd_rep->add_option("--histograms", rep.histograms,
                      "augment output dirs or .disp.json files");
  cmd_rep->add_option("--out", rep.out_dir, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*cmd_gen) opa::cli::gen_data(gen);
    if (*cmd_pre) {
      pre.has_seed_override = pre_seed->count() > 0;
      pre.eval_val = !pre_no_eval;
      opa::cli::run_pretrain(pre);
    }
    if (*cmd_ssl) {
      ssl.has_seed_override = ssl_seed->count() > 0;
      ssl.eval_val = !ssl_no_eval;
      opa::cli::run_ssl_train(ssl);
    }
    if (*cmd_eval) opa::cli::run_eval(ev);
    if (*cmd_aug) opa::cli::run_augment(au);
    if (*cmd_rep) opa::cli::run_report(rep);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
