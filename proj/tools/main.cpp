#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "cdt/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"concept-guided training toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool quiet = false;
  app.add_option("--config", config_path, "experiment configuration JSON");
  auto* seed_opt =
      app.add_option("--seed", seed, "override the invoked stage's seed");
  app.add_option("--out", out_dir, "override the output directory");
  app.add_flag("--quiet", quiet, "suppress progress output");

  auto* gen = app.add_subcommand("gen-data", "write dataset files per split");
  auto* train_base =
      app.add_subcommand("train-base", "pretrain the classifier on the training split");
  auto* train_teacher =
      app.add_subcommand("train-teacher", "pretrain the teacher on its own data");
  auto* distill = app.add_subcommand(
      "distill", "fine-tune the base checkpoint with the concept loss");
  auto* ablate =
      app.add_subcommand("ablate", "run the ablation grids into CSV tables");

  auto* tcav = app.add_subcommand("tcav", "score a concept's influence on a model");
  std::string tcav_model, tcav_data, tcav_cav, tcav_prototypes, tcav_json;
  cdt::TcavOptions topts;
  tcav->add_option("--model", tcav_model, "checkpoint to analyze")->required();
  tcav->add_option("--data", tcav_data, "dataset file to score over")->required();
  tcav->add_option("--concept-kind", topts.concept_kind,
                   "concept imagery kind (color|gray|texture)");
  tcav->add_option("--concept-m", topts.concept_m, "concept examples per side");
  tcav->add_option("--concept-seed", topts.concept_seed, "concept generation seed");
  tcav->add_option("--source", topts.source,
                   "sensitivity source (final_loss|logit|prototype)");
  tcav->add_option("--cav", tcav_cav, "load this CAV file instead of learning one");
  tcav->add_option("--prototypes", tcav_prototypes,
                   "prototype bank (required for source=prototype)");
  tcav->add_option("--json", tcav_json, "also write the result as JSON here");

  auto* report = app.add_subcommand("report", "print a saved report JSON");
  std::string report_in, report_csv;
  report->add_option("--in", report_in, "report JSON to print")->required();
  report->add_option("--csv", report_csv, "also emit a one-row CSV here");

  // Global flags are accepted on either side of the subcommand name.
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    cdt::ExperimentConfig cfg = config_path.empty()
                                    ? cdt::ExperimentConfig{}
                                    : cdt::ExperimentConfig::load_file(config_path);
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    if (seed_opt->count() > 0) {
      if (gen->parsed()) cfg.data.seed = seed;
      if (train_base->parsed() || train_teacher->parsed()) cfg.pretrain.seed = seed;
      if (distill->parsed()) cfg.distill.seed = seed;
      if (tcav->parsed()) topts.seed = seed;
    }

    if (gen->parsed()) {
      cdt::cmd_gen_data(cfg, quiet);
    } else if (train_base->parsed()) {
      cdt::cmd_train_base(cfg, quiet);
    } else if (train_teacher->parsed()) {
      cdt::cmd_train_teacher(cfg, quiet);
    } else if (distill->parsed()) {
      cdt::cmd_distill(cfg, quiet);
    } else if (ablate->parsed()) {
      cdt::cmd_ablate(cfg, quiet);
    } else if (tcav->parsed()) {
      topts.model_path = tcav_model;
      topts.data_path = tcav_data;
      topts.cav_path = tcav_cav;
      topts.prototypes_path = tcav_prototypes;
      topts.json_out = tcav_json;
      cdt::cmd_tcav(topts, quiet);
    } else if (report->parsed()) {
      cdt::cmd_report(report_in, report_csv, quiet);
    }
    return 0;
  } catch (const cdt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const cdt::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
