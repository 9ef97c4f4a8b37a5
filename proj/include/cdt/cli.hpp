#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cdt/distill.hpp"

namespace cdt {

// ---------------------------------------------------------------------------
// Experiment configuration.  One JSON document drives every subcommand; each
// section parses with explicit defaults and rejects unknown keys, and the
// fully resolved form is echoed into every report so a report is always
// self-describing.

struct DataConfig {
  std::string kind = "color";  // color | decoy | texture
  uint64_t seed = 7;
  SampleCounts counts;         // per-class split sizes
  double bias_fraction = 1.0;  // color kind: share of class-colored samples
  // The teacher pretrains on color data at this bias regardless of `kind`,
  // standing in for a general-purpose pretrained backbone.
  double teacher_bias_fraction = 0.05;

  void validate() const;
  Json to_json() const;
  static DataConfig from_json(const Json& j);
};

struct ConceptConfig {
  // Positive-side kinds, one probe per entry; when a config file omits the
  // key, the list resolves to the bias concept matching the dataset kind
  // (color->color, decoy->gray, texture->texture).  The first entry is the
  // reported bias concept.
  std::vector<std::string> kinds = {"color"};
  int m = 100;  // examples per side
  uint64_t seed = 17;

  void validate() const;
  Json to_json() const;
  static ConceptConfig from_json(const Json& j);
};

// Base/teacher pretraining knobs (the distillation stage has its own).
struct PretrainConfig {
  int epochs = 5;
  int batch = 32;
  double lr = 1e-4;
  uint64_t seed = 1;

  void validate() const;
  Json to_json() const;
  static PretrainConfig from_json(const Json& j);
};

struct AblateConfig {
  // Grids to run: components | teacher-bias | concept-size | clusters.
  std::vector<std::string> grids = {"components", "teacher-bias", "concept-size",
                                    "clusters"};
  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<double> teacher_bias = {0.05, 0.1, 0.25, 0.75, 0.9, 1.0};
  std::vector<int> concept_m = {50, 100, 150, 200};
  std::vector<int> clusters = {3, 5, 7, 9};

  void validate() const;
  Json to_json() const;
  static AblateConfig from_json(const Json& j);
};

struct ExperimentConfig {
  DataConfig data;
  ModelSpec student = ModelSpec::default_student();
  ModelSpec teacher = ModelSpec::default_teacher();
  ConceptConfig concepts;
  PretrainConfig pretrain;
  DistillConfig distill;
  AblateConfig ablate;
  std::string output_dir = "runs";

  void validate() const;
  Json to_json() const;  // fully resolved (concept kinds filled in)
  static ExperimentConfig from_json(const Json& j);
  static ExperimentConfig load_file(const std::filesystem::path& path);
};

// ---------------------------------------------------------------------------
// CSV table: fixed header, preformatted cells, written via write_csv.
// Floats go through format_fixed (6 decimals) so reruns are byte-identical.

struct MetricsTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  void write(const std::filesystem::path& path) const;
};

// ---------------------------------------------------------------------------
// In-memory pipeline pieces shared by the subcommands, the ablation grids
// and the acceptance harness.

// Split names a dataset kind produces (train, val, test variants).
std::vector<std::string> split_names(const std::string& kind);
// The accuracy-reporting split that measures shortcut reliance: the
// color-inverted test for the color kind, the plain test otherwise.
std::string headline_split(const std::string& kind);

std::map<std::string, Dataset> generate_experiment_data(const DataConfig& d);
std::map<std::string, Dataset> generate_teacher_data(const DataConfig& d);
std::map<std::string, Dataset> generate_teacher_data(const DataConfig& d,
                                                     double teacher_bias);
std::vector<ConceptSet> generate_concepts(const ConceptConfig& c);

// Deep copy: fresh parameter tensors, same names and spec.
Model clone_model(const Model& model);

// Pretrains a classifier from scratch (seed drives init and shuffling).
Model train_base_model(const ExperimentConfig& cfg,
                       const std::map<std::string, Dataset>& splits, uint64_t seed,
                       FitResult* fit_out = nullptr);
Model train_teacher_model(const ExperimentConfig& cfg, double teacher_bias,
                          uint64_t seed, FitResult* fit_out = nullptr);

// ---------------------------------------------------------------------------
// Subcommands.  All of them throw (ConfigError/IoError/...) on failure; the
// binary maps exception types to exit codes.

void cmd_gen_data(const ExperimentConfig& cfg, bool quiet);
void cmd_train_base(const ExperimentConfig& cfg, bool quiet);
void cmd_train_teacher(const ExperimentConfig& cfg, bool quiet);
void cmd_distill(const ExperimentConfig& cfg, bool quiet);
void cmd_ablate(const ExperimentConfig& cfg, bool quiet);

struct TcavOptions {
  std::filesystem::path model_path;
  std::filesystem::path data_path;
  std::string concept_kind = "color";
  int concept_m = 100;
  uint64_t concept_seed = 17;
  std::string source = "logit";        // final_loss | logit | prototype
  std::filesystem::path cav_path;      // load this CAV instead of learning one
  std::filesystem::path prototypes_path;  // required for source=prototype
  std::filesystem::path json_out;      // optional JSON report destination
  uint64_t seed = 1;                   // probe seed
};

void cmd_tcav(const TcavOptions& opts, bool quiet);

void cmd_report(const std::filesystem::path& report_path,
                const std::filesystem::path& csv_out, bool quiet);

}  // namespace cdt
