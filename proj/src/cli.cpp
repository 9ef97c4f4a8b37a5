#include "cdt/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <tuple>

#include "cdt/io.hpp"

namespace fs = std::filesystem;

namespace cdt {
namespace {

double round6(double v) { return std::round(v * 1e6) / 1e6; }

void require_known_keys(const Json& j, const std::string& what,
                        std::initializer_list<const char*> keys) {
  if (!j.is_object()) {
    throw ConfigError(what + ": expected a JSON object");
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) {
      if (it.key() == k) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw ConfigError(what + ": unknown key \"" + it.key() + "\"");
    }
  }
}

// Short float rendering for variant labels ("bias_0.05", not "bias_0.050000").
std::string format_short(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) {
    throw IoError("cannot create directory " + p.string() + ": " + ec.message());
  }
}

void say(bool quiet, const std::string& line) {
  if (!quiet) std::cout << line << "\n";
}

void write_report(const fs::path& path, const Json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

// The concept whose suppression the dataset kind is built to test.
std::string bias_concept_kind(const std::string& data_kind) {
  if (data_kind == "color") return "color";
  if (data_kind == "decoy") return "gray";
  return "texture";
}

Json epoch_json(const EpochMetrics& m) {
  return Json{{"loss_task", round6(m.loss_task)},
              {"loss_concept", round6(m.loss_concept)},
              {"train_acc", round6(m.train_acc)},
              {"val_acc", round6(m.val_acc)}};
}

std::map<std::string, Dataset> load_splits(const fs::path& dir, const std::string& kind) {
  std::map<std::string, Dataset> out;
  for (const auto& name : split_names(kind)) {
    out.emplace(name, load_dataset(dir / (name + ".cdds")));
  }
  return out;
}

std::map<std::string, double> test_accuracies(const Model& model,
                                              const std::map<std::string, Dataset>& splits) {
  std::map<std::string, double> out;
  for (const auto& [name, ds] : splits) {
    if (name.rfind("test", 0) == 0) out[name] = accuracy(model, ds);
  }
  return out;
}

Json pretrain_report_json(const ExperimentConfig& cfg, const std::string& command,
                          const FitResult& fit,
                          const std::map<std::string, double>& test_acc,
                          const std::string& checkpoint, uint64_t seed) {
  Json epochs = Json::array();
  for (const auto& m : fit.epochs) epochs.push_back(epoch_json(m));
  Json tests;
  for (const auto& [name, acc] : test_acc) tests[name] = round6(acc);
  Json j;
  j["command"] = command;
  j["config"] = cfg.to_json();
  j["seed"] = seed;
  j["epochs"] = epochs;
  j["best_epoch"] = fit.best_epoch;
  j["best_val_acc"] = round6(fit.best_val_acc);
  j["train_accuracy"] =
      fit.best_epoch >= 0 ? round6(fit.epochs[fit.best_epoch].train_acc) : 0.0;
  j["test_accuracy"] = tests;
  j["checkpoint"] = checkpoint;
  return j;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration sections

void DataConfig::validate() const {
  if (kind != "color" && kind != "decoy" && kind != "texture") {
    throw ConfigError("data.kind must be color, decoy or texture, got \"" + kind + "\"");
  }
  if (counts.train < 1 || counts.val < 1 || counts.test < 1) {
    throw ConfigError("data.sizes entries must be positive");
  }
  if (bias_fraction < 0.0 || bias_fraction > 1.0) {
    throw ConfigError("data.bias_fraction must lie in [0,1], got " +
                      format_fixed(bias_fraction));
  }
  if (teacher_bias_fraction < 0.0 || teacher_bias_fraction > 1.0) {
    throw ConfigError("data.teacher_bias_fraction must lie in [0,1], got " +
                      format_fixed(teacher_bias_fraction));
  }
}

Json DataConfig::to_json() const {
  return Json{{"kind", kind},
              {"seed", seed},
              {"sizes", Json{{"train", counts.train}, {"val", counts.val},
                             {"test", counts.test}}},
              {"bias_fraction", bias_fraction},
              {"teacher_bias_fraction", teacher_bias_fraction}};
}

DataConfig DataConfig::from_json(const Json& j) {
  require_known_keys(j, "data",
                     {"kind", "seed", "sizes", "bias_fraction", "teacher_bias_fraction"});
  DataConfig d;
  d.kind = j.value("kind", d.kind);
  d.seed = j.value("seed", d.seed);
  if (j.contains("sizes")) {
    const Json& s = j.at("sizes");
    require_known_keys(s, "data.sizes", {"train", "val", "test"});
    d.counts.train = s.value("train", d.counts.train);
    d.counts.val = s.value("val", d.counts.val);
    d.counts.test = s.value("test", d.counts.test);
  }
  d.bias_fraction = j.value("bias_fraction", d.bias_fraction);
  d.teacher_bias_fraction = j.value("teacher_bias_fraction", d.teacher_bias_fraction);
  d.validate();
  return d;
}

void ConceptConfig::validate() const {
  if (kinds.empty()) {
    throw ConfigError("concepts.kinds must not be empty");
  }
  for (const auto& k : kinds) {
    if (k != "color" && k != "gray" && k != "texture" && k != "blobs-negative") {
      throw ConfigError("concepts.kinds entry must be color, gray, texture or "
                        "blobs-negative, got \"" + k + "\"");
    }
  }
  if (m < 10) {
    throw ConfigError("concepts.m must be at least 10, got " + std::to_string(m));
  }
}

Json ConceptConfig::to_json() const {
  return Json{{"kinds", kinds}, {"m", m}, {"seed", seed}};
}

ConceptConfig ConceptConfig::from_json(const Json& j) {
  require_known_keys(j, "concepts", {"kinds", "m", "seed"});
  ConceptConfig c;
  if (j.contains("kinds")) {
    c.kinds = j.at("kinds").get<std::vector<std::string>>();
  }
  c.m = j.value("m", c.m);
  c.seed = j.value("seed", c.seed);
  return c;
}

void PretrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("pretrain.epochs must be positive");
  if (batch < 1) throw ConfigError("pretrain.batch must be positive");
  if (!(lr > 0.0)) throw ConfigError("pretrain.lr must be positive");
}

Json PretrainConfig::to_json() const {
  return Json{{"epochs", epochs}, {"batch", batch}, {"lr", lr}, {"seed", seed}};
}

PretrainConfig PretrainConfig::from_json(const Json& j) {
  require_known_keys(j, "pretrain", {"epochs", "batch", "lr", "seed"});
  PretrainConfig p;
  p.epochs = j.value("epochs", p.epochs);
  p.batch = j.value("batch", p.batch);
  p.lr = j.value("lr", p.lr);
  p.seed = j.value("seed", p.seed);
  p.validate();
  return p;
}

void AblateConfig::validate() const {
  if (grids.empty()) throw ConfigError("ablate.grids must not be empty");
  for (const auto& g : grids) {
    if (g != "components" && g != "teacher-bias" && g != "concept-size" &&
        g != "clusters") {
      throw ConfigError("ablate.grids entry must be components, teacher-bias, "
                        "concept-size or clusters, got \"" + g + "\"");
    }
  }
  if (seeds.empty()) throw ConfigError("ablate.seeds must not be empty");
  if (teacher_bias.empty()) throw ConfigError("ablate.teacher_bias must not be empty");
  for (double b : teacher_bias) {
    if (b < 0.0 || b > 1.0) {
      throw ConfigError("ablate.teacher_bias entries must lie in [0,1], got " +
                        format_fixed(b));
    }
  }
  if (concept_m.empty()) throw ConfigError("ablate.concept_m must not be empty");
  for (int m : concept_m) {
    if (m < 10) throw ConfigError("ablate.concept_m entries must be at least 10");
  }
  if (clusters.empty()) throw ConfigError("ablate.clusters must not be empty");
  for (int k : clusters) {
    if (k < 1) throw ConfigError("ablate.clusters entries must be positive");
  }
}

Json AblateConfig::to_json() const {
  return Json{{"grids", grids},
              {"seeds", seeds},
              {"teacher_bias", teacher_bias},
              {"concept_m", concept_m},
              {"clusters", clusters}};
}

AblateConfig AblateConfig::from_json(const Json& j) {
  require_known_keys(j, "ablate",
                     {"grids", "seeds", "teacher_bias", "concept_m", "clusters"});
  AblateConfig a;
  if (j.contains("grids")) a.grids = j.at("grids").get<std::vector<std::string>>();
  if (j.contains("seeds")) a.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  if (j.contains("teacher_bias")) {
    a.teacher_bias = j.at("teacher_bias").get<std::vector<double>>();
  }
  if (j.contains("concept_m")) a.concept_m = j.at("concept_m").get<std::vector<int>>();
  if (j.contains("clusters")) a.clusters = j.at("clusters").get<std::vector<int>>();
  a.validate();
  return a;
}

void ExperimentConfig::validate() const {
  data.validate();
  student.validate();
  teacher.validate();
  concepts.validate();
  pretrain.validate();
  distill.validate();
  ablate.validate();
  if (output_dir.empty()) {
    throw ConfigError("outputs.directory must not be empty");
  }
}

Json ExperimentConfig::to_json() const {
  Json j;
  j["data"] = data.to_json();
  j["student"] = student.to_json();
  j["teacher"] = teacher.to_json();
  j["concepts"] = concepts.to_json();
  j["pretrain"] = pretrain.to_json();
  j["distill"] = distill.to_json();
  j["ablate"] = ablate.to_json();
  j["outputs"] = Json{{"directory", output_dir}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const Json& j) {
  try {
    require_known_keys(j, "config",
                       {"data", "student", "teacher", "concepts", "pretrain", "distill",
                        "ablate", "outputs"});
    ExperimentConfig cfg;
    if (j.contains("data")) cfg.data = DataConfig::from_json(j.at("data"));
    if (j.contains("student")) cfg.student = ModelSpec::from_json(j.at("student"));
    if (j.contains("teacher")) cfg.teacher = ModelSpec::from_json(j.at("teacher"));
    if (j.contains("concepts")) cfg.concepts = ConceptConfig::from_json(j.at("concepts"));
    if (!j.contains("concepts") || !j.at("concepts").contains("kinds")) {
      cfg.concepts.kinds = {bias_concept_kind(cfg.data.kind)};
    }
    if (j.contains("pretrain")) cfg.pretrain = PretrainConfig::from_json(j.at("pretrain"));
    if (j.contains("distill")) cfg.distill = DistillConfig::from_json(j.at("distill"));
    if (j.contains("ablate")) cfg.ablate = AblateConfig::from_json(j.at("ablate"));
    if (j.contains("outputs")) {
      const Json& o = j.at("outputs");
      require_known_keys(o, "outputs", {"directory"});
      cfg.output_dir = o.value("directory", cfg.output_dir);
    }
    cfg.validate();
    return cfg;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ExperimentConfig ExperimentConfig::load_file(const fs::path& path) {
  const std::string text = read_text_file(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

// ---------------------------------------------------------------------------
// Table writing

void MetricsTable::write(const fs::path& path) const {
  write_csv(path, columns, rows);
}

// ---------------------------------------------------------------------------
// Pipeline pieces

std::vector<std::string> split_names(const std::string& kind) {
  if (kind == "color") {
    return {"train", "val", "test_inverted", "test_random", "test_pixel_hard",
            "test_texture"};
  }
  return {"train", "val", "test"};
}

std::string headline_split(const std::string& kind) {
  return kind == "color" ? "test_inverted" : "test";
}

std::map<std::string, Dataset> generate_experiment_data(const DataConfig& d) {
  d.validate();
  if (d.kind == "color") return gen_color_biased(d.seed, d.counts, d.bias_fraction);
  if (d.kind == "decoy") return gen_decoy(d.seed, d.counts);
  return gen_texture_biased(d.seed, d.counts);
}

std::map<std::string, Dataset> generate_teacher_data(const DataConfig& d) {
  return generate_teacher_data(d, d.teacher_bias_fraction);
}

std::map<std::string, Dataset> generate_teacher_data(const DataConfig& d,
                                                     double teacher_bias) {
  d.validate();
  if (teacher_bias < 0.0 || teacher_bias > 1.0) {
    throw ConfigError("teacher bias fraction must lie in [0,1], got " +
                      format_fixed(teacher_bias));
  }
  // Teacher data is always color imagery so one teacher protocol serves every
  // dataset kind; the derived seed keeps it disjoint from the student draw.
  return gen_color_biased(mix_seed(d.seed, 1040), d.counts, teacher_bias);
}

std::vector<ConceptSet> generate_concepts(const ConceptConfig& c) {
  c.validate();
  std::vector<ConceptSet> out;
  for (size_t i = 0; i < c.kinds.size(); ++i) {
    out.push_back(gen_concept_set(c.kinds[i], c.m, mix_seed(c.seed, i)));
  }
  return out;
}

Model clone_model(const Model& model) {
  Model out;
  out.spec = model.spec;
  for (const auto& [name, p] : model.params) {
    out.params.emplace(name, Tensor::make(p.shape(), p.values(), true));
  }
  return out;
}

Model train_base_model(const ExperimentConfig& cfg,
                       const std::map<std::string, Dataset>& splits, uint64_t seed,
                       FitResult* fit_out) {
  Model model = Model::build(cfg.student, seed);
  TrainOptions opts{cfg.pretrain.epochs, cfg.pretrain.batch, seed, cfg.pretrain.lr};
  FitResult fit = train_classifier(model, splits.at("train"), splits.at("val"), opts);
  if (fit_out) *fit_out = fit;
  return model;
}

Model train_teacher_model(const ExperimentConfig& cfg, double teacher_bias,
                          uint64_t seed, FitResult* fit_out) {
  auto tdata = generate_teacher_data(cfg.data, teacher_bias);
  Model model = Model::build(cfg.teacher, seed);
  TrainOptions opts{cfg.pretrain.epochs, cfg.pretrain.batch, seed, cfg.pretrain.lr};
  FitResult fit = train_classifier(model, tdata.at("train"), tdata.at("val"), opts);
  if (fit_out) *fit_out = fit;
  return model;
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_gen_data(const ExperimentConfig& cfg, bool quiet) {
  cfg.validate();
  const fs::path root(cfg.output_dir);
  ensure_dir(root / "data");
  ensure_dir(root / "teacher_data");

  const auto splits = generate_experiment_data(cfg.data);
  for (const auto& [name, ds] : splits) {
    const fs::path p = root / "data" / (name + ".cdds");
    save_dataset(ds, p);
    say(quiet, p.string() + "  " + std::to_string(ds.size()) + " samples");
  }
  const auto teacher_splits = generate_teacher_data(cfg.data);
  for (const auto& [name, ds] : teacher_splits) {
    const fs::path p = root / "teacher_data" / (name + ".cdds");
    save_dataset(ds, p);
    say(quiet, p.string() + "  " + std::to_string(ds.size()) + " samples");
  }
}

void cmd_train_base(const ExperimentConfig& cfg, bool quiet) {
  cfg.validate();
  const fs::path root(cfg.output_dir);
  const auto splits = load_splits(root / "data", cfg.data.kind);

  FitResult fit;
  Model model = train_base_model(cfg, splits, cfg.pretrain.seed, &fit);
  const auto test_acc = test_accuracies(model, splits);

  ensure_dir(root / "models");
  ensure_dir(root / "reports");
  save_checkpoint(model, root / "models" / "base.cdst");
  const Json rep = pretrain_report_json(cfg, "train-base", fit, test_acc,
                                        "models/base.cdst", cfg.pretrain.seed);
  write_report(root / "reports" / "train_base.json", rep);

  say(quiet, "base model: best val acc " + format_fixed(fit.best_val_acc) + " (epoch " +
                 std::to_string(fit.best_epoch + 1) + "/" +
                 std::to_string(static_cast<int>(fit.epochs.size())) + ")");
  for (const auto& [name, acc] : test_acc) {
    say(quiet, "  " + name + " acc " + format_fixed(acc));
  }
}

void cmd_train_teacher(const ExperimentConfig& cfg, bool quiet) {
  cfg.validate();
  const fs::path root(cfg.output_dir);
  // Teacher data is color imagery regardless of the experiment kind.
  const auto splits = load_splits(root / "teacher_data", "color");

  Model model = Model::build(cfg.teacher, cfg.pretrain.seed);
  TrainOptions opts{cfg.pretrain.epochs, cfg.pretrain.batch, cfg.pretrain.seed,
                    cfg.pretrain.lr};
  FitResult fit = train_classifier(model, splits.at("train"), splits.at("val"), opts);
  const auto test_acc = test_accuracies(model, splits);

  ensure_dir(root / "models");
  ensure_dir(root / "reports");
  save_checkpoint(model, root / "models" / "teacher.cdst");
  const Json rep = pretrain_report_json(cfg, "train-teacher", fit, test_acc,
                                        "models/teacher.cdst", cfg.pretrain.seed);
  write_report(root / "reports" / "train_teacher.json", rep);

  say(quiet, "teacher model: best val acc " + format_fixed(fit.best_val_acc));
  for (const auto& [name, acc] : test_acc) {
    say(quiet, "  " + name + " acc " + format_fixed(acc));
  }
}

void cmd_distill(const ExperimentConfig& cfg, bool quiet) {
  cfg.validate();
  const fs::path root(cfg.output_dir);

  Model student = load_checkpoint(root / "models" / "base.cdst");
  std::optional<Model> teacher;
  if (cfg.distill.use_teacher) {
    teacher.emplace(load_checkpoint(root / "models" / "teacher.cdst"));
  }
  const auto splits = load_splits(root / "data", cfg.data.kind);
  const auto concepts = generate_concepts(cfg.concepts);

  TrainReport report =
      distill_train(student, teacher ? &*teacher : nullptr, concepts, splits, cfg.distill);

  ensure_dir(root / "models");
  ensure_dir(root / "reports");
  save_checkpoint(student, root / "models" / "distilled.cdst");
  if (cfg.distill.use_prototypes && cfg.distill.lambda > 0.0) {
    // Post-hoc bank over the distilled weights, for prototype-source TCAV.
    PrototypeBank bank =
        init_prototypes(student, splits.at("train"), cfg.distill.clusters,
                        cfg.distill.alpha, mix_seed(cfg.distill.seed, 11));
    save_prototypes(bank, root / "models" / "prototypes.cdpb");
  }

  Json j = report.to_json();
  j["config"] = cfg.to_json();
  j["seed"] = cfg.distill.seed;
  j["checkpoint"] = "models/distilled.cdst";
  write_report(root / "reports" / "distill.json", j);

  say(quiet, "distilled: valid CAVs " + std::to_string(report.valid_cavs) +
                 ", refits " + std::to_string(report.cav_refits));
  if (!report.epochs.empty()) {
    say(quiet, "  concept loss " + format_fixed(report.epochs.front().loss_concept) +
                   " -> " + format_fixed(report.epochs.back().loss_concept));
  }
  for (const auto& [source, score] : report.tcav_before) {
    const auto after = report.tcav_after.find(source);
    say(quiet, "  tcav(" + source + ") " + format_fixed(score) + " -> " +
                   (after == report.tcav_after.end() ? std::string("n/a")
                                                     : format_fixed(after->second)));
  }
  for (const auto& [name, acc] : report.test_accuracy) {
    say(quiet, "  " + name + " acc " + format_fixed(acc));
  }
  for (const auto& w : report.warnings) say(quiet, "  warning: " + w);
}

void cmd_tcav(const TcavOptions& opts, bool quiet) {
  const Model model = load_checkpoint(opts.model_path);
  const Dataset data = load_dataset(opts.data_path);

  const Shape img = data.images.shape();
  const Shape want = model.spec.input;
  if (img.size() != 4 || img[1] != want[0] || img[2] != want[1] || img[3] != want[2]) {
    throw ShapeError("data images " + shape_to_string(img) +
                     " do not match the model input " + shape_to_string(want));
  }
  const GradientSource source = gradient_source_from_name(opts.source);

  Cav cav;
  if (!opts.cav_path.empty()) {
    cav = load_cav(opts.cav_path);
  } else {
    const ConceptSet cs = gen_concept_set(opts.concept_kind, opts.concept_m,
                                          opts.concept_seed);
    const auto pos = extract_activations(model, cs.positives, "student");
    const auto neg = extract_activations(model, cs.negatives, "student");
    cav = learn_cav(pos, neg, cs.name, opts.seed);
    say(quiet, "learned probe for \"" + cs.name + "\": heldout accuracy " +
                   format_fixed(cav.heldout_accuracy));
  }
  const Shape hook = model.spec.hook_shape(1);
  if (cav.vector.size() != numel(hook)) {
    throw ShapeError("cav dimension " + std::to_string(cav.vector.size()) +
                     " does not match hook " + model.spec.hook + " " +
                     shape_to_string(hook));
  }

  PrototypeBank bank;
  bool have_bank = false;
  if (source == GradientSource::Prototype) {
    if (opts.prototypes_path.empty()) {
      throw ConfigError("source=prototype needs --prototypes <file.cdpb>");
    }
    bank = load_prototypes(opts.prototypes_path);
    have_bank = true;
  }

  const double score = tcav_score(model, data.images, data.labels, cav, source,
                                  have_bank ? &bank : nullptr);
  const CosineProfile profile =
      cosine_profile(extract_activations(model, data.images, "student"), cav);

  std::cout << "concept " << cav.name << "\n";
  std::cout << "probe_accuracy " << format_fixed(cav.heldout_accuracy) << "\n";
  std::cout << "tcav_score(" << opts.source << ") " << format_fixed(score) << "\n";
  std::cout << "mean_cosine " << format_fixed(profile.mean_cosine) << " (used "
            << profile.used << ", skipped " << profile.skipped << ")\n";

  if (!opts.json_out.empty()) {
    Json j;
    j["model"] = opts.model_path.string();
    j["data"] = opts.data_path.string();
    j["source"] = opts.source;
    j["seed"] = opts.seed;
    if (opts.cav_path.empty()) {
      j["concept"] = Json{{"kind", opts.concept_kind},
                          {"m", opts.concept_m},
                          {"seed", opts.concept_seed}};
    } else {
      j["cav_file"] = opts.cav_path.string();
    }
    j["cav"] = Json{{"name", cav.name},
                    {"space", cav.space},
                    {"hook", cav.hook},
                    {"accuracy", round6(cav.heldout_accuracy)}};
    j["tcav_score"] = round6(score);
    j["cosine"] = Json{{"mean", round6(profile.mean_cosine)},
                       {"used", profile.used},
                       {"skipped", profile.skipped}};
    write_report(opts.json_out, j);
  }
}

// ---------------------------------------------------------------------------
// Ablation grids

namespace {

struct CellSpec {
  std::string variant;
  uint64_t seed = 1;
  bool use_teacher = true;
  bool use_prototypes = true;
  double teacher_bias = 0.05;
  int concept_m = 0;  // 0: config value
  int clusters = 0;   // 0: config value
};

struct GridContext {
  const ExperimentConfig* cfg = nullptr;
  const std::map<std::string, Dataset>* splits = nullptr;
  std::map<uint64_t, Model> base_cache;
  std::map<std::pair<uint64_t, long long>, Model> teacher_cache;
  std::map<int, std::vector<ConceptSet>> concept_cache;

  const Model& base_for(uint64_t seed) {
    auto it = base_cache.find(seed);
    if (it == base_cache.end()) {
      it = base_cache.emplace(seed, train_base_model(*cfg, *splits, seed)).first;
    }
    return it->second;
  }
  const Model& teacher_for(uint64_t seed, double bias) {
    const auto key = std::make_pair(seed, std::llround(bias * 1e6));
    auto it = teacher_cache.find(key);
    if (it == teacher_cache.end()) {
      it = teacher_cache.emplace(key, train_teacher_model(*cfg, bias, seed)).first;
    }
    return it->second;
  }
  const std::vector<ConceptSet>& concepts_for(int m) {
    auto it = concept_cache.find(m);
    if (it == concept_cache.end()) {
      ConceptConfig cc = cfg->concepts;
      if (m > 0) cc.m = m;
      it = concept_cache.emplace(m, generate_concepts(cc)).first;
    }
    return it->second;
  }
};

std::string sanitize_cell(std::string s) {
  for (char& c : s) {
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  }
  return s;
}

std::vector<std::string> grid_columns(const std::string& kind) {
  std::vector<std::string> cols = {"variant", "seed"};
  for (const auto& name : split_names(kind)) {
    if (name.rfind("test", 0) == 0) cols.push_back("acc_" + name);
  }
  for (const char* src : {"final_loss", "logit", "prototype"}) {
    cols.push_back(std::string("tcav_") + src + "_before");
    cols.push_back(std::string("tcav_") + src + "_after");
  }
  cols.push_back("lc_initial");
  cols.push_back("lc_final");
  cols.push_back("status");
  return cols;
}

std::vector<std::string> cell_row(const std::string& kind, const CellSpec& cell,
                                  const TrainReport* report, const std::string& status) {
  std::vector<std::string> row = {cell.variant, std::to_string(cell.seed)};
  for (const auto& name : split_names(kind)) {
    if (name.rfind("test", 0) != 0) continue;
    if (report && report->test_accuracy.count(name)) {
      row.push_back(format_fixed(report->test_accuracy.at(name)));
    } else {
      row.push_back("");
    }
  }
  using TcavMap = std::map<std::string, double> TrainReport::*;
  for (const char* src : {"final_loss", "logit", "prototype"}) {
    for (TcavMap side : {&TrainReport::tcav_before, &TrainReport::tcav_after}) {
      if (report && (report->*side).count(src)) {
        row.push_back(format_fixed((report->*side).at(src)));
      } else {
        row.push_back("");
      }
    }
  }
  if (report && !report->epochs.empty()) {
    row.push_back(format_fixed(report->epochs.front().loss_concept));
    row.push_back(format_fixed(report->epochs.back().loss_concept));
  } else {
    row.push_back("");
    row.push_back("");
  }
  row.push_back(sanitize_cell(status));
  return row;
}

TrainReport run_cell(GridContext& ctx, const CellSpec& cell) {
  const ExperimentConfig& cfg = *ctx.cfg;
  Model student = clone_model(ctx.base_for(cell.seed));
  const Model* teacher = nullptr;
  if (cell.use_teacher) teacher = &ctx.teacher_for(cell.seed, cell.teacher_bias);

  DistillConfig dc = cfg.distill;
  dc.seed = cell.seed;
  dc.use_teacher = cell.use_teacher;
  dc.use_prototypes = cell.use_prototypes;
  if (cell.clusters > 0) dc.clusters = cell.clusters;

  return distill_train(student, teacher, ctx.concepts_for(cell.concept_m),
                       *ctx.splits, dc);
}

// Mean of `column` over the ok rows of one variant; NaN when the variant
// produced no usable cells.
double variant_mean(const std::vector<CellSpec>& cells,
                    const std::vector<const TrainReport*>& reports,
                    const std::string& variant, const std::string& split) {
  double sum = 0.0;
  int n = 0;
  for (size_t i = 0; i < cells.size(); ++i) {
    if (cells[i].variant != variant || !reports[i]) continue;
    const auto it = reports[i]->test_accuracy.find(split);
    if (it == reports[i]->test_accuracy.end()) continue;
    sum += it->second;
    ++n;
  }
  return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

void cmd_ablate(const ExperimentConfig& cfg, bool quiet) {
  cfg.validate();
  const fs::path root(cfg.output_dir);
  ensure_dir(root / "tables");

  const auto splits = generate_experiment_data(cfg.data);
  GridContext ctx;
  ctx.cfg = &cfg;
  ctx.splits = &splits;
  const std::string head = headline_split(cfg.data.kind);

  Json summary;
  for (const auto& grid : cfg.ablate.grids) {
    std::vector<CellSpec> cells;
    if (grid == "components") {
      for (const auto& [variant, teach, proto] :
           std::initializer_list<std::tuple<const char*, bool, bool>>{
               {"teacher+proto", true, true},
               {"teacher", true, false},
               {"proto", false, true},
               {"none", false, false}}) {
        for (uint64_t seed : cfg.ablate.seeds) {
          CellSpec c;
          c.variant = variant;
          c.seed = seed;
          c.use_teacher = teach;
          c.use_prototypes = proto;
          c.teacher_bias = cfg.data.teacher_bias_fraction;
          cells.push_back(c);
        }
      }
    } else if (grid == "teacher-bias") {
      for (double bias : cfg.ablate.teacher_bias) {
        for (uint64_t seed : cfg.ablate.seeds) {
          CellSpec c;
          c.variant = "bias_" + format_short(bias);
          c.seed = seed;
          c.teacher_bias = bias;
          cells.push_back(c);
        }
      }
    } else if (grid == "concept-size") {
      for (int m : cfg.ablate.concept_m) {
        for (uint64_t seed : cfg.ablate.seeds) {
          CellSpec c;
          c.variant = "m_" + std::to_string(m);
          c.seed = seed;
          c.teacher_bias = cfg.data.teacher_bias_fraction;
          c.concept_m = m;
          cells.push_back(c);
        }
      }
    } else {  // clusters
      for (int k : cfg.ablate.clusters) {
        for (uint64_t seed : cfg.ablate.seeds) {
          CellSpec c;
          c.variant = "k_" + std::to_string(k);
          c.seed = seed;
          c.teacher_bias = cfg.data.teacher_bias_fraction;
          c.clusters = k;
          cells.push_back(c);
        }
      }
    }

    MetricsTable table;
    table.columns = grid_columns(cfg.data.kind);
    std::vector<std::unique_ptr<TrainReport>> kept;
    std::vector<const TrainReport*> reports;
    int failures = 0;
    for (const auto& cell : cells) {
      try {
        kept.push_back(std::make_unique<TrainReport>(run_cell(ctx, cell)));
        reports.push_back(kept.back().get());
        table.rows.push_back(cell_row(cfg.data.kind, cell, reports.back(), "ok"));
      } catch (const std::exception& e) {
        kept.push_back(nullptr);
        reports.push_back(nullptr);
        ++failures;
        table.rows.push_back(
            cell_row(cfg.data.kind, cell, nullptr, std::string("error: ") + e.what()));
      }
      say(quiet, "[" + grid + "] " + cell.variant + " seed " +
                     std::to_string(cell.seed) + " " + table.rows.back().back());
    }
    const fs::path csv = root / "tables" / ("ablate_" + grid + ".csv");
    table.write(csv);

    Json check;
    check["csv"] = csv.string();
    check["cells"] = static_cast<int>(cells.size());
    check["failures"] = failures;
    if (grid == "components") {
      const double both = variant_mean(cells, reports, "teacher+proto", head);
      const double proto = variant_mean(cells, reports, "proto", head);
      const double none = variant_mean(cells, reports, "none", head);
      check["check"] = "mean " + head + ": teacher+proto >= proto >= none";
      check["means"] = Json{{"teacher+proto", round6(both)},
                            {"teacher", round6(variant_mean(cells, reports, "teacher", head))},
                            {"proto", round6(proto)},
                            {"none", round6(none)}};
      check["pass"] = both >= proto && proto >= none;
    } else if (grid == "teacher-bias") {
      const double low = variant_mean(cells, reports, "bias_0.05", head);
      const double high = variant_mean(cells, reports, "bias_0.9", head);
      check["check"] = "mean " + head + " at teacher bias 0.9 <= at 0.05";
      if (std::isnan(low) || std::isnan(high)) {
        check["pass"] = nullptr;  // the sweep did not include both anchors
      } else {
        check["means"] = Json{{"bias_0.05", round6(low)}, {"bias_0.9", round6(high)}};
        check["pass"] = high <= low;
      }
    } else {
      check["check"] = "grid completed";
      check["pass"] = failures == 0;
    }
    summary[grid] = check;
    say(quiet, "[" + grid + "] check: " +
                   (check["pass"].is_null()
                        ? std::string("N/A")
                        : (check["pass"].get<bool>() ? std::string("PASS")
                                                     : std::string("FAIL"))));
  }

  Json out;
  out["config"] = cfg.to_json();
  out["grids"] = summary;
  write_report(root / "tables" / "ablate_summary.json", out);
}

void cmd_report(const fs::path& report_path, const fs::path& csv_out, bool quiet) {
  const std::string text = read_text_file(report_path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError("report " + report_path.string() + ": " + e.what());
  }

  auto print_number = [](const std::string& key, const Json& v) {
    if (v.is_number_integer()) {
      std::cout << key << " " << v.dump() << "\n";
    } else if (v.is_number()) {
      std::cout << key << " " << format_fixed(v.get<double>()) << "\n";
    } else {
      std::cout << key << " " << v.dump() << "\n";
    }
  };
  for (const char* key : {"command", "checkpoint"}) {
    if (j.contains(key)) std::cout << key << " " << j.at(key).get<std::string>() << "\n";
  }
  for (const char* key : {"seed", "best_epoch", "best_val_acc", "train_accuracy",
                          "valid_cavs", "cav_refits", "probe_accuracy_before",
                          "probe_accuracy_after", "tcav_score"}) {
    if (j.contains(key)) print_number(key, j.at(key));
  }
  for (const char* map_key : {"test_accuracy", "tcav_before", "tcav_after"}) {
    if (!j.contains(map_key) || !j.at(map_key).is_object()) continue;
    for (const auto& [k, v] : j.at(map_key).items()) {
      print_number(std::string(map_key) + "." + k, v);
    }
  }
  if (j.contains("epochs") && j.at("epochs").is_array() && !j.at("epochs").empty()) {
    const auto& eps = j.at("epochs");
    std::cout << "epochs " << eps.size() << "\n";
    if (eps.front().contains("loss_concept")) {
      print_number("lc_initial", eps.front().at("loss_concept"));
      print_number("lc_final", eps.back().at("loss_concept"));
    }
  }
  if (j.contains("warnings")) {
    for (const auto& w : j.at("warnings")) {
      std::cout << "warning " << w.get<std::string>() << "\n";
    }
  }

  if (!csv_out.empty()) {
    const std::string kind =
        j.contains("config") && j.at("config").contains("data")
            ? j.at("config").at("data").value("kind", std::string("color"))
            : "color";
    MetricsTable table;
    table.columns = grid_columns(kind);
    std::vector<std::string> row = {j.value("command", std::string("distill")),
                                    std::to_string(j.value("seed", 0))};
    for (const auto& name : split_names(kind)) {
      if (name.rfind("test", 0) != 0) continue;
      if (j.contains("test_accuracy") && j.at("test_accuracy").contains(name)) {
        row.push_back(format_fixed(j.at("test_accuracy").at(name).get<double>()));
      } else {
        row.push_back("");
      }
    }
    for (const char* src : {"final_loss", "logit", "prototype"}) {
      for (const char* side : {"tcav_before", "tcav_after"}) {
        if (j.contains(side) && j.at(side).contains(src)) {
          row.push_back(format_fixed(j.at(side).at(src).get<double>()));
        } else {
          row.push_back("");
        }
      }
    }
    if (j.contains("epochs") && j.at("epochs").is_array() && !j.at("epochs").empty() &&
        j.at("epochs").front().contains("loss_concept")) {
      row.push_back(format_fixed(j.at("epochs").front().at("loss_concept").get<double>()));
      row.push_back(format_fixed(j.at("epochs").back().at("loss_concept").get<double>()));
    } else {
      row.push_back("");
      row.push_back("");
    }
    row.push_back("ok");
    table.rows.push_back(row);
    table.write(csv_out);
    say(quiet, "wrote " + csv_out.string());
  }
}

}  // namespace cdt
