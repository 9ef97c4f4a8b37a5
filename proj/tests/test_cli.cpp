#include "cdt/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <string>

#include "cdt/io.hpp"
#include "doctest.h"

using namespace cdt;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config(const fs::path& out, int train_per_class = 12) {
  ExperimentConfig cfg;
  cfg.data.counts = {train_per_class, 4, 6};
  cfg.data.seed = 7;
  cfg.concepts.m = 20;
  cfg.pretrain.epochs = 1;
  cfg.distill.epochs = 1;
  cfg.distill.clusters = 2;
  cfg.output_dir = out.string();
  return cfg;
}

std::string file_bytes(const fs::path& p) { return read_text_file(p); }

bool params_equal(const ParameterSet& a, const ParameterSet& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, p] : a) {
    auto it = b.find(name);
    if (it == b.end()) return false;
    if ((p.values() != it->second.values()).any()) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("experiment config defaults resolve and round trip") {
  ExperimentConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.concepts.kinds == std::vector<std::string>{"color"});

  const Json j = cfg.to_json();
  const ExperimentConfig back = ExperimentConfig::from_json(j);
  CHECK(back.to_json().dump() == j.dump());

  // Sections are optional; the bias concept follows the dataset kind.
  const auto decoy = ExperimentConfig::from_json(Json{{"data", {{"kind", "decoy"}}}});
  CHECK(decoy.concepts.kinds == std::vector<std::string>{"gray"});
  const auto texture =
      ExperimentConfig::from_json(Json{{"data", {{"kind", "texture"}}}});
  CHECK(texture.concepts.kinds == std::vector<std::string>{"texture"});
  // An explicit kinds list wins over the derivation.
  const auto j2 = Json{{"data", {{"kind", "decoy"}}},
                       {"concepts", {{"kinds", {"color", "gray"}}}}};
  CHECK(ExperimentConfig::from_json(j2).concepts.kinds ==
        std::vector<std::string>{"color", "gray"});
}

TEST_CASE("experiment config rejects unknown keys and bad values") {
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_json(Json{{"daat", Json::object()}}),
                       doctest::Contains("unknown key"), ConfigError);
  CHECK_THROWS_WITH_AS(
      ExperimentConfig::from_json(Json{{"data", {{"bias", 0.5}}}}),
      doctest::Contains("unknown key"), ConfigError);
  CHECK_THROWS_WITH_AS(
      ExperimentConfig::from_json(Json{{"data", {{"bias_fraction", 1.2}}}}),
      doctest::Contains("bias_fraction"), ConfigError);
  CHECK_THROWS_WITH_AS(
      ExperimentConfig::from_json(Json{{"data", {{"kind", "colour"}}}}),
      doctest::Contains("data.kind"), ConfigError);
  CHECK_THROWS_AS(
      ExperimentConfig::from_json(Json{{"concepts", {{"kinds", {"shape"}}}}}),
      ConfigError);
  CHECK_THROWS_AS(
      ExperimentConfig::from_json(Json{{"ablate", {{"grids", {"everything"}}}}}),
      ConfigError);
  CHECK_THROWS_AS(
      ExperimentConfig::from_json(Json{{"pretrain", {{"epochs", 0}}}}),
      ConfigError);
  CHECK_THROWS_AS(
      ExperimentConfig::from_json(Json{{"outputs", {{"dir", "x"}}}}),
      ConfigError);
  // Type errors surface as configuration errors, not as parser internals.
  CHECK_THROWS_AS(
      ExperimentConfig::from_json(Json{{"data", {{"seed", "seven"}}}}),
      ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::load_file("/nonexistent/config.json"), IoError);
}

TEST_CASE("gen-data writes every split and reruns byte-identically") {
  const fs::path dir = fs::temp_directory_path() / "cdt_cli_gendata";
  fs::remove_all(dir);
  ExperimentConfig cfg = tiny_config(dir);
  cmd_gen_data(cfg, true);

  for (const auto& name : split_names("color")) {
    CAPTURE(name);
    CHECK(fs::exists(dir / "data" / (name + ".cdds")));
    CHECK(fs::exists(dir / "teacher_data" / (name + ".cdds")));
  }
  const Dataset train = load_dataset(dir / "data" / "train.cdds");
  CHECK(train.size() == 12 * kNumClasses);
  CHECK(train.split == "train");

  const std::string first = file_bytes(dir / "data" / "train.cdds");
  const std::string teacher_first = file_bytes(dir / "teacher_data" / "train.cdds");
  cmd_gen_data(cfg, true);
  CHECK(file_bytes(dir / "data" / "train.cdds") == first);
  CHECK(file_bytes(dir / "teacher_data" / "train.cdds") == teacher_first);
  // The teacher draw is its own stream, not a copy of the student data.
  CHECK(teacher_first != first);
}

TEST_CASE("train-base and distill round trip through checkpoints and reports") {
  const fs::path dir = fs::temp_directory_path() / "cdt_cli_pipeline";
  fs::remove_all(dir);
  ExperimentConfig cfg = tiny_config(dir);
  cmd_gen_data(cfg, true);
  cmd_train_base(cfg, true);
  cmd_train_teacher(cfg, true);

  REQUIRE(fs::exists(dir / "models" / "base.cdst"));
  REQUIRE(fs::exists(dir / "reports" / "train_base.json"));
  const Json base_rep = Json::parse(file_bytes(dir / "reports" / "train_base.json"));
  CHECK(base_rep.at("command") == "train-base");
  CHECK(base_rep.at("config").at("data").at("kind") == "color");
  CHECK(base_rep.at("seed") == cfg.pretrain.seed);
  CHECK(base_rep.at("epochs").size() == 1);
  CHECK(base_rep.at("test_accuracy").size() == 4);

  // The checkpoint reproduces the reported accuracy exactly.
  const Model restored = load_checkpoint(dir / "models" / "base.cdst");
  const Dataset val = load_dataset(dir / "data" / "val.cdds");
  const double val_acc = accuracy(restored, val);
  CHECK(base_rep.at("best_val_acc").get<double>() ==
        doctest::Approx(val_acc).epsilon(1e-9));

  cmd_distill(cfg, true);
  REQUIRE(fs::exists(dir / "models" / "distilled.cdst"));
  REQUIRE(fs::exists(dir / "models" / "prototypes.cdpb"));
  const Json rep = Json::parse(file_bytes(dir / "reports" / "distill.json"));
  CHECK(rep.at("config").at("outputs").at("directory") == dir.string());
  CHECK(rep.at("seed") == cfg.distill.seed);
  CHECK(rep.at("valid_cavs").is_number_integer());
  CHECK(rep.at("epochs").size() == 1);
  CHECK(std::string(rep.at("checkpoint")) == "models/distilled.cdst");

  // Rerunning the whole distillation yields a byte-identical report.
  const std::string report_bytes = file_bytes(dir / "reports" / "distill.json");
  cmd_distill(cfg, true);
  CHECK(file_bytes(dir / "reports" / "distill.json") == report_bytes);
}

TEST_CASE("lambda zero distillation equals plain continuation of the base model") {
  const fs::path dir = fs::temp_directory_path() / "cdt_cli_reduction";
  fs::remove_all(dir);
  ExperimentConfig cfg = tiny_config(dir);
  cfg.distill.lambda = 0.0;
  cmd_gen_data(cfg, true);
  cmd_train_base(cfg, true);
  cmd_train_teacher(cfg, true);
  cmd_distill(cfg, true);

  Model continued = load_checkpoint(dir / "models" / "base.cdst");
  const Dataset train = load_dataset(dir / "data" / "train.cdds");
  const Dataset val = load_dataset(dir / "data" / "val.cdds");
  TrainOptions opts{cfg.distill.epochs, cfg.distill.batch, cfg.distill.seed,
                    cfg.distill.lr};
  train_classifier(continued, train, val, opts);

  const Model distilled = load_checkpoint(dir / "models" / "distilled.cdst");
  CHECK(params_equal(continued.params, distilled.params));
  // No prototype bank is written when the concept loss is inactive.
  CHECK_FALSE(fs::exists(dir / "models" / "prototypes.cdpb"));
}

TEST_CASE("tcav command scores checkpoints and validates its inputs") {
  const fs::path dir = fs::temp_directory_path() / "cdt_cli_tcav";
  fs::remove_all(dir);
  ExperimentConfig cfg = tiny_config(dir);
  cmd_gen_data(cfg, true);
  cmd_train_base(cfg, true);

  TcavOptions opts;
  opts.model_path = dir / "models" / "base.cdst";
  opts.data_path = dir / "data" / "val.cdds";
  opts.concept_m = 20;
  opts.json_out = dir / "tcav.json";
  CHECK_NOTHROW(cmd_tcav(opts, true));
  const Json j = Json::parse(file_bytes(dir / "tcav.json"));
  const double score = j.at("tcav_score").get<double>();
  CHECK(score >= 0.0);
  CHECK(score <= 1.0);
  CHECK(j.at("source") == "logit");
  CHECK(j.at("cav").at("space") == "student");
  CHECK(j.at("cosine").at("used").get<int>() == 4 * kNumClasses);

  // prototype source needs a bank file.
  TcavOptions proto = opts;
  proto.source = "prototype";
  CHECK_THROWS_AS(cmd_tcav(proto, true), ConfigError);

  TcavOptions bad_source = opts;
  bad_source.source = "saliency";
  CHECK_THROWS_AS(cmd_tcav(bad_source, true), ConfigError);

  // A stored CAV whose dimension does not match the hook is rejected by name.
  Cav wrong;
  wrong.vector = Eigen::VectorXd::Ones(5).normalized();
  wrong.space = "student";
  wrong.hook = "relu2";
  wrong.name = "tiny";
  wrong.heldout_accuracy = 0.9;
  save_cav(wrong, dir / "wrong.cav.json");
  TcavOptions mismatched = opts;
  mismatched.cav_path = dir / "wrong.cav.json";
  CHECK_THROWS_WITH_AS(cmd_tcav(mismatched, true), doctest::Contains("hook"),
                       ShapeError);

  CHECK_THROWS_AS(
      [&] {
        TcavOptions missing = opts;
        missing.model_path = dir / "missing.cdst";
        cmd_tcav(missing, true);
      }(),
      IoError);
}

TEST_CASE("ablate records per-cell failures and reruns byte-identically") {
  const fs::path dir = fs::temp_directory_path() / "cdt_cli_ablate";
  fs::remove_all(dir);
  ExperimentConfig cfg = tiny_config(dir, 8);
  cfg.ablate.grids = {"clusters"};
  cfg.ablate.seeds = {1};
  // k=9 exceeds the 8 samples per class, so that cell must fail while the
  // grid keeps going.
  cfg.ablate.clusters = {2, 9};
  cmd_ablate(cfg, true);

  const fs::path csv = dir / "tables" / "ablate_clusters.csv";
  REQUIRE(fs::exists(csv));
  const std::string bytes = file_bytes(csv);
  std::vector<std::string> lines;
  size_t start = 0;
  while (start < bytes.size()) {
    const size_t end = bytes.find('\n', start);
    lines.push_back(bytes.substr(start, end - start));
    start = end + 1;
  }
  REQUIRE(lines.size() == 3);
  CHECK(lines[0].rfind("variant,seed,acc_test_inverted", 0) == 0);
  CHECK(lines[1].rfind("k_2,1,", 0) == 0);
  CHECK(lines[1].find("ok") != std::string::npos);
  CHECK(lines[2].rfind("k_9,1,", 0) == 0);
  CHECK(lines[2].find("error") != std::string::npos);
  CHECK(lines[2].find(",,") != std::string::npos);  // empty metric cells

  const Json summary =
      Json::parse(file_bytes(dir / "tables" / "ablate_summary.json"));
  CHECK(summary.at("grids").at("clusters").at("failures") == 1);
  CHECK(summary.at("grids").at("clusters").at("pass") == false);

  cmd_ablate(cfg, true);
  CHECK(file_bytes(csv) == bytes);
}

TEST_CASE("report command prints a saved report and emits a CSV row") {
  const fs::path dir = fs::temp_directory_path() / "cdt_cli_report";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Json j;
  j["command"] = "distill";
  j["seed"] = 3;
  j["best_val_acc"] = 0.5;
  j["test_accuracy"] = Json{{"test_inverted", 0.25}};
  j["epochs"] = Json::array({Json{{"loss_concept", 0.5}}, Json{{"loss_concept", 0.25}}});
  write_text_file(dir / "rep.json", j.dump());

  CHECK_NOTHROW(cmd_report(dir / "rep.json", dir / "row.csv", true));
  const std::string csv = file_bytes(dir / "row.csv");
  CHECK(csv.find("distill,3,0.250000") != std::string::npos);
  CHECK(csv.find("0.500000,0.250000,ok") != std::string::npos);

  CHECK_THROWS_AS(cmd_report(dir / "missing.json", "", true), IoError);
  write_text_file(dir / "broken.json", "{not json");
  CHECK_THROWS_AS(cmd_report(dir / "broken.json", "", true), ConfigError);
}

#ifdef CDT_CLI_PATH
namespace {
int run_cli(const std::string& args) {
  const std::string cmd = std::string(CDT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}
}  // namespace

TEST_CASE("binary maps error classes to exit codes") {
  const fs::path dir = fs::temp_directory_path() / "cdt_cli_exitcodes";
  fs::remove_all(dir);
  fs::create_directories(dir);

  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") == 2);            // a subcommand is required
  CHECK(run_cli("frobnicate") == 2);  // unknown subcommand

  write_text_file(dir / "bad.json", R"({"data": {"bias_fraction": 1.2}})");
  CHECK(run_cli("gen-data --config " + (dir / "bad.json").string()) == 2);

  write_text_file(dir / "ok.json",
                  R"({"data": {"sizes": {"train": 10, "val": 2, "test": 2}},)"
                  R"( "outputs": {"directory": ")" + (dir / "run").string() + R"("}})");
  // No data files yet: the I/O failure exit code.
  CHECK(run_cli("train-base --config " + (dir / "ok.json").string()) == 3);
  CHECK(run_cli("tcav --model " + (dir / "no.cdst").string() + " --data " +
                (dir / "no.cdds").string()) == 3);
}
#endif
