#include "cdt/cav.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <vector>

#include "doctest.h"
#include "support.hpp"

using namespace cdt;
using cdt::test::activation_dataset;
using cdt::test::constant_classes;
using cdt::test::probe_model;
using cdt::test::random_images;

namespace {

ActivationMatrix matrix_of(RowMat rows, const std::string& space = "student",
                           const std::string& hook = "relu1") {
  return ActivationMatrix{std::move(rows), space, hook};
}

// Two 2-D Gaussian clouds centered at (+3, 0) and (-3, 0), covariance 0.1*I.
std::pair<RowMat, RowMat> gaussian_fixture(int per_side, uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> eps(0.0, std::sqrt(0.1));
  RowMat pos(per_side, 2), neg(per_side, 2);
  for (int i = 0; i < per_side; ++i) {
    pos(i, 0) = 3.0 + eps(rng);
    pos(i, 1) = eps(rng);
    neg(i, 0) = -3.0 + eps(rng);
    neg(i, 1) = eps(rng);
  }
  return {pos, neg};
}

Cav unit_cav(std::initializer_list<double> entries, const std::string& name = "probe") {
  Cav cav;
  cav.vector = Eigen::Map<const Eigen::VectorXd>(entries.begin(),
                                                 static_cast<int>(entries.size()));
  cav.vector.normalize();
  cav.space = "student";
  cav.hook = "relu1";
  cav.name = name;
  cav.heldout_accuracy = 1.0;
  return cav;
}

}  // namespace

TEST_CASE("extract_activations flattens hook outputs per sample") {
  Model student = Model::build(ModelSpec::default_student(), 1);
  ActivationMatrix acts = extract_activations(student, random_images(8, 2), "student");
  CHECK(acts.rows.rows() == 8);
  CHECK(acts.rows.cols() == 1024);
  CHECK(acts.space == "student");
  CHECK(acts.hook == "relu2");

  // Zero inputs with zero-initialized biases stay zero everywhere.
  ActivationMatrix zero = extract_activations(student, Tensor::zeros({4, 3, 16, 16}), "student");
  CHECK(zero.rows.cwiseAbs().maxCoeff() == 0.0);

  // Identical inputs give identical rows even across batch boundaries.
  Tensor one = random_images(1, 3);
  Eigen::ArrayXd flat(3 * 3 * 16 * 16);
  for (int i = 0; i < 3; ++i) flat.segment(i * 768, 768) = one.values();
  ActivationMatrix same =
      extract_activations(student, Tensor::make({3, 3, 16, 16}, flat), "student", 2);
  CHECK((same.rows.row(0) - same.rows.row(1)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((same.rows.row(0) - same.rows.row(2)).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(extract_activations(student, one, "features"), ConfigError);
}

TEST_CASE("pca recovers rank-one structure and preserves geometry at full rank") {
  Rng rng(4);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  const Eigen::RowVector3d axis(1.0, 2.0, 3.0);
  RowMat line(30, 3);
  for (int i = 0; i < 30; ++i) line.row(i) = u(rng) * axis + Eigen::RowVector3d(5, -1, 2);

  PcaModel rank1 = fit_pca(line, 1);
  RowMat reduced = apply_pca(rank1, line);
  RowMat rebuilt = (reduced * rank1.components).rowwise() + rank1.mean;
  CHECK((rebuilt - line).cwiseAbs().maxCoeff() <= 1e-8);
  // Sign convention: the largest-magnitude entry of the component (the axis
  // z-coordinate) is positive.
  CHECK(rank1.components(0, 2) > 0.0);

  RowMat cloud(40, 5);
  std::normal_distribution<double> eps(0.0, 1.0);
  for (int i = 0; i < 40; ++i) {
    for (int j = 0; j < 5; ++j) cloud(i, j) = eps(rng);
  }
  PcaModel full = fit_pca(cloud, 5);
  CHECK((full.components * full.components.transpose() - Eigen::MatrixXd::Identity(5, 5))
            .cwiseAbs()
            .maxCoeff() <= 1e-8);
  RowMat projected = apply_pca(full, cloud);
  for (int i = 0; i < 10; ++i) {
    for (int j = i + 1; j < 10; ++j) {
      const double before = (cloud.row(i) - cloud.row(j)).norm();
      const double after = (projected.row(i) - projected.row(j)).norm();
      CHECK(after == doctest::Approx(before).epsilon(1e-8));
    }
  }

  CHECK_THROWS_AS(fit_pca(cloud, 6), ConfigError);
  CHECK_THROWS_AS(fit_pca(cloud, 0), ConfigError);
  RowMat two = cloud.topRows(2);
  CHECK_THROWS_AS(fit_pca(two, 2), ConfigError);  // out_dim > rows-1
  CHECK_THROWS_AS(apply_pca(full, RowMat(3, 4)), ShapeError);
}

TEST_CASE("learn_cav finds the separating axis of the gaussian fixture") {
  // Enough samples per side that the empirical max-margin direction (which an
  // unregularized probe on separable data tracks) is itself near the axis.
  auto [pos, neg] = gaussian_fixture(500, 8);

  // Brute-force oracle: the direction grid contains perfect separators, and
  // the class-mean axis (1,0) is one of them.
  bool axis_separates = false;
  int separating = 0;
  for (int t = 0; t < 3600; ++t) {
    const double th = t * 2.0 * M_PI / 3600.0;
    const Eigen::Vector2d u(std::cos(th), std::sin(th));
    const double min_pos = (pos * u).minCoeff();
    const double max_neg = (neg * u).maxCoeff();
    if (min_pos > max_neg) {
      ++separating;
      if (t == 0) axis_separates = true;
    }
  }
  CHECK(separating > 0);
  CHECK(axis_separates);

  Cav cav = learn_cav(matrix_of(pos), matrix_of(neg), "axis", 5);
  CHECK(cav.vector.norm() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(cav.heldout_accuracy == 1.0);
  CHECK(cav.vector(0) >= 0.99);  // cos with (1,0), orientation included
  CHECK(cav.name == "axis");
  CHECK(cav.space == "student");

  Cav again = learn_cav(matrix_of(pos), matrix_of(neg), "axis", 5);
  CHECK((cav.vector - again.vector).cwiseAbs().maxCoeff() == 0.0);
  CHECK(cav.heldout_accuracy == again.heldout_accuracy);
}

TEST_CASE("learn_cav lands at chance on shuffled labels") {
  auto [pos, neg] = gaussian_fixture(50, 21);
  RowMat pooled(100, 2);
  pooled.topRows(50) = pos;
  pooled.bottomRows(50) = neg;
  std::vector<int> order(100);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(33);
  std::shuffle(order.begin(), order.end(), rng);
  RowMat fake_pos(50, 2), fake_neg(50, 2);
  for (int i = 0; i < 50; ++i) {
    fake_pos.row(i) = pooled.row(order[i]);
    fake_neg.row(i) = pooled.row(order[50 + i]);
  }
  Cav cav = learn_cav(matrix_of(fake_pos), matrix_of(fake_neg), "noise", 7);
  CHECK(cav.heldout_accuracy >= 0.35);
  CHECK(cav.heldout_accuracy <= 0.65);
}

TEST_CASE("learn_cav validates its inputs") {
  auto [pos, neg] = gaussian_fixture(12, 2);
  CHECK_THROWS_AS(learn_cav(matrix_of(pos.topRows(9)), matrix_of(neg), "c", 1), ConfigError);
  CHECK_THROWS_AS(learn_cav(matrix_of(pos), matrix_of(neg.topRows(9)), "c", 1), ConfigError);
  CHECK_THROWS_AS(learn_cav(matrix_of(pos), matrix_of(RowMat(12, 3)), "c", 1), ShapeError);
  CHECK_THROWS_AS(
      learn_cav(matrix_of(pos, "student"), matrix_of(neg, "teacher"), "c", 1), ConfigError);

  RowMat flat_pos = RowMat::Constant(12, 2, 0.5);
  RowMat flat_neg = RowMat::Constant(12, 2, 0.5);
  CHECK_THROWS_AS(learn_cav(matrix_of(flat_pos), matrix_of(flat_neg), "c", 1), NumericError);
}

TEST_CASE("filter_cavs keeps strictly-above-threshold probes") {
  Cav a = unit_cav({1, 0}, "a");
  a.heldout_accuracy = 0.65;
  Cav b = unit_cav({0, 1}, "b");
  b.heldout_accuracy = 0.71;
  Cav c = unit_cav({1, 1}, "c");
  c.heldout_accuracy = 0.7;

  const std::vector<Cav> kept = filter_cavs({a, b, c});
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].name == "b");
  CHECK(filter_cavs({}).empty());
  CHECK(filter_cavs(kept).size() == kept.size());  // idempotent
}

TEST_CASE("tcav_fraction counts strict sign flips only") {
  Eigen::VectorXd s(3);
  s << -1.0, -0.5, 0.2;
  CHECK(tcav_fraction(s) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(tcav_fraction(3.0 * s) == tcav_fraction(s));  // positive-scale invariant

  Eigen::VectorXd zeros = Eigen::VectorXd::Zero(5);
  CHECK(tcav_fraction(zeros) == 0.0);
  CHECK_THROWS_AS(tcav_fraction(Eigen::VectorXd()), ConfigError);
}

TEST_CASE("prototype-source tcav matches hand-computed sensitivities") {
  Model m = probe_model();
  // Class activations sit at x = c; prototypes sit at x = c + shift so the
  // per-sample gradient along (1,0) is exactly -2*shift.
  auto acts = constant_classes([](int c) { return Eigen::RowVector2d(c, 0.5); }, 2);
  Dataset data = activation_dataset(acts);
  std::vector<RowMat> centers(kNumClasses);
  for (int c = 0; c < kNumClasses; ++c) {
    centers[c] = RowMat(2, 2);
    // Mean of the two centers is (c + 1, 0.5): gradient 2*(f - mean) = (-2, 0).
    centers[c] << c + 1.0, 0.0, c + 1.0, 1.0;
  }
  PrototypeBank bank(centers, 0.3);

  Cav along = unit_cav({1, 0});
  Eigen::VectorXd sens = tcav_sensitivities(m, data.images, data.labels, along,
                                            GradientSource::Prototype, &bank);
  for (int i = 0; i < sens.size(); ++i) CHECK(sens(i) == doctest::Approx(-2.0).epsilon(1e-12));
  // Every gradient points along -cav: the score is exactly 1.
  CHECK(tcav_score(m, data.images, data.labels, along, GradientSource::Prototype, &bank) ==
        1.0);

  // Orthogonal direction sees zero sensitivity, and zeros count non-negative.
  Cav ortho = unit_cav({0, 1});
  Eigen::VectorXd flat = tcav_sensitivities(m, data.images, data.labels, ortho,
                                            GradientSource::Prototype, &bank);
  CHECK(flat.cwiseAbs().maxCoeff() == 0.0);
  CHECK(tcav_score(m, data.images, data.labels, ortho, GradientSource::Prototype, &bank) ==
        0.0);

  CHECK_THROWS_AS(
      tcav_score(m, data.images, data.labels, along, GradientSource::Prototype, nullptr),
      ContractError);
  std::vector<int> bad_labels = data.labels;
  bad_labels[0] = 12;
  CHECK_THROWS_AS(tcav_score(m, data.images, bad_labels, along, GradientSource::Prototype,
                             &bank),
                  ConfigError);
}

TEST_CASE("loss and logit tcav sources differentiate through the model") {
  Model student = Model::build(ModelSpec::default_student(), 9);
  Tensor images = random_images(12, 14);
  std::vector<int> labels;
  for (int i = 0; i < 12; ++i) labels.push_back(i % kNumClasses);

  Rng rng(3);
  std::normal_distribution<double> eps(0.0, 1.0);
  Eigen::VectorXd dir(1024);
  for (int i = 0; i < 1024; ++i) dir(i) = eps(rng);
  Cav cav;
  cav.vector = dir.normalized();
  cav.space = "student";
  cav.hook = "relu2";
  cav.name = "random";
  cav.heldout_accuracy = 1.0;

  const Eigen::VectorXd loss_sens =
      tcav_sensitivities(student, images, labels, cav, GradientSource::FinalLoss);
  const Eigen::VectorXd logit_sens =
      tcav_sensitivities(student, images, labels, cav, GradientSource::Logit);
  CHECK(loss_sens.size() == 12);
  CHECK(logit_sens.size() == 12);
  CHECK(loss_sens.cwiseAbs().minCoeff() > 0.0);  // no accidental zeros below
  CHECK(logit_sens.cwiseAbs().minCoeff() > 0.0);

  // Chunked evaluation reproduces the per-sample gradients.
  const Eigen::VectorXd chunked =
      tcav_sensitivities(student, images, labels, cav, GradientSource::FinalLoss, nullptr, 5);
  for (int i = 0; i < 12; ++i) {
    CHECK(chunked(i) == doctest::Approx(loss_sens(i)).epsilon(1e-9));
  }

  // Negating the direction flips every sign: scores sum to one when no
  // sensitivity is exactly zero.
  Cav flipped = cav;
  flipped.vector = -cav.vector;
  const double s = tcav_score(student, images, labels, cav, GradientSource::Logit);
  const double sf = tcav_score(student, images, labels, flipped, GradientSource::Logit);
  CHECK(s + sf == doctest::Approx(1.0).epsilon(1e-12));

  // Sweeps above must not leave gradients on the frozen model's parameters.
  for (const auto& [name, param] : student.params) CHECK_FALSE(param.has_grad());

  Cav wrong = unit_cav({1, 0});
  CHECK_THROWS_AS(tcav_score(student, images, labels, wrong, GradientSource::Logit),
                  ShapeError);
  std::vector<int> short_labels(11, 0);
  CHECK_THROWS_AS(tcav_score(student, images, short_labels, cav, GradientSource::Logit),
                  ShapeError);
}

TEST_CASE("cosine_profile averages row alignment and skips degenerate rows") {
  Cav cav = unit_cav({0.6, 0.8});
  RowMat aligned(3, 2);
  for (int i = 0; i < 3; ++i) aligned.row(i) = (i + 1.0) * cav.vector.transpose();
  CosineProfile all_one = cosine_profile(matrix_of(aligned), cav);
  CHECK(all_one.mean_cosine == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(all_one.used == 3);
  CHECK(all_one.skipped == 0);

  RowMat ortho(2, 2);
  ortho << -0.8, 0.6, 1.6, -1.2;
  CHECK(cosine_profile(matrix_of(ortho), cav).mean_cosine ==
        doctest::Approx(0.0).epsilon(1e-12));

  RowMat mixed(3, 2);
  mixed.row(0) = cav.vector.transpose();
  mixed.row(1).setZero();
  mixed.row(2) = -cav.vector.transpose();
  CosineProfile skipping = cosine_profile(matrix_of(mixed), cav);
  CHECK(skipping.used == 2);
  CHECK(skipping.skipped == 1);
  CHECK(skipping.mean_cosine == doctest::Approx(0.0).epsilon(1e-12));

  CHECK_THROWS_AS(cosine_profile(matrix_of(RowMat::Zero(3, 2)), cav), NumericError);
  CHECK_THROWS_AS(cosine_profile(matrix_of(RowMat::Zero(3, 4)), cav), ShapeError);
}

TEST_CASE("teacher space ranks red patches above red digit foregrounds") {
  // Directional check at a pinned seed: a "red patch" CAV learned in a
  // trained teacher's hook space aligns more with solid red rectangles than
  // with red-foreground digits, whose activations also carry glyph shape.
  SampleCounts counts;
  counts.train = 240;
  counts.val = 40;
  counts.test = 10;
  auto splits = gen_color_biased(11, counts, 0.05);
  Model teacher = Model::build(ModelSpec::default_teacher(), 11);
  TrainOptions opts;
  opts.epochs = 2;
  opts.seed = 11;
  train_classifier(teacher, splits.at("train"), splits.at("val"), opts);

  const int m = 40;
  Tensor red_patches = Tensor::zeros({m, 3, kCanvas, kCanvas});
  const auto red = class_palette()[0];
  for (int i = 0; i < m; ++i) {
    const int y0 = (i * 3) % 9, x0 = (i * 5) % 9;
    const int y1 = std::min(kCanvas, y0 + 5 + i % 7);
    const int x1 = std::min(kCanvas, x0 + 5 + (i * 2) % 7);
    for (int c = 0; c < 3; ++c)
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
          red_patches.values_mut()(
              ((static_cast<int64_t>(i) * 3 + c) * kCanvas + y) * kCanvas + x) = red[c];
  }
  ConceptSet blobs = gen_concept_set("blobs-negative", m, 17);

  const std::string hook = teacher.spec.hook;
  ActivationMatrix pos{hook_activations(teacher, red_patches), "teacher", hook};
  ActivationMatrix neg{hook_activations(teacher, blobs.positives), "teacher", hook};
  Cav cav_red = learn_cav(pos, neg, "red", 13);
  CHECK(cav_red.heldout_accuracy > 0.7);

  auto fully_biased = gen_color_biased(19, counts, 1.0);
  const Dataset& biased_train = fully_biased.at("train");
  std::vector<int> zeros;
  for (int i = 0; i < biased_train.size(); ++i)
    if (biased_train.labels[i] == 0) zeros.push_back(i);
  REQUIRE(zeros.size() >= 10);
  ActivationMatrix glyphs{hook_activations(teacher, take_rows(biased_train.images, zeros)),
                          "teacher", hook};

  const double patch_cos = cosine_profile(pos, cav_red).mean_cosine;
  const double glyph_cos = cosine_profile(glyphs, cav_red).mean_cosine;
  CHECK(patch_cos > glyph_cos);
}

TEST_CASE("cav files round trip exactly") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "cdt_cav_io";
  fs::create_directories(dir);

  auto [pos, neg] = gaussian_fixture(25, 12);
  Cav cav = learn_cav(matrix_of(pos, "teacher", "relu3"), matrix_of(neg, "teacher", "relu3"),
                      "axis", 3);
  const fs::path path = dir / "axis.cav.json";
  save_cav(cav, path);
  Cav loaded = load_cav(path);
  CHECK(loaded.name == cav.name);
  CHECK(loaded.space == cav.space);
  CHECK(loaded.hook == cav.hook);
  CHECK(loaded.heldout_accuracy == cav.heldout_accuracy);
  CHECK((loaded.vector - cav.vector).cwiseAbs().maxCoeff() == 0.0);

  write_text_file(dir / "broken.json", "{not json");
  CHECK_THROWS_AS(load_cav(dir / "broken.json"), IoError);
  CHECK_THROWS_AS(load_cav(dir / "missing.json"), IoError);

  Json j = Json::parse(read_text_file(path));
  j["vector"][0] = j["vector"][0].get<double>() + 0.5;
  write_text_file(dir / "skewed.json", j.dump());
  CHECK_THROWS_AS(load_cav(dir / "skewed.json"), IoError);

  j = Json::parse(read_text_file(path));
  j["accuracy"] = 1.5;
  write_text_file(dir / "acc.json", j.dump());
  CHECK_THROWS_AS(load_cav(dir / "acc.json"), IoError);
}
