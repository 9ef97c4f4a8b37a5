#include "cdt/nn.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"

using namespace cdt;

namespace {

// Two trivially separable classes: solid red vs solid green canvases.
Dataset solid_color_toy(int per_class, uint64_t seed) {
  const int n = 2 * per_class;
  Eigen::ArrayXd v = Eigen::ArrayXd::Zero(static_cast<int64_t>(n) * 3 * 256);
  std::vector<int> labels(n);
  Rng rng(seed);
  std::uniform_real_distribution<double> level(0.6, 1.0);
  for (int i = 0; i < n; ++i) {
    const int cls = i % 2;
    labels[i] = cls;
    v.segment(static_cast<int64_t>(i) * 768 + cls * 256, 256) = level(rng);
  }
  Dataset d;
  d.images = Tensor::make({n, 3, 16, 16}, std::move(v));
  d.labels = std::move(labels);
  d.split = "toy";
  return d;
}

}  // namespace

TEST_CASE("default specs produce the documented shapes") {
  Model student = Model::build(ModelSpec::default_student(), 1);
  Tensor batch = Tensor::zeros({4, 3, 16, 16});
  auto fw = student.forward(batch);
  CHECK(fw.logits.shape() == Shape{4, 10});
  CHECK(fw.hook.shape() == Shape{4, 16, 8, 8});
  CHECK(ModelSpec::default_student().hook_shape(4) == Shape{4, 16, 8, 8});

  Model teacher = Model::build(ModelSpec::default_teacher(), 1);
  auto tw = teacher.forward(batch);
  CHECK(tw.logits.shape() == Shape{4, 10});
  CHECK(tw.hook.shape() == Shape{4, 32, 4, 4});
}

TEST_CASE("zero input with zero biases gives a zero hook") {
  Model student = Model::build(ModelSpec::default_student(), 2);
  auto fw = student.forward(Tensor::zeros({2, 3, 16, 16}));
  CHECK((fw.hook.values() == 0.0).all());
  CHECK((fw.logits.values() == 0.0).all());
}

TEST_CASE("initialization is seed-deterministic") {
  Model a = Model::build(ModelSpec::default_student(), 42);
  Model b = Model::build(ModelSpec::default_student(), 42);
  Model c = Model::build(ModelSpec::default_student(), 43);
  for (const auto& [name, p] : a.params) {
    CHECK((p.values() == b.params.at(name).values()).all());
  }
  CHECK_FALSE((a.params.at("conv1.kernel").values() ==
               c.params.at("conv1.kernel").values())
                  .all());
}

TEST_CASE("hook activation participates in backward") {
  Model student = Model::build(ModelSpec::default_student(), 3);
  Rng rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::ArrayXd img(2 * 3 * 256);
  for (int64_t i = 0; i < img.size(); ++i) img(i) = u(rng);
  Tape tape;
  TapeScope scope(tape);
  auto fw = student.forward(Tensor::make({2, 3, 16, 16}, std::move(img)));
  backward(sum(fw.hook));
  CHECK(student.params.at("conv1.kernel").grad().values().abs().sum() > 0.0);
  // Layers after the hook see no gradient from a hook-only loss.
  CHECK_FALSE(student.params.at("dense1.weight").has_grad());
}

TEST_CASE("model spec json round trip and validation") {
  const ModelSpec spec = ModelSpec::default_teacher();
  ModelSpec back = ModelSpec::from_json(spec.to_json());
  CHECK(back.hook == spec.hook);
  CHECK(back.layers.size() == spec.layers.size());
  CHECK(canonical_json(back.to_json()) == canonical_json(spec.to_json()));

  Json bad = spec.to_json();
  bad["layers"][0]["kind"] = "warp";
  CHECK_THROWS_AS(ModelSpec::from_json(bad), ConfigError);
  Json unknown = spec.to_json();
  unknown["extra"] = 1;
  CHECK_THROWS_AS(ModelSpec::from_json(unknown), ConfigError);
  Json bad_hook = spec.to_json();
  bad_hook["hook"] = "relu9";
  CHECK_THROWS_AS(ModelSpec::from_json(bad_hook), ConfigError);
}

TEST_CASE("strided conv layers halve spatial extents") {
  const ModelSpec spec = ModelSpec::from_json(
      Json{{"input", Json::array({3, 16, 16})},
           {"hook", "conv2"},
           {"layers",
            Json::array({Json{{"kind", "conv"}, {"in", 3}, {"out", 4}, {"k", 3},
                              {"stride", 2}},
                         Json{{"kind", "conv"}, {"in", 4}, {"out", 2}, {"k", 3},
                              {"stride", 2}}})}});
  CHECK(spec.hook_shape(5) == Shape{5, 2, 4, 4});

  Model model = Model::build(spec, 3);
  const Tensor out = model.forward(Tensor::zeros({2, 3, 16, 16})).logits;
  CHECK(out.shape() == Shape{2, 2, 4, 4});

  Json bad = spec.to_json();
  bad["layers"][0]["stride"] = 3;
  CHECK_THROWS_AS(ModelSpec::from_json(bad), ConfigError);
}

TEST_CASE("adam single-step oracle and contracts") {
  ParameterSet params;
  params.emplace("w", Tensor::zeros({1}, true));
  params.at("w").accumulate_grad(Eigen::ArrayXd::Constant(1, 1.0));
  AdamState adam(1e-3);
  adam.step(params);
  // m-hat = v-hat = 1 after bias correction, so the step is -lr/(1+eps).
  CHECK(std::fabs(params.at("w").value_at(0) + 1e-3) < 1e-9);
  CHECK_FALSE(params.at("w").has_grad());

  ParameterSet frozen;
  frozen.emplace("w", Tensor::zeros({1}, true));
  AdamState fresh(1e-3);
  CHECK_THROWS_AS(fresh.step(frozen), ContractError);

  // A parameter with a zero gradient and fresh moments stays put.
  ParameterSet pair;
  pair.emplace("a", Tensor::full({1}, 5.0, true));
  pair.emplace("b", Tensor::full({1}, 5.0, true));
  pair.at("a").accumulate_grad(Eigen::ArrayXd::Constant(1, 1.0));
  pair.at("b").accumulate_grad(Eigen::ArrayXd::Zero(1));
  AdamState st(1e-3);
  st.step(pair);
  CHECK(pair.at("b").value_at(0) == 5.0);
  CHECK(pair.at("a").value_at(0) < 5.0);
}

TEST_CASE("adam is deterministic over repeated runs") {
  auto run = [] {
    Model m = Model::build(ModelSpec::default_student(), 7);
    Dataset toy = solid_color_toy(8, 7);
    AdamState adam(1e-3);
    for (int step = 0; step < 20; ++step) {
      Tape tape;
      TapeScope scope(tape);
      auto fw = m.forward(toy.images);
      backward(softmax_cross_entropy(fw.logits, toy.labels));
      adam.step(m.params);
    }
    return m.params.at("conv2.kernel").values();
  };
  Eigen::ArrayXd a = run(), b = run();
  CHECK((a == b).all());
}

TEST_CASE("training loop: separable toy converges with non-increasing loss") {
  Model m = Model::build(ModelSpec::default_student(), 5);
  Dataset train = solid_color_toy(24, 11);
  Dataset val = solid_color_toy(8, 12);
  TrainOptions opts;
  opts.epochs = 4;
  opts.batch = 8;
  opts.seed = 3;
  opts.lr = 1e-3;
  FitResult res = train_classifier(m, train, val, opts);
  REQUIRE(res.epochs.size() == 4);
  for (size_t e = 1; e < res.epochs.size(); ++e) {
    CHECK(res.epochs[e].loss_task <= res.epochs[e - 1].loss_task);
  }
  CHECK(res.epochs.back().val_acc == doctest::Approx(1.0));
  CHECK(res.best_epoch >= 0);
}

TEST_CASE("training loop edge cases") {
  Model m = Model::build(ModelSpec::default_student(), 6);
  Dataset train = solid_color_toy(4, 1);
  Dataset val = solid_color_toy(2, 2);
  TrainOptions opts;
  opts.epochs = 0;
  const Eigen::ArrayXd before = m.params.at("conv1.kernel").values();
  FitResult res = train_classifier(m, train, val, opts);
  CHECK(res.epochs.empty());
  CHECK(res.best_epoch == -1);
  CHECK((m.params.at("conv1.kernel").values() == before).all());

  Dataset empty;
  empty.images = Tensor::zeros({1, 3, 16, 16});
  empty.labels = {};
  CHECK_THROWS_AS(train_classifier(m, empty, val, TrainOptions{}), ConfigError);
}

TEST_CASE("identical seeds give identical metric sequences") {
  auto run = [] {
    Model m = Model::build(ModelSpec::default_student(), 9);
    Dataset train = solid_color_toy(16, 21);
    Dataset val = solid_color_toy(6, 22);
    TrainOptions opts;
    opts.epochs = 3;
    opts.batch = 8;
    opts.seed = 5;
    opts.lr = 1e-3;
    FitResult r = train_classifier(m, train, val, opts);
    std::vector<double> metrics;
    for (const auto& e : r.epochs) {
      metrics.push_back(e.loss_task);
      metrics.push_back(e.train_acc);
      metrics.push_back(e.val_acc);
    }
    metrics.push_back(m.params.at("dense2.bias").values().sum());
    return metrics;
  };
  CHECK(run() == run());
}

TEST_CASE("a zero-valued extra loss does not disturb the trajectory") {
  auto run = [](bool with_hook) {
    Model m = Model::build(ModelSpec::default_student(), 13);
    Dataset train = solid_color_toy(16, 31);
    Dataset val = solid_color_toy(6, 32);
    TrainOptions opts;
    opts.epochs = 2;
    opts.batch = 8;
    opts.seed = 17;
    LoopHooks hooks;
    if (with_hook) {
      hooks.extra_loss = [](const Tensor& hook, const std::vector<int>&, int64_t) {
        return scale(sum(hook), 0.0);
      };
    }
    run_training_loop(m, train, val, opts, hooks);
    return m.params.at("conv1.kernel").values();
  };
  Eigen::ArrayXd plain = run(false), hooked = run(true);
  CHECK((plain == hooked).all());
}

TEST_CASE("checkpoints round trip bit-exactly") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "cdt_nn_test";
  fs::create_directories(dir);
  const fs::path file = dir / "model.ckpt";

  Model m = Model::build(ModelSpec::default_student(), 77);
  save_checkpoint(m, file);
  Model r = load_checkpoint(file);
  REQUIRE(r.params.size() == m.params.size());
  for (const auto& [name, p] : m.params) {
    CHECK((p.values() == r.params.at(name).values()).all());
  }
  Dataset probe = solid_color_toy(4, 4);
  const Eigen::ArrayXd before = m.forward(probe.images).logits.values();
  const Eigen::ArrayXd after = r.forward(probe.images).logits.values();
  CHECK((before == after).all());

  std::string bytes = read_text_file(file);
  bytes[2] = 'X';
  write_text_file(dir / "bad_magic.ckpt", bytes);
  CHECK_THROWS_AS(load_checkpoint(dir / "bad_magic.ckpt"), IoError);

  std::string truncated = read_text_file(file);
  truncated.resize(truncated.size() - 64);
  write_text_file(dir / "truncated.ckpt", truncated);
  CHECK_THROWS_AS(load_checkpoint(dir / "truncated.ckpt"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint manifests with bad offsets are rejected before payload") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "cdt_nn_manifest";
  fs::create_directories(dir);

  ModelSpec tiny;
  tiny = ModelSpec::from_json(Json{
      {"input", Json::array({1, 2, 2})},
      {"hook", "relu1"},
      {"layers", Json::array({Json{{"kind", "flatten"}},
                              Json{{"kind", "dense"}, {"in", 4}, {"out", 2}},
                              Json{{"kind", "relu"}}})}});
  Model m = Model::build(tiny, 1);
  Json tensors = Json::array();
  // dense1.bias first at a colliding offset: both entries claim byte 0.
  tensors.push_back({{"name", "dense1.bias"}, {"shape", Json::array({2})}, {"offset", 0}});
  tensors.push_back(
      {{"name", "dense1.weight"}, {"shape", Json::array({4, 2})}, {"offset", 0}});
  Json manifest = {{"arch", tiny.to_json()},
                   {"tensors", tensors},
                   {"payload_bytes", 80}};
  const fs::path file = dir / "overlap.ckpt";
  {
    std::ofstream out(file, std::ios::binary);
    write_magic_json(out, "CDST1", manifest);
    Eigen::ArrayXd payload = Eigen::ArrayXd::Zero(10);
    write_f64(out, payload.data(), payload.size());
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(file),
                       doctest::Contains("overlaps or leaves a gap"), IoError);
  fs::remove_all(dir);
}
