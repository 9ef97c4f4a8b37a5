#pragma once

// Fixtures shared across the unit-test binaries.

#include <functional>
#include <random>
#include <vector>

#include "cdt/datagen.hpp"
#include "cdt/nn.hpp"

namespace cdt::test {

// A dense model whose hook activations equal the first two input pixels:
// input [1,2,2] -> flatten -> dense(4->2) with weight rows (e0, e1, 0, 0)
// -> relu.  Images with non-negative leading pixels map straight through,
// which gives tests exact control over the activation space.
inline Model probe_model() {
  ModelSpec spec = ModelSpec::from_json(
      Json{{"input", Json::array({1, 2, 2})},
           {"hook", "relu1"},
           {"layers", Json::array({Json{{"kind", "flatten"}},
                                   Json{{"kind", "dense"}, {"in", 4}, {"out", 2}},
                                   Json{{"kind", "relu"}}})}});
  Model m = Model::build(spec, 1);
  Eigen::ArrayXd& w = m.params.at("dense1.weight").values_mut();
  w.setZero();
  w(0) = 1.0;  // weight is [in=4, out=2] row-major
  w(3) = 1.0;
  return m;
}

// Dataset whose class-c samples produce exactly the requested probe-model
// activations.
inline Dataset activation_dataset(
    const std::vector<std::vector<Eigen::RowVector2d>>& per_class) {
  int total = 0;
  for (const auto& acts : per_class) total += static_cast<int>(acts.size());
  Eigen::ArrayXd flat(static_cast<int64_t>(total) * 4);
  Dataset d;
  d.split = "train";
  int row = 0;
  for (size_t c = 0; c < per_class.size(); ++c) {
    for (const Eigen::RowVector2d& a : per_class[c]) {
      flat(row * 4 + 0) = a(0);
      flat(row * 4 + 1) = a(1);
      flat(row * 4 + 2) = 0.0;
      flat(row * 4 + 3) = 0.0;
      d.labels.push_back(static_cast<int>(c));
      ++row;
    }
  }
  d.images = Tensor::make({total, 1, 2, 2}, std::move(flat));
  return d;
}

inline std::vector<std::vector<Eigen::RowVector2d>> constant_classes(
    const std::function<Eigen::RowVector2d(int)>& act_of_class, int copies) {
  std::vector<std::vector<Eigen::RowVector2d>> per_class(kNumClasses);
  for (int c = 0; c < kNumClasses; ++c) {
    per_class[c].assign(copies, act_of_class(c));
  }
  return per_class;
}

// Uniform-noise images at dataset geometry.
inline Tensor random_images(int n, uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::ArrayXd flat(static_cast<int64_t>(n) * 3 * kCanvas * kCanvas);
  for (int64_t i = 0; i < flat.size(); ++i) flat(i) = u(rng);
  return Tensor::make({n, 3, kCanvas, kCanvas}, std::move(flat));
}

}  // namespace cdt::test
