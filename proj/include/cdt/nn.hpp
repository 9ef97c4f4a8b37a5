#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cdt/datagen.hpp"
#include "cdt/io.hpp"
#include "cdt/tensor.hpp"

namespace cdt {

enum class LayerKind { Conv, Relu, MaxPool, Flatten, Dense, TConv, Sigmoid };

struct LayerDesc {
  LayerKind kind;
  int in = 0;
  int out = 0;
  int k = 0;
  int stride = 1;
  std::string name;  // assigned as kind + per-kind 1-based index
};

struct ModelSpec {
  std::vector<LayerDesc> layers;
  std::string hook;        // layer whose output forward() exposes
  Shape input = {3, 16, 16};

  // conv3x3(3->8), relu, pool, conv3x3(8->16), relu [hook], pool, flatten,
  // dense(->32), relu, dense(->10).
  static ModelSpec default_student();
  // Three conv blocks (16/32/32 channels), hook after the third relu at
  // (N,32,4,4), then dense(->64), relu, dense(->10).
  static ModelSpec default_teacher();

  void validate() const;
  std::vector<Shape> output_shapes(int batch) const;  // per layer
  Shape hook_shape(int batch) const;
  Json to_json() const;
  static ModelSpec from_json(const Json& j);
};

using ParameterSet = std::map<std::string, Tensor>;

struct Model {
  ModelSpec spec;
  ParameterSet params;

  struct Forward {
    Tensor logits;
    Tensor hook;
  };

  static Model build(const ModelSpec& spec, uint64_t seed);
  Forward forward(const Tensor& batch) const;
  // Deep copy of parameter values (fresh leaves, same names).
  ParameterSet snapshot_params() const;
  void restore_params(const ParameterSet& snapshot);
};

// Rows of a [N,...] tensor gathered along the batch dimension (plain copy,
// no gradient flow — batches are model inputs).
Tensor take_rows(const Tensor& t, const std::vector<int>& idx);

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  int64_t t = 0;

  explicit AdamState(double lr_ = 1e-4) : lr(lr_) {}
  // Bias-corrected update over every parameter, then grads are zeroed.
  // Throws if no parameter carries a gradient (a step with nothing to do
  // is always a caller bug).
  void step(ParameterSet& params);

 private:
  std::map<std::string, Eigen::ArrayXd> m_, v_;
};

struct TrainOptions {
  int epochs = 5;
  int batch = 32;
  uint64_t seed = 1;
  double lr = 1e-4;
};

struct EpochMetrics {
  double loss_task = 0.0;     // mean over the epoch's steps
  double loss_concept = 0.0;  // mean of the extra-loss values (0 if none)
  double train_acc = 0.0;
  double val_acc = 0.0;
};

struct FitResult {
  std::vector<EpochMetrics> epochs;
  int best_epoch = -1;  // earliest epoch attaining the best val accuracy
  double best_val_acc = 0.0;
};

// Customization points for the distillation loop.  The plain classifier
// trainer passes none of them, and a run with all of them absent consumes
// the RNG stream identically (shuffles only) — which is what makes the
// lambda=0 distillation reduce to train_classifier bit for bit.
struct LoopHooks {
  // Returns an additional loss term for the step (undefined Tensor = none).
  std::function<Tensor(const Tensor& hook, const std::vector<int>& labels,
                       int64_t iter)>
      extra_loss;
  // Runs before each optimizer step (prototype/CAV refresh scheduling).
  std::function<void(int64_t iter)> pre_step;
  // Runs after each epoch's metrics are recorded.
  std::function<void(int epoch, const EpochMetrics& metrics)> post_epoch;
};

// Adam + cross-entropy mini-batch loop with per-epoch train/val accuracy
// and best-validation parameter retention (ties keep the earlier epoch).
FitResult run_training_loop(Model& model, const Dataset& train, const Dataset& val,
                            const TrainOptions& opts, const LoopHooks& hooks);

FitResult train_classifier(Model& model, const Dataset& train, const Dataset& val,
                           const TrainOptions& opts);

double accuracy(const Model& model, const Dataset& data, int eval_batch = 256);

// Flattened hook activations, one row per input sample, evaluated with the
// model frozen (nothing is recorded on any tape).
RowMat hook_activations(const Model& model, const Tensor& images, int eval_batch = 256);

// "CDST1" checkpoint: magic, JSON manifest (architecture + tensor index),
// little-endian float64 payload.  Round trips are bit-exact.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace cdt
