#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cdt/cav.hpp"
#include "cdt/datagen.hpp"
#include "cdt/nn.hpp"
#include "cdt/prototypes.hpp"
#include "cdt/tensor.hpp"

namespace cdt {

// One-layer autoencoder pair aligning the teacher's hook space with the
// student's.  Whether the encoder upsamples or downsamples follows from the
// two hook geometries; the decoder mirrors it.
struct MappingModule {
  Model encoder;             // teacher hook shape -> student hook shape
  Model decoder;             // student hook shape -> teacher hook shape
  std::string student_hook;  // student layer the mapped space aligns with
  std::vector<double> epoch_losses;  // mean per-sample encode+decode loss
  int best_epoch = -1;               // epoch whose parameters were kept
};

// Fits encoder and decoder jointly on the concept images with Adam,
// minimizing per-sample ||E(f_t) - f_s||^2 + ||D(E(f_t)) - f_t||^2, and
// keeps the parameters of the best epoch (at most five).
MappingModule fit_mapping(const Model& teacher, const Model& student,
                          const Tensor& concept_images, int epochs = 5,
                          uint64_t seed = 1);

// Teacher hook activations pushed through the mapping encoder, one flat row
// per sample (the "mapped-teacher" space).
RowMat map_teacher_activations(const MappingModule& mapping, const Model& teacher,
                               const Tensor& images, int eval_batch = 256);

// One probe per concept pair, learned in the mapped teacher space, then
// reduced to the ones that pass the accuracy filter.
std::vector<Cav> learn_cavs_mapped(const Model& teacher, const MappingModule& mapping,
                                   const std::vector<ConceptSet>& concept_sets,
                                   uint64_t seed);

// Teacher-free variant: probes on raw student activations, same filtering.
std::vector<Cav> learn_cavs_student(const Model& student,
                                    const std::vector<ConceptSet>& concept_sets,
                                    uint64_t seed);

enum class ConceptMode { Desensitize, Sensitize };
std::string concept_mode_name(ConceptMode mode);
ConceptMode concept_mode_from_name(const std::string& name);

// Mean over the given CAVs of the per-sample |cos| between the closed-form
// prototype-loss gradient 2(f - Pbar_label) and the CAV direction;
// Sensitize returns one minus that alignment.  Differentiable with respect
// to the hook batch.  Samples whose gradient norm falls below 1e-12
// contribute zero alignment (Desensitize) or drop out of the per-CAV mean
// (Sensitize).  An empty CAV list yields a differentiable zero.
Tensor concept_loss(const Tensor& hook_batch, const std::vector<Cav>& cavs,
                    const PrototypeBank& bank, const std::vector<int>& labels,
                    ConceptMode mode);

struct DistillConfig {
  double lambda = 20.0;  // concept-loss weight
  ConceptMode mode = ConceptMode::Desensitize;
  int64_t cav_update_frequency = 0;      // 0: learn CAVs once, keep them fixed
  int64_t proto_update_frequency = 100;  // iterations between EMA refreshes
  int clusters = 7;                      // per-class k-means K
  double alpha = 0.3;                    // prototype EMA weight
  int epochs = 3;
  int batch = 32;
  double lr = 1e-4;
  uint64_t seed = 1;
  bool use_teacher = true;
  bool use_prototypes = true;
  int mapping_epochs = 5;

  void validate() const;
  Json to_json() const;
  // Fills defaults for absent keys, rejects unknown ones.
  static DistillConfig from_json(const Json& j);
};

// Everything one distillation run produces.  The JSON form is canonical:
// sorted keys, floating-point metrics rounded to six decimals, and no
// timing, so two runs of the same configuration compare byte-equal.
struct TrainReport {
  Json config;  // resolved DistillConfig echo
  std::vector<EpochMetrics> epochs;
  std::vector<std::map<std::string, double>> test_accuracy_per_epoch;
  std::map<std::string, double> test_accuracy;  // at the retained parameters
  int best_epoch = -1;
  double best_val_acc = 0.0;
  int valid_cavs = 0;   // filter survivors at the last CAV refit
  int cav_refits = 0;   // how many times mapping+CAVs were (re)learned
  // TCAV of the first concept pair (the reported bias concept), measured
  // with a fresh student-space probe before and after training, keyed by
  // gradient source.
  std::map<std::string, double> tcav_before, tcav_after;
  double probe_accuracy_before = 0.0;
  double probe_accuracy_after = 0.0;
  std::vector<std::string> warnings;
  double wall_clock_seconds = 0.0;  // excluded from to_json

  Json to_json() const;
};

// Fine-tunes a pretrained student with task loss plus lambda-weighted
// concept loss.  Prototypes are initialized from the train split by
// per-class k-means and EMA-refreshed every proto_update_frequency
// iterations; CAVs are learned at iteration zero (through the teacher
// mapping when use_teacher) and refit every cav_update_frequency > 0
// iterations.  The first concept pair doubles as the reported bias concept.
// With lambda = 0 or use_prototypes = false the parameter trajectory is
// identical to train_classifier under the same seed.
TrainReport distill_train(Model& student, const Model* teacher,
                          const std::vector<ConceptSet>& concepts,
                          const std::map<std::string, Dataset>& splits,
                          const DistillConfig& config);

}  // namespace cdt
