#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cdt/nn.hpp"
#include "cdt/prototypes.hpp"
#include "cdt/tensor.hpp"

namespace cdt {

// Flattened per-sample hook activations plus where they came from.
struct ActivationMatrix {
  RowMat rows;        // [N, D]
  std::string space;  // student | teacher | mapped-teacher
  std::string hook;   // producing layer name
};

ActivationMatrix extract_activations(const Model& model, const Tensor& images,
                                     const std::string& space, int eval_batch = 256);

// Unit-norm concept direction in one activation space, oriented so concept
// examples score higher than counterexamples along it.
struct Cav {
  Eigen::VectorXd vector;
  std::string space;
  std::string hook;
  std::string name;  // concept name
  double heldout_accuracy = 0.0;
};

// Centered projection onto the top principal directions.  Each component's
// largest-magnitude entry is made positive so fits are reproducible.
struct PcaModel {
  Eigen::RowVectorXd mean;
  RowMat components;  // [out_dim, D], row-orthonormal
};

PcaModel fit_pca(const RowMat& data, int out_dim);
RowMat apply_pca(const PcaModel& pca, const RowMat& data);

// Logistic probe between concept activations (positives) and counterexample
// activations (negatives): stratified 80/20 split, full-batch Adam, early
// stop on held-out loss.  The normalized probe weight is the direction.
Cav learn_cav(const ActivationMatrix& pos, const ActivationMatrix& neg,
              const std::string& concept_name, uint64_t seed);

// Keeps the probes that actually separated their sets (accuracy > 0.7).
std::vector<Cav> filter_cavs(const std::vector<Cav>& cavs);

enum class GradientSource { FinalLoss, Logit, Prototype };
std::string gradient_source_name(GradientSource source);
GradientSource gradient_source_from_name(const std::string& name);

// Per-sample directional derivative along the concept direction of the
// chosen per-sample quantity, taken w.r.t. the hook activation:
// cross-entropy at the true label, the true-class logit, or the closed-form
// prototype-loss gradient (which needs the bank).
Eigen::VectorXd tcav_sensitivities(const Model& model, const Tensor& images,
                                   const std::vector<int>& labels, const Cav& cav,
                                   GradientSource source,
                                   const PrototypeBank* bank = nullptr,
                                   int eval_batch = 256);

// Fraction of samples with strictly negative sensitivity (zeros count as
// non-negative).
double tcav_fraction(const Eigen::VectorXd& sensitivities);

double tcav_score(const Model& model, const Tensor& images, const std::vector<int>& labels,
                  const Cav& cav, GradientSource source,
                  const PrototypeBank* bank = nullptr, int eval_batch = 256);

struct CosineProfile {
  double mean_cosine = 0.0;
  int used = 0;
  int skipped = 0;  // rows with norm below 1e-12
};

// Mean cosine between activation rows and the concept direction; degenerate
// rows are skipped and counted.
CosineProfile cosine_profile(const ActivationMatrix& acts, const Cav& cav);

// CAV file: plain JSON {name, space, hook, accuracy, dim, vector} with
// full-precision vector entries.
void save_cav(const Cav& cav, const std::filesystem::path& path);
Cav load_cav(const std::filesystem::path& path);

}  // namespace cdt
