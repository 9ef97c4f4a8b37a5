#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cdt/nn.hpp"
#include "cdt/tensor.hpp"

namespace cdt {

struct KMeansResult {
  RowMat centers;                // [K, D]
  std::vector<int> assignments;  // nearest-center index per input row
  double inertia = 0.0;          // sum of squared distances to assigned centers
  std::vector<double> inertia_trace;  // one entry per assignment pass
};

// Lloyd's algorithm over row vectors with k-means++ seeding.  Nearest-center
// ties break toward the lower index; a cluster that loses all its points is
// re-seeded to the point farthest from its updated assigned center.  Always
// terminates on an assignment pass so every point ends on its nearest center.
KMeansResult kmeans(const RowMat& points, int k, uint64_t seed, int max_iter = 100);

// Per-class cluster centers over hook activations, with the per-class center
// means cached because the loss gradient only ever needs the mean.
class PrototypeBank {
 public:
  PrototypeBank() = default;
  PrototypeBank(std::vector<RowMat> class_centers, double alpha);

  int num_classes() const { return static_cast<int>(centers_.size()); }
  int clusters() const;
  int dim() const;
  double alpha() const { return alpha_; }

  const RowMat& class_centers(int cls) const;
  const Eigen::RowVectorXd& class_mean(int cls) const;
  void set_class_centers(int cls, RowMat centers);

 private:
  std::vector<RowMat> centers_;          // per class: [K, D]
  std::vector<Eigen::RowVectorXd> means_;
  double alpha_ = 0.3;
};

// Per-class k-means over the model's hook activations of `data`, seeded
// per class.  Every class must contribute at least k samples.
PrototypeBank init_prototypes(const Model& model, const Dataset& data, int k,
                              double alpha, uint64_t seed);

// Mean squared distance from one activation to each of its class's centers.
double prototype_loss(const Eigen::RowVectorXd& activation, const RowMat& class_centers);

// Tape-recorded variant of the same value for callers that differentiate it.
Tensor prototype_loss(const Tensor& activation, const RowMat& class_centers);

// Closed-form gradient of prototype_loss: 2 * (activation - center mean).
// Linear in the activation, which is what keeps losses built on top of it
// trainable with first-order methods.
Eigen::RowVectorXd prototype_gradient(const Eigen::RowVectorXd& activation,
                                      const RowMat& class_centers);

// EMA refresh: fresh per-class k-means on current activations, greedy
// nearest-neighbor pairing against the stored centers (closest pairs first,
// without replacement), then centers <- (1-alpha)*old + alpha*matched.
void update_prototypes(PrototypeBank& bank, const Model& model, const Dataset& data,
                       double alpha, uint64_t seed);

// "CDPB1" container: magic, JSON header (classes, clusters, dim, alpha),
// little-endian float64 center payload in class order.
void save_prototypes(const PrototypeBank& bank, const std::filesystem::path& path);
PrototypeBank load_prototypes(const std::filesystem::path& path);

}  // namespace cdt
