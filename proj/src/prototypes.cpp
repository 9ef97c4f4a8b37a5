#include "cdt/prototypes.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <random>
#include <string>

#include "cdt/io.hpp"

namespace cdt {

namespace {

std::string dims(const RowMat& m) {
  return "[" + std::to_string(m.rows()) + "," + std::to_string(m.cols()) + "]";
}

// Class buckets with the undersampled-class diagnostics shared by
// init_prototypes and update_prototypes.
std::vector<RowMat> per_class_centers(const RowMat& acts, const std::vector<int>& labels,
                                      int k, uint64_t seed, const std::string& who) {
  std::vector<std::vector<int>> by_class(kNumClasses);
  for (size_t i = 0; i < labels.size(); ++i) {
    by_class[labels[i]].push_back(static_cast<int>(i));
  }
  std::vector<RowMat> centers(kNumClasses);
  for (int c = 0; c < kNumClasses; ++c) {
    const auto& rows = by_class[c];
    if (static_cast<int>(rows.size()) < k) {
      throw ConfigError(who + ": class " + std::to_string(c) + " has " +
                        std::to_string(rows.size()) + " samples but needs at least " +
                        std::to_string(k));
    }
    RowMat sub(rows.size(), acts.cols());
    for (size_t i = 0; i < rows.size(); ++i) sub.row(i) = acts.row(rows[i]);
    centers[c] = kmeans(sub, k, mix_seed(seed, static_cast<uint64_t>(c))).centers;
  }
  return centers;
}

}  // namespace

KMeansResult kmeans(const RowMat& points, int k, uint64_t seed, int max_iter) {
  const int n = static_cast<int>(points.rows());
  const int d = static_cast<int>(points.cols());
  if (k < 1) throw ConfigError("kmeans: k must be positive, got " + std::to_string(k));
  if (n < k) {
    throw ConfigError("kmeans: " + std::to_string(n) + " points cannot fill " +
                      std::to_string(k) + " clusters");
  }
  if (max_iter < 1) throw ConfigError("kmeans: max_iter must be positive");

  Rng rng(seed);
  RowMat centers(k, d);

  // k-means++: first center uniform, later ones proportional to the squared
  // distance from the set chosen so far (already-chosen points carry no mass).
  std::uniform_int_distribution<int> any_point(0, n - 1);
  centers.row(0) = points.row(any_point(rng));
  Eigen::VectorXd d2(n);
  for (int i = 0; i < n; ++i) d2(i) = (points.row(i) - centers.row(0)).squaredNorm();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    int pick = n - 1;
    if (total <= 0.0) {
      pick = any_point(rng);  // every point coincides with a chosen center
    } else {
      const double r = unit(rng) * total;
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        acc += d2(i);
        if (acc > r) {
          pick = i;
          break;
        }
      }
    }
    centers.row(c) = points.row(pick);
    for (int i = 0; i < n; ++i) {
      d2(i) = std::min(d2(i), (points.row(i) - centers.row(c)).squaredNorm());
    }
  }

  KMeansResult res;
  res.assignments.assign(n, -1);
  std::vector<int> counts(k, 0);
  for (int iter = 0; iter < max_iter; ++iter) {
    // Assignment pass.  The cross-term expansion avoids an N*K*D distance
    // sweep; inertia is then recomputed directly against the winner so exact
    // matches report exactly zero.
    const Eigen::VectorXd cn = centers.rowwise().squaredNorm();
    const RowMat cross = points * centers.transpose();
    bool changed = false;
    double inertia = 0.0;
    std::fill(counts.begin(), counts.end(), 0);
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_d = cn(0) - 2.0 * cross(i, 0);
      for (int c = 1; c < k; ++c) {
        const double dist = cn(c) - 2.0 * cross(i, c);
        if (dist < best_d) {
          best_d = dist;
          best = c;
        }
      }
      if (res.assignments[i] != best) {
        res.assignments[i] = best;
        changed = true;
      }
      ++counts[best];
      inertia += (points.row(i) - centers.row(best)).squaredNorm();
    }
    res.inertia = inertia;
    res.inertia_trace.push_back(inertia);
    if (!changed || iter == max_iter - 1) break;

    // Update pass: means for live clusters, then re-seed each empty cluster
    // to a distinct point farthest from its updated assigned center.
    centers.setZero();
    for (int i = 0; i < n; ++i) centers.row(res.assignments[i]) += points.row(i);
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) centers.row(c) /= counts[c];
    }
    std::vector<char> reseeded(n, 0);
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      int far = -1;
      double far_d = -1.0;
      for (int i = 0; i < n; ++i) {
        if (reseeded[i]) continue;
        const double dist = (points.row(i) - centers.row(res.assignments[i])).squaredNorm();
        if (dist > far_d) {
          far_d = dist;
          far = i;
        }
      }
      centers.row(c) = points.row(far);
      reseeded[far] = 1;
    }
  }
  res.centers = std::move(centers);
  return res;
}

PrototypeBank::PrototypeBank(std::vector<RowMat> class_centers, double alpha)
    : centers_(std::move(class_centers)), alpha_(alpha) {
  if (centers_.empty()) throw ConfigError("prototype bank: no classes");
  if (!(alpha_ >= 0.0 && alpha_ <= 1.0)) {
    throw ConfigError("prototype bank: alpha must be in [0,1], got " + format_fixed(alpha_));
  }
  if (centers_[0].rows() < 1 || centers_[0].cols() < 1) {
    throw ConfigError("prototype bank: class 0 center matrix is empty");
  }
  for (size_t c = 1; c < centers_.size(); ++c) {
    if (centers_[c].rows() != centers_[0].rows() || centers_[c].cols() != centers_[0].cols()) {
      throw ShapeError("prototype bank: class " + std::to_string(c) + " centers are " +
                       dims(centers_[c]) + ", expected " + dims(centers_[0]));
    }
  }
  means_.resize(centers_.size());
  for (size_t c = 0; c < centers_.size(); ++c) means_[c] = centers_[c].colwise().mean();
}

int PrototypeBank::clusters() const {
  return centers_.empty() ? 0 : static_cast<int>(centers_[0].rows());
}

int PrototypeBank::dim() const {
  return centers_.empty() ? 0 : static_cast<int>(centers_[0].cols());
}

const RowMat& PrototypeBank::class_centers(int cls) const {
  if (cls < 0 || cls >= num_classes()) {
    throw ContractError("prototype bank: class " + std::to_string(cls) + " out of range");
  }
  return centers_[cls];
}

const Eigen::RowVectorXd& PrototypeBank::class_mean(int cls) const {
  if (cls < 0 || cls >= num_classes()) {
    throw ContractError("prototype bank: class " + std::to_string(cls) + " out of range");
  }
  return means_[cls];
}

void PrototypeBank::set_class_centers(int cls, RowMat centers) {
  if (cls < 0 || cls >= num_classes()) {
    throw ContractError("prototype bank: class " + std::to_string(cls) + " out of range");
  }
  if (centers.rows() != clusters() || centers.cols() != dim()) {
    throw ShapeError("prototype bank: replacement centers are " + dims(centers) +
                     ", expected [" + std::to_string(clusters()) + "," +
                     std::to_string(dim()) + "]");
  }
  centers_[cls] = std::move(centers);
  means_[cls] = centers_[cls].colwise().mean();
}

PrototypeBank init_prototypes(const Model& model, const Dataset& data, int k,
                              double alpha, uint64_t seed) {
  if (data.size() == 0) throw ConfigError("init_prototypes: empty dataset");
  const RowMat acts = hook_activations(model, data.images);
  return PrototypeBank(per_class_centers(acts, data.labels, k, seed, "init_prototypes"),
                       alpha);
}

double prototype_loss(const Eigen::RowVectorXd& activation, const RowMat& class_centers) {
  if (activation.cols() != class_centers.cols()) {
    throw ShapeError("prototype loss: activation dim " + std::to_string(activation.cols()) +
                     " vs center dim " + std::to_string(class_centers.cols()));
  }
  double total = 0.0;
  for (int c = 0; c < class_centers.rows(); ++c) {
    total += (activation - class_centers.row(c)).squaredNorm();
  }
  return total / class_centers.rows();
}

Tensor prototype_loss(const Tensor& activation, const RowMat& class_centers) {
  const Shape& s = activation.shape();
  if (s.size() != 1 || s[0] != class_centers.cols()) {
    throw ShapeError("prototype loss: activation shape " + shape_to_string(s) +
                     " vs center dim " + std::to_string(class_centers.cols()));
  }
  Tensor total = Tensor::scalar(0.0);
  for (int c = 0; c < class_centers.rows(); ++c) {
    const Eigen::ArrayXd row = class_centers.row(c).transpose().array();
    total = add(total, sum(square(sub(activation, Tensor::make(s, row)))));
  }
  return scale(total, 1.0 / class_centers.rows());
}

Eigen::RowVectorXd prototype_gradient(const Eigen::RowVectorXd& activation,
                                      const RowMat& class_centers) {
  if (activation.cols() != class_centers.cols()) {
    throw ShapeError("prototype gradient: activation dim " +
                     std::to_string(activation.cols()) + " vs center dim " +
                     std::to_string(class_centers.cols()));
  }
  const Eigen::RowVectorXd mean = class_centers.colwise().mean();
  return 2.0 * (activation - mean);
}

void update_prototypes(PrototypeBank& bank, const Model& model, const Dataset& data,
                       double alpha, uint64_t seed) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("update_prototypes: alpha must be in [0,1], got " + format_fixed(alpha));
  }
  if (data.size() == 0) throw ConfigError("update_prototypes: empty dataset");
  const RowMat acts = hook_activations(model, data.images);
  if (acts.cols() != bank.dim()) {
    throw ShapeError("update_prototypes: activations have dim " + std::to_string(acts.cols()) +
                     ", bank has dim " + std::to_string(bank.dim()));
  }
  const std::vector<RowMat> fresh =
      per_class_centers(acts, data.labels, bank.clusters(), seed, "update_prototypes");
  const int k = bank.clusters();
  for (int cls = 0; cls < bank.num_classes(); ++cls) {
    const RowMat& old = bank.class_centers(cls);
    // Greedy pairing: repeatedly bind the closest (old, fresh) pair that is
    // still free; ties fall to the lowest index pair.
    RowMat matched(k, bank.dim());
    std::vector<char> old_used(k, 0), fresh_used(k, 0);
    for (int round = 0; round < k; ++round) {
      double best = std::numeric_limits<double>::infinity();
      int bi = -1, bj = -1;
      for (int i = 0; i < k; ++i) {
        if (old_used[i]) continue;
        for (int j = 0; j < k; ++j) {
          if (fresh_used[j]) continue;
          const double dist = (old.row(i) - fresh[cls].row(j)).squaredNorm();
          if (dist < best) {
            best = dist;
            bi = i;
            bj = j;
          }
        }
      }
      old_used[bi] = 1;
      fresh_used[bj] = 1;
      matched.row(bi) = fresh[cls].row(bj);
    }
    bank.set_class_centers(cls, (1.0 - alpha) * old + alpha * matched);
  }
}

void save_prototypes(const PrototypeBank& bank, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const Json header{{"classes", bank.num_classes()},
                    {"clusters", bank.clusters()},
                    {"dim", bank.dim()},
                    {"alpha", bank.alpha()}};
  write_magic_json(out, "CDPB1", header);
  for (int c = 0; c < bank.num_classes(); ++c) {
    const RowMat& m = bank.class_centers(c);
    write_f64(out, m.data(), m.size());
  }
  if (!out) throw IoError("failed writing prototypes to " + path.string());
}

PrototypeBank load_prototypes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const Json header = read_magic_json(in, "CDPB1", path.string());
  const int classes = header.at("classes").get<int>();
  const int clusters = header.at("clusters").get<int>();
  const int dim = header.at("dim").get<int>();
  const double alpha = header.at("alpha").get<double>();
  if (classes < 1 || clusters < 1 || dim < 1) {
    throw IoError(path.string() + ": invalid prototype header");
  }
  std::vector<RowMat> centers(classes);
  for (int c = 0; c < classes; ++c) {
    centers[c].resize(clusters, dim);
    read_f64(in, centers[c].data(), centers[c].size(), path.string());
  }
  return PrototypeBank(std::move(centers), alpha);
}

}  // namespace cdt
