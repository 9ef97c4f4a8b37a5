#include "cdt/cav.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include <Eigen/Eigenvalues>

#include "cdt/io.hpp"

namespace cdt {

namespace {

constexpr double kDegenerateNorm = 1e-12;
constexpr int kProbeMaxEpochs = 500;
constexpr int kProbePatience = 25;
constexpr double kProbeLr = 0.05;

void check_space(const std::string& space) {
  if (space != "student" && space != "teacher" && space != "mapped-teacher") {
    throw ConfigError("activation space must be student, teacher or mapped-teacher, got \"" +
                      space + "\"");
  }
}

double stable_sigmoid(double z) {
  if (z >= 0.0) {
    const double e = std::exp(-z);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + e^z), safe for large |z|.
double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace

ActivationMatrix extract_activations(const Model& model, const Tensor& images,
                                     const std::string& space, int eval_batch) {
  check_space(space);
  return ActivationMatrix{hook_activations(model, images, eval_batch), space,
                          model.spec.hook};
}

PcaModel fit_pca(const RowMat& data, int out_dim) {
  const int n = static_cast<int>(data.rows());
  const int d = static_cast<int>(data.cols());
  if (n < 2) throw ConfigError("fit_pca: need at least 2 rows, got " + std::to_string(n));
  const int max_dim = std::min(n - 1, d);
  if (out_dim < 1 || out_dim > max_dim) {
    throw ConfigError("fit_pca: out_dim " + std::to_string(out_dim) +
                      " outside [1, min(rows-1, dim)] = [1, " + std::to_string(max_dim) + "]");
  }
  PcaModel pca;
  pca.mean = data.colwise().mean();
  const RowMat centered = data.rowwise() - pca.mean;
  const Eigen::MatrixXd cov =
      (centered.transpose() * centered) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw NumericError("fit_pca: eigendecomposition failed");
  pca.components.resize(out_dim, d);
  // Eigenvalues come back ascending; take the top out_dim and pin each
  // component's sign by making its largest-magnitude entry positive.
  for (int i = 0; i < out_dim; ++i) {
    Eigen::VectorXd v = es.eigenvectors().col(d - 1 - i);
    int arg = 0;
    for (int j = 1; j < d; ++j) {
      if (std::abs(v(j)) > std::abs(v(arg))) arg = j;
    }
    if (v(arg) < 0.0) v = -v;
    pca.components.row(i) = v.transpose();
  }
  return pca;
}

RowMat apply_pca(const PcaModel& pca, const RowMat& data) {
  if (data.cols() != pca.mean.cols()) {
    throw ShapeError("apply_pca: data has dim " + std::to_string(data.cols()) +
                     ", model was fit on dim " + std::to_string(pca.mean.cols()));
  }
  return (data.rowwise() - pca.mean) * pca.components.transpose();
}

Cav learn_cav(const ActivationMatrix& pos, const ActivationMatrix& neg,
              const std::string& concept_name, uint64_t seed) {
  if (pos.rows.cols() != neg.rows.cols()) {
    throw ShapeError("learn_cav: positives have dim " + std::to_string(pos.rows.cols()) +
                     ", negatives " + std::to_string(neg.rows.cols()));
  }
  if (pos.space != neg.space || pos.hook != neg.hook) {
    throw ConfigError("learn_cav: positives (" + pos.space + "/" + pos.hook +
                      ") and negatives (" + neg.space + "/" + neg.hook +
                      ") come from different spaces");
  }
  const int np = static_cast<int>(pos.rows.rows());
  const int nn = static_cast<int>(neg.rows.rows());
  if (np < 10 || nn < 10) {
    throw ConfigError("learn_cav: need at least 10 samples per side, got " +
                      std::to_string(np) + " positives and " + std::to_string(nn) +
                      " negatives");
  }
  const int d = static_cast<int>(pos.rows.cols());

  bool all_same = true;
  for (int i = 0; all_same && i < np; ++i) {
    all_same = (pos.rows.row(i) - pos.rows.row(0)).cwiseAbs().maxCoeff() == 0.0;
  }
  for (int i = 0; all_same && i < nn; ++i) {
    all_same = (neg.rows.row(i) - pos.rows.row(0)).cwiseAbs().maxCoeff() == 0.0;
  }
  if (all_same) throw NumericError("learn_cav: every activation row is identical");

  // Stratified 80/20 split, shuffled per side.
  Rng rng(seed);
  const auto split = [&rng](int n) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    const int cut = (n * 8) / 10;
    return std::pair<std::vector<int>, std::vector<int>>(
        {idx.begin(), idx.begin() + cut}, {idx.begin() + cut, idx.end()});
  };
  const auto [pos_tr, pos_he] = split(np);
  const auto [neg_tr, neg_he] = split(nn);

  const int ntr = static_cast<int>(pos_tr.size() + neg_tr.size());
  const int nhe = static_cast<int>(pos_he.size() + neg_he.size());
  RowMat xtr(ntr, d), xhe(nhe, d);
  Eigen::VectorXd ytr(ntr), yhe(nhe);
  int r = 0;
  for (int i : pos_tr) { xtr.row(r) = pos.rows.row(i); ytr(r++) = 1.0; }
  for (int i : neg_tr) { xtr.row(r) = neg.rows.row(i); ytr(r++) = 0.0; }
  r = 0;
  for (int i : pos_he) { xhe.row(r) = pos.rows.row(i); yhe(r++) = 1.0; }
  for (int i : neg_he) { xhe.row(r) = neg.rows.row(i); yhe(r++) = 0.0; }

  ParameterSet probe;
  probe["w"] = Tensor::zeros({d}, true);
  probe["b"] = Tensor::zeros({1}, true);
  AdamState adam(kProbeLr);

  Eigen::VectorXd best_w = Eigen::VectorXd::Zero(d);
  double best_b = 0.0;
  double best_loss = std::numeric_limits<double>::infinity();
  int since_best = 0;
  for (int epoch = 0; epoch < kProbeMaxEpochs; ++epoch) {
    const Eigen::Map<const Eigen::VectorXd> w(probe.at("w").values().data(), d);
    const double b = probe.at("b").value_at(0);
    Eigen::VectorXd p = xtr * w;
    for (int i = 0; i < ntr; ++i) p(i) = stable_sigmoid(p(i) + b);
    const Eigen::VectorXd diff = p - ytr;
    probe.at("w").accumulate_grad((xtr.transpose() * diff).array() / ntr);
    probe.at("b").accumulate_grad(Eigen::ArrayXd::Constant(1, diff.mean()));
    adam.step(probe);

    const Eigen::Map<const Eigen::VectorXd> w2(probe.at("w").values().data(), d);
    const double b2 = probe.at("b").value_at(0);
    const Eigen::VectorXd zh = ((xhe * w2).array() + b2).matrix();
    double heldout = 0.0;
    for (int i = 0; i < nhe; ++i) heldout += softplus(zh(i)) - yhe(i) * zh(i);
    heldout /= nhe;
    if (heldout < best_loss) {
      best_loss = heldout;
      best_w = w2;
      best_b = b2;
      since_best = 0;
    } else if (++since_best >= kProbePatience) {
      break;
    }
  }

  const double norm = best_w.norm();
  if (norm < kDegenerateNorm) {
    throw NumericError("learn_cav: probe collapsed to a zero direction");
  }
  Eigen::VectorXd v = best_w / norm;
  // Orient toward the concept: positives must score higher on average.
  if ((pos.rows * v).mean() < (neg.rows * v).mean()) v = -v;

  int correct = 0;
  for (int i = 0; i < nhe; ++i) {
    const double z = xhe.row(i).dot(best_w) + best_b;
    correct += (z > 0.0) == (yhe(i) > 0.5);
  }

  Cav cav;
  cav.vector = std::move(v);
  cav.space = pos.space;
  cav.hook = pos.hook;
  cav.name = concept_name;
  cav.heldout_accuracy = static_cast<double>(correct) / nhe;
  return cav;
}

std::vector<Cav> filter_cavs(const std::vector<Cav>& cavs) {
  std::vector<Cav> kept;
  for (const Cav& c : cavs) {
    if (c.heldout_accuracy > 0.7) kept.push_back(c);
  }
  return kept;
}

std::string gradient_source_name(GradientSource source) {
  switch (source) {
    case GradientSource::FinalLoss: return "final_loss";
    case GradientSource::Logit: return "logit";
    case GradientSource::Prototype: return "prototype";
  }
  throw ContractError("gradient_source_name: unknown source");
}

GradientSource gradient_source_from_name(const std::string& name) {
  if (name == "final_loss") return GradientSource::FinalLoss;
  if (name == "logit") return GradientSource::Logit;
  if (name == "prototype") return GradientSource::Prototype;
  throw ConfigError("unknown gradient source \"" + name +
                    "\" (expected final_loss, logit or prototype)");
}

Eigen::VectorXd tcav_sensitivities(const Model& model, const Tensor& images,
                                   const std::vector<int>& labels, const Cav& cav,
                                   GradientSource source, const PrototypeBank* bank,
                                   int eval_batch) {
  const Shape& s = images.shape();
  if (s.empty() || s[0] == 0) throw ShapeError("tcav: empty image batch");
  const int n = s[0];
  if (static_cast<int>(labels.size()) != n) {
    throw ShapeError("tcav: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " images");
  }
  const Shape hs = model.spec.hook_shape(1);
  int64_t d = 1;
  for (size_t i = 1; i < hs.size(); ++i) d *= hs[i];
  if (cav.vector.size() != d) {
    throw ShapeError("tcav: cav has dim " + std::to_string(cav.vector.size()) +
                     ", hook activations have dim " + std::to_string(d));
  }

  Eigen::VectorXd sens(n);
  if (source == GradientSource::Prototype) {
    if (bank == nullptr) {
      throw ContractError("tcav: the prototype gradient source requires a prototype bank");
    }
    if (bank->dim() != d) {
      throw ShapeError("tcav: prototype bank has dim " + std::to_string(bank->dim()) +
                       ", hook activations have dim " + std::to_string(d));
    }
    const RowMat acts = hook_activations(model, images, eval_batch);
    for (int i = 0; i < n; ++i) {
      if (labels[i] < 0 || labels[i] >= bank->num_classes()) {
        throw ConfigError("tcav: label " + std::to_string(labels[i]) + " outside [0, " +
                          std::to_string(bank->num_classes()) + ")");
      }
      const Eigen::RowVectorXd g =
          prototype_gradient(acts.row(i), bank->class_centers(labels[i]));
      sens(i) = g.dot(cav.vector);
    }
    return sens;
  }

  for (int start = 0; start < n; start += eval_batch) {
    const int stop = std::min(n, start + eval_batch);
    const int m = stop - start;
    std::vector<int> idx(m);
    std::iota(idx.begin(), idx.end(), start);
    const std::vector<int> chunk(labels.begin() + start, labels.begin() + stop);

    Tape tape;
    TapeScope scope(tape);
    Model::Forward f = model.forward(take_rows(images, idx));
    Tensor target;
    if (source == GradientSource::FinalLoss) {
      target = softmax_cross_entropy(f.logits, chunk);
    } else {
      const int classes = f.logits.shape()[1];
      Eigen::ArrayXd onehot = Eigen::ArrayXd::Zero(static_cast<int64_t>(m) * classes);
      for (int i = 0; i < m; ++i) {
        if (chunk[i] < 0 || chunk[i] >= classes) {
          throw ConfigError("tcav: label " + std::to_string(chunk[i]) + " outside [0, " +
                            std::to_string(classes) + ")");
        }
        onehot(static_cast<int64_t>(i) * classes + chunk[i]) = 1.0;
      }
      target = sum(mul(f.logits, Tensor::make(f.logits.shape(), std::move(onehot))));
    }
    backward(target);

    // The cross-entropy above averages over the chunk; scale back up so each
    // sensitivity is the gradient of that sample's own quantity.
    const double per_sample = source == GradientSource::FinalLoss ? m : 1.0;
    const Eigen::ArrayXd& hg = f.hook.grad_ref();
    for (int i = 0; i < m; ++i) {
      const Eigen::Map<const Eigen::VectorXd> row(hg.data() + static_cast<int64_t>(i) * d, d);
      sens(start + i) = per_sample * row.dot(cav.vector);
    }
    // Leaf gradients from this sweep must not leak into the caller's training.
    for (const auto& [name, param] : model.params) {
      Tensor p = param;
      p.zero_grad();
    }
  }
  return sens;
}

double tcav_fraction(const Eigen::VectorXd& sensitivities) {
  if (sensitivities.size() == 0) throw ConfigError("tcav: no sensitivities");
  int negative = 0;
  for (int i = 0; i < sensitivities.size(); ++i) negative += sensitivities(i) < 0.0;
  return static_cast<double>(negative) / sensitivities.size();
}

double tcav_score(const Model& model, const Tensor& images, const std::vector<int>& labels,
                  const Cav& cav, GradientSource source, const PrototypeBank* bank,
                  int eval_batch) {
  return tcav_fraction(tcav_sensitivities(model, images, labels, cav, source, bank, eval_batch));
}

CosineProfile cosine_profile(const ActivationMatrix& acts, const Cav& cav) {
  if (acts.rows.cols() != cav.vector.size()) {
    throw ShapeError("cosine profile: activations have dim " + std::to_string(acts.rows.cols()) +
                     ", cav has dim " + std::to_string(cav.vector.size()));
  }
  const double cav_norm = cav.vector.norm();
  if (cav_norm < kDegenerateNorm) throw NumericError("cosine profile: cav is a zero vector");
  CosineProfile out;
  double total = 0.0;
  for (int i = 0; i < acts.rows.rows(); ++i) {
    const double row_norm = acts.rows.row(i).norm();
    if (row_norm < kDegenerateNorm) {
      ++out.skipped;
      continue;
    }
    total += acts.rows.row(i).dot(cav.vector) / (row_norm * cav_norm);
    ++out.used;
  }
  if (out.used == 0) {
    throw NumericError("cosine profile: every activation row is degenerate");
  }
  out.mean_cosine = total / out.used;
  return out;
}

void save_cav(const Cav& cav, const std::filesystem::path& path) {
  const Json j{{"name", cav.name},
               {"space", cav.space},
               {"hook", cav.hook},
               {"accuracy", cav.heldout_accuracy},
               {"dim", static_cast<int>(cav.vector.size())},
               {"vector", std::vector<double>(cav.vector.data(),
                                              cav.vector.data() + cav.vector.size())}};
  write_text_file(path, j.dump(2) + "\n");
}

Cav load_cav(const std::filesystem::path& path) {
  Cav cav;
  try {
    const Json j = Json::parse(read_text_file(path));
    cav.name = j.at("name").get<std::string>();
    cav.space = j.at("space").get<std::string>();
    cav.hook = j.at("hook").get<std::string>();
    cav.heldout_accuracy = j.at("accuracy").get<double>();
    const auto vec = j.at("vector").get<std::vector<double>>();
    if (static_cast<int>(vec.size()) != j.at("dim").get<int>()) {
      throw IoError(path.string() + ": vector length disagrees with dim");
    }
    cav.vector = Eigen::Map<const Eigen::VectorXd>(vec.data(), vec.size());
  } catch (const Json::exception& e) {
    throw IoError(path.string() + ": malformed cav file (" + e.what() + ")");
  }
  check_space(cav.space);
  if (cav.heldout_accuracy < 0.0 || cav.heldout_accuracy > 1.0) {
    throw IoError(path.string() + ": accuracy outside [0,1]");
  }
  if (std::abs(cav.vector.norm() - 1.0) > 1e-9) {
    throw IoError(path.string() + ": cav vector is not unit norm");
  }
  return cav;
}

}  // namespace cdt
