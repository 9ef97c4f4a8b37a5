#include "cdt/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>

namespace cdt {

namespace {

constexpr double kMappingLr = 1e-3;
constexpr int kMappingBatch = 32;
constexpr double kDegenerateNorm = 1e-12;

// Seed streams hung off the run seed, so optional phases never perturb the
// training loop's own RNG.
constexpr uint64_t kStreamProtoInit = 11;
constexpr uint64_t kStreamTcavBefore = 12;
constexpr uint64_t kStreamTcavAfter = 13;
constexpr uint64_t kStreamCavRefit = 1000;
constexpr uint64_t kStreamProtoRefresh = 2000;

// Hook activations as a plain constant tensor in the hook's native shape
// (hook_activations returns flat rows; the mapping layers need 4-D input).
Tensor hook_tensor(const Model& model, const Tensor& images, int eval_batch = 256) {
  const Shape& s = images.shape();
  if (s.empty() || s[0] == 0) throw ConfigError("hook_tensor: empty batch");
  NoTapeScope no_tape;
  const int n = s[0];
  const Shape hs = model.spec.hook_shape(n);
  Eigen::ArrayXd v(numel(hs));
  const int64_t row = v.size() / n;
  std::vector<int> idx;
  for (int start = 0; start < n; start += eval_batch) {
    const int stop = std::min(n, start + eval_batch);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    Tensor hook = model.forward(take_rows(images, idx)).hook;
    v.segment(static_cast<int64_t>(start) * row, (stop - start) * row) = hook.values();
  }
  return Tensor::make(hs, std::move(v), false);
}

Json conv_layer_json(const std::string& kind, int in, int out, int stride) {
  return Json{{"kind", kind}, {"in", in}, {"out", out}, {"k", 3}, {"stride", stride}};
}

Model single_layer_model(const std::string& kind, const Shape& input, int out,
                         int stride, uint64_t seed) {
  const Json spec = Json{{"input", Json::array({input[0], input[1], input[2]})},
                         {"hook", kind + "1"},
                         {"layers", Json::array({conv_layer_json(kind, input[0], out,
                                                                 stride)})}};
  return Model::build(ModelSpec::from_json(spec), seed);
}

std::map<std::string, double> test_variant_accuracy(
    const Model& model, const std::map<std::string, Dataset>& splits) {
  std::map<std::string, double> out;
  for (const auto& [name, data] : splits) {
    if (name.rfind("test", 0) == 0) out[name] = accuracy(model, data);
  }
  return out;
}

// Fresh student-space probe on the concept pair, then TCAV over the
// evaluation split for every gradient source the state supports.
void measure_tcav(const Model& student, const ConceptSet& concept_pair,
                  const Dataset& eval, const PrototypeBank* bank, uint64_t seed,
                  std::map<std::string, double>& scores, double& probe_accuracy) {
  const ActivationMatrix pos = extract_activations(student, concept_pair.positives,
                                                   "student");
  const ActivationMatrix neg = extract_activations(student, concept_pair.negatives,
                                                   "student");
  const Cav cav = learn_cav(pos, neg, concept_pair.name, seed);
  probe_accuracy = cav.heldout_accuracy;
  for (GradientSource source :
       {GradientSource::FinalLoss, GradientSource::Logit, GradientSource::Prototype}) {
    if (source == GradientSource::Prototype && bank == nullptr) continue;
    scores[gradient_source_name(source)] =
        tcav_score(student, eval.images, eval.labels, cav, source, bank);
  }
}

double round6(double x) { return std::round(x * 1e6) / 1e6; }

Json rounded_map(const std::map<std::string, double>& m) {
  Json j = Json::object();
  for (const auto& [k, v] : m) j[k] = round6(v);
  return j;
}

}  // namespace

MappingModule fit_mapping(const Model& teacher, const Model& student,
                          const Tensor& concept_images, int epochs, uint64_t seed) {
  if (concept_images.shape().empty() || concept_images.shape()[0] == 0) {
    throw ConfigError("fit_mapping: empty concept images");
  }
  if (epochs < 1 || epochs > 5) {
    throw ConfigError("fit_mapping: epochs must be in [1,5], got " +
                      std::to_string(epochs));
  }
  const Shape ts = teacher.spec.hook_shape(1);
  const Shape ss = student.spec.hook_shape(1);
  if (ts.size() != 4 || ss.size() != 4) {
    throw ConfigError("fit_mapping: both hooks must be spatial, got " +
                      shape_to_string(ts) + " and " + shape_to_string(ss));
  }
  const int ct = ts[1], ht = ts[2], wt = ts[3];
  const int cs = ss[1], hs = ss[2], ws = ss[3];

  MappingModule mapping;
  mapping.student_hook = student.spec.hook;
  if (hs == ht && ws == wt) {
    mapping.encoder = single_layer_model("conv", {ct, ht, wt}, cs, 1, mix_seed(seed, 1));
    mapping.decoder = single_layer_model("conv", {cs, hs, ws}, ct, 1, mix_seed(seed, 2));
  } else if (hs == 2 * ht && ws == 2 * wt) {
    mapping.encoder = single_layer_model("tconv", {ct, ht, wt}, cs, 2, mix_seed(seed, 1));
    mapping.decoder = single_layer_model("conv", {cs, hs, ws}, ct, 2, mix_seed(seed, 2));
  } else if (ht == 2 * hs && wt == 2 * ws) {
    mapping.encoder = single_layer_model("conv", {ct, ht, wt}, cs, 2, mix_seed(seed, 1));
    mapping.decoder = single_layer_model("tconv", {cs, hs, ws}, ct, 2, mix_seed(seed, 2));
  } else {
    throw ConfigError("fit_mapping: hook shapes " + shape_to_string(ts) + " and " +
                      shape_to_string(ss) + " differ by more than one 2x step");
  }

  const Tensor teacher_acts = hook_tensor(teacher, concept_images);
  const Tensor student_acts = hook_tensor(student, concept_images);

  // Encoder and decoder step together; the joint set shares their storage.
  ParameterSet joint;
  for (auto& [name, p] : mapping.encoder.params) joint.emplace("encoder." + name, p);
  for (auto& [name, p] : mapping.decoder.params) joint.emplace("decoder." + name, p);
  AdamState adam(kMappingLr);
  Rng rng(mix_seed(seed, 0));

  const int m = concept_images.shape()[0];
  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> batch_idx;
  ParameterSet best_encoder, best_decoder;
  double best_loss = 0.0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int steps = 0;
    for (int start = 0; start < m; start += kMappingBatch) {
      const int stop = std::min(m, start + kMappingBatch);
      batch_idx.assign(order.begin() + start, order.begin() + stop);
      const Tensor tb = take_rows(teacher_acts, batch_idx);
      const Tensor sb = take_rows(student_acts, batch_idx);
      Tape tape;
      TapeScope scope(tape);
      const Tensor mapped = mapping.encoder.forward(tb).logits;
      const Tensor decoded = mapping.decoder.forward(mapped).logits;
      const double inv_b = 1.0 / batch_idx.size();
      const Tensor loss = add(scale(sum(square(sub(mapped, sb))), inv_b),
                              scale(sum(square(sub(decoded, tb))), inv_b));
      backward(loss);
      adam.step(joint);
      loss_sum += loss.scalar_value();
      ++steps;
    }
    const double epoch_loss = loss_sum / steps;
    mapping.epoch_losses.push_back(epoch_loss);
    if (mapping.best_epoch < 0 || epoch_loss < best_loss) {
      best_loss = epoch_loss;
      mapping.best_epoch = epoch;
      best_encoder = mapping.encoder.snapshot_params();
      best_decoder = mapping.decoder.snapshot_params();
    }
  }
  mapping.encoder.restore_params(best_encoder);
  mapping.decoder.restore_params(best_decoder);
  return mapping;
}

RowMat map_teacher_activations(const MappingModule& mapping, const Model& teacher,
                               const Tensor& images, int eval_batch) {
  const Tensor teacher_acts = hook_tensor(teacher, images, eval_batch);
  NoTapeScope no_tape;
  const int n = teacher_acts.shape()[0];
  const int64_t d = numel(mapping.encoder.spec.hook_shape(1));
  RowMat rows(n, d);
  std::vector<int> idx;
  for (int start = 0; start < n; start += eval_batch) {
    const int stop = std::min(n, start + eval_batch);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor mapped = mapping.encoder.forward(take_rows(teacher_acts, idx)).logits;
    rows.middleRows(start, stop - start) =
        Eigen::Map<const RowMat>(mapped.values().data(), stop - start, d);
  }
  return rows;
}

std::vector<Cav> learn_cavs_mapped(const Model& teacher, const MappingModule& mapping,
                                   const std::vector<ConceptSet>& concept_sets,
                                   uint64_t seed) {
  std::vector<Cav> cavs;
  for (size_t i = 0; i < concept_sets.size(); ++i) {
    const ConceptSet& cs = concept_sets[i];
    ActivationMatrix pos{map_teacher_activations(mapping, teacher, cs.positives),
                         "mapped-teacher", mapping.student_hook};
    ActivationMatrix neg{map_teacher_activations(mapping, teacher, cs.negatives),
                         "mapped-teacher", mapping.student_hook};
    cavs.push_back(learn_cav(pos, neg, cs.name, mix_seed(seed, i)));
  }
  return filter_cavs(cavs);
}

std::vector<Cav> learn_cavs_student(const Model& student,
                                    const std::vector<ConceptSet>& concept_sets,
                                    uint64_t seed) {
  std::vector<Cav> cavs;
  for (size_t i = 0; i < concept_sets.size(); ++i) {
    const ConceptSet& cs = concept_sets[i];
    cavs.push_back(learn_cav(extract_activations(student, cs.positives, "student"),
                             extract_activations(student, cs.negatives, "student"),
                             cs.name, mix_seed(seed, i)));
  }
  return filter_cavs(cavs);
}

std::string concept_mode_name(ConceptMode mode) {
  return mode == ConceptMode::Desensitize ? "desensitize" : "sensitize";
}

ConceptMode concept_mode_from_name(const std::string& name) {
  if (name == "desensitize") return ConceptMode::Desensitize;
  if (name == "sensitize") return ConceptMode::Sensitize;
  throw ConfigError("unknown concept mode \"" + name + "\"");
}

Tensor concept_loss(const Tensor& hook_batch, const std::vector<Cav>& cavs,
                    const PrototypeBank& bank, const std::vector<int>& labels,
                    ConceptMode mode) {
  const Shape& s = hook_batch.shape();
  if (s.empty() || s[0] == 0) throw ShapeError("concept_loss: empty hook batch");
  const int b = s[0];
  if (static_cast<int>(labels.size()) != b) {
    throw ShapeError("concept_loss: " + std::to_string(b) + " samples vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const int64_t d = hook_batch.size() / b;
  if (d != bank.dim()) {
    throw ShapeError("concept_loss: hook dim " + std::to_string(d) +
                     " vs prototype dim " + std::to_string(bank.dim()));
  }
  const Tensor flat = s.size() == 2 ? hook_batch : flatten(hook_batch);
  if (cavs.empty()) return scale(sum(flat), 0.0);
  for (const Cav& cav : cavs) {
    if (cav.vector.size() != d) {
      throw ShapeError("concept_loss: CAV \"" + cav.name + "\" has dim " +
                       std::to_string(cav.vector.size()) + ", hook dim " +
                       std::to_string(d));
    }
  }

  // Constant per-sample class means, plus a mask for samples whose gradient
  // is too small to carry a direction.
  Eigen::ArrayXd pbar(static_cast<int64_t>(b) * d);
  Eigen::ArrayXd mask_values(b);
  int kept = 0;
  for (int i = 0; i < b; ++i) {
    if (labels[i] < 0 || labels[i] >= bank.num_classes()) {
      throw ConfigError("concept_loss: label " + std::to_string(labels[i]) +
                        " outside [0," + std::to_string(bank.num_classes()) + ")");
    }
    const Eigen::RowVectorXd& mean = bank.class_mean(labels[i]);
    Eigen::Map<Eigen::RowVectorXd>(pbar.data() + i * d, d) = mean;
    const Eigen::Map<const Eigen::RowVectorXd> f(hook_batch.values().data() + i * d, d);
    const double gnorm = 2.0 * (f - mean).norm();
    mask_values(i) = gnorm < kDegenerateNorm ? 0.0 : 1.0;
    kept += mask_values(i) > 0.0 ? 1 : 0;
  }
  if (mode == ConceptMode::Sensitize && kept == 0) {
    // Nothing to sensitize: pin the loss at its ceiling with zero gradient.
    return add_scalar(scale(sum(flat), 0.0), 1.0);
  }

  const Tensor pbar_rows = Tensor::make({b, static_cast<int>(d)}, std::move(pbar));
  const Tensor mask = Tensor::make({b, 1}, mask_values);
  Eigen::ArrayXd unmask_values = 1.0 - mask_values;
  const Tensor unmasked = Tensor::make({b, 1}, std::move(unmask_values));

  const Tensor g = scale(sub(flat, pbar_rows), 2.0);
  // Masked rows would divide ~0 by ~0; pinning their denominator to one
  // keeps the forward values finite, and the mask zeroes their alignment.
  const Tensor norms = reshape(row_l2_norm(g), {b, 1});
  const Tensor safe_norms = add(mul(norms, mask), unmasked);

  Tensor alignment_sum;
  for (const Cav& cav : cavs) {
    Eigen::ArrayXd v(d);
    for (int64_t j = 0; j < d; ++j) v(j) = cav.vector(j);
    const Tensor direction = Tensor::make({static_cast<int>(d), 1}, std::move(v));
    const Tensor cos_abs = div(abs(matmul(g, direction)), safe_norms);
    const Tensor per_cav = sum(mul(cos_abs, mask));
    alignment_sum = alignment_sum.defined() ? add(alignment_sum, per_cav) : per_cav;
  }
  const double denom = mode == ConceptMode::Desensitize ? b : kept;
  const Tensor mean_alignment =
      scale(alignment_sum, 1.0 / (denom * static_cast<double>(cavs.size())));
  if (mode == ConceptMode::Desensitize) return mean_alignment;
  return add_scalar(scale(mean_alignment, -1.0), 1.0);
}

void DistillConfig::validate() const {
  if (lambda < 0.0) throw ConfigError("distill config: lambda must be >= 0");
  if (cav_update_frequency < 0 || proto_update_frequency < 0) {
    throw ConfigError("distill config: update frequencies must be >= 0");
  }
  if (clusters < 1) throw ConfigError("distill config: clusters must be >= 1");
  if (!(alpha > 0.0) || alpha > 1.0) {
    throw ConfigError("distill config: alpha must be in (0,1]");
  }
  if (epochs < 0) throw ConfigError("distill config: epochs must be >= 0");
  if (batch < 1) throw ConfigError("distill config: batch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("distill config: lr must be > 0");
  if (mapping_epochs < 1 || mapping_epochs > 5) {
    throw ConfigError("distill config: mapping_epochs must be in [1,5]");
  }
}

Json DistillConfig::to_json() const {
  return Json{{"lambda", lambda},
              {"mode", concept_mode_name(mode)},
              {"cav_update_frequency", cav_update_frequency},
              {"proto_update_frequency", proto_update_frequency},
              {"clusters", clusters},
              {"alpha", alpha},
              {"epochs", epochs},
              {"batch", batch},
              {"lr", lr},
              {"seed", seed},
              {"use_teacher", use_teacher},
              {"use_prototypes", use_prototypes},
              {"mapping_epochs", mapping_epochs}};
}

DistillConfig DistillConfig::from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("distill config: expected a JSON object");
  static const std::vector<std::string> known = {
      "lambda",   "mode",   "cav_update_frequency", "proto_update_frequency",
      "clusters", "alpha",  "epochs",               "batch",
      "lr",       "seed",   "use_teacher",          "use_prototypes",
      "mapping_epochs"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("distill config: unknown key \"" + key + "\"");
    }
  }
  DistillConfig c;
  try {
    c.lambda = j.value("lambda", c.lambda);
    if (j.contains("mode")) c.mode = concept_mode_from_name(j.at("mode").get<std::string>());
    c.cav_update_frequency = j.value("cav_update_frequency", c.cav_update_frequency);
    c.proto_update_frequency =
        j.value("proto_update_frequency", c.proto_update_frequency);
    c.clusters = j.value("clusters", c.clusters);
    c.alpha = j.value("alpha", c.alpha);
    c.epochs = j.value("epochs", c.epochs);
    c.batch = j.value("batch", c.batch);
    c.lr = j.value("lr", c.lr);
    c.seed = j.value("seed", c.seed);
    c.use_teacher = j.value("use_teacher", c.use_teacher);
    c.use_prototypes = j.value("use_prototypes", c.use_prototypes);
    c.mapping_epochs = j.value("mapping_epochs", c.mapping_epochs);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("distill config: malformed JSON (") + e.what() + ")");
  }
  c.validate();
  return c;
}

Json TrainReport::to_json() const {
  Json epochs_json = Json::array();
  for (size_t i = 0; i < epochs.size(); ++i) {
    Json e = {{"epoch", i},
              {"loss_task", round6(epochs[i].loss_task)},
              {"loss_concept", round6(epochs[i].loss_concept)},
              {"train_acc", round6(epochs[i].train_acc)},
              {"val_acc", round6(epochs[i].val_acc)}};
    if (i < test_accuracy_per_epoch.size()) {
      e["test_acc"] = rounded_map(test_accuracy_per_epoch[i]);
    }
    epochs_json.push_back(std::move(e));
  }
  return Json{{"config", config},
              {"epochs", epochs_json},
              {"best_epoch", best_epoch},
              {"best_val_acc", round6(best_val_acc)},
              {"test_accuracy", rounded_map(test_accuracy)},
              {"valid_cavs", valid_cavs},
              {"cav_refits", cav_refits},
              {"tcav_before", rounded_map(tcav_before)},
              {"tcav_after", rounded_map(tcav_after)},
              {"probe_accuracy_before", round6(probe_accuracy_before)},
              {"probe_accuracy_after", round6(probe_accuracy_after)},
              {"warnings", warnings}};
}

TrainReport distill_train(Model& student, const Model* teacher,
                          const std::vector<ConceptSet>& concepts,
                          const std::map<std::string, Dataset>& splits,
                          const DistillConfig& config) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  if (config.use_teacher && teacher == nullptr) {
    throw ConfigError("distill_train: use_teacher requires a teacher model");
  }
  if (concepts.empty()) throw ConfigError("distill_train: no concept sets");
  const auto train_it = splits.find("train");
  const auto val_it = splits.find("val");
  if (train_it == splits.end() || val_it == splits.end()) {
    throw ConfigError("distill_train: splits must include \"train\" and \"val\"");
  }
  const Dataset& train = train_it->second;
  const Dataset& val = val_it->second;

  TrainReport report;
  report.config = config.to_json();

  std::optional<PrototypeBank> bank;
  if (config.use_prototypes) {
    bank.emplace(init_prototypes(student, train, config.clusters, config.alpha,
                                 mix_seed(config.seed, kStreamProtoInit)));
  }
  const PrototypeBank* bank_ptr = bank ? &*bank : nullptr;

  measure_tcav(student, concepts.front(), val, bank_ptr,
               mix_seed(config.seed, kStreamTcavBefore), report.tcav_before,
               report.probe_accuracy_before);

  // The concept term only exists with prototypes: its gradient source is the
  // closed-form prototype-loss gradient.  Without them (or with lambda = 0)
  // the run reduces to plain fine-tuning plus reporting.
  const bool distilling = config.lambda > 0.0 && config.use_prototypes;
  std::vector<Cav> cavs;
  LoopHooks hooks;
  Tensor concept_pool;
  if (distilling && config.use_teacher) {
    // The mapping trains on every concept image, positives and negatives.
    int total = 0;
    for (const ConceptSet& cs : concepts) {
      total += cs.positives.shape()[0] + cs.negatives.shape()[0];
    }
    const Shape& img = concepts.front().positives.shape();
    Eigen::ArrayXd pool(static_cast<int64_t>(total) * img[1] * img[2] * img[3]);
    int64_t offset = 0;
    for (const ConceptSet& cs : concepts) {
      pool.segment(offset, cs.positives.size()) = cs.positives.values();
      offset += cs.positives.size();
      pool.segment(offset, cs.negatives.size()) = cs.negatives.values();
      offset += cs.negatives.size();
    }
    concept_pool = Tensor::make({total, img[1], img[2], img[3]}, std::move(pool));
  }
  if (distilling) {
    auto refit = [&, teacher](int64_t iter) {
      const uint64_t seed = mix_seed(config.seed, kStreamCavRefit + iter);
      if (config.use_teacher) {
        const MappingModule mapping = fit_mapping(*teacher, student, concept_pool,
                                                  config.mapping_epochs,
                                                  mix_seed(seed, 0));
        cavs = learn_cavs_mapped(*teacher, mapping, concepts, mix_seed(seed, 1));
      } else {
        cavs = learn_cavs_student(student, concepts, mix_seed(seed, 1));
      }
      report.valid_cavs = static_cast<int>(cavs.size());
      ++report.cav_refits;
      if (cavs.empty()) {
        report.warnings.push_back("no valid CAVs at iteration " + std::to_string(iter) +
                                  "; concept loss inactive");
      }
    };
    hooks.pre_step = [&](int64_t iter) {
      if (iter == 0 ||
          (config.cav_update_frequency > 0 && iter % config.cav_update_frequency == 0)) {
        refit(iter);
      }
      if (config.proto_update_frequency > 0 && iter > 0 &&
          iter % config.proto_update_frequency == 0) {
        update_prototypes(*bank, student, train, config.alpha,
                          mix_seed(config.seed, kStreamProtoRefresh + iter));
      }
    };
    hooks.extra_loss = [&](const Tensor& hook, const std::vector<int>& labels,
                           int64_t) -> Tensor {
      if (cavs.empty()) return Tensor{};
      return scale(concept_loss(hook, cavs, *bank, labels, config.mode), config.lambda);
    };
  }
  hooks.post_epoch = [&](int, const EpochMetrics&) {
    report.test_accuracy_per_epoch.push_back(test_variant_accuracy(student, splits));
  };

  TrainOptions opts;
  opts.epochs = config.epochs;
  opts.batch = config.batch;
  opts.seed = config.seed;
  opts.lr = config.lr;
  const FitResult fit = run_training_loop(student, train, val, opts, hooks);
  report.epochs = fit.epochs;
  report.best_epoch = fit.best_epoch;
  report.best_val_acc = fit.best_val_acc;

  report.test_accuracy = test_variant_accuracy(student, splits);
  measure_tcav(student, concepts.front(), val, bank_ptr,
               mix_seed(config.seed, kStreamTcavAfter), report.tcav_after,
               report.probe_accuracy_after);

  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

}  // namespace cdt
