#include "cdt/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace cdt {

namespace {

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Dense: return "dense";
    case LayerKind::TConv: return "tconv";
    case LayerKind::Sigmoid: return "sigmoid";
  }
  throw ContractError("kind_name: unknown layer kind");
}

LayerKind kind_from_name(const std::string& s) {
  if (s == "conv") return LayerKind::Conv;
  if (s == "relu") return LayerKind::Relu;
  if (s == "maxpool") return LayerKind::MaxPool;
  if (s == "flatten") return LayerKind::Flatten;
  if (s == "dense") return LayerKind::Dense;
  if (s == "tconv") return LayerKind::TConv;
  if (s == "sigmoid") return LayerKind::Sigmoid;
  throw ConfigError("model spec: unknown layer kind \"" + s + "\"");
}

void assign_names(std::vector<LayerDesc>& layers) {
  std::map<LayerKind, int> counters;
  for (LayerDesc& l : layers) {
    l.name = std::string(kind_name(l.kind)) + std::to_string(++counters[l.kind]);
  }
}

bool has_params(LayerKind k) {
  return k == LayerKind::Conv || k == LayerKind::Dense || k == LayerKind::TConv;
}

// Canonical (name, shape) listing of a spec's parameters — the single
// source of truth shared by initialization and checkpoint validation.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelSpec& spec) {
  std::vector<std::pair<std::string, Shape>> layout;
  for (const LayerDesc& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        layout.emplace_back(l.name + ".kernel", Shape{l.out, l.in, l.k, l.k});
        layout.emplace_back(l.name + ".bias", Shape{l.out});
        break;
      case LayerKind::TConv:
        layout.emplace_back(l.name + ".kernel", Shape{l.in, l.out, l.k, l.k});
        layout.emplace_back(l.name + ".bias", Shape{l.out});
        break;
      case LayerKind::Dense:
        layout.emplace_back(l.name + ".weight", Shape{l.in, l.out});
        layout.emplace_back(l.name + ".bias", Shape{l.out});
        break;
      default:
        break;
    }
  }
  return layout;
}

int fan_in(const LayerDesc& l) {
  return l.kind == LayerKind::Dense ? l.in : l.in * l.k * l.k;
}

}  // namespace

ModelSpec ModelSpec::default_student() {
  ModelSpec spec;
  spec.layers = {
      {LayerKind::Conv, 3, 8, 3, 1, ""},   {LayerKind::Relu, 0, 0, 0, 1, ""},
      {LayerKind::MaxPool, 0, 0, 0, 1, ""}, {LayerKind::Conv, 8, 16, 3, 1, ""},
      {LayerKind::Relu, 0, 0, 0, 1, ""},   {LayerKind::MaxPool, 0, 0, 0, 1, ""},
      {LayerKind::Flatten, 0, 0, 0, 1, ""}, {LayerKind::Dense, 256, 32, 0, 1, ""},
      {LayerKind::Relu, 0, 0, 0, 1, ""},   {LayerKind::Dense, 32, 10, 0, 1, ""},
  };
  assign_names(spec.layers);
  spec.hook = "relu2";
  spec.validate();
  return spec;
}

ModelSpec ModelSpec::default_teacher() {
  ModelSpec spec;
  spec.layers = {
      {LayerKind::Conv, 3, 16, 3, 1, ""},  {LayerKind::Relu, 0, 0, 0, 1, ""},
      {LayerKind::MaxPool, 0, 0, 0, 1, ""}, {LayerKind::Conv, 16, 32, 3, 1, ""},
      {LayerKind::Relu, 0, 0, 0, 1, ""},   {LayerKind::MaxPool, 0, 0, 0, 1, ""},
      {LayerKind::Conv, 32, 32, 3, 1, ""}, {LayerKind::Relu, 0, 0, 0, 1, ""},
      {LayerKind::Flatten, 0, 0, 0, 1, ""}, {LayerKind::Dense, 512, 64, 0, 1, ""},
      {LayerKind::Relu, 0, 0, 0, 1, ""},   {LayerKind::Dense, 64, 10, 0, 1, ""},
  };
  assign_names(spec.layers);
  spec.hook = "relu3";
  spec.validate();
  return spec;
}

std::vector<Shape> ModelSpec::output_shapes(int batch) const {
  if (input.size() != 3) {
    throw ConfigError("model spec: input must be [C,H,W], got " +
                      shape_to_string(input));
  }
  Shape cur = {batch, input[0], input[1], input[2]};
  std::vector<Shape> shapes;
  shapes.reserve(layers.size());
  for (const LayerDesc& l : layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        if (cur.size() != 4 || cur[1] != l.in) {
          throw ConfigError("model spec: " + l.name + " expects " +
                            std::to_string(l.in) + " channels, input is " +
                            shape_to_string(cur));
        }
        if (l.k < 1 || l.k % 2 == 0 || l.out < 1 || (l.stride != 1 && l.stride != 2)) {
          throw ConfigError("model spec: " + l.name + " needs odd k, out > 0, stride 1|2");
        }
        cur = {cur[0], l.out, (cur[2] - 1) / l.stride + 1, (cur[3] - 1) / l.stride + 1};
        break;
      case LayerKind::TConv:
        if (cur.size() != 4 || cur[1] != l.in) {
          throw ConfigError("model spec: " + l.name + " expects " +
                            std::to_string(l.in) + " channels, input is " +
                            shape_to_string(cur));
        }
        if (l.k < 1 || l.k % 2 == 0 || l.out < 1 || (l.stride != 1 && l.stride != 2)) {
          throw ConfigError("model spec: " + l.name + " needs odd k, out > 0, stride 1|2");
        }
        cur = {cur[0], l.out, cur[2] * l.stride, cur[3] * l.stride};
        break;
      case LayerKind::Relu:
      case LayerKind::Sigmoid:
        break;
      case LayerKind::MaxPool:
        if (cur.size() != 4 || cur[2] % 2 != 0 || cur[3] % 2 != 0) {
          throw ConfigError("model spec: " + l.name + " needs even extents, input is " +
                            shape_to_string(cur));
        }
        cur = {cur[0], cur[1], cur[2] / 2, cur[3] / 2};
        break;
      case LayerKind::Flatten:
        if (cur.size() != 4) {
          throw ConfigError("model spec: " + l.name + " expects spatial input");
        }
        cur = {cur[0], cur[1] * cur[2] * cur[3]};
        break;
      case LayerKind::Dense:
        if (cur.size() != 2 || cur[1] != l.in) {
          throw ConfigError("model spec: " + l.name + " expects width " +
                            std::to_string(l.in) + ", input is " + shape_to_string(cur));
        }
        cur = {cur[0], l.out};
        break;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

void ModelSpec::validate() const {
  if (layers.empty()) throw ConfigError("model spec: no layers");
  output_shapes(1);
  if (hook.empty()) throw ConfigError("model spec: hook layer not set");
  bool found = false;
  for (const LayerDesc& l : layers) found = found || l.name == hook;
  if (!found) {
    throw ConfigError("model spec: hook layer \"" + hook + "\" does not exist");
  }
}

Shape ModelSpec::hook_shape(int batch) const {
  const auto shapes = output_shapes(batch);
  for (size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == hook) return shapes[i];
  }
  throw ConfigError("model spec: hook layer \"" + hook + "\" does not exist");
}

Json ModelSpec::to_json() const {
  Json layers_json = Json::array();
  for (const LayerDesc& l : layers) {
    Json j = {{"kind", kind_name(l.kind)}};
    if (has_params(l.kind)) {
      j["in"] = l.in;
      j["out"] = l.out;
      if (l.kind != LayerKind::Dense) {
        j["k"] = l.k;
        j["stride"] = l.stride;
      }
    }
    layers_json.push_back(std::move(j));
  }
  return Json{{"input", input}, {"hook", hook}, {"layers", layers_json}};
}

ModelSpec ModelSpec::from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("model spec: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "input" && key != "hook" && key != "layers") {
      throw ConfigError("model spec: unknown key \"" + key + "\"");
    }
  }
  ModelSpec spec;
  try {
    if (j.contains("input")) spec.input = j.at("input").get<Shape>();
    spec.hook = j.at("hook").get<std::string>();
    for (const Json& lj : j.at("layers")) {
      LayerDesc l;
      l.kind = kind_from_name(lj.at("kind").get<std::string>());
      for (const auto& [key, _] : lj.items()) {
        const bool known =
            key == "kind" ||
            (has_params(l.kind) && (key == "in" || key == "out")) ||
            ((l.kind == LayerKind::Conv || l.kind == LayerKind::TConv) &&
             (key == "k" || key == "stride"));
        if (!known) {
          throw ConfigError("model spec: unknown key \"" + key + "\" on layer \"" +
                            lj.at("kind").get<std::string>() + "\"");
        }
      }
      if (has_params(l.kind)) {
        l.in = lj.at("in").get<int>();
        l.out = lj.at("out").get<int>();
        if (l.kind != LayerKind::Dense) {
          l.k = lj.at("k").get<int>();
          l.stride = lj.value("stride", 1);
        }
      }
      spec.layers.push_back(std::move(l));
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("model spec: malformed JSON (") + e.what() + ")");
  }
  assign_names(spec.layers);
  spec.validate();
  return spec;
}

Model Model::build(const ModelSpec& spec, uint64_t seed) {
  spec.validate();
  Model model;
  model.spec = spec;
  Rng rng(seed);
  for (const LayerDesc& l : spec.layers) {
    if (!has_params(l.kind)) continue;
    const double bound = std::sqrt(6.0 / fan_in(l));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (const auto& [name, shape] : parameter_layout({{l}, spec.hook, spec.input})) {
      // parameter_layout on the single layer yields kernel/weight then bias.
      if (name.ends_with(".bias")) {
        model.params.emplace(name, Tensor::zeros(shape, true));
      } else {
        Eigen::ArrayXd v(numel(shape));
        for (int64_t i = 0; i < v.size(); ++i) v(i) = dist(rng);
        model.params.emplace(name, Tensor::make(shape, std::move(v), true));
      }
    }
  }
  return model;
}

Model::Forward Model::forward(const Tensor& batch) const {
  if (batch.shape().size() != 4 || batch.shape()[1] != spec.input[0] ||
      batch.shape()[2] != spec.input[1] || batch.shape()[3] != spec.input[2]) {
    throw ShapeError("forward: batch " + shape_to_string(batch.shape()) +
                     " does not match model input " + shape_to_string(spec.input));
  }
  Tensor cur = batch;
  Forward out;
  auto param = [this](const std::string& name) -> const Tensor& {
    auto it = params.find(name);
    if (it == params.end()) {
      throw ContractError("forward: missing parameter \"" + name + "\"");
    }
    return it->second;
  };
  for (const LayerDesc& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        cur = conv2d(cur, param(l.name + ".kernel"), param(l.name + ".bias"),
                     l.stride);
        break;
      case LayerKind::TConv:
        cur = transposed_conv2d(cur, param(l.name + ".kernel"),
                                param(l.name + ".bias"), l.stride);
        break;
      case LayerKind::Relu:
        cur = relu(cur);
        break;
      case LayerKind::Sigmoid:
        cur = sigmoid(cur);
        break;
      case LayerKind::MaxPool:
        cur = maxpool2d(cur);
        break;
      case LayerKind::Flatten:
        cur = flatten(cur);
        break;
      case LayerKind::Dense:
        cur = add_bias(matmul(cur, param(l.name + ".weight")), param(l.name + ".bias"));
        break;
    }
    if (l.name == spec.hook) out.hook = cur;
  }
  out.logits = cur;
  return out;
}

ParameterSet Model::snapshot_params() const {
  ParameterSet copy;
  for (const auto& [name, p] : params) {
    copy.emplace(name, Tensor::make(p.shape(), p.values(), true));
  }
  return copy;
}

void Model::restore_params(const ParameterSet& snapshot) {
  if (snapshot.size() != params.size()) {
    throw ContractError("restore_params: parameter sets differ in size");
  }
  for (auto& [name, p] : params) {
    auto it = snapshot.find(name);
    if (it == snapshot.end() || it->second.shape() != p.shape()) {
      throw ContractError("restore_params: snapshot lacks \"" + name + "\"");
    }
    p.values_mut() = it->second.values();
    p.zero_grad();
  }
}

Tensor take_rows(const Tensor& t, const std::vector<int>& idx) {
  if (t.shape().empty()) throw ShapeError("take_rows: scalar input");
  const int n = t.shape()[0];
  const int64_t row = t.size() / n;
  Eigen::ArrayXd v(static_cast<int64_t>(idx.size()) * row);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n) {
      throw ShapeError("take_rows: index " + std::to_string(idx[i]) +
                       " outside batch of " + std::to_string(n));
    }
    v.segment(static_cast<int64_t>(i) * row, row) =
        t.values().segment(static_cast<int64_t>(idx[i]) * row, row);
  }
  Shape shape = t.shape();
  shape[0] = static_cast<int>(idx.size());
  return Tensor::make(std::move(shape), std::move(v));
}

void AdamState::step(ParameterSet& params) {
  bool any_grad = false;
  for (const auto& [name, p] : params) any_grad = any_grad || p.has_grad();
  if (!any_grad) {
    throw ContractError("adam: no parameter carries a gradient");
  }
  t += 1;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (auto& [name, p] : params) {
    const int64_t n = p.size();
    Eigen::ArrayXd& m = m_[name];
    Eigen::ArrayXd& v = v_[name];
    if (m.size() == 0) {
      m = Eigen::ArrayXd::Zero(n);
      v = Eigen::ArrayXd::Zero(n);
    }
    Eigen::ArrayXd g =
        p.has_grad() ? p.impl()->grad : Eigen::ArrayXd::Zero(n);
    if (weight_decay != 0.0) g += weight_decay * p.values();
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.square();
    p.values_mut() -= lr * (m / c1) / ((v / c2).sqrt() + eps);
    if (!p.values().allFinite()) {
      throw NumericError("adam: parameter \"" + name + "\" became non-finite");
    }
    p.zero_grad();
  }
}

double accuracy(const Model& model, const Dataset& data, int eval_batch) {
  if (data.size() == 0) throw ConfigError("accuracy: empty dataset");
  NoTapeScope no_tape;
  const int n = data.size();
  int correct = 0;
  std::vector<int> idx;
  for (int start = 0; start < n; start += eval_batch) {
    const int stop = std::min(n, start + eval_batch);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    Tensor logits = model.forward(take_rows(data.images, idx)).logits;
    const int classes = logits.shape()[1];
    for (int i = 0; i < stop - start; ++i) {
      int best = 0;
      for (int c = 1; c < classes; ++c) {
        if (logits.value_at(static_cast<int64_t>(i) * classes + c) >
            logits.value_at(static_cast<int64_t>(i) * classes + best)) {
          best = c;
        }
      }
      correct += best == data.labels[idx[i]];
    }
  }
  return static_cast<double>(correct) / n;
}

RowMat hook_activations(const Model& model, const Tensor& images, int eval_batch) {
  const Shape& s = images.shape();
  if (s.empty() || s[0] == 0) throw ConfigError("hook_activations: empty batch");
  NoTapeScope no_tape;
  const int n = s[0];
  const Shape hs = model.spec.hook_shape(1);
  int64_t d = 1;
  for (size_t i = 1; i < hs.size(); ++i) d *= hs[i];
  RowMat acts(n, d);
  std::vector<int> idx;
  for (int start = 0; start < n; start += eval_batch) {
    const int stop = std::min(n, start + eval_batch);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    Tensor hook = model.forward(take_rows(images, idx)).hook;
    acts.middleRows(start, stop - start) =
        Eigen::Map<const RowMat>(hook.values().data(), stop - start, d);
  }
  return acts;
}

FitResult run_training_loop(Model& model, const Dataset& train, const Dataset& val,
                            const TrainOptions& opts, const LoopHooks& hooks) {
  if (train.size() == 0 || val.size() == 0) {
    throw ConfigError("training requires non-empty train and val sets");
  }
  if (opts.epochs < 0 || opts.batch < 1) {
    throw ConfigError("training needs epochs >= 0 and batch >= 1");
  }
  AdamState adam(opts.lr);
  Rng rng(opts.seed);
  FitResult res;
  ParameterSet best;
  double best_val = -1.0;
  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> batch_idx;
  std::vector<int> batch_labels;
  int64_t iter = 0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    // The only consumer of the loop RNG: everything else draws from seeds
    // derived elsewhere, so optional hooks never shift the trajectory.
    std::shuffle(order.begin(), order.end(), rng);
    double sum_task = 0.0, sum_extra = 0.0;
    int steps = 0;
    for (int start = 0; start < train.size(); start += opts.batch) {
      const int stop = std::min(train.size(), start + opts.batch);
      batch_idx.assign(order.begin() + start, order.begin() + stop);
      batch_labels.clear();
      for (int i : batch_idx) batch_labels.push_back(train.labels[i]);
      if (hooks.pre_step) hooks.pre_step(iter);
      Tensor xb = take_rows(train.images, batch_idx);
      Tape tape;
      TapeScope scope(tape);
      Model::Forward fw = model.forward(xb);
      Tensor task = softmax_cross_entropy(fw.logits, batch_labels);
      Tensor total = task;
      if (hooks.extra_loss) {
        Tensor extra = hooks.extra_loss(fw.hook, batch_labels, iter);
        if (extra.defined()) {
          sum_extra += extra.scalar_value();
          total = add(task, extra);
        }
      }
      backward(total);
      adam.step(model.params);
      sum_task += task.scalar_value();
      ++steps;
      ++iter;
    }
    EpochMetrics em;
    em.loss_task = sum_task / steps;
    em.loss_concept = sum_extra / steps;
    em.train_acc = accuracy(model, train);
    em.val_acc = accuracy(model, val);
    res.epochs.push_back(em);
    if (em.val_acc > best_val) {
      best_val = em.val_acc;
      res.best_epoch = epoch;
      best = model.snapshot_params();
    }
    if (hooks.post_epoch) hooks.post_epoch(epoch, em);
  }
  if (res.best_epoch >= 0) {
    model.restore_params(best);
    res.best_val_acc = best_val;
  }
  return res;
}

FitResult train_classifier(Model& model, const Dataset& train, const Dataset& val,
                           const TrainOptions& opts) {
  return run_training_loop(model, train, val, opts, LoopHooks{});
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  model.spec.validate();
  Json tensors = Json::array();
  int64_t offset = 0;
  for (const auto& [name, p] : model.params) {
    tensors.push_back(
        {{"name", name}, {"shape", p.shape()}, {"offset", offset}});
    offset += p.size() * static_cast<int64_t>(sizeof(double));
  }
  Json manifest = {{"arch", model.spec.to_json()},
                   {"tensors", tensors},
                   {"payload_bytes", offset}};
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_magic_json(out, "CDST1", manifest);
  for (const auto& [name, p] : model.params) {
    write_f64(out, p.values().data(), p.size());
  }
  if (!out) throw IoError("write failed on " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  const std::string what = "checkpoint " + path.string();
  Json manifest = read_magic_json(in, "CDST1", what);
  ModelSpec spec;
  int64_t payload_bytes = 0;
  std::vector<std::pair<std::string, Shape>> entries;
  std::vector<int64_t> offsets;
  try {
    spec = ModelSpec::from_json(manifest.at("arch"));
    payload_bytes = manifest.at("payload_bytes").get<int64_t>();
    for (const Json& tj : manifest.at("tensors")) {
      entries.emplace_back(tj.at("name").get<std::string>(), tj.at("shape").get<Shape>());
      offsets.push_back(tj.at("offset").get<int64_t>());
    }
  } catch (const Json::exception& e) {
    throw IoError(what + ": malformed manifest (" + e.what() + ")");
  }
  std::map<std::string, Shape> expected;
  for (const auto& [name, shape] : parameter_layout(spec)) expected.emplace(name, shape);
  if (entries.size() != expected.size()) {
    throw IoError(what + ": manifest lists " + std::to_string(entries.size()) +
                  " tensors, architecture has " + std::to_string(expected.size()));
  }
  // Offsets must tile the payload exactly: contiguous, non-overlapping,
  // in-bounds — checked before any payload byte is consumed.
  int64_t running = 0;
  for (size_t i = 0; i < entries.size(); ++i) {
    auto it = expected.find(entries[i].first);
    if (it == expected.end() || it->second != entries[i].second) {
      throw IoError(what + ": tensor \"" + entries[i].first +
                    "\" does not match the architecture");
    }
    expected.erase(it);
    if (offsets[i] != running) {
      throw IoError(what + ": tensor \"" + entries[i].first +
                    "\" offset overlaps or leaves a gap");
    }
    running += numel(entries[i].second) * static_cast<int64_t>(sizeof(double));
  }
  if (running != payload_bytes) {
    throw IoError(what + ": payload_bytes disagrees with the tensor index");
  }
  Model model;
  model.spec = spec;
  for (const auto& [name, shape] : entries) {
    Eigen::ArrayXd v(numel(shape));
    read_f64(in, v.data(), v.size(), what);
    model.params.emplace(name, Tensor::make(shape, std::move(v), true));
  }
  return model;
}

}  // namespace cdt
