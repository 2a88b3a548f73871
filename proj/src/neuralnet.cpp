#include "fsr/neuralnet.hpp"

#include "fsr/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fsr {

DenseLayer DenseLayer::identity(int n) { return {Matrix::Identity(n, n), Vector::Zero(n)}; }

DenseLayer DenseLayer::zeros(int out, int in) { return {Matrix::Zero(out, in), Vector::Zero(out)}; }

MlpModel MlpModel::zeros(int input_dim, const std::vector<int>& hidden, int num_classes) {
  MlpModel m;
  int in = input_dim;
  for (int h : hidden) {
    m.layers.push_back(DenseLayer::zeros(h, in));
    in = h;
  }
  m.layers.push_back(DenseLayer::zeros(num_classes, in));
  return m;
}

MlpModel MlpModel::create(int input_dim, const std::vector<int>& hidden, int num_classes, std::uint64_t seed) {
  if (input_dim < 1 || num_classes < 2) throw ConfigError("mlp: invalid layer sizes");
  for (int h : hidden)
    if (h < 1) throw ConfigError("mlp: hidden layer sizes must be positive");
  MlpModel m = zeros(input_dim, hidden, num_classes);
  std::mt19937_64 rng(seed);
  for (auto& layer : m.layers) {
    const double limit = std::sqrt(6.0 / (layer.in() + layer.out()));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = u(rng);
  }
  return m;
}

std::vector<int> MlpModel::hidden_sizes() const {
  std::vector<int> out;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) out.push_back(layers[l].out());
  return out;
}

Matrix MlpModel::logits(const Matrix& inputs) const {
  if (inputs.cols() != input_dim()) throw DataError("dimension mismatch: network input");
  Matrix h = inputs;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Matrix z = (h * layers[l].weight.transpose()).rowwise() + layers[l].bias.transpose();
    h = l + 1 < layers.size() ? Matrix(z.cwiseMax(0.0)) : std::move(z);
  }
  return h;
}

Matrix MlpModel::posteriors(const Matrix& inputs) const { return softmax_rows(logits(inputs)); }

Vector forward(const MlpModel& model, const Vector& window) {
  return model.posteriors(window.transpose()).row(0).transpose();
}

std::string to_string(AdaptMode mode) {
  switch (mode) {
    case AdaptMode::None: return "none";
    case AdaptMode::LinUp: return "lin_up";
    case AdaptMode::LinLon: return "lin_lon";
    case AdaptMode::FineTune: return "fine_tune";
  }
  return "none";
}

AdaptMode adapt_mode_from_string(const std::string& s) {
  if (s == "none") return AdaptMode::None;
  if (s == "lin_up") return AdaptMode::LinUp;
  if (s == "lin_lon") return AdaptMode::LinLon;
  if (s == "fine_tune") return AdaptMode::FineTune;
  throw ConfigError("unknown adaptation mode '" + s + "' (expected none, lin_up, lin_lon, fine_tune)");
}

std::string to_string(LabelSource source) {
  return source == LabelSource::GroundTruth ? "ground_truth" : "forced_alignment";
}

LabelSource label_source_from_string(const std::string& s) {
  if (s == "ground_truth") return LabelSource::GroundTruth;
  if (s == "forced_alignment") return LabelSource::ForcedAlignment;
  throw ConfigError("unknown label source '" + s + "' (expected ground_truth, forced_alignment)");
}

// ---------------------------------------------------------------------------
// FrameClassifier

namespace {

// Applies the per-frame affine to every block of a raw window matrix.
Matrix apply_lin(const DenseLayer& lin, const Matrix& raw, int width) {
  const int k = lin.in();
  Matrix out(raw.rows(), raw.cols());
  for (int j = 0; j < width; ++j)
    out.middleCols(j * k, k) = (raw.middleCols(j * k, k) * lin.weight.transpose()).rowwise() + lin.bias.transpose();
  return out;
}

}  // namespace

Matrix FrameClassifier::logits_from_windows(const Matrix& raw_windows) const {
  Matrix z = lin ? net.logits(apply_lin(*lin, raw_windows, window.width)) : net.logits(raw_windows);
  if (lon) z = (z * lon->weight.transpose()).rowwise() + lon->bias.transpose();
  return z;
}

Matrix FrameClassifier::posteriors_from_windows(const Matrix& raw_windows) const {
  return softmax_rows(logits_from_windows(raw_windows));
}

Matrix FrameClassifier::posteriorgram(const Matrix& static_frames) const {
  if (static_frames.cols() != static_dim) throw DataError("dimension mismatch: static frame dimension");
  return posteriors_from_windows(window_concat(static_frames, window));
}

io::Json FrameClassifier::header() const {
  return {{"kind", "frame_classifier"},
          {"task", task},
          {"window", window.width},
          {"static_dim", static_dim},
          {"input_dim", net.input_dim()},
          {"hidden", net.hidden_sizes()},
          {"classes", net.num_classes()},
          {"adaptation", to_string(adaptation)},
          {"base_hash", base_hash}};
}

std::vector<io::NamedTensor> FrameClassifier::tensors() const {
  std::vector<io::NamedTensor> out;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    out.emplace_back("layer" + std::to_string(l) + ".weight", net.layers[l].weight);
    out.emplace_back("layer" + std::to_string(l) + ".bias", net.layers[l].bias.transpose());
  }
  if (lin) {
    out.emplace_back("lin.weight", lin->weight);
    out.emplace_back("lin.bias", lin->bias.transpose());
  }
  if (lon) {
    out.emplace_back("lon.weight", lon->weight);
    out.emplace_back("lon.bias", lon->bias.transpose());
  }
  return out;
}

void FrameClassifier::save(const io::fs::path& path) const { io::write_container(path, header(), tensors()); }

FrameClassifier FrameClassifier::load(const io::fs::path& path) {
  const auto c = io::read_container(path);
  if (c.header.value("kind", "") != "frame_classifier") throw DataError(path.string() + ": not a frame classifier");
  FrameClassifier m;
  m.task = c.header.at("task").get<int>();
  m.window.width = c.header.at("window").get<int>();
  m.static_dim = c.header.at("static_dim").get<int>();
  m.adaptation = adapt_mode_from_string(c.header.at("adaptation").get<std::string>());
  m.base_hash = c.header.value("base_hash", "");
  const auto n_layers = c.header.at("hidden").size() + 1;
  for (std::size_t l = 0; l < n_layers; ++l) {
    DenseLayer layer;
    layer.weight = c.tensor("layer" + std::to_string(l) + ".weight");
    layer.bias = c.tensor("layer" + std::to_string(l) + ".bias").transpose();
    m.net.layers.push_back(std::move(layer));
  }
  if (c.has("lin.weight")) m.lin = DenseLayer{c.tensor("lin.weight"), c.tensor("lin.bias").transpose()};
  if (c.has("lon.weight")) m.lon = DenseLayer{c.tensor("lon.weight"), c.tensor("lon.bias").transpose()};
  if (m.net.input_dim() != m.static_dim * m.window.width) throw DataError(path.string() + ": inconsistent input dimension");
  return m;
}

std::string FrameClassifier::content_hash() const {
  // Same bytes as save() would produce, without touching the filesystem.
  std::string bytes = header().dump();
  for (const auto& [name, m] : tensors()) {
    bytes += name;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const float f = static_cast<float>(m.data()[i]);
      bytes.append(reinterpret_cast<const char*>(&f), sizeof f);
    }
  }
  return io::sha256_hex(bytes);
}

void LabeledWindows::append(const Matrix& static_frames, const WindowConfig& window, const std::vector<int>& frame_labels) {
  if (static_cast<Eigen::Index>(frame_labels.size()) != static_frames.rows())
    throw DataError("labeled windows: label count differs from frame count");
  const Matrix w = window_concat(static_frames, window);
  if (inputs.size() == 0) {
    inputs = w;
  } else {
    if (inputs.cols() != w.cols()) throw DataError("labeled windows: dimension mismatch");
    Matrix grown(inputs.rows() + w.rows(), inputs.cols());
    grown << inputs, w;
    inputs.swap(grown);
  }
  labels.insert(labels.end(), frame_labels.begin(), frame_labels.end());
}

// ---------------------------------------------------------------------------
// Gradients

std::vector<ParamBlock> parameter_blocks(FrameClassifier& model, Trainable which) {
  std::vector<ParamBlock> out;
  const auto add = [&](DenseLayer& l, bool decay) {
    out.push_back({l.weight.data(), l.weight.size(), decay});
    out.push_back({l.bias.data(), l.bias.size(), false});
  };
  switch (which) {
    case Trainable::Network:
      for (auto& l : model.net.layers) add(l, true);
      break;
    case Trainable::LinUp:
      if (!model.lin) throw ConfigError("LIN+UP training requires an input transform");
      add(*model.lin, false);
      add(model.net.layers.back(), true);
      break;
    case Trainable::LinLon:
      if (!model.lin || !model.lon) throw ConfigError("LIN+LON training requires input and output transforms");
      add(*model.lin, false);
      add(*model.lon, false);
      break;
  }
  return out;
}

double loss_and_gradient(const FrameClassifier& model, const Matrix& raw_windows, const std::vector<int>& labels,
                         Trainable which, double weight_decay, FrameClassifier& grad, double dropout,
                         std::mt19937_64* rng) {
  const auto N = raw_windows.rows();
  if (N == 0 || static_cast<Eigen::Index>(labels.size()) != N) throw DataError("loss: empty or mislabeled batch");
  const auto& layers = model.net.layers;
  const std::size_t L = layers.size();
  const bool use_dropout = rng != nullptr && dropout > 0.0;
  const bool need_lin = which != Trainable::Network;

  // Forward pass, keeping pre-activations and dropout masks.
  std::vector<Matrix> acts;  // acts[l] = input to layer l
  std::vector<Matrix> pre;
  std::vector<Matrix> masks;
  acts.push_back(model.lin ? apply_lin(*model.lin, raw_windows, model.window.width) : raw_windows);
  std::bernoulli_distribution keep(1.0 - dropout);
  for (std::size_t l = 0; l + 1 < L; ++l) {
    Matrix z = (acts.back() * layers[l].weight.transpose()).rowwise() + layers[l].bias.transpose();
    Matrix h = z.cwiseMax(0.0);
    if (use_dropout) {
      Matrix mask(h.rows(), h.cols());
      for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? 1.0 / (1.0 - dropout) : 0.0;
      h = h.cwiseProduct(mask);
      masks.push_back(std::move(mask));
    }
    pre.push_back(std::move(z));
    acts.push_back(std::move(h));
  }
  const Matrix logits = (acts.back() * layers.back().weight.transpose()).rowwise() + layers.back().bias.transpose();
  const Matrix scores = model.lon ? Matrix((logits * model.lon->weight.transpose()).rowwise() + model.lon->bias.transpose())
                                  : logits;
  const Matrix probs = softmax_rows(scores);

  double loss = 0.0;
  Matrix delta = probs;
  for (Eigen::Index n = 0; n < N; ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    if (y < 0 || y >= probs.cols()) throw DataError("loss: label out of range");
    loss -= std::log(std::max(probs(n, y), 1e-300));
    delta(n, y) -= 1.0;
  }
  loss /= static_cast<double>(N);
  delta /= static_cast<double>(N);

  // Backward pass.
  if (model.lon) {
    if (which == Trainable::LinLon) {
      grad.lon->weight = delta.transpose() * logits;
      grad.lon->bias = delta.colwise().sum().transpose();
    }
    delta = delta * model.lon->weight;
  }
  const auto trains_layer = [&](std::size_t l) {
    return which == Trainable::Network || (which == Trainable::LinUp && l + 1 == L);
  };
  for (std::size_t l = L; l-- > 0;) {
    if (trains_layer(l)) {
      grad.net.layers[l].weight = delta.transpose() * acts[l];
      grad.net.layers[l].bias = delta.colwise().sum().transpose();
      loss += 0.5 * weight_decay * layers[l].weight.squaredNorm();
      grad.net.layers[l].weight += weight_decay * layers[l].weight;
    }
    const bool more_needed = l > 0 ? (which == Trainable::Network || need_lin) : need_lin;
    if (!more_needed) break;
    Matrix upstream = delta * layers[l].weight;
    if (l > 0) {
      upstream = upstream.cwiseProduct((pre[l - 1].array() > 0.0).cast<double>().matrix());
      if (use_dropout) upstream = upstream.cwiseProduct(masks[l - 1]);
    }
    delta = std::move(upstream);
  }
  if (need_lin) {
    const int k = model.static_dim;
    grad.lin->weight.setZero();
    grad.lin->bias.setZero();
    for (int j = 0; j < model.window.width; ++j) {
      grad.lin->weight += delta.middleCols(j * k, k).transpose() * raw_windows.middleCols(j * k, k);
      grad.lin->bias += delta.middleCols(j * k, k).colwise().sum().transpose();
    }
  }
  return loss;
}

double frame_accuracy(const FrameClassifier& model, const LabeledWindows& data) {
  if (data.size() == 0) return 0.0;
  const Matrix z = model.logits_from_windows(data.inputs);
  int correct = 0;
  for (Eigen::Index n = 0; n < z.rows(); ++n) {
    Eigen::Index arg;
    z.row(n).maxCoeff(&arg);
    correct += arg == data.labels[static_cast<std::size_t>(n)] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

void SgdMomentum::step(const std::vector<ParamBlock>& params, const std::vector<ParamBlock>& grads, double lr) {
  if (velocity.size() != params.size()) {
    velocity.clear();
    for (const auto& p : params) velocity.push_back(Vector::Zero(p.size));
  }
  for (std::size_t b = 0; b < params.size(); ++b) {
    Eigen::Map<Vector> p(params[b].data, params[b].size);
    Eigen::Map<const Vector> g(grads[b].data, grads[b].size);
    if (params[b].decay)
      velocity[b] = momentum * velocity[b] - lr * (g + weight_decay * p);
    else
      velocity[b] = momentum * velocity[b] - lr * g;
    p += velocity[b];
  }
}

// ---------------------------------------------------------------------------
// Configs

void TrainConfig::validate() const {
  if (minibatch < 1) throw ConfigError("train.minibatch: must be >= 1");
  if (max_epochs < 0) throw ConfigError("train.max_epochs: must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("train.dropout: must lie in [0, 1)");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train.momentum: must lie in [0, 1)");
  if (!(lr0 > 0.0)) throw ConfigError("train.lr0: must be positive");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay: must be >= 0");
  if (max_halvings < 1) throw ConfigError("train.max_halvings: must be >= 1");
  for (int h : hidden)
    if (h < 1) throw ConfigError("train.hidden: sizes must be positive");
}

TrainConfig TrainConfig::from_json(const io::Json& j) {
  TrainConfig c;
  io::reject_keys_outside(j, c.to_json(), "train");
  try {
    c.minibatch = j.value("minibatch", c.minibatch);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.dropout = j.value("dropout", c.dropout);
    c.momentum = j.value("momentum", c.momentum);
    c.lr0 = j.value("lr0", c.lr0);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.min_improvement = j.value("min_improvement", c.min_improvement);
    c.max_halvings = j.value("max_halvings", c.max_halvings);
    c.hidden = j.value("hidden", c.hidden);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
  } catch (const io::Json::exception& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  c.validate();
  return c;
}

io::Json TrainConfig::to_json() const {
  return {{"minibatch", minibatch},       {"max_epochs", max_epochs},     {"dropout", dropout},
          {"momentum", momentum},         {"lr0", lr0},                   {"weight_decay", weight_decay},
          {"min_improvement", min_improvement}, {"max_halvings", max_halvings}, {"hidden", hidden},
          {"rng_seed", rng_seed}};
}

AdaptConfig AdaptConfig::defaults_for(AdaptMode mode, const TrainConfig& base) {
  AdaptConfig c;
  c.mode = mode;
  c.rng_seed = base.rng_seed;
  if (mode == AdaptMode::FineTune) {
    c.minibatch = base.minibatch;
    c.max_epochs = base.max_epochs;
    c.momentum = base.momentum;
    c.lr0 = base.lr0;
    c.weight_decay = base.weight_decay;
    c.min_improvement = base.min_improvement;
    c.max_halvings = base.max_halvings;
  }
  return c;
}

AdaptConfig AdaptConfig::from_json(const io::Json& j, const TrainConfig& base) {
  io::reject_keys_outside(j, AdaptConfig{}.to_json(), "adapt");
  AdaptConfig c = defaults_for(adapt_mode_from_string(j.value("mode", std::string("lin_up"))), base);
  try {
    c.label_source = label_source_from_string(j.value("label_source", std::string("ground_truth")));
    c.minibatch = j.value("minibatch", c.minibatch);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.dropout = j.value("dropout", c.dropout);
    c.momentum = j.value("momentum", c.momentum);
    c.lr0 = j.value("lr0", c.lr0);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.min_improvement = j.value("min_improvement", c.min_improvement);
    c.max_halvings = j.value("max_halvings", c.max_halvings);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
  } catch (const io::Json::exception& e) {
    throw ConfigError(std::string("adapt: ") + e.what());
  }
  c.validate();
  return c;
}

io::Json AdaptConfig::to_json() const {
  return {{"mode", to_string(mode)}, {"label_source", to_string(label_source)},
          {"minibatch", minibatch},   {"max_epochs", max_epochs},
          {"dropout", dropout},       {"momentum", momentum},
          {"lr0", lr0},               {"weight_decay", weight_decay},
          {"min_improvement", min_improvement}, {"max_halvings", max_halvings},
          {"rng_seed", rng_seed}};
}

void AdaptConfig::validate() const {
  if (mode == AdaptMode::None) throw ConfigError("adapt.mode: an adaptation mode is required");
  if (minibatch < 1) throw ConfigError("adapt.minibatch: must be >= 1");
  if (max_epochs < 0) throw ConfigError("adapt.max_epochs: must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("adapt.dropout: must lie in [0, 1)");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("adapt.momentum: must lie in [0, 1)");
  if (!(lr0 > 0.0)) throw ConfigError("adapt.lr0: must be positive");
  if (max_halvings < 1) throw ConfigError("adapt.max_halvings: must be >= 1");
}

// ---------------------------------------------------------------------------
// Training

FrameClassifier fit(FrameClassifier model, const LabeledWindows& data, const LabeledWindows& select, Trainable which,
                    int minibatch, int max_epochs, double dropout, double momentum, double lr0, double weight_decay,
                    double min_improvement, int max_halvings, std::uint64_t seed, TrainingTrace* trace) {
  if (data.size() == 0) throw DataError("training data is empty");
  if (data.inputs.cols() != model.net.input_dim()) throw DataError("dimension mismatch: training windows");

  std::mt19937_64 rng(seed);
  FrameClassifier grad = model;
  SgdMomentum sgd{momentum, weight_decay, {}};
  const auto params = parameter_blocks(model, which);
  const auto grads = parameter_blocks(grad, which);

  FrameClassifier best = model;
  double best_acc = frame_accuracy(model, select);
  if (trace) {
    trace->selection_accuracy = {best_acc};
    trace->best_epoch = 0;
  }
  double lr = lr0;
  int stalled = 0;
  std::vector<int> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), 0);
  Matrix batch;
  std::vector<int> batch_labels;

  for (int epoch = 1; epoch <= max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(minibatch)) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(minibatch));
      batch.resize(static_cast<Eigen::Index>(e - b), data.inputs.cols());
      batch_labels.resize(e - b);
      for (std::size_t i = b; i < e; ++i) {
        batch.row(static_cast<Eigen::Index>(i - b)) = data.inputs.row(order[i]);
        batch_labels[i - b] = data.labels[static_cast<std::size_t>(order[i])];
      }
      // Decay is applied by the optimizer, not inside the loss gradient.
      loss_and_gradient(model, batch, batch_labels, which, 0.0, grad, dropout, &rng);
      sgd.step(params, grads, lr);
    }
    if (!model.net.layers.back().weight.allFinite()) throw NumericalError("training diverged");

    const double acc = frame_accuracy(model, select);
    if (trace) trace->selection_accuracy.push_back(acc);
    const bool improved = acc > best_acc + min_improvement;
    if (acc > best_acc) {
      best = model;
      best_acc = acc;
      if (trace) trace->best_epoch = epoch;
    }
    if (improved) {
      stalled = 0;
    } else {
      lr *= 0.5;
      if (++stalled >= max_halvings) break;
    }
  }
  return best;
}

FrameClassifier make_classifier(int task, int static_dim, const WindowConfig& window, int num_classes,
                                const TrainConfig& cfg) {
  window.validate();
  cfg.validate();
  FrameClassifier m;
  m.task = task;
  m.window = window;
  m.static_dim = static_dim;
  m.net = MlpModel::create(static_dim * window.width, cfg.hidden, num_classes, cfg.rng_seed * 7919 + static_cast<std::uint64_t>(task));
  return m;
}

FrameClassifier train(FrameClassifier model, const LabeledWindows& data, const LabeledWindows& held_out,
                      const TrainConfig& cfg, TrainingTrace* trace) {
  cfg.validate();
  if (model.adaptation != AdaptMode::None) throw ConfigError("train: model already carries adaptation layers");
  return fit(std::move(model), data, held_out, Trainable::Network, cfg.minibatch, cfg.max_epochs, cfg.dropout,
             cfg.momentum, cfg.lr0, cfg.weight_decay, cfg.min_improvement, cfg.max_halvings, cfg.rng_seed, trace);
}

FrameClassifier attach_adaptation(const FrameClassifier& base, AdaptMode mode) {
  if (base.adaptation != AdaptMode::None) throw ConfigError("adapt: base model is already adapted");
  FrameClassifier m = base;
  m.adaptation = mode;
  m.base_hash = base.content_hash();
  if (mode == AdaptMode::LinUp || mode == AdaptMode::LinLon) m.lin = DenseLayer::identity(base.static_dim);
  if (mode == AdaptMode::LinLon) m.lon = DenseLayer::identity(base.num_classes());
  return m;
}

FrameClassifier adapt(const FrameClassifier& base, const LabeledWindows& adapt_data, const AdaptConfig& cfg,
                      TrainingTrace* trace) {
  cfg.validate();
  if (adapt_data.size() == 0) throw DataError("adaptation data must carry frame labels");
  FrameClassifier m = attach_adaptation(base, cfg.mode);
  const Trainable which = cfg.mode == AdaptMode::LinUp    ? Trainable::LinUp
                          : cfg.mode == AdaptMode::LinLon ? Trainable::LinLon
                                                          : Trainable::Network;
  return fit(std::move(m), adapt_data, adapt_data, which, cfg.minibatch, cfg.max_epochs, cfg.dropout, cfg.momentum,
             cfg.lr0, cfg.weight_decay, cfg.min_improvement, cfg.max_halvings, cfg.rng_seed, trace);
}

}  // namespace fsr
