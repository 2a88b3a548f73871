#pragma once

#include "fsr/frontend.hpp"
#include "fsr/io.hpp"
#include "fsr/types.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace fsr {

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;

  int in() const { return static_cast<int>(weight.cols()); }
  int out() const { return static_cast<int>(weight.rows()); }
  static DenseLayer identity(int n);
  static DenseLayer zeros(int out, int in);
};

// Rectified-linear hidden layers followed by a softmax output layer.
struct MlpModel {
  std::vector<DenseLayer> layers;

  static MlpModel create(int input_dim, const std::vector<int>& hidden, int num_classes, std::uint64_t seed);
  static MlpModel zeros(int input_dim, const std::vector<int>& hidden, int num_classes);

  int input_dim() const { return layers.front().in(); }
  int num_classes() const { return layers.back().out(); }
  std::vector<int> hidden_sizes() const;

  // Row-wise over an N x input_dim batch.
  Matrix logits(const Matrix& inputs) const;
  Matrix posteriors(const Matrix& inputs) const;
};

Vector forward(const MlpModel& model, const Vector& window);

enum class AdaptMode { None, LinUp, LinLon, FineTune };
enum class LabelSource { GroundTruth, ForcedAlignment };

std::string to_string(AdaptMode mode);
AdaptMode adapt_mode_from_string(const std::string& s);
std::string to_string(LabelSource source);
LabelSource label_source_from_string(const std::string& s);

// A classifier over windows of static frames, optionally carrying signer
// adaptation attachments: an affine map on every static frame before
// windowing (LIN) and a layer stacked on the output logits (LON).
struct FrameClassifier {
  int task = 0;
  WindowConfig window;
  int static_dim = 0;
  MlpModel net;
  AdaptMode adaptation = AdaptMode::None;
  std::optional<DenseLayer> lin;  // static_dim x static_dim
  std::optional<DenseLayer> lon;  // classes x classes
  std::string base_hash;

  int num_classes() const { return net.num_classes(); }
  // Raw windows (before LIN) to logits / posteriors.
  Matrix logits_from_windows(const Matrix& raw_windows) const;
  Matrix posteriors_from_windows(const Matrix& raw_windows) const;
  // T x static_dim frames to the T x C posteriorgram.
  Matrix posteriorgram(const Matrix& static_frames) const;

  io::Json header() const;
  std::vector<io::NamedTensor> tensors() const;
  void save(const io::fs::path& path) const;
  static FrameClassifier load(const io::fs::path& path);
  // Hash of the serialized container bytes.
  std::string content_hash() const;
};

// Window matrix plus per-row class labels for one task.
struct LabeledWindows {
  Matrix inputs;
  std::vector<int> labels;

  int size() const { return static_cast<int>(labels.size()); }
  void append(const Matrix& static_frames, const WindowConfig& window, const std::vector<int>& frame_labels);
};

enum class Trainable { Network, LinUp, LinLon };

struct ParamBlock {
  double* data;
  Eigen::Index size;
  bool decay;  // weight matrices of the network receive weight decay
};

// Trainable parameters in a fixed order; `model` must already carry the
// attachments the selection refers to.
std::vector<ParamBlock> parameter_blocks(FrameClassifier& model, Trainable which);

// Mean cross-entropy over the batch plus (decay/2)·||W||² over the decayed
// blocks. Fills `grad` (shaped like `model`) for the selected blocks. With an
// rng and dropout > 0, inverted dropout masks are drawn for hidden layers.
double loss_and_gradient(const FrameClassifier& model, const Matrix& raw_windows, const std::vector<int>& labels,
                         Trainable which, double weight_decay, FrameClassifier& grad, double dropout = 0.0,
                         std::mt19937_64* rng = nullptr);

double frame_accuracy(const FrameClassifier& model, const LabeledWindows& data);

struct SgdMomentum {
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::vector<Vector> velocity;

  // param += v, v = momentum·v − lr·(grad + decay·param) for decayed blocks.
  void step(const std::vector<ParamBlock>& params, const std::vector<ParamBlock>& grads, double lr);
};

struct TrainConfig {
  int minibatch = 100;
  int max_epochs = 30;
  double dropout = 0.5;
  double momentum = 0.95;
  double lr0 = 0.01;
  double weight_decay = 1e-5;
  double min_improvement = 0.001;  // absolute accuracy gain that counts as progress
  int max_halvings = 3;            // consecutive halvings before stopping
  std::vector<int> hidden = {64, 64, 64};
  std::uint64_t rng_seed = 1;

  static TrainConfig from_json(const io::Json& j);
  io::Json to_json() const;
  void validate() const;
};

struct AdaptConfig {
  AdaptMode mode = AdaptMode::LinUp;
  LabelSource label_source = LabelSource::GroundTruth;
  int minibatch = 100;
  int max_epochs = 20;
  double dropout = 0.0;
  double momentum = 0.9;
  double lr0 = 0.02;
  double weight_decay = 1e-5;
  double min_improvement = 0.001;
  int max_halvings = 3;
  std::uint64_t rng_seed = 1;

  // LIN+UP / LIN+LON use the adaptation recipe; fine-tuning reuses the
  // signer-independent SGD schedule. No mode applies dropout by default.
  static AdaptConfig defaults_for(AdaptMode mode, const TrainConfig& base);
  static AdaptConfig from_json(const io::Json& j, const TrainConfig& base);
  io::Json to_json() const;
  void validate() const;
};

struct TrainingTrace {
  std::vector<double> selection_accuracy;  // index 0 = before training
  int best_epoch = 0;
};

// Minibatch SGD; returns the epoch snapshot with the best accuracy on `select`.
FrameClassifier fit(FrameClassifier model, const LabeledWindows& data, const LabeledWindows& select, Trainable which,
                    int minibatch, int max_epochs, double dropout, double momentum, double lr0, double weight_decay,
                    double min_improvement, int max_halvings, std::uint64_t seed, TrainingTrace* trace = nullptr);

FrameClassifier make_classifier(int task, int static_dim, const WindowConfig& window, int num_classes,
                                const TrainConfig& cfg);

FrameClassifier train(FrameClassifier model, const LabeledWindows& data, const LabeledWindows& held_out,
                      const TrainConfig& cfg, TrainingTrace* trace = nullptr);

// Attaches the mode's adaptation layers (identity-initialised) to a copy of
// `base` and trains the permitted parameters on the adaptation data.
FrameClassifier attach_adaptation(const FrameClassifier& base, AdaptMode mode);
FrameClassifier adapt(const FrameClassifier& base, const LabeledWindows& adapt_data, const AdaptConfig& cfg,
                      TrainingTrace* trace = nullptr);

}  // namespace fsr
