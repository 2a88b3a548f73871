#pragma once

#include "fsr/corpus.hpp"
#include "fsr/io.hpp"
#include "fsr/tandem.hpp"
#include "fsr/types.hpp"

#include <optional>
#include <string>
#include <vector>

namespace fsr {

enum class ScrfMode { Rescoring, FirstPass };

std::string to_string(ScrfMode mode);
ScrfMode scrf_mode_from_string(const std::string& s);

struct ScrfConfig {
  ScrfMode mode = ScrfMode::FirstPass;
  int max_segment = 24;  // longest segment the first-pass search considers
  double l2 = 1e-3;
  std::vector<int> tasks;  // posteriorgrams averaged per segment; empty picks the mode default
  std::vector<double> sample_positions = {0.25, 0.5, 0.75};
  std::vector<int> duration_edges = {2, 4, 8, 16};  // bin upper bounds; one open bin follows
  int iterations = 40;
  double initial_step = 0.5;
  bool latent_segmentation = false;  // train from word labels only

  static ScrfConfig from_json(const io::Json& j);
  io::Json to_json() const;
  void validate() const;
  std::vector<int> effective_tasks() const;
};

// Weight layout: one block of `per_label` lexicalised weights per class, then
// the LM weight, then (first pass) a class bigram table, then (rescoring) the
// agreement and peak weights.
struct ScrfLayout {
  int num_classes = 0;
  std::vector<int> tasks;
  std::vector<int> task_dims;
  int mean_dim = 0;     // sum of task_dims
  int samples = 0;      // sampled frames per segment (first pass)
  int duration_bins = 0;
  int per_label = 0;
  int lm = 0;           // index of the LM weight
  int transitions = -1; // first index of the C x C bigram table, or -1
  int agreement = -1;
  int peak = -1;
  int size = 0;

  static ScrfLayout build(const ScrfConfig& cfg, const LabelAlphabet& alphabet);
  int label_block(int label) const { return label * per_label; }
  int transition(int prev, int next) const { return transitions + prev * num_classes + next; }
};

struct ScrfModel {
  ScrfConfig cfg;
  LabelAlphabet alphabet;
  ScrfLayout layout;
  Vector weights;

  static ScrfModel create(const ScrfConfig& cfg, const LabelAlphabet& alphabet);
  std::vector<std::string> feature_names() const;

  io::Json to_json() const;
  static ScrfModel from_json(const io::Json& j, const LabelAlphabet& alphabet);
  void save(const io::fs::path& path) const;
  static ScrfModel load(const io::fs::path& path, const LabelAlphabet& alphabet);
};

// Everything the feature functions look at for one utterance.
struct ScrfInput {
  std::vector<Matrix> posteriorgrams;  // indexed by task
  BigramLm lm;
  LabelSeq baseline;                   // per-frame 1-best labels of the baseline recognizer
  std::optional<Lattice> lattice;      // rescoring search space

  int length() const { return static_cast<int>(posteriorgrams.front().rows()); }
};

struct ScrfDecodeOptions {
  double lm_scale = 1.0;  // multiplies the LM feature at decode time
};

// Label-independent statistics of an utterance with O(1) segment queries.
class SegmentFeatures {
 public:
  SegmentFeatures(const ScrfModel& model, const ScrfInput& input);

  int length() const { return T_; }
  // Label-independent part of the lexicalised template vector.
  Vector shared(int t0, int t1) const;
  double agreement(int t0, int t1, int label) const;
  double peak(int t0, int t1, int label) const;

 private:
  const ScrfModel& model_;
  const ScrfInput& input_;
  int T_ = 0;
  Matrix cumulative_;   // (T+1) x mean_dim prefix sums of the selected posteriorgrams
  Matrix stacked_;      // T x mean_dim
  Eigen::MatrixXi agree_cumulative_;  // (T+1) x C
};

// Full template vector of one segment, in the model's weight layout.
Vector segment_feature_vector(const ScrfModel& model, const SegmentFeatures& feats, const ScrfInput& input, int t0,
                              int t1, int label, int prev, double lm_value);

double scrf_lm_value(const ScrfInput& input, int prev, int label);
bool scrf_transition_allowed(const LabelAlphabet& alphabet, int prev, int label);

double segment_score(const ScrfModel& model, const ScrfInput& input, const Segment& seg, int prev,
                     const ScrfDecodeOptions& opts = {});
double path_score(const ScrfModel& model, const ScrfInput& input, const Segmentation& path,
                  const ScrfDecodeOptions& opts = {});

// Semi-Markov Viterbi over <s>+ letter* </s>+ with segments of at most
// max_segment frames.
Decoding decode_first_pass(const ScrfModel& model, const ScrfInput& input, const ScrfDecodeOptions& opts = {});
// Best lattice path under the SCRF score.
Decoding rescore_lattice(const ScrfModel& model, const ScrfInput& input, const ScrfDecodeOptions& opts = {});
Decoding scrf_decode(const ScrfModel& model, const ScrfInput& input, const ScrfDecodeOptions& opts = {});

struct PartitionResult {
  double forward = kNegInf;
  double backward = kNegInf;
};
// Log partition of the model's search space, computed both ways.
PartitionResult log_partition(const ScrfModel& model, const ScrfInput& input);

// One training utterance: the reference word and, for supervised training,
// its segmentation.
struct ScrfExample {
  ScrfInput input;
  LabelSeq word;
  Segmentation segmentation;  // empty: marginalise over segmentations of `word`
};

// Conditional log-likelihood of one example and its gradient (accumulated).
double example_log_likelihood(const ScrfModel& model, const ScrfExample& ex, Vector* gradient);
// Mean log-likelihood minus (l2/2)||w||², with gradient.
double scrf_objective(const ScrfModel& model, const std::vector<ScrfExample>& data, Vector* gradient);

struct ScrfTrainTrace {
  std::vector<double> objective;
};

ScrfModel train_scrf(ScrfModel model, const std::vector<ScrfExample>& data, ScrfTrainTrace* trace = nullptr);

// Prepares a supervised segmentation for the model's grammar: boundary runs
// longer than max_segment are split. Throws when a letter exceeds it.
Segmentation fit_segmentation_to_grammar(const ScrfModel& model, const Segmentation& seg);

// `id  HYP  score` lines.
std::string format_decode_line(const std::string& id, const std::string& hyp, double score);

}  // namespace fsr
