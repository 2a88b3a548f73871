#pragma once

#include "fsr/corpus.hpp"
#include "fsr/eval.hpp"
#include "fsr/frontend.hpp"
#include "fsr/io.hpp"
#include "fsr/neuralnet.hpp"
#include "fsr/scrf.hpp"
#include "fsr/tandem.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fsr {

using Logger = std::function<void(const std::string&)>;

enum class Recognizer { TandemHmm, RescoringScrf, FirstPassScrf };

std::string to_string(Recognizer r);
std::string display_name(Recognizer r);
Recognizer recognizer_from_string(const std::string& s);

// Everything that shapes one run of the adaptation experiments.
struct ExperimentConfig {
  int static_dim = 16;        // PCA output dimension of the per-frame features
  WindowConfig window;        // context window of the frame classifiers
  int held_out_every = 10;    // every n-th training utterance is held out for epoch selection
  TrainConfig train;
  HmmConfig hmm;
  TandemFeatureConfig tandem;
  ScrfConfig first_pass;
  ScrfConfig rescoring = [] {
    ScrfConfig c;
    c.mode = ScrfMode::Rescoring;
    return c;
  }();
  double lattice_beam = 12.0;
  std::vector<double> speed_rates = {0.8, 1.2};

  std::vector<std::string> test_signers;  // empty: every signer in turn
  std::vector<AdaptMode> modes = {AdaptMode::LinUp, AdaptMode::LinLon, AdaptMode::FineTune};
  std::vector<LabelSource> label_sources = {LabelSource::GroundTruth, LabelSource::ForcedAlignment};
  std::vector<double> fractions = {0.05, 0.1, 0.2};
  std::vector<int> frame_tasks;  // frame-accuracy tasks; empty: all
  bool speed_arm = true;

  AdaptMode recognition_mode = AdaptMode::FineTune;
  double recognition_fraction = 0.2;  // 0 runs the unadapted condition only
  std::vector<Recognizer> recognizers = {Recognizer::TandemHmm, Recognizer::RescoringScrf, Recognizer::FirstPassScrf};
  std::vector<double> lm_weights = {1.0, 2.0, 4.0, 8.0};
  std::vector<double> insertion_penalties = {-10.0, -5.0, 0.0, 5.0, 10.0, 20.0};
  std::vector<double> scrf_lm_scales = {0.0, 0.5, 1.0, 2.0};

  std::string confusion_signer;  // empty: no confusion matrices
  AdaptMode confusion_mode = AdaptMode::LinUp;
  double confusion_fraction = 0.2;

  bool run_frame_accuracy = true;
  bool run_recognition = true;
  std::uint64_t rng_seed = 1;

  static ExperimentConfig from_json(const io::Json& j);
  io::Json to_json() const;
  void validate() const;
  std::vector<int> effective_frame_tasks() const;
};

// Deterministic seed for one named stage of a run.
std::uint64_t derive_seed(std::uint64_t base, const std::string& stage);

// ---------------------------------------------------------------------------
// Pipeline stages

PcaModel fit_static_pca(const Corpus& corpus, const std::vector<int>& indices, int dim);
Matrix static_features(const PcaModel& pca, const FrameSequence& seq);

// Windows of every listed utterance with its class labels mapped onto `task`.
// `labels[i]` belongs to utterance `indices[i]`.
LabeledWindows task_windows(const Corpus& corpus, const std::vector<int>& indices,
                            const std::vector<LabelSeq>& labels, const PcaModel& pca, const WindowConfig& window,
                            int task);
std::vector<LabelSeq> ground_truth_label_sets(const Corpus& corpus, const std::vector<int>& indices);

// Trains one task's signer-independent classifier. With `speed_rates`
// non-empty the training part is augmented with resampled copies.
FrameClassifier train_task_classifier(const Corpus& corpus, const std::vector<int>& train, const PcaModel& pca,
                                      const ExperimentConfig& cfg, int task, std::uint64_t seed,
                                      const std::vector<double>& speed_rates = {},
                                      TrainingTrace* trace = nullptr);

std::vector<Matrix> posteriorgrams(const std::vector<FrameClassifier>& dnns, const Matrix& static_frames);

TandemFrontend fit_tandem_frontend(const Corpus& corpus, const std::vector<int>& indices, const PcaModel& pca,
                                   const std::vector<FrameClassifier>& dnns, const TandemFeatureConfig& cfg);
Matrix tandem_features(const TandemFrontend& frontend, const PcaModel& pca, const std::vector<FrameClassifier>& dnns,
                       const FrameSequence& seq);

HmmModel train_tandem_hmm(const Corpus& corpus, const std::vector<int>& indices, const PcaModel& pca,
                          const std::vector<FrameClassifier>& dnns, const TandemFrontend& frontend,
                          const HmmConfig& cfg, std::vector<EmStats>* stats = nullptr);

// SCRF input of one utterance; rescoring inputs also carry the tandem lattice
// and its 1-best frame labels as the baseline.
ScrfInput make_scrf_input(const PcaModel& pca, const std::vector<FrameClassifier>& dnns, const TandemFrontend& frontend,
                          const HmmModel& hmm, const FrameSequence& seq, std::optional<double> lattice_beam);

ScrfModel train_first_pass_scrf(const Corpus& corpus, const std::vector<int>& indices, const PcaModel& pca,
                                const std::vector<FrameClassifier>& dnns, const TandemFrontend& frontend,
                                const HmmModel& hmm, const ScrfConfig& cfg);
// Trains on tandem lattices; utterances whose word the lattice misses are skipped.
ScrfModel train_rescoring_scrf(const Corpus& corpus, const std::vector<int>& indices, const PcaModel& pca,
                               const std::vector<FrameClassifier>& dnns, const TandemFrontend& frontend,
                               const HmmModel& hmm, const ScrfConfig& cfg, double lattice_beam,
                               int* skipped = nullptr);

// Signer-independent models for one held-out test signer.
struct SignerSystem {
  std::string test_signer;
  PcaModel pca;
  std::vector<FrameClassifier> dnns;  // one per task
  std::optional<FrameClassifier> speed_letter;
  TandemFrontend frontend;
  HmmModel hmm;
  std::optional<ScrfModel> first_pass;
  std::optional<ScrfModel> rescoring;
};

SignerSystem build_signer_system(const Corpus& corpus, const std::string& test_signer, const ExperimentConfig& cfg,
                                 const Logger& log = {});

// Frame labels of adaptation utterances: annotations, or a forced alignment
// of the known word with the unadapted tandem recognizer.
std::vector<LabelSeq> adaptation_labels(const Corpus& corpus, const std::vector<int>& indices, LabelSource source,
                                        const SignerSystem& system);

FrameClassifier adapt_task_classifier(const FrameClassifier& base, const Corpus& corpus,
                                      const std::vector<int>& indices, const std::vector<LabelSeq>& labels,
                                      const PcaModel& pca, const ExperimentConfig& cfg, AdaptMode mode,
                                      std::uint64_t seed);

double evaluation_frame_accuracy(const FrameClassifier& model, const Corpus& corpus, const std::vector<int>& indices,
                                 const PcaModel& pca);

// ---------------------------------------------------------------------------
// Tune/test protocol

// Hypotheses of one utterance for every point of a recognizer's tuning grid.
struct GridHypotheses {
  LabelSeq reference;
  std::vector<LabelSeq> hyps;
};

// Per fold: pick the grid point with the best letter accuracy on the tune
// fold (first wins ties), score the test fold with it; report the fold mean.
SignerAccuracy tune_and_test(const Corpus& corpus, const std::string& signer,
                             const std::map<int, GridHypotheses>& hyps);

// Decodes every evaluation utterance at every grid point with the given
// (possibly adapted) classifiers; models downstream of them are not retrained.
std::map<Recognizer, std::map<int, GridHypotheses>> recognition_hypotheses(
    const Corpus& corpus, const std::vector<int>& indices, const SignerSystem& system,
    const std::vector<FrameClassifier>& dnns, const ExperimentConfig& cfg);

SignerAccuracy run_protocol(Recognizer recognizer, const Corpus& corpus, const SignerSystem& system,
                            AdaptMode mode, LabelSource source, double adapt_fraction, const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Experiment matrix

struct FrameAccuracyPoint {
  std::string signer;
  int task = 0;
  std::string arm;  // "none", "speed" or an adaptation mode
  std::string source;  // label source, empty for unadapted arms
  double fraction = 0.0;
  double accuracy = 0.0;
};

struct ConfusionResult {
  std::string signer;
  std::string condition;
  ConfusionMatrix matrix;
};

struct ExperimentResult {
  std::vector<FrameAccuracyPoint> frame_accuracy;
  std::vector<AccuracyReport> recognition;
  std::vector<ConfusionResult> confusions;
  io::Json provenance;  // utterance ids per signer and role

  // Signer mean of one frame-accuracy cell; NaN when absent.
  double mean_frame_accuracy(int task, const std::string& arm, const std::string& source, double fraction) const;
  const AccuracyReport* report(Recognizer r, const std::string& condition) const;
};

std::string condition_name(std::optional<LabelSource> source);

ExperimentResult run_experiment(const Corpus& corpus, const ExperimentConfig& cfg, const Logger& log = {});

std::string render_frame_accuracy_table(const ExperimentResult& result, const LabelAlphabet& alphabet);
io::Json experiment_json(const ExperimentResult& result);
// Writes report.txt, report.json and one CSV per confusion matrix; returns the files written.
std::vector<io::fs::path> write_reports(const io::fs::path& dir, const ExperimentResult& result,
                                        const LabelAlphabet& alphabet);

}  // namespace fsr
