#pragma once

#include "fsr/corpus.hpp"
#include "fsr/frontend.hpp"
#include "fsr/io.hpp"
#include "fsr/types.hpp"

#include <string>
#include <vector>

namespace fsr {

// Letter bigram with add-one smoothing. Contexts are <s> and the letters;
// predicted symbols are the letters and </s>.
class BigramLm {
 public:
  BigramLm() = default;
  explicit BigramLm(int num_letters);

  static BigramLm train(const std::vector<LabelSeq>& words, int num_letters);

  int num_letters() const { return num_letters_; }
  // log P(next | prev) over the class ids of a LabelAlphabet; -inf where the
  // pair is not a valid bigram.
  double log_prob(int prev, int next) const { return table_(prev, next); }
  const Matrix& table() const { return table_; }
  static BigramLm from_table(Matrix table);
  double word_log_prob(const LabelSeq& word) const;

 private:
  int num_letters_ = 0;
  Matrix table_;  // (L+2) x (L+2)
};

struct TandemFeatureConfig {
  double posterior_floor = 1e-8;
  int posterior_pca_dim = 32;
  bool include_base_features = true;

  static TandemFeatureConfig from_json(const io::Json& j);
  io::Json to_json() const;
  void validate() const;
};

// Floored log of the concatenated posteriorgrams of all tasks.
Matrix log_posterior_stack(const std::vector<Matrix>& posteriorgrams, double floor);

struct TandemFrontend {
  TandemFeatureConfig cfg;
  PcaModel pca;

  static TandemFrontend fit(const std::vector<std::vector<Matrix>>& posteriorgram_sets, const TandemFeatureConfig& cfg);
  Matrix apply(const std::vector<Matrix>& posteriorgrams, const Matrix& base_features) const;
  int output_dim(int base_dim) const;

  void save(const io::fs::path& path) const;
  static TandemFrontend load(const io::fs::path& path);
};

struct DiagGmm {
  Vector weights;    // M
  Matrix means;      // M x D
  Matrix variances;  // M x D

  int num_components() const { return static_cast<int>(weights.size()); }
  int dim() const { return static_cast<int>(means.cols()); }
  // Per-frame log-likelihoods of a T x D matrix.
  Vector log_likelihood(const Matrix& frames) const;
  // T x M matrix of log(w_m N_m(x_t)).
  Matrix component_log_likelihoods(const Matrix& frames) const;
};

// Left-to-right model: state s loops with self_loop(s) and otherwise moves on;
// the last state's complement is the exit probability.
struct ClassHmm {
  std::vector<DiagGmm> states;
  Vector self_loop;

  int num_states() const { return static_cast<int>(states.size()); }
};

struct DecodeParams {
  double lm_weight = 1.0;
  double insertion_penalty = 0.0;
};

struct HmmConfig {
  int letter_states = 3;
  int boundary_states = 1;
  int mixtures = 2;
  double variance_floor = 1e-6;
  int em_iterations = 10;
  DecodeParams decode;

  static HmmConfig from_json(const io::Json& j);
  io::Json to_json() const;
  void validate() const;
};

struct HmmModel {
  std::vector<ClassHmm> classes;  // indexed by LabelAlphabet class id
  BigramLm lm;
  DecodeParams params;
  double variance_floor = 1e-6;

  int num_classes() const { return static_cast<int>(classes.size()); }
  int num_letters() const { return num_classes() - 2; }
  int start_class() const { return num_letters(); }
  int end_class() const { return num_letters() + 1; }
  bool is_boundary(int c) const { return c >= num_letters(); }
  int dim() const { return classes.front().states.front().dim(); }
  int total_states() const;
  int state_offset(int c) const;

  void save(const io::fs::path& path) const;
  static HmmModel load(const io::fs::path& path);
};

// T x total_states matrix of emission log-likelihoods.
Matrix emission_table(const HmmModel& model, const Matrix& features);

// One training utterance: features and the class chain it realises, optionally
// with a segmentation used for initialisation.
struct HmmTrainingItem {
  Matrix features;
  LabelSeq chain;
  Segmentation init_segmentation;  // empty: split the chain uniformly
};

// Chain <s> · word · </s>.
LabelSeq word_chain(const LabelSeq& word, const LabelAlphabet& alphabet);

HmmModel init_hmm(const std::vector<HmmTrainingItem>& data, const LabelAlphabet& alphabet, const BigramLm& lm,
                  const HmmConfig& cfg);

struct EmStats {
  double log_likelihood = 0.0;
  // Worst |sum - 1| over mixture weights and transition rows after the update.
  double max_stochastic_error = 0.0;
  int reseeded_components = 0;
};

// One embedded Baum-Welch iteration. The returned log-likelihood is that of
// the data under the parameters before the update.
EmStats em_iteration(HmmModel& model, const std::vector<HmmTrainingItem>& data);
std::vector<EmStats> em_train(HmmModel& model, const std::vector<HmmTrainingItem>& data, int iterations);

// Total log P(features | chain) summed over all state paths.
double chain_log_likelihood(const HmmModel& model, const Matrix& features, const LabelSeq& chain);

struct Decoding {
  LabelSeq letters;
  Segmentation segmentation;
  double score = kNegInf;
};

// <s> · letter* · </s>, scoring acoustics + lm_weight·LM + penalty per letter.
Decoding viterbi_decode(const HmmModel& model, const Matrix& emissions, const DecodeParams& params);
Decoding viterbi_decode(const HmmModel& model, const Matrix& features);

// Viterbi through the fixed chain <s> · word · </s> (acoustics only).
Decoding forced_align(const HmmModel& model, const Matrix& emissions, const LabelSeq& chain);
Segmentation forced_align(const HmmModel& model, const Matrix& features, const LabelSeq& word,
                          const LabelAlphabet& alphabet);

// Nodes carry the frame boundary and the class of their incoming arcs, so arc
// LM scores are exact bigram scores.
struct LatticeNode {
  int frame = 0;   // boundary index in [0, T]
  int label = -1;  // class of incoming arcs; -1 for the start node
};

struct LatticeArc {
  int from = 0;
  int to = 0;
  int label = 0;
  double ac_score = 0.0;
  double lm_score = 0.0;
};

struct Lattice {
  std::string utterance;
  int num_frames = 0;
  int num_classes = 0;
  std::vector<LatticeNode> nodes;
  std::vector<LatticeArc> arcs;  // sorted by source frame, then source node, then target
  int start = 0;
  int end = 0;

  bool is_boundary(int label) const { return label >= num_classes - 2; }
  int arc_start_frame(const LatticeArc& a) const { return nodes[static_cast<std::size_t>(a.from)].frame; }
  int arc_end_frame(const LatticeArc& a) const { return nodes[static_cast<std::size_t>(a.to)].frame - 1; }
  double arc_score(const LatticeArc& a, const DecodeParams& params) const;

  // Acyclic, every arc spans >= 1 frame, every start-to-end path tiles [0, T-1].
  void validate() const;
  double path_count() const;
  Decoding best_path(const DecodeParams& params) const;
  std::vector<Segmentation> enumerate_paths(std::size_t limit = 100000) const;

  std::string to_text(const LabelAlphabet& alphabet) const;
  static Lattice from_text(const std::string& text, const LabelAlphabet& alphabet);
};

// Beam-pruned letter lattice; arcs whose best complete path scores within
// `beam` of the Viterbi score survive, and the Viterbi path always does.
Lattice make_lattice(const HmmModel& model, const Matrix& emissions, const DecodeParams& params, double beam,
                     const std::string& utterance = {});

// Best in-model path score for class `c` over frames [t0, t1], including the
// exit transition for every class but </s>; -inf when infeasible.
Matrix segment_acoustic_scores(const HmmModel& model, const Matrix& emissions, int c);

}  // namespace fsr
