#pragma once

#include "fsr/io.hpp"
#include "fsr/types.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace fsr {

inline constexpr int kNumPhonoFeatures = 6;
// Task 0 is the letter classifier, tasks 1..6 the phonological features.
inline constexpr int kNumTasks = 1 + kNumPhonoFeatures;
inline constexpr int kLetterTask = 0;

struct PhonoTable {
  std::string name;
  std::vector<std::string> values;
  std::vector<int> value_of_letter;  // indexed by letter index
};

// Letter classes followed by the two non-signing classes <s> and </s>.
class LabelAlphabet {
 public:
  LabelAlphabet() = default;
  LabelAlphabet(std::vector<std::string> letters, std::array<PhonoTable, kNumPhonoFeatures> phono);

  // Phonological tables are filled deterministically from the letter order.
  static LabelAlphabet with_default_phono(std::vector<std::string> letters);
  static LabelAlphabet uppercase();
  static LabelAlphabet from_json(const io::Json& j);
  io::Json to_json() const;

  int num_letters() const { return static_cast<int>(letters_.size()); }
  int num_classes() const { return num_letters() + 2; }
  int start_class() const { return num_letters(); }
  int end_class() const { return num_letters() + 1; }
  bool is_boundary(int c) const { return c >= num_letters(); }

  const std::vector<std::string>& letters() const { return letters_; }
  std::string symbol(int c) const;
  int index_of(std::string_view symbol) const;

  LabelSeq encode_word(std::string_view word) const;
  std::string decode_word(const LabelSeq& letters) const;

  const PhonoTable& phono(int feature) const { return phono_.at(static_cast<std::size_t>(feature)); }

  int task_classes(int task) const;
  // Maps a class id of the letter class set onto the label set of `task`.
  int task_label(int task, int class_id) const;
  LabelSeq task_labels(int task, const LabelSeq& class_labels) const;
  std::string task_name(int task) const;

 private:
  std::vector<std::string> letters_;
  std::array<PhonoTable, kNumPhonoFeatures> phono_;
};

struct Peak {
  int letter = 0;  // position in the word
  int frame = 0;
};

// First and last frame (inclusive) of the signed letters.
struct SigningSpan {
  int first = 0;
  int last = 0;
};

struct FrameSequence {
  std::string id;
  std::string signer;
  LabelSeq word;  // letter class ids
  Matrix frames;  // T x D, one frame per row
  std::optional<LabelSeq> frame_labels;
  std::optional<std::vector<Peak>> peaks;
  std::optional<SigningSpan> span;

  int length() const { return static_cast<int>(frames.rows()); }
  int dim() const { return static_cast<int>(frames.cols()); }
};

void validate(const FrameSequence& seq, const LabelAlphabet& alphabet);

struct Segment {
  int start = 0;
  int end = 0;  // inclusive
  int label = 0;
  int length() const { return end - start + 1; }
  bool operator==(const Segment&) const = default;
};
using Segmentation = std::vector<Segment>;

void validate_segmentation(const Segmentation& seg, int length, int num_classes);
LabelSeq labels_from_segments(const Segmentation& seg);
// Maximal runs of identical labels.
Segmentation runs_from_labels(const LabelSeq& labels);
// Runs of frame labels split so that repeated word letters get their own segment.
Segmentation segments_for_word(const LabelSeq& labels, const LabelSeq& word, const LabelAlphabet& alphabet);
// Letter segments in order, boundary classes dropped.
LabelSeq letters_of(const Segmentation& seg, const LabelAlphabet& alphabet);

Segmentation peaks_to_segmentation(const FrameSequence& seq, const LabelAlphabet& alphabet);
LabelSeq peaks_to_frame_labels(const FrameSequence& seq, const LabelAlphabet& alphabet);

// Frame labels if present, otherwise derived from peak annotations.
LabelSeq ground_truth_labels(const FrameSequence& seq, const LabelAlphabet& alphabet);
Segmentation ground_truth_segmentation(const FrameSequence& seq, const LabelAlphabet& alphabet);

FrameSequence resample_speed(const FrameSequence& seq, double rate);

struct AffineMap {
  Matrix scale;  // D x D
  Vector offset;
};

struct SynthConfig {
  int n_signers = 4;
  int words_per_signer = 100;
  std::vector<std::string> word_list;  // empty selects the built-in list
  double speed_min = 1.0;
  double speed_max = 1.8;
  std::vector<double> signer_speeds;       // overrides the evenly spaced speeds
  std::vector<AffineMap> appearance;       // overrides the random affine maps
  double appearance_scale = 0.5;           // random maps: A = I + scale * G / sqrt(D)
  double appearance_offset = 0.6;          // random maps: b = offset * g
  int feature_dim = 16;
  double prototype_scale = 1.0;
  double base_letter_frames = 5.0;
  double duration_jitter = 0.2;
  int nonsigning_min = 4;
  int nonsigning_max = 12;
  double nonsigning_step = 0.35;
  double rest_scale = 0.8;
  std::vector<double> nonsigning_variation;  // per-signer multiplier on rest offset and walk step
  double noise_sigma = 0.3;
  std::uint64_t rng_seed = 1;

  static SynthConfig from_json(const io::Json& j);
  io::Json to_json() const;
  void validate() const;
};

const std::vector<std::string>& default_word_list();
std::string signer_name(int index);

std::vector<FrameSequence> generate_synthetic(const SynthConfig& cfg, const LabelAlphabet& alphabet);

struct Corpus {
  LabelAlphabet alphabet;
  std::vector<FrameSequence> utterances;

  std::vector<std::string> signers() const;
  int find(std::string_view id) const;
};

inline constexpr int kNumFolds = 8;

// Indices into Corpus::utterances.
struct Split {
  std::vector<int> train;
  std::vector<int> adapt;
  std::vector<int> tune;
  std::vector<int> test;
  // The part of the test signer's data never used for adaptation (all folds).
  std::vector<int> evaluation;
};

Split split_corpus(const Corpus& corpus, std::string_view test_signer, double adapt_fraction, int fold_index);

// One directory per signer, one container per utterance, and corpus.json as manifest.
void save_corpus(const io::fs::path& dir, const Corpus& corpus);
Corpus load_corpus(const io::fs::path& dir);
void save_sequence(const io::fs::path& path, const FrameSequence& seq);
FrameSequence load_sequence(const io::fs::path& path, const LabelAlphabet& alphabet);

}  // namespace fsr
