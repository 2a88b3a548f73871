#pragma once

#include "fsr/io.hpp"
#include "fsr/types.hpp"

#include <string>
#include <vector>

namespace fsr {

class LabelAlphabet;

struct EditCounts {
  long reference = 0;
  long substitutions = 0;
  long deletions = 0;
  long insertions = 0;

  long errors() const { return substitutions + deletions + insertions; }
  // 100 (N - S - D - I) / N; negative when insertions dominate.
  double accuracy() const;
  EditCounts& operator+=(const EditCounts& o);
};

// Unit-cost minimum edit alignment. Among equal-cost alignments the one with
// the most substitutions wins; the backtrace then prefers the diagonal, then
// deletions, then insertions.
EditCounts align_counts(const LabelSeq& ref, const LabelSeq& hyp);

EditCounts letter_accuracy(const std::vector<LabelSeq>& refs, const std::vector<LabelSeq>& hyps);

struct ConfusionMatrix {
  Matrix counts;         // rows: reference class, cols: predicted class
  Matrix probabilities;  // row-normalised; all-zero rows for unseen classes

  int num_classes() const { return static_cast<int>(counts.rows()); }
  // Copy for display with the diagonal zeroed; the stored values are untouched.
  Matrix display(bool zero_diagonal = true) const;
  // Off-diagonal probability mass per predicted column.
  Vector column_confusion_mass() const;
};

ConfusionMatrix confusion(const LabelSeq& ref, const LabelSeq& hyp, int num_classes);
void accumulate(ConfusionMatrix& into, const LabelSeq& ref, const LabelSeq& hyp);
void normalize(ConfusionMatrix& m);

std::string confusion_csv(const ConfusionMatrix& m, const LabelAlphabet& alphabet, bool zero_diagonal = false);

struct SignerAccuracy {
  std::string signer;
  std::vector<double> fold_accuracy;
  EditCounts counts;  // summed over folds
  double accuracy = 0.0;  // mean of the fold accuracies
};

struct AccuracyReport {
  std::string recognizer;
  std::string condition;
  std::vector<SignerAccuracy> signers;

  double mean() const;
  io::Json to_json() const;
};

// Rows are conditions, column groups recognizers, mirroring a per-signer
// letter-accuracy table.
std::string render_accuracy_table(const std::vector<AccuracyReport>& reports);

}  // namespace fsr
