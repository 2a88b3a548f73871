#include "fsr/eval.hpp"

#include "fsr/corpus.hpp"
#include "fsr/errors.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace fsr {

double EditCounts::accuracy() const {
  if (reference == 0) return insertions == 0 ? 100.0 : -100.0 * static_cast<double>(insertions);
  return 100.0 * static_cast<double>(reference - errors()) / static_cast<double>(reference);
}

EditCounts& EditCounts::operator+=(const EditCounts& o) {
  reference += o.reference;
  substitutions += o.substitutions;
  deletions += o.deletions;
  insertions += o.insertions;
  return *this;
}

EditCounts align_counts(const LabelSeq& ref, const LabelSeq& hyp) {
  const std::size_t n = ref.size();
  const std::size_t m = hyp.size();
  // Edit count first, then the number of gaps, so equal-cost alignments
  // resolve towards substitutions.
  const long gap = 1;
  const long edit = static_cast<long>(n + m + 1);
  auto sub_cost = [&](std::size_t i, std::size_t j) { return ref[i - 1] == hyp[j - 1] ? 0 : edit; };
  std::vector<std::vector<long>> d(n + 1, std::vector<long>(m + 1, 0));
  for (std::size_t i = 0; i <= n; ++i) d[i][0] = static_cast<long>(i) * (edit + gap);
  for (std::size_t j = 0; j <= m; ++j) d[0][j] = static_cast<long>(j) * (edit + gap);
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      d[i][j] = std::min({d[i - 1][j - 1] + sub_cost(i, j), d[i - 1][j] + edit + gap, d[i][j - 1] + edit + gap});

  EditCounts c;
  c.reference = static_cast<long>(n);
  std::size_t i = n;
  std::size_t j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + sub_cost(i, j)) {
      if (ref[i - 1] != hyp[j - 1]) ++c.substitutions;
      --i;
      --j;
    } else if (i > 0 && d[i][j] == d[i - 1][j] + edit + gap) {
      ++c.deletions;
      --i;
    } else {
      ++c.insertions;
      --j;
    }
  }
  return c;
}

EditCounts letter_accuracy(const std::vector<LabelSeq>& refs, const std::vector<LabelSeq>& hyps) {
  if (refs.size() != hyps.size()) throw DataError("letter_accuracy: reference and hypothesis counts differ");
  EditCounts total;
  for (std::size_t u = 0; u < refs.size(); ++u) total += align_counts(refs[u], hyps[u]);
  return total;
}

Matrix ConfusionMatrix::display(bool zero_diagonal) const {
  Matrix out = probabilities;
  if (zero_diagonal) out.diagonal().setZero();
  return out;
}

Vector ConfusionMatrix::column_confusion_mass() const {
  Matrix off = probabilities;
  off.diagonal().setZero();
  return off.colwise().sum().transpose();
}

void accumulate(ConfusionMatrix& into, const LabelSeq& ref, const LabelSeq& hyp) {
  if (ref.size() != hyp.size()) throw DataError("confusion: label sequences differ in length");
  for (std::size_t t = 0; t < ref.size(); ++t) {
    if (ref[t] < 0 || ref[t] >= into.num_classes() || hyp[t] < 0 || hyp[t] >= into.num_classes())
      throw DataError("confusion: label out of range");
    into.counts(ref[t], hyp[t]) += 1.0;
  }
}

void normalize(ConfusionMatrix& m) {
  m.probabilities = m.counts;
  for (Eigen::Index r = 0; r < m.counts.rows(); ++r) {
    const double total = m.counts.row(r).sum();
    if (total > 0.0) m.probabilities.row(r) /= total;
  }
}

ConfusionMatrix confusion(const LabelSeq& ref, const LabelSeq& hyp, int num_classes) {
  ConfusionMatrix m;
  m.counts = Matrix::Zero(num_classes, num_classes);
  accumulate(m, ref, hyp);
  normalize(m);
  return m;
}

std::string confusion_csv(const ConfusionMatrix& m, const LabelAlphabet& alphabet, bool zero_diagonal) {
  const Matrix values = m.display(zero_diagonal);
  std::ostringstream out;
  out << "reference";
  for (int c = 0; c < m.num_classes(); ++c) out << ',' << alphabet.symbol(c);
  out << '\n';
  char buf[32];
  for (int r = 0; r < m.num_classes(); ++r) {
    out << alphabet.symbol(r);
    for (int c = 0; c < m.num_classes(); ++c) {
      std::snprintf(buf, sizeof buf, ",%.6f", values(r, c));
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

double AccuracyReport::mean() const {
  if (signers.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : signers) s += r.accuracy;
  return s / static_cast<double>(signers.size());
}

io::Json AccuracyReport::to_json() const {
  io::Json rows = io::Json::array();
  for (const auto& s : signers)
    rows.push_back({{"signer", s.signer},
                    {"accuracy", s.accuracy},
                    {"fold_accuracy", s.fold_accuracy},
                    {"reference_letters", s.counts.reference},
                    {"substitutions", s.counts.substitutions},
                    {"deletions", s.counts.deletions},
                    {"insertions", s.counts.insertions}});
  return {{"recognizer", recognizer}, {"condition", condition}, {"signers", rows}, {"mean", mean()}};
}

std::string render_accuracy_table(const std::vector<AccuracyReport>& reports) {
  std::vector<std::string> recognizers;
  std::vector<std::string> conditions;
  std::vector<std::string> signers;
  for (const auto& r : reports) {
    if (std::find(recognizers.begin(), recognizers.end(), r.recognizer) == recognizers.end()) recognizers.push_back(r.recognizer);
    if (std::find(conditions.begin(), conditions.end(), r.condition) == conditions.end()) conditions.push_back(r.condition);
    for (const auto& s : r.signers)
      if (std::find(signers.begin(), signers.end(), s.signer) == signers.end()) signers.push_back(s.signer);
  }
  const auto find = [&](const std::string& rec, const std::string& cond) -> const AccuracyReport* {
    for (const auto& r : reports)
      if (r.recognizer == rec && r.condition == cond) return &r;
    return nullptr;
  };

  std::ostringstream out;
  char buf[64];
  out << "Letter accuracies (%)\n";
  std::snprintf(buf, sizeof buf, "%-16s", "");
  out << buf;
  for (const auto& rec : recognizers) {
    std::snprintf(buf, sizeof buf, "| %-*s", static_cast<int>(8 * (signers.size() + 1)), rec.c_str());
    out << buf;
  }
  out << "\n";
  std::snprintf(buf, sizeof buf, "%-16s", "Signer");
  out << buf;
  for (std::size_t k = 0; k < recognizers.size(); ++k) {
    out << "| ";
    for (const auto& s : signers) {
      std::snprintf(buf, sizeof buf, "%-8s", s.substr(0, 7).c_str());
      out << buf;
    }
    out << "Mean    ";
  }
  out << "\n";
  for (const auto& cond : conditions) {
    std::snprintf(buf, sizeof buf, "%-16s", cond.c_str());
    out << buf;
    for (const auto& rec : recognizers) {
      out << "| ";
      const auto* r = find(rec, cond);
      for (const auto& s : signers) {
        double v = 0.0;
        bool found = false;
        if (r)
          for (const auto& sa : r->signers)
            if (sa.signer == s) {
              v = sa.accuracy;
              found = true;
            }
        if (found)
          std::snprintf(buf, sizeof buf, "%-8.1f", v);
        else
          std::snprintf(buf, sizeof buf, "%-8s", "-");
        out << buf;
      }
      if (r)
        std::snprintf(buf, sizeof buf, "%-8.1f", r->mean());
      else
        std::snprintf(buf, sizeof buf, "%-8s", "-");
      out << buf;
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace fsr
