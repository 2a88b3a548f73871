#pragma once

// Small random models and inputs shared by the tests.

#include "fsr/corpus.hpp"
#include "fsr/scrf.hpp"
#include "fsr/tandem.hpp"

#include <random>

namespace fixture {

inline fsr::LabelAlphabet letters(int n) {
  std::vector<std::string> l;
  for (int i = 0; i < n; ++i) l.push_back(std::string(1, static_cast<char>('A' + i)));
  return fsr::LabelAlphabet::with_default_phono(l);
}

inline fsr::Matrix random_posteriors(int T, int C, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.5);
  fsr::Matrix logits(T, C);
  for (int t = 0; t < T; ++t)
    for (int c = 0; c < C; ++c) logits(t, c) = n(rng);
  return fsr::softmax_rows(logits);
}

inline fsr::BigramLm random_lm(int num_letters, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len(1, 4), let(0, num_letters - 1);
  std::vector<fsr::LabelSeq> words;
  for (int w = 0; w < 6; ++w) {
    fsr::LabelSeq word;
    for (int k = len(rng); k > 0; --k) word.push_back(let(rng));
    words.push_back(word);
  }
  return fsr::BigramLm::train(words, num_letters);
}

inline fsr::ScrfInput random_scrf_input(const fsr::LabelAlphabet& a, int T, std::mt19937_64& rng) {
  fsr::ScrfInput in;
  for (int task = 0; task < fsr::kNumTasks; ++task) in.posteriorgrams.push_back(random_posteriors(T, a.task_classes(task), rng));
  in.lm = random_lm(a.num_letters(), rng);
  std::uniform_int_distribution<int> lab(0, a.num_classes() - 1);
  for (int t = 0; t < T; ++t) in.baseline.push_back(lab(rng));
  return in;
}

inline void randomize(fsr::ScrfModel& m, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  for (Eigen::Index i = 0; i < m.weights.size(); ++i) m.weights(i) = n(rng);
}

// Random HMM with one diagonal Gaussian per state over `dim` dimensions.
inline fsr::HmmModel random_hmm(int num_letters, int letter_states, int dim, std::mt19937_64& rng, int mixtures = 1) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.2, 0.8), var(0.5, 2.0);
  fsr::HmmModel m;
  m.lm = random_lm(num_letters, rng);
  for (int c = 0; c < num_letters + 2; ++c) {
    fsr::ClassHmm h;
    const int S = c < num_letters ? letter_states : 1;
    h.self_loop.resize(S);
    for (int s = 0; s < S; ++s) {
      fsr::DiagGmm g;
      g.weights = fsr::Vector::Constant(mixtures, 1.0 / mixtures);
      g.means.resize(mixtures, dim);
      g.variances.resize(mixtures, dim);
      for (int k = 0; k < mixtures; ++k)
        for (int d = 0; d < dim; ++d) {
          g.means(k, d) = n(rng);
          g.variances(k, d) = var(rng);
        }
      h.states.push_back(g);
      h.self_loop(s) = u(rng);
    }
    m.classes.push_back(h);
  }
  return m;
}

inline fsr::Matrix random_features(int T, int dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  fsr::Matrix f(T, dim);
  for (int t = 0; t < T; ++t)
    for (int d = 0; d < dim; ++d) f(t, d) = n(rng);
  return f;
}

}  // namespace fixture
