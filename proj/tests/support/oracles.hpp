#pragma once

// Independent brute-force references used by the unit and acceptance tests.
// Everything here enumerates explicitly instead of running a dynamic program.

#include "fsr/corpus.hpp"
#include "fsr/eval.hpp"
#include "fsr/neuralnet.hpp"
#include "fsr/scrf.hpp"
#include "fsr/tandem.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace oracle {

using fsr::LabelSeq;
using fsr::Matrix;
using fsr::Segmentation;

// All ways to cut `T` frames into segments of length <= max_len.
inline std::vector<std::vector<int>> compositions(int T, int max_len) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur;
  std::function<void(int)> rec = [&](int left) {
    if (left == 0) {
      out.push_back(cur);
      return;
    }
    for (int d = 1; d <= std::min(left, max_len); ++d) {
      cur.push_back(d);
      rec(left - d);
      cur.pop_back();
    }
  };
  rec(T);
  return out;
}

// Labelings of `n` segments with a grammar predicate over (prev, next); prev = -1 at the start.
inline std::vector<LabelSeq> labelings(int n, int num_classes, const std::function<bool(int, int)>& allowed,
                                       int final_label) {
  std::vector<LabelSeq> out;
  LabelSeq cur;
  std::function<void(int)> rec = [&](int prev) {
    if (static_cast<int>(cur.size()) == n) {
      if (prev == final_label) out.push_back(cur);
      return;
    }
    for (int c = 0; c < num_classes; ++c) {
      if (!allowed(prev, c)) continue;
      cur.push_back(c);
      rec(c);
      cur.pop_back();
    }
  };
  rec(-1);
  return out;
}

inline Segmentation make_segmentation(const std::vector<int>& lengths, const LabelSeq& labels) {
  Segmentation s;
  int t = 0;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    s.push_back({t, t + lengths[i] - 1, labels[i]});
    t += lengths[i];
  }
  return s;
}

// Every (segmentation, labeling) pair the first-pass SCRF grammar admits.
inline std::vector<Segmentation> scrf_paths(int T, int max_len, const fsr::LabelAlphabet& a) {
  const int s = a.start_class(), e = a.end_class();
  auto allowed = [&](int prev, int c) {
    if (prev < 0) return c == s;
    if (prev == s) return true;
    if (prev == e) return c == e;
    return c != s;
  };
  std::vector<Segmentation> out;
  for (const auto& comp : compositions(T, max_len))
    for (const auto& lab : labelings(static_cast<int>(comp.size()), a.num_classes(), allowed, e))
      out.push_back(make_segmentation(comp, lab));
  return out;
}

struct Best {
  double score = fsr::kNegInf;
  double log_sum = fsr::kNegInf;
  Segmentation argmax;
  std::size_t count = 0;
};

inline Best scrf_enumerate(const fsr::ScrfModel& model, const fsr::ScrfInput& input) {
  Best b;
  for (const auto& p : scrf_paths(input.length(), model.cfg.max_segment, model.alphabet)) {
    const double v = fsr::path_score(model, input, p);
    b.log_sum = fsr::log_add(b.log_sum, v);
    ++b.count;
    if (v > b.score) {
      b.score = v;
      b.argmax = p;
    }
  }
  return b;
}

// Best in-model alignment score of one class over a segment, found by
// enumerating the split of the segment across the model's states.
inline double hmm_segment_score(const fsr::HmmModel& m, const Matrix& em, int c, int t0, int t1, bool charge_exit) {
  const auto& h = m.classes[static_cast<std::size_t>(c)];
  const int S = h.num_states();
  const int len = t1 - t0 + 1;
  if (len < S) return fsr::kNegInf;
  const int off = m.state_offset(c);
  double best = fsr::kNegInf;
  for (const auto& split : compositions(len, len)) {
    if (static_cast<int>(split.size()) != S) continue;
    double v = 0.0;
    int t = t0;
    for (int s = 0; s < S; ++s) {
      for (int k = 0; k < split[static_cast<std::size_t>(s)]; ++k, ++t) v += em(t, off + s);
      v += (split[static_cast<std::size_t>(s)] - 1) * std::log(h.self_loop(s));
      if (s + 1 < S || charge_exit) v += std::log1p(-h.self_loop(s));
    }
    best = std::max(best, v);
  }
  return best;
}

inline bool hmm_allowed(const fsr::HmmModel& m, int prev, int c) {
  if (prev < 0) return c == m.start_class();
  if (c == m.start_class() || prev == m.end_class()) return false;
  return true;
}

inline double hmm_path_score(const fsr::HmmModel& m, const Matrix& em, const Segmentation& p,
                             const fsr::DecodeParams& params) {
  double v = 0.0;
  int prev = -1;
  for (const auto& s : p) {
    v += hmm_segment_score(m, em, s.label, s.start, s.end, s.label != m.end_class());
    if (prev >= 0) v += params.lm_weight * m.lm.log_prob(prev, s.label) + (m.is_boundary(s.label) ? 0.0 : params.insertion_penalty);
    prev = s.label;
  }
  return v;
}

inline Best hmm_enumerate(const fsr::HmmModel& m, const Matrix& em, const fsr::DecodeParams& params) {
  Best b;
  const int T = static_cast<int>(em.rows());
  for (const auto& comp : compositions(T, T))
    for (const auto& lab : labelings(static_cast<int>(comp.size()), m.num_classes(),
                                     [&](int p, int c) { return hmm_allowed(m, p, c); }, m.end_class())) {
      const auto p = make_segmentation(comp, lab);
      const double v = hmm_path_score(m, em, p, params);
      if (v == fsr::kNegInf) continue;
      ++b.count;
      b.log_sum = fsr::log_add(b.log_sum, v);
      if (v > b.score) {
        b.score = v;
        b.argmax = p;
      }
    }
  return b;
}

// Total probability of a class chain by summing over every frame-to-state path.
inline double hmm_chain_sum(const fsr::HmmModel& m, const Matrix& em, const LabelSeq& chain) {
  struct St {
    int cls, state, global;
  };
  std::vector<St> states;
  for (int c : chain)
    for (int s = 0; s < m.classes[static_cast<std::size_t>(c)].num_states(); ++s)
      states.push_back({c, s, m.state_offset(c) + s});
  const int T = static_cast<int>(em.rows());
  const int J = static_cast<int>(states.size());
  double total = fsr::kNegInf;
  std::vector<int> path(static_cast<std::size_t>(T));
  std::function<void(int, int, double)> rec = [&](int t, int j, double v) {
    v += em(t, states[static_cast<std::size_t>(j)].global);
    if (t == T - 1) {
      if (j == J - 1) total = fsr::log_add(total, v);
      return;
    }
    const auto& st = states[static_cast<std::size_t>(j)];
    const double a = m.classes[static_cast<std::size_t>(st.cls)].self_loop(st.state);
    rec(t + 1, j, v + std::log(a));
    if (j + 1 < J) rec(t + 1, j + 1, v + std::log1p(-a));
  };
  rec(0, 0, 0.0);
  return total;
}

// Minimum edit distance counts by exhaustive recursion over alignments.
inline fsr::EditCounts edit_oracle(const LabelSeq& ref, const LabelSeq& hyp) {
  // Enumerate every alignment as a sequence of operations and keep the
  // minimum-cost ones; among them prefer more substitutions (fewer I+D).
  fsr::EditCounts best;
  long best_cost = -1;
  std::function<void(std::size_t, std::size_t, long, long, long)> rec = [&](std::size_t i, std::size_t j, long s,
                                                                              long d, long in) {
    const long cost = s + d + in;
    if (best_cost >= 0 && cost > best_cost) return;
    if (i == ref.size() && j == hyp.size()) {
      if (best_cost < 0 || cost < best_cost || (cost == best_cost && s > best.substitutions)) {
        best_cost = cost;
        best.substitutions = s;
        best.deletions = d;
        best.insertions = in;
      }
      return;
    }
    if (i < ref.size() && j < hyp.size()) rec(i + 1, j + 1, s + (ref[i] != hyp[j] ? 1 : 0), d, in);
    if (i < ref.size()) rec(i + 1, j, s, d + 1, in);
    if (j < hyp.size()) rec(i, j + 1, s, d, in + 1);
  };
  rec(0, 0, 0, 0, 0);
  best.reference = static_cast<long>(ref.size());
  return best;
}

// Worst relative error between the analytic MLP gradient and central
// differences over `probes` coordinates, half of them the largest-gradient
// entries of randomly chosen blocks. Dropout is off.
inline double mlp_gradient_error(const fsr::FrameClassifier& model, const Matrix& windows, const std::vector<int>& labels,
                                 fsr::Trainable which, double decay, int probes, std::mt19937_64& rng) {
  fsr::FrameClassifier work = model, grad = model;
  fsr::loss_and_gradient(work, windows, labels, which, decay, grad);
  const auto params = fsr::parameter_blocks(work, which);
  const auto grads = fsr::parameter_blocks(grad, which);
  std::uniform_int_distribution<std::size_t> block(0, params.size() - 1);
  double worst = 0.0;
  for (int p = 0; p < probes; ++p) {
    const std::size_t b = block(rng);
    Eigen::Map<const fsr::Vector> g(grads[b].data, grads[b].size);
    Eigen::Index i = std::uniform_int_distribution<Eigen::Index>(0, params[b].size - 1)(rng);
    if (p % 2 == 0) g.cwiseAbs().maxCoeff(&i);
    const double h = 1e-6;
    double& x = params[b].data[i];
    const double x0 = x;
    fsr::FrameClassifier scratch = model;
    x = x0 + h;
    const double up = fsr::loss_and_gradient(work, windows, labels, which, decay, scratch);
    x = x0 - h;
    const double down = fsr::loss_and_gradient(work, windows, labels, which, decay, scratch);
    x = x0;
    const double fd = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(fd - g(i)) / std::max({1e-6, std::abs(fd), std::abs(g(i))}));
  }
  return worst;
}

}  // namespace oracle
