#include "fsr/scrf.hpp"

#include "fsr/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace fsr {

std::string to_string(ScrfMode mode) { return mode == ScrfMode::Rescoring ? "rescoring" : "first_pass"; }

ScrfMode scrf_mode_from_string(const std::string& s) {
  if (s == "rescoring") return ScrfMode::Rescoring;
  if (s == "first_pass") return ScrfMode::FirstPass;
  throw ConfigError("scrf.mode: expected 'rescoring' or 'first_pass', got '" + s + "'");
}

// ---------------------------------------------------------------------------
// Configuration and layout

void ScrfConfig::validate() const {
  if (max_segment < 1) throw ConfigError("scrf.max_segment: must be >= 1");
  if (l2 < 0.0) throw ConfigError("scrf.l2: must be >= 0");
  for (int t : tasks)
    if (t < 0 || t >= kNumTasks) throw ConfigError("scrf.tasks: task index out of range");
  for (double q : sample_positions)
    if (q < 0.0 || q > 1.0) throw ConfigError("scrf.sample_positions: must lie in [0, 1]");
  for (std::size_t i = 0; i < duration_edges.size(); ++i)
    if (duration_edges[i] < 1 || (i > 0 && duration_edges[i] <= duration_edges[i - 1]))
      throw ConfigError("scrf.duration_edges: must be positive and increasing");
  if (iterations < 0) throw ConfigError("scrf.iterations: must be >= 0");
  if (!(initial_step > 0.0)) throw ConfigError("scrf.initial_step: must be positive");
}

std::vector<int> ScrfConfig::effective_tasks() const {
  if (!tasks.empty()) return tasks;
  if (mode == ScrfMode::FirstPass) return {kLetterTask};
  std::vector<int> all(kNumTasks);
  for (int t = 0; t < kNumTasks; ++t) all[static_cast<std::size_t>(t)] = t;
  return all;
}

ScrfConfig ScrfConfig::from_json(const io::Json& j) {
  ScrfConfig c;
  io::reject_keys_outside(j, c.to_json(), "scrf");
  try {
    if (j.contains("mode")) c.mode = scrf_mode_from_string(j.at("mode").get<std::string>());
    c.max_segment = j.value("max_segment", c.max_segment);
    c.l2 = j.value("l2", c.l2);
    c.tasks = j.value("tasks", c.tasks);
    c.sample_positions = j.value("sample_positions", c.sample_positions);
    c.duration_edges = j.value("duration_edges", c.duration_edges);
    c.iterations = j.value("iterations", c.iterations);
    c.initial_step = j.value("initial_step", c.initial_step);
    c.latent_segmentation = j.value("latent_segmentation", c.latent_segmentation);
  } catch (const io::Json::exception& e) {
    throw ConfigError(std::string("scrf: ") + e.what());
  }
  c.validate();
  return c;
}

io::Json ScrfConfig::to_json() const {
  return {{"mode", to_string(mode)},
          {"max_segment", max_segment},
          {"l2", l2},
          {"tasks", tasks},
          {"sample_positions", sample_positions},
          {"duration_edges", duration_edges},
          {"iterations", iterations},
          {"initial_step", initial_step},
          {"latent_segmentation", latent_segmentation}};
}

ScrfLayout ScrfLayout::build(const ScrfConfig& cfg, const LabelAlphabet& alphabet) {
  ScrfLayout l;
  l.num_classes = alphabet.num_classes();
  l.tasks = cfg.effective_tasks();
  for (int t : l.tasks) {
    l.task_dims.push_back(alphabet.task_classes(t));
    l.mean_dim += l.task_dims.back();
  }
  if (cfg.mode == ScrfMode::FirstPass) {
    l.samples = static_cast<int>(cfg.sample_positions.size());
    l.duration_bins = static_cast<int>(cfg.duration_edges.size()) + 1;
    l.per_label = l.mean_dim * (1 + l.samples) + l.duration_bins + 1;
  } else {
    l.per_label = l.mean_dim;
  }
  l.lm = l.num_classes * l.per_label;
  l.size = l.lm + 1;
  if (cfg.mode == ScrfMode::FirstPass) {
    l.transitions = l.size;
    l.size += l.num_classes * l.num_classes;
  } else {
    l.agreement = l.size;
    l.peak = l.size + 1;
    l.size += 2;
  }
  return l;
}

ScrfModel ScrfModel::create(const ScrfConfig& cfg, const LabelAlphabet& alphabet) {
  cfg.validate();
  ScrfModel m;
  m.cfg = cfg;
  m.alphabet = alphabet;
  m.layout = ScrfLayout::build(cfg, alphabet);
  m.weights = Vector::Zero(m.layout.size);
  return m;
}

std::vector<std::string> ScrfModel::feature_names() const {
  std::vector<std::string> shared;
  std::vector<std::string> values;
  for (std::size_t i = 0; i < layout.tasks.size(); ++i) {
    const int task = layout.tasks[i];
    for (int v = 0; v < layout.task_dims[i]; ++v) {
      std::string value;
      if (task == kLetterTask) {
        value = alphabet.symbol(v);
      } else {
        const auto& table = alphabet.phono(task - 1);
        const int n = static_cast<int>(table.values.size());
        value = v < n ? table.values[static_cast<std::size_t>(v)] : alphabet.symbol(alphabet.num_letters() + v - n);
      }
      values.push_back(alphabet.task_name(task) + "=" + value);
    }
  }
  for (const auto& v : values) shared.push_back("mean[" + v + "]");
  if (cfg.mode == ScrfMode::FirstPass) {
    for (double q : cfg.sample_positions) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%.2f", q);
      for (const auto& v : values) shared.push_back(std::string("sample@") + buf + "[" + v + "]");
    }
    int lo = 1;
    for (int edge : cfg.duration_edges) {
      shared.push_back("duration[" + std::to_string(lo) + "-" + std::to_string(edge) + "]");
      lo = edge + 1;
    }
    shared.push_back("duration[" + std::to_string(lo) + "+]");
    shared.push_back("bias");
  }
  std::vector<std::string> names;
  for (int c = 0; c < layout.num_classes; ++c)
    for (const auto& s : shared) names.push_back(s + "|" + alphabet.symbol(c));
  names.push_back("lm");
  if (layout.transitions >= 0)
    for (int p = 0; p < layout.num_classes; ++p)
      for (int c = 0; c < layout.num_classes; ++c)
        names.push_back("bigram|" + alphabet.symbol(p) + "|" + alphabet.symbol(c));
  if (layout.agreement >= 0) {
    names.push_back("agreement");
    names.push_back("peak");
  }
  return names;
}

io::Json ScrfModel::to_json() const {
  const auto names = feature_names();
  io::Json w = io::Json::object();
  for (std::size_t i = 0; i < names.size(); ++i) w[names[i]] = weights(static_cast<Eigen::Index>(i));
  return {{"config", cfg.to_json()}, {"weights", w}};
}

ScrfModel ScrfModel::from_json(const io::Json& j, const LabelAlphabet& alphabet) {
  if (!j.contains("config") || !j.contains("weights")) throw DataError("scrf: weight file lacks 'config' or 'weights'");
  ScrfModel m = create(ScrfConfig::from_json(j.at("config")), alphabet);
  const auto names = m.feature_names();
  const auto& w = j.at("weights");
  if (w.size() != names.size()) throw DataError("scrf: weight file does not match the feature templates");
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!w.contains(names[i])) throw DataError("scrf: missing weight '" + names[i] + "'");
    m.weights(static_cast<Eigen::Index>(i)) = w.at(names[i]).get<double>();
  }
  if (!m.weights.allFinite()) throw NumericalError("scrf: non-finite weight");
  return m;
}

void ScrfModel::save(const io::fs::path& path) const { io::write_json(path, to_json()); }

ScrfModel ScrfModel::load(const io::fs::path& path, const LabelAlphabet& alphabet) {
  return from_json(io::read_json(path), alphabet);
}

// ---------------------------------------------------------------------------
// Feature functions

SegmentFeatures::SegmentFeatures(const ScrfModel& model, const ScrfInput& input) : model_(model), input_(input) {
  const auto& l = model.layout;
  if (input.posteriorgrams.empty()) throw DataError("scrf: no posteriorgrams");
  T_ = input.length();
  if (T_ < 1) throw DataError("scrf: empty utterance");
  stacked_.resize(T_, l.mean_dim);
  Eigen::Index col = 0;
  for (std::size_t i = 0; i < l.tasks.size(); ++i) {
    const auto task = static_cast<std::size_t>(l.tasks[i]);
    if (task >= input.posteriorgrams.size()) throw DataError("scrf: posteriorgram for task " + std::to_string(task) + " missing");
    const Matrix& p = input.posteriorgrams[task];
    if (p.rows() != T_ || p.cols() != l.task_dims[i]) throw DataError("scrf: posteriorgram shape mismatch");
    stacked_.middleCols(col, p.cols()) = p;
    col += p.cols();
  }
  cumulative_ = Matrix::Zero(T_ + 1, l.mean_dim);
  for (int t = 0; t < T_; ++t) cumulative_.row(t + 1) = cumulative_.row(t) + stacked_.row(t);
  if (model.cfg.mode == ScrfMode::Rescoring) {
    if (static_cast<int>(input.baseline.size()) != T_) throw DataError("scrf: baseline labels required for rescoring");
    if (input.posteriorgrams[kLetterTask].cols() != l.num_classes) throw DataError("scrf: letter posteriorgram shape mismatch");
    agree_cumulative_ = Eigen::MatrixXi::Zero(T_ + 1, l.num_classes);
    for (int t = 0; t < T_; ++t) {
      agree_cumulative_.row(t + 1) = agree_cumulative_.row(t);
      const int b = input.baseline[static_cast<std::size_t>(t)];
      if (b < 0 || b >= l.num_classes) throw DataError("scrf: baseline label out of range");
      agree_cumulative_(t + 1, b) += 1;
    }
  }
}

Vector SegmentFeatures::shared(int t0, int t1) const {
  const auto& l = model_.layout;
  const int len = t1 - t0 + 1;
  Vector phi(l.per_label);
  phi.head(l.mean_dim) = (cumulative_.row(t1 + 1) - cumulative_.row(t0)).transpose() / len;
  if (model_.cfg.mode == ScrfMode::Rescoring) return phi;
  int off = l.mean_dim;
  for (double q : model_.cfg.sample_positions) {
    const int t = t0 + static_cast<int>(std::lround(q * (len - 1)));
    phi.segment(off, l.mean_dim) = stacked_.row(t).transpose();
    off += l.mean_dim;
  }
  phi.segment(off, l.duration_bins).setZero();
  int bin = 0;
  while (bin < l.duration_bins - 1 && len > model_.cfg.duration_edges[static_cast<std::size_t>(bin)]) ++bin;
  phi(off + bin) = 1.0;
  phi(off + l.duration_bins) = 1.0;
  return phi;
}

double SegmentFeatures::agreement(int t0, int t1, int label) const {
  return static_cast<double>(agree_cumulative_(t1 + 1, label) - agree_cumulative_(t0, label)) / (t1 - t0 + 1);
}

double SegmentFeatures::peak(int t0, int t1, int label) const {
  const Matrix& p = input_.posteriorgrams[kLetterTask];
  const double top = p.col(label).segment(t0, t1 - t0 + 1).maxCoeff();
  return top - 0.5 * (p(t0, label) + p(t1, label));
}

bool scrf_transition_allowed(const LabelAlphabet& alphabet, int prev, int label) {
  const int s = alphabet.start_class();
  const int e = alphabet.end_class();
  if (prev < 0) return label == s;
  if (prev == s) return true;
  if (prev == e) return label == e;
  return label != s;
}

double scrf_lm_value(const ScrfInput& input, int prev, int label) {
  if (prev < 0 || (prev == label && label >= input.lm.num_letters())) return 0.0;
  if (input.lm.table().size() == 0) return 0.0;
  return input.lm.log_prob(prev, label);
}

Vector segment_feature_vector(const ScrfModel& model, const SegmentFeatures& feats, const ScrfInput& input, int t0,
                              int t1, int label, int prev, double lm_value) {
  (void)input;
  const auto& l = model.layout;
  Vector f = Vector::Zero(l.size);
  f.segment(l.label_block(label), l.per_label) = feats.shared(t0, t1);
  f(l.lm) = lm_value;
  if (l.transitions >= 0 && prev >= 0) f(l.transition(prev, label)) = 1.0;
  if (l.agreement >= 0) {
    f(l.agreement) = feats.agreement(t0, t1, label);
    f(l.peak) = feats.peak(t0, t1, label);
  }
  return f;
}

double segment_score(const ScrfModel& model, const ScrfInput& input, const Segment& seg, int prev,
                     const ScrfDecodeOptions& opts) {
  const SegmentFeatures feats(model, input);
  Vector f = segment_feature_vector(model, feats, input, seg.start, seg.end, seg.label, prev,
                                    scrf_lm_value(input, prev, seg.label));
  f(model.layout.lm) *= opts.lm_scale;
  return model.weights.dot(f);
}

double path_score(const ScrfModel& model, const ScrfInput& input, const Segmentation& path,
                  const ScrfDecodeOptions& opts) {
  const SegmentFeatures feats(model, input);
  double total = 0.0;
  int prev = -1;
  for (const auto& s : path) {
    Vector f = segment_feature_vector(model, feats, input, s.start, s.end, s.label, prev, scrf_lm_value(input, prev, s.label));
    f(model.layout.lm) *= opts.lm_scale;
    total += model.weights.dot(f);
    prev = s.label;
  }
  return total;
}

// ---------------------------------------------------------------------------
// First-pass search space

namespace {

// seg(t * L + d - 1, y): lexicalised score of label y over frames [t, t + d - 1].
// tr(p, y): transition score, row C standing for the start of the utterance.
struct SpaceTables {
  int T = 0;
  int L = 0;
  int C = 0;
  Matrix seg;
  Matrix tr;
  Matrix lm;  // raw LM feature values, same shape as tr
};

SpaceTables first_pass_tables(const ScrfModel& model, const SegmentFeatures& feats, const ScrfInput& input,
                              double lm_scale) {
  const auto& l = model.layout;
  SpaceTables s;
  s.T = feats.length();
  s.L = model.cfg.max_segment;
  s.C = l.num_classes;
  const Eigen::Map<const Matrix> W(model.weights.data(), l.per_label, l.num_classes);
  s.seg = Matrix::Constant(static_cast<Eigen::Index>(s.T) * s.L, s.C, kNegInf);
  for (int t = 0; t < s.T; ++t)
    for (int d = 1; d <= s.L && t + d <= s.T; ++d)
      s.seg.row(static_cast<Eigen::Index>(t) * s.L + d - 1) = (W.transpose() * feats.shared(t, t + d - 1)).transpose();
  s.tr = Matrix::Constant(s.C + 1, s.C, kNegInf);
  s.lm = Matrix::Zero(s.C + 1, s.C);
  for (int p = 0; p <= s.C; ++p)
    for (int y = 0; y < s.C; ++y) {
      const int prev = p == s.C ? -1 : p;
      if (!scrf_transition_allowed(model.alphabet, prev, y)) continue;
      s.lm(p, y) = scrf_lm_value(input, prev, y);
      s.tr(p, y) = model.weights(l.lm) * lm_scale * s.lm(p, y) + (prev >= 0 ? model.weights(l.transition(prev, y)) : 0.0);
    }
  return s;
}

struct SpaceMarginals {
  double log_z = kNegInf;
  double log_z_backward = kNegInf;
  Matrix seg;  // same shape as SpaceTables::seg
  Matrix tr;
};

// Sum-product over every segmentation of the grammar.
SpaceMarginals full_space_marginals(const SpaceTables& s, bool with_marginals) {
  const int T = s.T, L = s.L, C = s.C;
  Matrix alpha = Matrix::Constant(T + 1, C + 1, kNegInf);
  Matrix in = Matrix::Constant(T, C, kNegInf);
  alpha(0, C) = 0.0;
  for (int t = 0; t < T; ++t) {
    for (int y = 0; y < C; ++y) {
      double v = kNegInf;
      for (int p = 0; p <= C; ++p)
        if (alpha(t, p) != kNegInf && s.tr(p, y) != kNegInf) v = log_add(v, alpha(t, p) + s.tr(p, y));
      in(t, y) = v;
    }
    for (int d = 1; d <= L && t + d <= T; ++d)
      for (int y = 0; y < C; ++y)
        if (in(t, y) != kNegInf) alpha(t + d, y) = log_add(alpha(t + d, y), in(t, y) + s.seg(static_cast<Eigen::Index>(t) * L + d - 1, y));
  }
  const int end = C - 1;
  SpaceMarginals m;
  m.log_z = alpha(T, end);

  Matrix beta = Matrix::Constant(T + 1, C + 1, kNegInf);
  Matrix out = Matrix::Constant(T, C, kNegInf);
  beta(T, end) = 0.0;
  for (int t = T - 1; t >= 0; --t) {
    for (int y = 0; y < C; ++y) {
      double v = kNegInf;
      for (int d = 1; d <= L && t + d <= T; ++d)
        if (beta(t + d, y) != kNegInf) v = log_add(v, s.seg(static_cast<Eigen::Index>(t) * L + d - 1, y) + beta(t + d, y));
      out(t, y) = v;
    }
    for (int p = 0; p <= C; ++p) {
      double v = kNegInf;
      for (int y = 0; y < C; ++y)
        if (s.tr(p, y) != kNegInf && out(t, y) != kNegInf) v = log_add(v, s.tr(p, y) + out(t, y));
      beta(t, p) = v;
    }
  }
  m.log_z_backward = beta(0, C);
  if (!with_marginals || m.log_z == kNegInf) return m;

  m.seg = Matrix::Zero(s.seg.rows(), C);
  m.tr = Matrix::Zero(C + 1, C);
  for (int t = 0; t < T; ++t) {
    for (int d = 1; d <= L && t + d <= T; ++d)
      for (int y = 0; y < C; ++y) {
        const double v = in(t, y) + s.seg(static_cast<Eigen::Index>(t) * L + d - 1, y) + beta(t + d, y);
        if (v != kNegInf) m.seg(static_cast<Eigen::Index>(t) * L + d - 1, y) = std::exp(v - m.log_z);
      }
    for (int p = 0; p <= C; ++p)
      for (int y = 0; y < C; ++y) {
        const double v = alpha(t, p) + s.tr(p, y) + out(t, y);
        if (v != kNegInf) m.tr(p, y) += std::exp(v - m.log_z);
      }
  }
  return m;
}

// The grammar's label chain for a word: <s> · word · </s>, where both
// boundary positions may repeat.
struct WordChain {
  LabelSeq labels;
  bool repeats(std::size_t j) const { return j == 0 || j + 1 == labels.size(); }
};

WordChain scrf_chain(const LabelSeq& word, const LabelAlphabet& alphabet) {
  WordChain c;
  c.labels.push_back(alphabet.start_class());
  c.labels.insert(c.labels.end(), word.begin(), word.end());
  c.labels.push_back(alphabet.end_class());
  return c;
}

// Sum-product over segmentations whose labels spell the given chain.
SpaceMarginals chain_marginals(const SpaceTables& s, const WordChain& chain) {
  const int T = s.T, L = s.L, C = s.C;
  const int J = static_cast<int>(chain.labels.size());
  auto lab = [&](int j) { return chain.labels[static_cast<std::size_t>(j)]; };
  // Entry score into position j at boundary t.
  Matrix alpha = Matrix::Constant(T + 1, J, kNegInf);
  Matrix in = Matrix::Constant(T, J, kNegInf);
  for (int t = 0; t < T; ++t) {
    for (int j = 0; j < J; ++j) {
      double v = kNegInf;
      if (j == 0 && t == 0) v = s.tr(C, lab(0));
      if (j > 0 && alpha(t, j - 1) != kNegInf) v = log_add(v, alpha(t, j - 1) + s.tr(lab(j - 1), lab(j)));
      if (chain.repeats(static_cast<std::size_t>(j)) && alpha(t, j) != kNegInf) v = log_add(v, alpha(t, j) + s.tr(lab(j), lab(j)));
      in(t, j) = v;
    }
    for (int d = 1; d <= L && t + d <= T; ++d)
      for (int j = 0; j < J; ++j)
        if (in(t, j) != kNegInf)
          alpha(t + d, j) = log_add(alpha(t + d, j), in(t, j) + s.seg(static_cast<Eigen::Index>(t) * L + d - 1, lab(j)));
  }
  SpaceMarginals m;
  m.log_z = alpha(T, J - 1);
  if (m.log_z == kNegInf) return m;

  Matrix beta = Matrix::Constant(T + 1, J, kNegInf);
  Matrix out = Matrix::Constant(T, J, kNegInf);
  beta(T, J - 1) = 0.0;
  for (int t = T - 1; t >= 0; --t) {
    for (int j = 0; j < J; ++j) {
      double v = kNegInf;
      for (int d = 1; d <= L && t + d <= T; ++d)
        if (beta(t + d, j) != kNegInf) v = log_add(v, s.seg(static_cast<Eigen::Index>(t) * L + d - 1, lab(j)) + beta(t + d, j));
      out(t, j) = v;
    }
    for (int j = 0; j < J; ++j) {
      double v = kNegInf;
      if (j + 1 < J && out(t, j + 1) != kNegInf) v = log_add(v, s.tr(lab(j), lab(j + 1)) + out(t, j + 1));
      if (chain.repeats(static_cast<std::size_t>(j)) && out(t, j) != kNegInf) v = log_add(v, s.tr(lab(j), lab(j)) + out(t, j));
      beta(t, j) = v;
    }
  }
  m.log_z_backward = s.tr(C, lab(0)) + out(0, 0);
  m.seg = Matrix::Zero(s.seg.rows(), C);
  m.tr = Matrix::Zero(C + 1, C);
  for (int t = 0; t < T; ++t)
    for (int j = 0; j < J; ++j) {
      for (int d = 1; d <= L && t + d <= T; ++d) {
        const double v = in(t, j) + s.seg(static_cast<Eigen::Index>(t) * L + d - 1, lab(j)) + beta(t + d, j);
        if (v != kNegInf) m.seg(static_cast<Eigen::Index>(t) * L + d - 1, lab(j)) += std::exp(v - m.log_z);
      }
      if (out(t, j) == kNegInf) continue;
      if (j == 0 && t == 0) m.tr(C, lab(0)) += std::exp(s.tr(C, lab(0)) + out(0, 0) - m.log_z);
      if (j > 0 && alpha(t, j - 1) != kNegInf)
        m.tr(lab(j - 1), lab(j)) += std::exp(alpha(t, j - 1) + s.tr(lab(j - 1), lab(j)) + out(t, j) - m.log_z);
      if (chain.repeats(static_cast<std::size_t>(j)) && alpha(t, j) != kNegInf)
        m.tr(lab(j), lab(j)) += std::exp(alpha(t, j) + s.tr(lab(j), lab(j)) + out(t, j) - m.log_z);
    }
  return m;
}

// Indicator tables of a single path.
SpaceMarginals path_tables(const SpaceTables& s, const Segmentation& path) {
  SpaceMarginals m;
  m.seg = Matrix::Zero(s.seg.rows(), s.C);
  m.tr = Matrix::Zero(s.C + 1, s.C);
  m.log_z = 0.0;
  int prev = s.C;
  for (const auto& seg : path) {
    const int d = seg.length();
    if (d > s.L) throw DataError("scrf: segment longer than max_segment");
    m.seg(static_cast<Eigen::Index>(seg.start) * s.L + d - 1, seg.label) += 1.0;
    if (s.tr(prev, seg.label) == kNegInf) throw DataError("scrf: segmentation violates the label grammar");
    m.tr(prev, seg.label) += 1.0;
    m.log_z += s.seg(static_cast<Eigen::Index>(seg.start) * s.L + d - 1, seg.label) + s.tr(prev, seg.label);
    prev = seg.label;
  }
  return m;
}

// gradient += features weighted by the (a - b) marginal tables.
void add_table_gradient(const ScrfModel& model, const SegmentFeatures& feats, const SpaceTables& s,
                        const SpaceMarginals& a, const SpaceMarginals& b, Vector& gradient) {
  const auto& l = model.layout;
  Eigen::Map<Matrix> G(gradient.data(), l.per_label, l.num_classes);
  const Matrix dseg = a.seg - b.seg;
  for (int t = 0; t < s.T; ++t)
    for (int d = 1; d <= s.L && t + d <= s.T; ++d) {
      const auto row = dseg.row(static_cast<Eigen::Index>(t) * s.L + d - 1);
      if (row.cwiseAbs().maxCoeff() == 0.0) continue;
      G.noalias() += feats.shared(t, t + d - 1) * row;
    }
  const Matrix dtr = a.tr - b.tr;
  for (int p = 0; p <= s.C; ++p)
    for (int y = 0; y < s.C; ++y) {
      if (s.tr(p, y) == kNegInf) continue;
      gradient(l.lm) += dtr(p, y) * s.lm(p, y);
      if (p < s.C) gradient(l.transition(p, y)) += dtr(p, y);
    }
}

// ---------------------------------------------------------------------------
// Lattice search space

struct ArcTables {
  std::vector<double> score;
  std::vector<std::size_t> order;  // topological
};

ArcTables lattice_arc_scores(const ScrfModel& model, const SegmentFeatures& feats, const Lattice& lat, double lm_scale) {
  const auto& l = model.layout;
  ArcTables a;
  a.score.resize(lat.arcs.size());
  for (std::size_t i = 0; i < lat.arcs.size(); ++i) {
    const auto& arc = lat.arcs[i];
    const int t0 = lat.arc_start_frame(arc);
    const int t1 = lat.arc_end_frame(arc);
    double v = model.weights.segment(l.label_block(arc.label), l.per_label).dot(feats.shared(t0, t1));
    v += model.weights(l.lm) * lm_scale * arc.lm_score;
    if (l.agreement >= 0)
      v += model.weights(l.agreement) * feats.agreement(t0, t1, arc.label) + model.weights(l.peak) * feats.peak(t0, t1, arc.label);
    a.score[i] = v;
  }
  a.order.resize(lat.arcs.size());
  for (std::size_t i = 0; i < a.order.size(); ++i) a.order[i] = i;
  std::stable_sort(a.order.begin(), a.order.end(), [&](std::size_t x, std::size_t y) {
    return lat.arc_start_frame(lat.arcs[x]) < lat.arc_start_frame(lat.arcs[y]);
  });
  return a;
}

struct LatticeMarginals {
  double log_z = kNegInf;
  double log_z_backward = kNegInf;
  std::vector<double> arc;  // posterior arc probabilities
};

// Sum-product over lattice paths; with a word, only paths spelling it count.
LatticeMarginals lattice_marginals(const Lattice& lat, const ArcTables& a, const LabelSeq* word, bool with_marginals) {
  const std::size_t N = lat.nodes.size();
  const int J = word ? static_cast<int>(word->size()) + 1 : 1;  // letters consumed so far
  auto state = [&](int node, int j) {
    return static_cast<std::size_t>(node) * static_cast<std::size_t>(J) + static_cast<std::size_t>(j);
  };
  auto next_j = [&](const LatticeArc& arc, int j) {
    if (!word || lat.is_boundary(arc.label)) return j;
    if (j >= J - 1 || (*word)[static_cast<std::size_t>(j)] != arc.label) return -1;
    return j + 1;
  };
  std::vector<double> alpha(N * static_cast<std::size_t>(J), kNegInf);
  std::vector<double> beta(N * static_cast<std::size_t>(J), kNegInf);
  alpha[state(lat.start, 0)] = 0.0;
  for (std::size_t i : a.order) {
    const auto& arc = lat.arcs[i];
    for (int j = 0; j < J; ++j) {
      const int k = next_j(arc, j);
      if (k < 0 || alpha[state(arc.from, j)] == kNegInf) continue;
      alpha[state(arc.to, k)] = log_add(alpha[state(arc.to, k)], alpha[state(arc.from, j)] + a.score[i]);
    }
  }
  beta[state(lat.end, J - 1)] = 0.0;
  for (auto it = a.order.rbegin(); it != a.order.rend(); ++it) {
    const auto& arc = lat.arcs[*it];
    for (int j = 0; j < J; ++j) {
      const int k = next_j(arc, j);
      if (k < 0 || beta[state(arc.to, k)] == kNegInf) continue;
      beta[state(arc.from, j)] = log_add(beta[state(arc.from, j)], a.score[*it] + beta[state(arc.to, k)]);
    }
  }
  LatticeMarginals m;
  m.log_z = alpha[state(lat.end, J - 1)];
  m.log_z_backward = beta[state(lat.start, 0)];
  if (!with_marginals || m.log_z == kNegInf) return m;
  m.arc.assign(lat.arcs.size(), 0.0);
  for (std::size_t i = 0; i < lat.arcs.size(); ++i) {
    const auto& arc = lat.arcs[i];
    for (int j = 0; j < J; ++j) {
      const int k = next_j(arc, j);
      if (k < 0) continue;
      const double v = alpha[state(arc.from, j)] + a.score[i] + beta[state(arc.to, k)];
      if (v != kNegInf) m.arc[i] += std::exp(v - m.log_z);
    }
  }
  return m;
}

void add_lattice_gradient(const ScrfModel& model, const SegmentFeatures& feats, const Lattice& lat,
                          const std::vector<double>& a, const std::vector<double>& b, Vector& gradient) {
  const auto& l = model.layout;
  for (std::size_t i = 0; i < lat.arcs.size(); ++i) {
    const double w = a[i] - b[i];
    if (w == 0.0) continue;
    const auto& arc = lat.arcs[i];
    const int t0 = lat.arc_start_frame(arc);
    const int t1 = lat.arc_end_frame(arc);
    gradient.segment(l.label_block(arc.label), l.per_label) += w * feats.shared(t0, t1);
    gradient(l.lm) += w * arc.lm_score;
    if (l.agreement >= 0) {
      gradient(l.agreement) += w * feats.agreement(t0, t1, arc.label);
      gradient(l.peak) += w * feats.peak(t0, t1, arc.label);
    }
  }
}

const Lattice& require_lattice(const ScrfInput& input) {
  if (!input.lattice) throw DataError("scrf: rescoring requires a lattice");
  if (input.lattice->num_frames != input.length()) throw DataError("scrf: lattice length differs from the posteriorgrams");
  return *input.lattice;
}

Decoding finish_decoding(Segmentation seg, double score, const LabelAlphabet& alphabet) {
  Decoding d;
  d.segmentation = std::move(seg);
  d.score = score;
  d.letters = letters_of(d.segmentation, alphabet);
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// Decoding and normalisation

Decoding decode_first_pass(const ScrfModel& model, const ScrfInput& input, const ScrfDecodeOptions& opts) {
  if (input.posteriorgrams.empty() || input.length() == 0) throw DataError("scrf: cannot decode an empty utterance");
  const SegmentFeatures feats(model, input);
  const auto s = first_pass_tables(model, feats, input, opts.lm_scale);
  const int T = s.T, L = s.L, C = s.C;
  Matrix delta = Matrix::Constant(T + 1, C + 1, kNegInf);
  Eigen::MatrixXi from_t = Eigen::MatrixXi::Constant(T + 1, C + 1, -1);
  Eigen::MatrixXi from_y = Eigen::MatrixXi::Constant(T + 1, C + 1, -1);
  delta(0, C) = 0.0;
  for (int t = 0; t < T; ++t)
    for (int y = 0; y < C; ++y) {
      double in = kNegInf;
      int arg = -1;
      for (int p = 0; p <= C; ++p) {
        if (delta(t, p) == kNegInf || s.tr(p, y) == kNegInf) continue;
        const double v = delta(t, p) + s.tr(p, y);
        if (v > in) {
          in = v;
          arg = p;
        }
      }
      if (in == kNegInf) continue;
      for (int d = 1; d <= L && t + d <= T; ++d) {
        const double v = in + s.seg(static_cast<Eigen::Index>(t) * L + d - 1, y);
        if (v > delta(t + d, y)) {
          delta(t + d, y) = v;
          from_t(t + d, y) = t;
          from_y(t + d, y) = arg;
        }
      }
    }
  const int end = model.alphabet.end_class();
  if (delta(T, end) == kNegInf) throw DataError("scrf: no segmentation fits the grammar (max_segment too small)");
  Segmentation seg;
  for (int t = T, y = end; t > 0;) {
    const int t0 = from_t(t, y);
    seg.push_back({t0, t - 1, y});
    const int p = from_y(t, y);
    t = t0;
    y = p;
  }
  std::reverse(seg.begin(), seg.end());
  return finish_decoding(std::move(seg), delta(T, end), model.alphabet);
}

Decoding rescore_lattice(const ScrfModel& model, const ScrfInput& input, const ScrfDecodeOptions& opts) {
  const Lattice& lat = require_lattice(input);
  const SegmentFeatures feats(model, input);
  const auto a = lattice_arc_scores(model, feats, lat, opts.lm_scale);
  std::vector<double> best(lat.nodes.size(), kNegInf);
  std::vector<int> via(lat.nodes.size(), -1);
  best[static_cast<std::size_t>(lat.start)] = 0.0;
  for (std::size_t i : a.order) {
    const auto& arc = lat.arcs[i];
    if (best[static_cast<std::size_t>(arc.from)] == kNegInf) continue;
    const double v = best[static_cast<std::size_t>(arc.from)] + a.score[i];
    if (v > best[static_cast<std::size_t>(arc.to)]) {
      best[static_cast<std::size_t>(arc.to)] = v;
      via[static_cast<std::size_t>(arc.to)] = static_cast<int>(i);
    }
  }
  if (best[static_cast<std::size_t>(lat.end)] == kNegInf) throw DataError("scrf: lattice has no complete path");
  Segmentation seg;
  for (int node = lat.end; node != lat.start;) {
    const auto& arc = lat.arcs[static_cast<std::size_t>(via[static_cast<std::size_t>(node)])];
    seg.push_back({lat.arc_start_frame(arc), lat.arc_end_frame(arc), arc.label});
    node = arc.from;
  }
  std::reverse(seg.begin(), seg.end());
  return finish_decoding(std::move(seg), best[static_cast<std::size_t>(lat.end)], model.alphabet);
}

Decoding scrf_decode(const ScrfModel& model, const ScrfInput& input, const ScrfDecodeOptions& opts) {
  return model.cfg.mode == ScrfMode::Rescoring ? rescore_lattice(model, input, opts) : decode_first_pass(model, input, opts);
}

PartitionResult log_partition(const ScrfModel& model, const ScrfInput& input) {
  const SegmentFeatures feats(model, input);
  PartitionResult r;
  if (model.cfg.mode == ScrfMode::Rescoring) {
    const Lattice& lat = require_lattice(input);
    const auto m = lattice_marginals(lat, lattice_arc_scores(model, feats, lat, 1.0), nullptr, false);
    r.forward = m.log_z;
    r.backward = m.log_z_backward;
  } else {
    const auto m = full_space_marginals(first_pass_tables(model, feats, input, 1.0), false);
    r.forward = m.log_z;
    r.backward = m.log_z_backward;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Training

Segmentation fit_segmentation_to_grammar(const ScrfModel& model, const Segmentation& seg) {
  const int L = model.cfg.max_segment;
  Segmentation out;
  for (const auto& s : seg) {
    if (s.length() <= L) {
      out.push_back(s);
      continue;
    }
    if (!model.alphabet.is_boundary(s.label))
      throw DataError("scrf: letter segment of " + std::to_string(s.length()) + " frames exceeds max_segment");
    const int pieces = (s.length() + L - 1) / L;
    for (int k = 0; k < pieces; ++k)
      out.push_back({s.start + k * s.length() / pieces, s.start + (k + 1) * s.length() / pieces - 1, s.label});
  }
  return out;
}

double example_log_likelihood(const ScrfModel& model, const ScrfExample& ex, Vector* gradient) {
  const SegmentFeatures feats(model, ex.input);
  if (model.cfg.mode == ScrfMode::Rescoring) {
    const Lattice& lat = require_lattice(ex.input);
    const auto a = lattice_arc_scores(model, feats, lat, 1.0);
    const auto num = lattice_marginals(lat, a, &ex.word, gradient != nullptr);
    if (num.log_z == kNegInf) throw DataError("scrf: reference word has no path in the lattice");
    const auto den = lattice_marginals(lat, a, nullptr, gradient != nullptr);
    if (gradient) add_lattice_gradient(model, feats, lat, num.arc, den.arc, *gradient);
    return num.log_z - den.log_z;
  }
  const auto s = first_pass_tables(model, feats, ex.input, 1.0);
  SpaceMarginals num;
  if (ex.segmentation.empty()) {
    num = chain_marginals(s, scrf_chain(ex.word, model.alphabet));
    if (num.log_z == kNegInf) throw DataError("scrf: word cannot be segmented within the utterance (infeasible)");
  } else {
    num = path_tables(s, ex.segmentation);
  }
  const auto den = full_space_marginals(s, gradient != nullptr);
  if (den.log_z == kNegInf) throw DataError("scrf: no segmentation fits the grammar");
  if (gradient) add_table_gradient(model, feats, s, num, den, *gradient);
  return num.log_z - den.log_z;
}

double scrf_objective(const ScrfModel& model, const std::vector<ScrfExample>& data, Vector* gradient) {
  if (gradient) gradient->setZero(model.layout.size);
  double total = 0.0;
  for (const auto& ex : data) total += example_log_likelihood(model, ex, gradient);
  const double n = data.empty() ? 1.0 : static_cast<double>(data.size());
  if (gradient) *gradient = *gradient / n - model.cfg.l2 * model.weights;
  const double f = total / n - 0.5 * model.cfg.l2 * model.weights.squaredNorm();
  if (!std::isfinite(f)) throw NumericalError("scrf: objective is not finite");
  return f;
}

ScrfModel train_scrf(ScrfModel model, const std::vector<ScrfExample>& data, ScrfTrainTrace* trace) {
  Vector g;
  double f = scrf_objective(model, data, &g);
  if (trace) trace->objective.push_back(f);
  double step = model.cfg.initial_step;
  for (int it = 0; it < model.cfg.iterations; ++it) {
    bool accepted = false;
    for (int tries = 0; tries < 30 && !accepted; ++tries) {
      ScrfModel trial = model;
      trial.weights += step * g;
      Vector trial_g;
      const double trial_f = scrf_objective(trial, data, &trial_g);
      if (trial_f > f) {
        model = std::move(trial);
        f = trial_f;
        g = std::move(trial_g);
        accepted = true;
        step *= 1.5;
      } else {
        step *= 0.5;
      }
    }
    if (!accepted) break;
    if (trace) trace->objective.push_back(f);
  }
  return model;
}

std::string format_decode_line(const std::string& id, const std::string& hyp, double score) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", score);
  return id + "  " + (hyp.empty() ? "-" : hyp) + "  " + buf;
}

}  // namespace fsr
