#include "fsr/tandem.hpp"

#include "fsr/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

namespace fsr {

// ---------------------------------------------------------------------------
// Bigram LM

BigramLm::BigramLm(int num_letters)
    : num_letters_(num_letters), table_(Matrix::Constant(num_letters + 2, num_letters + 2, kNegInf)) {}

BigramLm BigramLm::train(const std::vector<LabelSeq>& words, int num_letters) {
  BigramLm lm(num_letters);
  const int start = num_letters;
  const int end = num_letters + 1;
  Matrix counts = Matrix::Zero(num_letters + 2, num_letters + 2);
  for (const auto& w : words) {
    int prev = start;
    for (int c : w) {
      if (c < 0 || c >= num_letters) throw DataError("bigram: word contains a non-letter class");
      counts(prev, c) += 1.0;
      prev = c;
    }
    counts(prev, end) += 1.0;
  }
  const double vocab = num_letters + 1;  // letters and </s>
  for (int prev = 0; prev <= start; ++prev) {
    double total = 0.0;
    for (int next = 0; next < num_letters; ++next) total += counts(prev, next);
    total += counts(prev, end);
    for (int next = 0; next < num_letters; ++next)
      lm.table_(prev, next) = std::log((counts(prev, next) + 1.0) / (total + vocab));
    lm.table_(prev, end) = std::log((counts(prev, end) + 1.0) / (total + vocab));
  }
  return lm;
}

BigramLm BigramLm::from_table(Matrix table) {
  if (table.rows() != table.cols() || table.rows() < 3) throw DataError("bigram: malformed table");
  BigramLm lm(static_cast<int>(table.rows()) - 2);
  lm.table_ = std::move(table);
  return lm;
}

double BigramLm::word_log_prob(const LabelSeq& word) const {
  int prev = num_letters_;
  double lp = 0.0;
  for (int c : word) {
    lp += log_prob(prev, c);
    prev = c;
  }
  return lp + log_prob(prev, num_letters_ + 1);
}

// ---------------------------------------------------------------------------
// Tandem features

void TandemFeatureConfig::validate() const {
  if (!(posterior_floor > 0.0)) throw ConfigError("tandem.posterior_floor: must be positive");
  if (posterior_pca_dim < 1) throw ConfigError("tandem.posterior_pca_dim: must be >= 1");
}

TandemFeatureConfig TandemFeatureConfig::from_json(const io::Json& j) {
  TandemFeatureConfig c;
  io::reject_keys_outside(j, c.to_json(), "tandem");
  try {
    c.posterior_floor = j.value("posterior_floor", c.posterior_floor);
    c.posterior_pca_dim = j.value("posterior_pca_dim", c.posterior_pca_dim);
    c.include_base_features = j.value("include_base_features", c.include_base_features);
  } catch (const io::Json::exception& e) {
    throw ConfigError(std::string("tandem: ") + e.what());
  }
  c.validate();
  return c;
}

io::Json TandemFeatureConfig::to_json() const {
  return {{"posterior_floor", posterior_floor},
          {"posterior_pca_dim", posterior_pca_dim},
          {"include_base_features", include_base_features}};
}

Matrix log_posterior_stack(const std::vector<Matrix>& posteriorgrams, double floor) {
  if (posteriorgrams.empty()) throw DataError("tandem: no posteriorgrams");
  const auto T = posteriorgrams.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : posteriorgrams) {
    if (p.rows() != T) throw DataError("tandem: posteriorgram lengths differ");
    cols += p.cols();
  }
  Matrix out(T, cols);
  Eigen::Index offset = 0;
  for (const auto& p : posteriorgrams) {
    out.middleCols(offset, p.cols()) = p.cwiseMax(floor).array().log().matrix();
    offset += p.cols();
  }
  return out;
}

TandemFrontend TandemFrontend::fit(const std::vector<std::vector<Matrix>>& posteriorgram_sets,
                                   const TandemFeatureConfig& cfg) {
  cfg.validate();
  std::vector<Matrix> stacks;
  Eigen::Index rows = 0;
  for (const auto& set : posteriorgram_sets) {
    stacks.push_back(log_posterior_stack(set, cfg.posterior_floor));
    rows += stacks.back().rows();
  }
  if (stacks.empty()) throw DataError("tandem: no training posteriorgrams");
  Matrix all(rows, stacks.front().cols());
  Eigen::Index r = 0;
  for (const auto& s : stacks) {
    all.middleRows(r, s.rows()) = s;
    r += s.rows();
  }
  TandemFrontend f;
  f.cfg = cfg;
  f.pca = pca_fit(all, std::min<int>(cfg.posterior_pca_dim, static_cast<int>(all.cols())));
  return f;
}

Matrix TandemFrontend::apply(const std::vector<Matrix>& posteriorgrams, const Matrix& base_features) const {
  const Matrix reduced = pca_apply_rows(pca, log_posterior_stack(posteriorgrams, cfg.posterior_floor));
  if (!cfg.include_base_features) return reduced;
  if (base_features.rows() != reduced.rows()) throw DataError("tandem: base feature length differs");
  Matrix out(reduced.rows(), reduced.cols() + base_features.cols());
  out << reduced, base_features;
  return out;
}

int TandemFrontend::output_dim(int base_dim) const {
  return pca.output_dim() + (cfg.include_base_features ? base_dim : 0);
}

void TandemFrontend::save(const io::fs::path& path) const {
  io::write_container(path, {{"kind", "tandem_frontend"}, {"config", cfg.to_json()}},
                      {{"mean", pca.mean.transpose()}, {"basis", pca.basis}, {"eigenvalues", pca.eigenvalues.transpose()}});
}

TandemFrontend TandemFrontend::load(const io::fs::path& path) {
  const auto c = io::read_container(path);
  if (c.header.value("kind", "") != "tandem_frontend") throw DataError(path.string() + ": not a tandem frontend");
  TandemFrontend f;
  f.cfg = TandemFeatureConfig::from_json(c.header.at("config"));
  f.pca.mean = c.tensor("mean").transpose();
  f.pca.basis = c.tensor("basis");
  f.pca.eigenvalues = c.tensor("eigenvalues").transpose();
  return f;
}

// ---------------------------------------------------------------------------
// GMM / HMM

Matrix DiagGmm::component_log_likelihoods(const Matrix& frames) const {
  if (frames.cols() != dim()) throw DataError("shape mismatch: GMM feature dimension");
  const auto M = num_components();
  Matrix out(frames.rows(), M);
  constexpr double kLog2Pi = 1.8378770664093453;
  for (int m = 0; m < M; ++m) {
    const Eigen::RowVectorXd inv = variances.row(m).cwiseInverse();
    const double norm = std::log(weights(m)) - 0.5 * (dim() * kLog2Pi + variances.row(m).array().log().sum());
    out.col(m) = (((frames.rowwise() - means.row(m)).array().square().rowwise() * inv.array()).rowwise().sum() * -0.5 +
                  norm)
                     .matrix();
  }
  return out;
}

Vector DiagGmm::log_likelihood(const Matrix& frames) const {
  const Matrix comp = component_log_likelihoods(frames);
  Vector out(comp.rows());
  for (Eigen::Index t = 0; t < comp.rows(); ++t) out(t) = log_sum_exp(comp.row(t));
  return out;
}

int HmmModel::total_states() const {
  int n = 0;
  for (const auto& c : classes) n += c.num_states();
  return n;
}

int HmmModel::state_offset(int c) const {
  int n = 0;
  for (int i = 0; i < c; ++i) n += classes[static_cast<std::size_t>(i)].num_states();
  return n;
}

void HmmConfig::validate() const {
  if (letter_states < 1 || boundary_states < 1) throw ConfigError("hmm: state counts must be >= 1");
  if (mixtures < 1) throw ConfigError("hmm.mixtures: must be >= 1");
  if (!(variance_floor > 0.0)) throw ConfigError("hmm.variance_floor: must be positive");
  if (em_iterations < 0) throw ConfigError("hmm.em_iterations: must be >= 0");
}

HmmConfig HmmConfig::from_json(const io::Json& j) {
  HmmConfig c;
  io::reject_keys_outside(j, c.to_json(), "hmm");
  try {
    c.letter_states = j.value("letter_states", c.letter_states);
    c.boundary_states = j.value("boundary_states", c.boundary_states);
    c.mixtures = j.value("mixtures", c.mixtures);
    c.variance_floor = j.value("variance_floor", c.variance_floor);
    c.em_iterations = j.value("em_iterations", c.em_iterations);
    c.decode.lm_weight = j.value("lm_weight", c.decode.lm_weight);
    c.decode.insertion_penalty = j.value("insertion_penalty", c.decode.insertion_penalty);
  } catch (const io::Json::exception& e) {
    throw ConfigError(std::string("hmm: ") + e.what());
  }
  c.validate();
  return c;
}

io::Json HmmConfig::to_json() const {
  return {{"letter_states", letter_states},   {"boundary_states", boundary_states},
          {"mixtures", mixtures},             {"variance_floor", variance_floor},
          {"em_iterations", em_iterations},   {"lm_weight", decode.lm_weight},
          {"insertion_penalty", decode.insertion_penalty}};
}

void HmmModel::save(const io::fs::path& path) const {
  io::Json header = {{"kind", "hmm"},
                     {"classes", num_classes()},
                     {"dim", dim()},
                     {"lm_weight", params.lm_weight},
                     {"insertion_penalty", params.insertion_penalty},
                     {"variance_floor", variance_floor}};
  io::Json states = io::Json::array();
  std::vector<io::NamedTensor> tensors;
  for (int c = 0; c < num_classes(); ++c) {
    const auto& h = classes[static_cast<std::size_t>(c)];
    states.push_back(h.num_states());
    tensors.emplace_back("c" + std::to_string(c) + ".self_loop", h.self_loop.transpose());
    for (int s = 0; s < h.num_states(); ++s) {
      const auto& g = h.states[static_cast<std::size_t>(s)];
      const std::string p = "c" + std::to_string(c) + ".s" + std::to_string(s);
      tensors.emplace_back(p + ".weights", g.weights.transpose());
      tensors.emplace_back(p + ".means", g.means);
      tensors.emplace_back(p + ".variances", g.variances);
    }
  }
  header["states"] = states;
  tensors.emplace_back("lm", lm.table());
  io::write_container(path, header, tensors);
}

HmmModel HmmModel::load(const io::fs::path& path) {
  const auto c = io::read_container(path);
  if (c.header.value("kind", "") != "hmm") throw DataError(path.string() + ": not an HMM model");
  HmmModel m;
  m.params.lm_weight = c.header.at("lm_weight").get<double>();
  m.params.insertion_penalty = c.header.at("insertion_penalty").get<double>();
  m.variance_floor = c.header.at("variance_floor").get<double>();
  const auto states = c.header.at("states").get<std::vector<int>>();
  for (std::size_t k = 0; k < states.size(); ++k) {
    ClassHmm h;
    h.self_loop = c.tensor("c" + std::to_string(k) + ".self_loop").transpose();
    for (int s = 0; s < states[k]; ++s) {
      const std::string p = "c" + std::to_string(k) + ".s" + std::to_string(s);
      DiagGmm g;
      g.weights = c.tensor(p + ".weights").transpose();
      g.means = c.tensor(p + ".means");
      g.variances = c.tensor(p + ".variances");
      h.states.push_back(std::move(g));
    }
    m.classes.push_back(std::move(h));
  }
  m.lm = BigramLm::from_table(c.tensor("lm"));
  return m;
}

Matrix emission_table(const HmmModel& model, const Matrix& features) {
  Matrix out(features.rows(), model.total_states());
  int g = 0;
  for (const auto& c : model.classes)
    for (const auto& s : c.states) out.col(g++) = s.log_likelihood(features);
  return out;
}

LabelSeq word_chain(const LabelSeq& word, const LabelAlphabet& alphabet) {
  LabelSeq chain{alphabet.start_class()};
  chain.insert(chain.end(), word.begin(), word.end());
  chain.push_back(alphabet.end_class());
  return chain;
}

// ---------------------------------------------------------------------------
// Composite chain models

namespace {

struct ChainState {
  int cls;
  int state;
  int global;
  bool last_of_model;
};

std::vector<ChainState> expand_chain(const HmmModel& model, const LabelSeq& chain) {
  std::vector<ChainState> out;
  for (int c : chain) {
    if (c < 0 || c >= model.num_classes()) throw DataError("chain class out of range");
    const int S = model.classes[static_cast<std::size_t>(c)].num_states();
    const int off = model.state_offset(c);
    for (int s = 0; s < S; ++s) out.push_back({c, s, off + s, s == S - 1});
  }
  return out;
}

double log_self(const HmmModel& m, const ChainState& s) {
  return std::log(m.classes[static_cast<std::size_t>(s.cls)].self_loop(s.state));
}

double log_advance(const HmmModel& m, const ChainState& s) {
  return std::log1p(-m.classes[static_cast<std::size_t>(s.cls)].self_loop(s.state));
}

// Forward/backward over a chain; emissions indexed by global state.
struct ChainLattice {
  Matrix alpha;
  Matrix beta;
  double log_likelihood = kNegInf;
};

ChainLattice chain_forward_backward(const HmmModel& model, const std::vector<ChainState>& states,
                                    const Matrix& emissions, bool with_backward) {
  const auto T = emissions.rows();
  const auto J = static_cast<Eigen::Index>(states.size());
  ChainLattice r;
  r.alpha = Matrix::Constant(T, J, kNegInf);
  r.alpha(0, 0) = emissions(0, states[0].global);
  for (Eigen::Index t = 1; t < T; ++t)
    for (Eigen::Index j = 0; j < J; ++j) {
      double a = r.alpha(t - 1, j) + log_self(model, states[static_cast<std::size_t>(j)]);
      if (j > 0) a = log_add(a, r.alpha(t - 1, j - 1) + log_advance(model, states[static_cast<std::size_t>(j - 1)]));
      r.alpha(t, j) = a == kNegInf ? kNegInf : a + emissions(t, states[static_cast<std::size_t>(j)].global);
    }
  r.log_likelihood = r.alpha(T - 1, J - 1);
  if (!with_backward) return r;
  r.beta = Matrix::Constant(T, J, kNegInf);
  r.beta(T - 1, J - 1) = 0.0;
  for (Eigen::Index t = T - 1; t-- > 0;)
    for (Eigen::Index j = 0; j < J; ++j) {
      const auto& s = states[static_cast<std::size_t>(j)];
      double b = r.beta(t + 1, j) + log_self(model, s) + emissions(t + 1, s.global);
      if (j + 1 < J)
        b = log_add(b, r.beta(t + 1, j + 1) + log_advance(model, s) + emissions(t + 1, states[static_cast<std::size_t>(j + 1)].global));
      r.beta(t, j) = b;
    }
  return r;
}

DiagGmm init_gmm(const Matrix& frames, int mixtures, double floor) {
  const Vector mean = frames.colwise().mean().transpose();
  Vector var = ((frames.rowwise() - mean.transpose()).array().square().colwise().sum() /
                static_cast<double>(frames.rows()))
                   .matrix()
                   .transpose();
  var = var.cwiseMax(floor);
  DiagGmm g;
  g.weights = Vector::Constant(mixtures, 1.0 / mixtures);
  g.means.resize(mixtures, mean.size());
  g.variances.resize(mixtures, mean.size());
  for (int m = 0; m < mixtures; ++m) {
    const double shift = 0.5 * (m - 0.5 * (mixtures - 1));
    g.means.row(m) = (mean + shift * var.cwiseSqrt()).transpose();
    g.variances.row(m) = var.transpose();
  }
  return g;
}

// Frames of a segment split evenly across the model's states.
int state_of_frame(int i, int len, int states) { return std::min(states - 1, i * states / len); }

}  // namespace

double chain_log_likelihood(const HmmModel& model, const Matrix& features, const LabelSeq& chain) {
  const auto states = expand_chain(model, chain);
  return chain_forward_backward(model, states, emission_table(model, features), false).log_likelihood;
}

HmmModel init_hmm(const std::vector<HmmTrainingItem>& data, const LabelAlphabet& alphabet, const BigramLm& lm,
                  const HmmConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw DataError("hmm: no training data");
  const int C = alphabet.num_classes();
  const int D = static_cast<int>(data.front().features.cols());
  const auto n_states = [&](int c) { return alphabet.is_boundary(c) ? cfg.boundary_states : cfg.letter_states; };

  std::vector<std::vector<std::vector<Eigen::Index>>> members(static_cast<std::size_t>(C));
  std::vector<std::vector<double>> frames_in_state(static_cast<std::size_t>(C));
  std::vector<std::vector<double>> visits(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    members[static_cast<std::size_t>(c)].resize(static_cast<std::size_t>(n_states(c)));
    frames_in_state[static_cast<std::size_t>(c)].assign(static_cast<std::size_t>(n_states(c)), 0.0);
    visits[static_cast<std::size_t>(c)].assign(static_cast<std::size_t>(n_states(c)), 0.0);
  }

  Eigen::Index total_rows = 0;
  for (const auto& item : data) total_rows += item.features.rows();
  Matrix all(total_rows, D);
  Eigen::Index base = 0;
  for (const auto& item : data) {
    if (item.features.cols() != D) throw DataError("hmm: feature dimensions differ");
    const int T = static_cast<int>(item.features.rows());
    all.middleRows(base, T) = item.features;
    Segmentation seg = item.init_segmentation;
    if (seg.empty()) {
      const int n = static_cast<int>(item.chain.size());
      if (T < n) throw DataError("hmm: utterance too short for its transcription");
      for (int k = 0; k < n; ++k) seg.push_back({k * T / n, (k + 1) * T / n - 1, item.chain[static_cast<std::size_t>(k)]});
    }
    validate_segmentation(seg, T, C);
    for (const auto& s : seg) {
      const int S = n_states(s.label);
      for (int i = 0; i < s.length(); ++i) {
        const int st = state_of_frame(i, s.length(), S);
        members[static_cast<std::size_t>(s.label)][static_cast<std::size_t>(st)].push_back(base + s.start + i);
        frames_in_state[static_cast<std::size_t>(s.label)][static_cast<std::size_t>(st)] += 1.0;
      }
      for (int st = 0; st < S; ++st) visits[static_cast<std::size_t>(s.label)][static_cast<std::size_t>(st)] += 1.0;
    }
    base += T;
  }

  HmmModel model;
  model.lm = lm;
  model.params = cfg.decode;
  model.variance_floor = cfg.variance_floor;
  for (int c = 0; c < C; ++c) {
    ClassHmm h;
    const int S = n_states(c);
    h.self_loop.resize(S);
    for (int s = 0; s < S; ++s) {
      const auto& idx = members[static_cast<std::size_t>(c)][static_cast<std::size_t>(s)];
      Matrix frames;
      if (idx.empty()) {
        frames = all;
      } else {
        frames.resize(static_cast<Eigen::Index>(idx.size()), D);
        for (std::size_t i = 0; i < idx.size(); ++i) frames.row(static_cast<Eigen::Index>(i)) = all.row(idx[i]);
      }
      h.states.push_back(init_gmm(frames, cfg.mixtures, cfg.variance_floor));
      const double v = visits[static_cast<std::size_t>(c)][static_cast<std::size_t>(s)];
      const double mean_len = v > 0.0 ? frames_in_state[static_cast<std::size_t>(c)][static_cast<std::size_t>(s)] / v : 2.0;
      h.self_loop(s) = std::clamp(1.0 - 1.0 / mean_len, 0.05, 0.95);
    }
    model.classes.push_back(std::move(h));
  }
  return model;
}

EmStats em_iteration(HmmModel& model, const std::vector<HmmTrainingItem>& data) {
  struct StateAcc {
    Vector occ;
    Matrix sum;
    Matrix sum_sq;
    double self = 0.0;
    double out = 0.0;
  };
  const int D = model.dim();
  std::vector<std::vector<StateAcc>> acc(static_cast<std::size_t>(model.num_classes()));
  for (int c = 0; c < model.num_classes(); ++c)
    for (const auto& g : model.classes[static_cast<std::size_t>(c)].states)
      acc[static_cast<std::size_t>(c)].push_back(
          {Vector::Zero(g.num_components()), Matrix::Zero(g.num_components(), D), Matrix::Zero(g.num_components(), D)});

  EmStats stats;
  for (const auto& item : data) {
    const auto states = expand_chain(model, item.chain);
    const auto T = item.features.rows();
    // Component log-likelihoods per distinct model state in the chain.
    std::map<int, Matrix> comp;
    Matrix emissions = Matrix::Constant(T, model.total_states(), kNegInf);
    for (const auto& s : states) {
      if (comp.count(s.global)) continue;
      Matrix cl = model.classes[static_cast<std::size_t>(s.cls)].states[static_cast<std::size_t>(s.state)]
                      .component_log_likelihoods(item.features);
      for (Eigen::Index t = 0; t < T; ++t) emissions(t, s.global) = log_sum_exp(cl.row(t));
      comp.emplace(s.global, std::move(cl));
    }
    const auto fb = chain_forward_backward(model, states, emissions, true);
    if (fb.log_likelihood == kNegInf) throw DataError("hmm: utterance too short for its transcription");
    stats.log_likelihood += fb.log_likelihood;
    const double lp = fb.log_likelihood;
    const auto J = static_cast<Eigen::Index>(states.size());

    for (Eigen::Index j = 0; j < J; ++j) {
      const auto& s = states[static_cast<std::size_t>(j)];
      auto& a = acc[static_cast<std::size_t>(s.cls)][static_cast<std::size_t>(s.state)];
      const Matrix& cl = comp.at(s.global);
      for (Eigen::Index t = 0; t < T; ++t) {
        const double gamma_log = fb.alpha(t, j) + fb.beta(t, j) - lp;
        if (gamma_log < -700.0) continue;
        const double gamma = std::exp(gamma_log);
        const double norm = emissions(t, s.global);
        for (Eigen::Index m = 0; m < cl.cols(); ++m) {
          const double r = gamma * std::exp(cl(t, m) - norm);
          a.occ(m) += r;
          a.sum.row(m) += r * item.features.row(t);
          a.sum_sq.row(m) += r * item.features.row(t).array().square().matrix();
        }
      }
      for (Eigen::Index t = 0; t + 1 < T; ++t) {
        a.self += std::exp(fb.alpha(t, j) + log_self(model, s) + emissions(t + 1, s.global) + fb.beta(t + 1, j) - lp);
        if (j + 1 < J)
          a.out += std::exp(fb.alpha(t, j) + log_advance(model, s) + emissions(t + 1, states[static_cast<std::size_t>(j + 1)].global) +
                            fb.beta(t + 1, j + 1) - lp);
      }
    }
  }

  constexpr double kMinOcc = 1e-3;
  for (int c = 0; c < model.num_classes(); ++c) {
    auto& h = model.classes[static_cast<std::size_t>(c)];
    for (int s = 0; s < h.num_states(); ++s) {
      const auto& a = acc[static_cast<std::size_t>(c)][static_cast<std::size_t>(s)];
      auto& g = h.states[static_cast<std::size_t>(s)];
      const double total = a.occ.sum();
      if (total > kMinOcc) {
        const Vector state_mean = (a.sum.colwise().sum() / total).transpose();
        const Vector state_var =
            ((a.sum_sq.colwise().sum() / total).transpose() - state_mean.cwiseAbs2()).cwiseMax(model.variance_floor);
        for (int m = 0; m < g.num_components(); ++m) {
          if (a.occ(m) > kMinOcc) {
            g.means.row(m) = a.sum.row(m) / a.occ(m);
            g.variances.row(m) =
                (a.sum_sq.row(m) / a.occ(m) - g.means.row(m).cwiseAbs2()).cwiseMax(model.variance_floor);
            g.weights(m) = a.occ(m) / total;
          } else {
            // Starved component: re-seed near the state's global statistics.
            const double shift = 0.1 * (m + 1);
            g.means.row(m) = (state_mean + shift * state_var.cwiseSqrt()).transpose();
            g.variances.row(m) = state_var.transpose();
            g.weights(m) = kMinOcc / total;
            ++stats.reseeded_components;
          }
        }
        g.weights /= g.weights.sum();
      }
      if (a.self + a.out > 0.0) h.self_loop(s) = a.self / (a.self + a.out);
      stats.max_stochastic_error = std::max(stats.max_stochastic_error, std::abs(g.weights.sum() - 1.0));
      const double row = h.self_loop(s) + (1.0 - h.self_loop(s));
      stats.max_stochastic_error = std::max(stats.max_stochastic_error, std::abs(row - 1.0));
      if (h.self_loop(s) < 0.0 || h.self_loop(s) > 1.0) throw NumericalError("hmm: transition probability out of range");
    }
  }
  return stats;
}

std::vector<EmStats> em_train(HmmModel& model, const std::vector<HmmTrainingItem>& data, int iterations) {
  std::vector<EmStats> out;
  for (int i = 0; i < iterations; ++i) out.push_back(em_iteration(model, data));
  return out;
}

// ---------------------------------------------------------------------------
// Decoding

namespace {

bool transition_allowed(const HmmModel& m, int prev, int next) {
  if (next == m.start_class()) return false;
  if (prev == m.end_class()) return false;
  return true;
}

double transition_score(const HmmModel& m, int prev, int next, const DecodeParams& p) {
  return p.lm_weight * m.lm.log_prob(prev, next) + (m.is_boundary(next) ? 0.0 : p.insertion_penalty);
}

}  // namespace

Decoding viterbi_decode(const HmmModel& model, const Matrix& features) {
  return viterbi_decode(model, emission_table(model, features), model.params);
}

Decoding viterbi_decode(const HmmModel& model, const Matrix& emissions, const DecodeParams& params) {
  const int T = static_cast<int>(emissions.rows());
  const int N = model.total_states();
  const int C = model.num_classes();
  if (T < 1 || emissions.cols() != N) throw DataError("viterbi: emission table shape mismatch");

  std::vector<int> cls_of(static_cast<std::size_t>(N));
  std::vector<int> st_of(static_cast<std::size_t>(N));
  std::vector<double> lself(static_cast<std::size_t>(N));
  std::vector<double> ladv(static_cast<std::size_t>(N));
  std::vector<int> first(static_cast<std::size_t>(C));
  std::vector<int> last(static_cast<std::size_t>(C));
  for (int c = 0, g = 0; c < C; ++c) {
    const auto& h = model.classes[static_cast<std::size_t>(c)];
    first[static_cast<std::size_t>(c)] = g;
    for (int s = 0; s < h.num_states(); ++s, ++g) {
      cls_of[static_cast<std::size_t>(g)] = c;
      st_of[static_cast<std::size_t>(g)] = s;
      lself[static_cast<std::size_t>(g)] = std::log(h.self_loop(s));
      ladv[static_cast<std::size_t>(g)] = std::log1p(-h.self_loop(s));
    }
    last[static_cast<std::size_t>(c)] = g - 1;
  }
  Matrix trans(C, C);
  for (int p = 0; p < C; ++p)
    for (int c = 0; c < C; ++c)
      trans(p, c) = transition_allowed(model, p, c) ? transition_score(model, p, c, params) : kNegInf;

  Matrix delta = Matrix::Constant(T, N, kNegInf);
  Eigen::MatrixXi back = Eigen::MatrixXi::Constant(T, N, -1);
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> entered =
      Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(T, N, false);
  delta(0, first[static_cast<std::size_t>(model.start_class())]) = emissions(0, first[static_cast<std::size_t>(model.start_class())]);
  std::vector<double> entry(static_cast<std::size_t>(C));
  std::vector<int> entry_from(static_cast<std::size_t>(C));

  for (int t = 1; t < T; ++t) {
    for (int c = 0; c < C; ++c) {
      entry[static_cast<std::size_t>(c)] = kNegInf;
      entry_from[static_cast<std::size_t>(c)] = -1;
      for (int p = 0; p < C; ++p) {
        if (trans(p, c) == kNegInf) continue;
        const int lp = last[static_cast<std::size_t>(p)];
        const double v = delta(t - 1, lp) + ladv[static_cast<std::size_t>(lp)] + trans(p, c);
        if (v > entry[static_cast<std::size_t>(c)]) {
          entry[static_cast<std::size_t>(c)] = v;
          entry_from[static_cast<std::size_t>(c)] = lp;
        }
      }
    }
    for (int g = 0; g < N; ++g) {
      double best = delta(t - 1, g) + lself[static_cast<std::size_t>(g)];
      int arg = g;
      bool is_entry = false;
      if (st_of[static_cast<std::size_t>(g)] > 0) {
        const double v = delta(t - 1, g - 1) + ladv[static_cast<std::size_t>(g - 1)];
        if (v > best) {
          best = v;
          arg = g - 1;
        }
      } else {
        const int c = cls_of[static_cast<std::size_t>(g)];
        if (entry[static_cast<std::size_t>(c)] > best) {
          best = entry[static_cast<std::size_t>(c)];
          arg = entry_from[static_cast<std::size_t>(c)];
          is_entry = true;
        }
      }
      if (best == kNegInf) continue;
      delta(t, g) = best + emissions(t, g);
      back(t, g) = arg;
      entered(t, g) = is_entry;
    }
  }

  Decoding out;
  int g = last[static_cast<std::size_t>(model.end_class())];
  out.score = delta(T - 1, g);
  if (out.score == kNegInf) throw DataError("viterbi: no complete path (sequence too short)");
  std::vector<int> path(static_cast<std::size_t>(T));
  std::vector<bool> starts(static_cast<std::size_t>(T), false);
  for (int t = T - 1; t >= 0; --t) {
    path[static_cast<std::size_t>(t)] = g;
    starts[static_cast<std::size_t>(t)] = t == 0 || entered(t, g);
    if (t > 0) g = back(t, g);
  }
  for (int t = 0; t < T; ++t) {
    const int c = cls_of[static_cast<std::size_t>(path[static_cast<std::size_t>(t)])];
    if (starts[static_cast<std::size_t>(t)])
      out.segmentation.push_back({t, t, c});
    else
      out.segmentation.back().end = t;
  }
  for (const auto& s : out.segmentation)
    if (!model.is_boundary(s.label)) out.letters.push_back(s.label);
  return out;
}

Decoding forced_align(const HmmModel& model, const Matrix& emissions, const LabelSeq& chain) {
  const auto states = expand_chain(model, chain);
  const auto T = emissions.rows();
  const auto J = static_cast<Eigen::Index>(states.size());
  Matrix delta = Matrix::Constant(T, J, kNegInf);
  Eigen::MatrixXi back = Eigen::MatrixXi::Constant(T, J, -1);
  delta(0, 0) = emissions(0, states[0].global);
  for (Eigen::Index t = 1; t < T; ++t)
    for (Eigen::Index j = 0; j < J; ++j) {
      double best = delta(t - 1, j) + log_self(model, states[static_cast<std::size_t>(j)]);
      Eigen::Index arg = j;
      if (j > 0) {
        const double v = delta(t - 1, j - 1) + log_advance(model, states[static_cast<std::size_t>(j - 1)]);
        if (v > best) {
          best = v;
          arg = j - 1;
        }
      }
      if (best == kNegInf) continue;
      delta(t, j) = best + emissions(t, states[static_cast<std::size_t>(j)].global);
      back(t, j) = static_cast<int>(arg);
    }
  Decoding out;
  out.score = delta(T - 1, J - 1);
  if (out.score == kNegInf) throw DataError("forced alignment: utterance too short for its transcription");
  std::vector<Eigen::Index> path(static_cast<std::size_t>(T));
  Eigen::Index j = J - 1;
  for (Eigen::Index t = T - 1; t >= 0; --t) {
    path[static_cast<std::size_t>(t)] = j;
    if (t > 0) j = back(t, j);
  }
  // Chain position of each frame: count model entries along the path.
  int position = 0;
  for (Eigen::Index t = 0; t < T; ++t) {
    const auto& s = states[static_cast<std::size_t>(path[static_cast<std::size_t>(t)])];
    const bool new_segment = t == 0 || (s.state == 0 && path[static_cast<std::size_t>(t)] != path[static_cast<std::size_t>(t - 1)]);
    if (new_segment) {
      if (t > 0) ++position;
      out.segmentation.push_back({static_cast<int>(t), static_cast<int>(t), chain[static_cast<std::size_t>(position)]});
    } else {
      out.segmentation.back().end = static_cast<int>(t);
    }
  }
  for (const auto& s : out.segmentation)
    if (!model.is_boundary(s.label)) out.letters.push_back(s.label);
  return out;
}

Segmentation forced_align(const HmmModel& model, const Matrix& features, const LabelSeq& word,
                          const LabelAlphabet& alphabet) {
  return forced_align(model, emission_table(model, features), word_chain(word, alphabet)).segmentation;
}

Matrix segment_acoustic_scores(const HmmModel& model, const Matrix& emissions, int c) {
  const int T = static_cast<int>(emissions.rows());
  const auto& h = model.classes[static_cast<std::size_t>(c)];
  const int S = h.num_states();
  const int off = model.state_offset(c);
  const double exit = c == model.end_class() ? 0.0 : std::log1p(-h.self_loop(S - 1));
  Vector lself(S), ladv(S);
  for (int s = 0; s < S; ++s) {
    lself(s) = std::log(h.self_loop(s));
    ladv(s) = std::log1p(-h.self_loop(s));
  }
  Matrix out = Matrix::Constant(T, T, kNegInf);
  Vector v(S), next(S);
  for (int t0 = 0; t0 < T; ++t0) {
    v.setConstant(kNegInf);
    v(0) = emissions(t0, off);
    for (int t1 = t0;; ++t1) {
      if (v(S - 1) != kNegInf) out(t0, t1) = v(S - 1) + exit;
      if (t1 + 1 >= T) break;
      for (int s = 0; s < S; ++s) {
        double best = v(s) + lself(s);
        if (s > 0) best = std::max(best, v(s - 1) + ladv(s - 1));
        next(s) = best == kNegInf ? kNegInf : best + emissions(t1 + 1, off + s);
      }
      v.swap(next);
    }
  }
  return out;
}

}  // namespace fsr
