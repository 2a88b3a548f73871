#include "fsr/experiment.hpp"

#include "fsr/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <sstream>
#include <tuple>

namespace fsr {

std::string to_string(Recognizer r) {
  switch (r) {
    case Recognizer::TandemHmm: return "tandem_hmm";
    case Recognizer::RescoringScrf: return "rescoring_scrf";
    case Recognizer::FirstPassScrf: return "first_pass_scrf";
  }
  return "?";
}

std::string display_name(Recognizer r) {
  switch (r) {
    case Recognizer::TandemHmm: return "Tandem HMM";
    case Recognizer::RescoringScrf: return "Rescoring SCRF";
    case Recognizer::FirstPassScrf: return "1st-pass SCRF";
  }
  return "?";
}

Recognizer recognizer_from_string(const std::string& s) {
  for (auto r : {Recognizer::TandemHmm, Recognizer::RescoringScrf, Recognizer::FirstPassScrf})
    if (to_string(r) == s) return r;
  throw ConfigError("unknown recognizer '" + s + "'");
}

namespace {

std::string mode_label(AdaptMode m) {
  switch (m) {
    case AdaptMode::None: return "none";
    case AdaptMode::LinUp: return "LIN+UP";
    case AdaptMode::LinLon: return "LIN+LON";
    case AdaptMode::FineTune: return "FT";
  }
  return "?";
}

std::string source_label(LabelSource s) { return s == LabelSource::GroundTruth ? "GT" : "FA"; }

long fraction_key(double f) { return std::lround(f * 1e6); }

template <typename T, typename F>
std::vector<T> parse_list(const io::Json& j, const char* key, std::vector<T> fallback, F convert) {
  if (!j.contains(key)) return fallback;
  std::vector<T> out;
  for (const auto& v : j.at(key)) out.push_back(convert(v.template get<std::string>()));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

ExperimentConfig ExperimentConfig::from_json(const io::Json& j) {
  io::reject_unknown_keys(
      j,
      {"static_dim", "window", "held_out_every", "train", "hmm", "tandem", "first_pass", "rescoring", "lattice_beam",
       "speed_rates", "test_signers", "modes", "label_sources", "fractions", "frame_tasks", "speed_arm",
       "recognition_mode", "recognition_fraction", "recognizers", "lm_weights", "insertion_penalties",
       "scrf_lm_scales", "confusion_signer", "confusion_mode", "confusion_fraction", "run_frame_accuracy",
       "run_recognition", "rng_seed"},
      "experiment");
  ExperimentConfig c;
  try {
    c.static_dim = j.value("static_dim", c.static_dim);
    c.window.width = j.value("window", c.window.width);
    c.held_out_every = j.value("held_out_every", c.held_out_every);
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("hmm")) c.hmm = HmmConfig::from_json(j.at("hmm"));
    if (j.contains("tandem")) c.tandem = TandemFeatureConfig::from_json(j.at("tandem"));
    if (j.contains("first_pass")) c.first_pass = ScrfConfig::from_json(j.at("first_pass"));
    if (j.contains("rescoring")) {
      c.rescoring = ScrfConfig::from_json(j.at("rescoring"));
      if (!j.at("rescoring").contains("mode")) c.rescoring.mode = ScrfMode::Rescoring;
    }
    c.lattice_beam = j.value("lattice_beam", c.lattice_beam);
    c.speed_rates = j.value("speed_rates", c.speed_rates);
    c.test_signers = j.value("test_signers", c.test_signers);
    c.modes = parse_list<AdaptMode>(j, "modes", c.modes, adapt_mode_from_string);
    c.label_sources = parse_list<LabelSource>(j, "label_sources", c.label_sources, label_source_from_string);
    c.fractions = j.value("fractions", c.fractions);
    c.frame_tasks = j.value("frame_tasks", c.frame_tasks);
    c.speed_arm = j.value("speed_arm", c.speed_arm);
    if (j.contains("recognition_mode"))
      c.recognition_mode = adapt_mode_from_string(j.at("recognition_mode").get<std::string>());
    c.recognition_fraction = j.value("recognition_fraction", c.recognition_fraction);
    c.recognizers = parse_list<Recognizer>(j, "recognizers", c.recognizers, recognizer_from_string);
    c.lm_weights = j.value("lm_weights", c.lm_weights);
    c.insertion_penalties = j.value("insertion_penalties", c.insertion_penalties);
    c.scrf_lm_scales = j.value("scrf_lm_scales", c.scrf_lm_scales);
    c.confusion_signer = j.value("confusion_signer", c.confusion_signer);
    if (j.contains("confusion_mode")) c.confusion_mode = adapt_mode_from_string(j.at("confusion_mode").get<std::string>());
    c.confusion_fraction = j.value("confusion_fraction", c.confusion_fraction);
    c.run_frame_accuracy = j.value("run_frame_accuracy", c.run_frame_accuracy);
    c.run_recognition = j.value("run_recognition", c.run_recognition);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
  } catch (const io::Json::exception& e) {
    throw ConfigError(std::string("experiment: ") + e.what());
  }
  c.validate();
  return c;
}

io::Json ExperimentConfig::to_json() const {
  io::Json modes_j = io::Json::array(), sources_j = io::Json::array(), recs_j = io::Json::array();
  for (auto m : modes) modes_j.push_back(to_string(m));
  for (auto s : label_sources) sources_j.push_back(to_string(s));
  for (auto r : recognizers) recs_j.push_back(to_string(r));
  return {{"static_dim", static_dim},
          {"window", window.width},
          {"held_out_every", held_out_every},
          {"train", train.to_json()},
          {"hmm", hmm.to_json()},
          {"tandem", tandem.to_json()},
          {"first_pass", first_pass.to_json()},
          {"rescoring", rescoring.to_json()},
          {"lattice_beam", lattice_beam},
          {"speed_rates", speed_rates},
          {"test_signers", test_signers},
          {"modes", modes_j},
          {"label_sources", sources_j},
          {"fractions", fractions},
          {"frame_tasks", frame_tasks},
          {"speed_arm", speed_arm},
          {"recognition_mode", to_string(recognition_mode)},
          {"recognition_fraction", recognition_fraction},
          {"recognizers", recs_j},
          {"lm_weights", lm_weights},
          {"insertion_penalties", insertion_penalties},
          {"scrf_lm_scales", scrf_lm_scales},
          {"confusion_signer", confusion_signer},
          {"confusion_mode", to_string(confusion_mode)},
          {"confusion_fraction", confusion_fraction},
          {"run_frame_accuracy", run_frame_accuracy},
          {"run_recognition", run_recognition},
          {"rng_seed", rng_seed}};
}

void ExperimentConfig::validate() const {
  if (static_dim < 1) throw ConfigError("experiment.static_dim: must be positive");
  window.validate();
  if (held_out_every < 2) throw ConfigError("experiment.held_out_every: must be at least 2");
  train.validate();
  hmm.validate();
  tandem.validate();
  first_pass.validate();
  rescoring.validate();
  if (first_pass.mode != ScrfMode::FirstPass) throw ConfigError("experiment.first_pass.mode: must be first_pass");
  if (rescoring.mode != ScrfMode::Rescoring) throw ConfigError("experiment.rescoring.mode: must be rescoring");
  if (!(lattice_beam >= 0.0)) throw ConfigError("experiment.lattice_beam: must be non-negative");
  for (double r : speed_rates)
    if (!(r > 0.0)) throw ConfigError("experiment.speed_rates: rates must be positive");
  const auto check_fraction = [](double f, const char* field) {
    if (!(f >= 0.0 && f <= 0.2 + 1e-12)) throw ConfigError(std::string("experiment.") + field + ": must lie in [0, 0.2]");
  };
  for (double f : fractions) {
    check_fraction(f, "fractions");
    if (f == 0.0) throw ConfigError("experiment.fractions: the unadapted arm is always run; list positive fractions");
  }
  check_fraction(recognition_fraction, "recognition_fraction");
  check_fraction(confusion_fraction, "confusion_fraction");
  for (auto m : modes)
    if (m == AdaptMode::None) throw ConfigError("experiment.modes: 'none' is implicit");
  if (recognition_fraction > 0.0 && recognition_mode == AdaptMode::None)
    throw ConfigError("experiment.recognition_mode: must name an adaptation mode");
  if (confusion_mode == AdaptMode::None) throw ConfigError("experiment.confusion_mode: must name an adaptation mode");
  for (int t : frame_tasks)
    if (t < 0 || t >= kNumTasks) throw ConfigError("experiment.frame_tasks: task out of range");
  if (lm_weights.empty() || insertion_penalties.empty() || scrf_lm_scales.empty())
    throw ConfigError("experiment: tuning grids must not be empty");
}

std::vector<int> ExperimentConfig::effective_frame_tasks() const {
  if (!frame_tasks.empty()) return frame_tasks;
  std::vector<int> all(kNumTasks);
  for (int t = 0; t < kNumTasks; ++t) all[static_cast<std::size_t>(t)] = t;
  return all;
}

std::uint64_t derive_seed(std::uint64_t base, const std::string& stage) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char ch : stage) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (h | 1);  // splitmix64 finaliser
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Pipeline stages

PcaModel fit_static_pca(const Corpus& corpus, const std::vector<int>& indices, int dim) {
  if (indices.empty()) throw DataError("pca: no training utterances");
  Eigen::Index rows = 0;
  for (int i : indices) rows += corpus.utterances[static_cast<std::size_t>(i)].length();
  const int D = corpus.utterances[static_cast<std::size_t>(indices.front())].dim();
  Matrix all(rows, D);
  Eigen::Index r = 0;
  for (int i : indices) {
    const auto& f = corpus.utterances[static_cast<std::size_t>(i)].frames;
    all.middleRows(r, f.rows()) = f;
    r += f.rows();
  }
  return pca_fit(all, std::min(dim, D));
}

Matrix static_features(const PcaModel& pca, const FrameSequence& seq) {
  if (seq.dim() != pca.input_dim()) throw DataError(seq.id + ": frame dimension differs from the PCA model");
  return pca_apply_rows(pca, seq.frames);
}

LabeledWindows task_windows(const Corpus& corpus, const std::vector<int>& indices,
                            const std::vector<LabelSeq>& labels, const PcaModel& pca, const WindowConfig& window,
                            int task) {
  if (labels.size() != indices.size()) throw DataError("task windows: one label sequence per utterance required");
  LabeledWindows out;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& seq = corpus.utterances[static_cast<std::size_t>(indices[k])];
    out.append(static_features(pca, seq), window, corpus.alphabet.task_labels(task, labels[k]));
  }
  return out;
}

std::vector<LabelSeq> ground_truth_label_sets(const Corpus& corpus, const std::vector<int>& indices) {
  std::vector<LabelSeq> out;
  for (int i : indices) out.push_back(ground_truth_labels(corpus.utterances[static_cast<std::size_t>(i)], corpus.alphabet));
  return out;
}

FrameClassifier train_task_classifier(const Corpus& corpus, const std::vector<int>& train_idx, const PcaModel& pca,
                                      const ExperimentConfig& cfg, int task, std::uint64_t seed,
                                      const std::vector<double>& speed_rates, TrainingTrace* trace) {
  std::vector<int> fit_idx, held_idx;
  for (std::size_t k = 0; k < train_idx.size(); ++k)
    (static_cast<int>(k % static_cast<std::size_t>(cfg.held_out_every)) == cfg.held_out_every - 1 ? held_idx : fit_idx)
        .push_back(train_idx[k]);
  if (fit_idx.empty() || held_idx.empty()) throw DataError("train-dnn: too few training utterances to hold out");

  LabeledWindows data = task_windows(corpus, fit_idx, ground_truth_label_sets(corpus, fit_idx), pca, cfg.window, task);
  for (double rate : speed_rates)
    for (int i : fit_idx) {
      const FrameSequence s = resample_speed(corpus.utterances[static_cast<std::size_t>(i)], rate);
      data.append(static_features(pca, s), cfg.window,
                  corpus.alphabet.task_labels(task, ground_truth_labels(s, corpus.alphabet)));
    }
  const LabeledWindows held = task_windows(corpus, held_idx, ground_truth_label_sets(corpus, held_idx), pca, cfg.window, task);

  TrainConfig tc = cfg.train;
  tc.rng_seed = seed;
  FrameClassifier model = make_classifier(task, pca.output_dim(), cfg.window, corpus.alphabet.task_classes(task), tc);
  return train(std::move(model), data, held, tc, trace);
}

std::vector<Matrix> posteriorgrams(const std::vector<FrameClassifier>& dnns, const Matrix& static_frames) {
  std::vector<Matrix> out;
  out.reserve(dnns.size());
  for (const auto& d : dnns) out.push_back(d.posteriorgram(static_frames));
  return out;
}

TandemFrontend fit_tandem_frontend(const Corpus& corpus, const std::vector<int>& indices, const PcaModel& pca,
                                   const std::vector<FrameClassifier>& dnns, const TandemFeatureConfig& cfg) {
  std::vector<std::vector<Matrix>> sets;
  for (int i : indices) sets.push_back(posteriorgrams(dnns, static_features(pca, corpus.utterances[static_cast<std::size_t>(i)])));
  return TandemFrontend::fit(sets, cfg);
}

Matrix tandem_features(const TandemFrontend& frontend, const PcaModel& pca, const std::vector<FrameClassifier>& dnns,
                       const FrameSequence& seq) {
  const Matrix s = static_features(pca, seq);
  return frontend.apply(posteriorgrams(dnns, s), s);
}

HmmModel train_tandem_hmm(const Corpus& corpus, const std::vector<int>& indices, const PcaModel& pca,
                          const std::vector<FrameClassifier>& dnns, const TandemFrontend& frontend,
                          const HmmConfig& cfg, std::vector<EmStats>* stats) {
  std::vector<HmmTrainingItem> items;
  std::vector<LabelSeq> words;
  for (int i : indices) {
    const auto& seq = corpus.utterances[static_cast<std::size_t>(i)];
    HmmTrainingItem item;
    item.features = tandem_features(frontend, pca, dnns, seq);
    item.chain = word_chain(seq.word, corpus.alphabet);
    if (seq.frame_labels || seq.peaks) item.init_segmentation = ground_truth_segmentation(seq, corpus.alphabet);
    items.push_back(std::move(item));
    words.push_back(seq.word);
  }
  const BigramLm lm = BigramLm::train(words, corpus.alphabet.num_letters());
  HmmModel model = init_hmm(items, corpus.alphabet, lm, cfg);
  auto s = em_train(model, items, cfg.em_iterations);
  if (stats) *stats = std::move(s);
  return model;
}

ScrfInput make_scrf_input(const PcaModel& pca, const std::vector<FrameClassifier>& dnns, const TandemFrontend& frontend,
                          const HmmModel& hmm, const FrameSequence& seq, std::optional<double> lattice_beam) {
  ScrfInput in;
  const Matrix s = static_features(pca, seq);
  in.posteriorgrams = posteriorgrams(dnns, s);
  in.lm = hmm.lm;
  if (lattice_beam) {
    const Matrix em = emission_table(hmm, frontend.apply(in.posteriorgrams, s));
    in.lattice = make_lattice(hmm, em, hmm.params, *lattice_beam, seq.id);
    in.baseline = labels_from_segments(in.lattice->best_path(hmm.params).segmentation);
  }
  return in;
}

ScrfModel train_first_pass_scrf(const Corpus& corpus, const std::vector<int>& indices, const PcaModel& pca,
                                const std::vector<FrameClassifier>& dnns, const TandemFrontend& frontend,
                                const HmmModel& hmm, const ScrfConfig& cfg) {
  ScrfModel model = ScrfModel::create(cfg, corpus.alphabet);
  std::vector<ScrfExample> data;
  for (int i : indices) {
    const auto& seq = corpus.utterances[static_cast<std::size_t>(i)];
    ScrfExample ex;
    ex.input = make_scrf_input(pca, dnns, frontend, hmm, seq, std::nullopt);
    ex.word = seq.word;
    if (!cfg.latent_segmentation)
      ex.segmentation = fit_segmentation_to_grammar(model, ground_truth_segmentation(seq, corpus.alphabet));
    data.push_back(std::move(ex));
  }
  return train_scrf(std::move(model), data);
}

ScrfModel train_rescoring_scrf(const Corpus& corpus, const std::vector<int>& indices, const PcaModel& pca,
                               const std::vector<FrameClassifier>& dnns, const TandemFrontend& frontend,
                               const HmmModel& hmm, const ScrfConfig& cfg, double lattice_beam, int* skipped) {
  ScrfModel model = ScrfModel::create(cfg, corpus.alphabet);
  std::vector<ScrfExample> data;
  int missing = 0;
  for (int i : indices) {
    const auto& seq = corpus.utterances[static_cast<std::size_t>(i)];
    ScrfExample ex;
    ex.input = make_scrf_input(pca, dnns, frontend, hmm, seq, lattice_beam);
    ex.word = seq.word;
    try {
      example_log_likelihood(model, ex, nullptr);
    } catch (const DataError&) {
      ++missing;
      continue;
    }
    data.push_back(std::move(ex));
  }
  if (skipped) *skipped = missing;
  if (data.empty()) throw DataError("train-scrf: no training lattice contains its reference word");
  return train_scrf(std::move(model), data);
}

SignerSystem build_signer_system(const Corpus& corpus, const std::string& test_signer, const ExperimentConfig& cfg,
                                 const Logger& log) {
  const auto say = [&](const std::string& m) {
    if (log) log(test_signer + ": " + m);
  };
  const Split split = split_corpus(corpus, test_signer, 0.0, 0);
  SignerSystem sys;
  sys.test_signer = test_signer;
  sys.pca = fit_static_pca(corpus, split.train, cfg.static_dim);

  const std::string stem = "signer/" + test_signer + "/dnn/";
  for (int task = 0; task < kNumTasks; ++task) {
    TrainingTrace trace;
    sys.dnns.push_back(train_task_classifier(corpus, split.train, sys.pca, cfg, task,
                                             derive_seed(cfg.rng_seed, stem + std::to_string(task)), {}, &trace));
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s classifier: held-out accuracy %.4f at epoch %d",
                  corpus.alphabet.task_name(task).c_str(), trace.selection_accuracy[static_cast<std::size_t>(trace.best_epoch)],
                  trace.best_epoch);
    say(buf);
  }
  if (cfg.run_frame_accuracy && cfg.speed_arm && !cfg.speed_rates.empty()) {
    const auto tasks = cfg.effective_frame_tasks();
    if (std::find(tasks.begin(), tasks.end(), kLetterTask) != tasks.end()) {
      sys.speed_letter = train_task_classifier(corpus, split.train, sys.pca, cfg, kLetterTask,
                                               derive_seed(cfg.rng_seed, stem + "speed"), cfg.speed_rates);
      say("speed-augmented letter classifier trained");
    }
  }

  sys.frontend = fit_tandem_frontend(corpus, split.train, sys.pca, sys.dnns, cfg.tandem);
  std::vector<EmStats> em;
  sys.hmm = train_tandem_hmm(corpus, split.train, sys.pca, sys.dnns, sys.frontend, cfg.hmm, &em);
  if (!em.empty()) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "tandem HMM: EM log-likelihood %.2f -> %.2f", em.front().log_likelihood,
                  em.back().log_likelihood);
    say(buf);
  }

  if (cfg.run_recognition) {
    const auto wants = [&](Recognizer r) {
      return std::find(cfg.recognizers.begin(), cfg.recognizers.end(), r) != cfg.recognizers.end();
    };
    if (wants(Recognizer::FirstPassScrf)) {
      sys.first_pass = train_first_pass_scrf(corpus, split.train, sys.pca, sys.dnns, sys.frontend, sys.hmm, cfg.first_pass);
      say("first-pass SCRF trained");
    }
    if (wants(Recognizer::RescoringScrf)) {
      int skipped = 0;
      sys.rescoring = train_rescoring_scrf(corpus, split.train, sys.pca, sys.dnns, sys.frontend, sys.hmm, cfg.rescoring,
                                           cfg.lattice_beam, &skipped);
      say("rescoring SCRF trained (" + std::to_string(skipped) + " lattices without the reference skipped)");
    }
  }
  return sys;
}

std::vector<LabelSeq> adaptation_labels(const Corpus& corpus, const std::vector<int>& indices, LabelSource source,
                                        const SignerSystem& system) {
  if (source == LabelSource::GroundTruth) {
    for (int i : indices) {
      const auto& seq = corpus.utterances[static_cast<std::size_t>(i)];
      if (!seq.frame_labels && !seq.peaks) throw DataError(seq.id + ": ground-truth adaptation needs frame labels or peaks");
    }
    return ground_truth_label_sets(corpus, indices);
  }
  std::vector<LabelSeq> out;
  for (int i : indices) {
    const auto& seq = corpus.utterances[static_cast<std::size_t>(i)];
    const Matrix f = tandem_features(system.frontend, system.pca, system.dnns, seq);
    out.push_back(labels_from_segments(forced_align(system.hmm, f, seq.word, corpus.alphabet)));
  }
  return out;
}

FrameClassifier adapt_task_classifier(const FrameClassifier& base, const Corpus& corpus,
                                      const std::vector<int>& indices, const std::vector<LabelSeq>& labels,
                                      const PcaModel& pca, const ExperimentConfig& cfg, AdaptMode mode,
                                      std::uint64_t seed) {
  AdaptConfig ac = AdaptConfig::defaults_for(mode, cfg.train);
  ac.rng_seed = seed;
  return adapt(base, task_windows(corpus, indices, labels, pca, base.window, base.task), ac);
}

double evaluation_frame_accuracy(const FrameClassifier& model, const Corpus& corpus, const std::vector<int>& indices,
                                 const PcaModel& pca) {
  return frame_accuracy(model, task_windows(corpus, indices, ground_truth_label_sets(corpus, indices), pca,
                                            model.window, model.task));
}

// ---------------------------------------------------------------------------
// Tune/test protocol

SignerAccuracy tune_and_test(const Corpus& corpus, const std::string& signer,
                             const std::map<int, GridHypotheses>& hyps) {
  const auto lookup = [&](int i) -> const GridHypotheses& {
    const auto it = hyps.find(i);
    if (it == hyps.end())
      throw DataError("protocol: no hypotheses for " + corpus.utterances[static_cast<std::size_t>(i)].id);
    return it->second;
  };
  const auto score = [&](const std::vector<int>& idx, std::size_t g) {
    EditCounts c;
    for (int i : idx) {
      const auto& h = lookup(i);
      if (g >= h.hyps.size()) throw DataError("protocol: grid sizes differ between utterances");
      c += align_counts(h.reference, h.hyps[g]);
    }
    return c;
  };

  SignerAccuracy out;
  out.signer = signer;
  for (int f = 0; f < kNumFolds; ++f) {
    const Split split = split_corpus(corpus, signer, 0.0, f);
    if (split.tune.empty() || split.test.empty()) throw DataError("protocol: signer " + signer + " has too few utterances for 8 folds");
    const std::size_t grid = lookup(split.tune.front()).hyps.size();
    std::size_t best = 0;
    double best_acc = -std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < grid; ++g) {
      const double a = score(split.tune, g).accuracy();
      if (a > best_acc) {
        best_acc = a;
        best = g;
      }
    }
    const EditCounts test = score(split.test, best);
    out.fold_accuracy.push_back(test.accuracy());
    out.counts += test;
  }
  double s = 0.0;
  for (double a : out.fold_accuracy) s += a;
  out.accuracy = s / static_cast<double>(out.fold_accuracy.size());
  return out;
}

std::map<Recognizer, std::map<int, GridHypotheses>> recognition_hypotheses(
    const Corpus& corpus, const std::vector<int>& indices, const SignerSystem& system,
    const std::vector<FrameClassifier>& dnns, const ExperimentConfig& cfg) {
  std::map<Recognizer, std::map<int, GridHypotheses>> out;
  for (Recognizer r : cfg.recognizers) {
    if (r == Recognizer::FirstPassScrf && !system.first_pass) throw ConfigError("protocol: first-pass SCRF not trained");
    if (r == Recognizer::RescoringScrf && !system.rescoring) throw ConfigError("protocol: rescoring SCRF not trained");
  }
  const auto wants = [&](Recognizer r) {
    return std::find(cfg.recognizers.begin(), cfg.recognizers.end(), r) != cfg.recognizers.end();
  };
  for (int i : indices) {
    const auto& seq = corpus.utterances[static_cast<std::size_t>(i)];
    const Matrix s = static_features(system.pca, seq);
    ScrfInput in;
    in.posteriorgrams = posteriorgrams(dnns, s);
    in.lm = system.hmm.lm;
    const Matrix em = emission_table(system.hmm, system.frontend.apply(in.posteriorgrams, s));

    if (wants(Recognizer::TandemHmm)) {
      GridHypotheses& g = out[Recognizer::TandemHmm][i];
      g.reference = seq.word;
      for (double w : cfg.lm_weights)
        for (double p : cfg.insertion_penalties) g.hyps.push_back(viterbi_decode(system.hmm, em, {w, p}).letters);
    }
    if (wants(Recognizer::FirstPassScrf)) {
      GridHypotheses& g = out[Recognizer::FirstPassScrf][i];
      g.reference = seq.word;
      for (double scale : cfg.scrf_lm_scales) g.hyps.push_back(decode_first_pass(*system.first_pass, in, {scale}).letters);
    }
    if (wants(Recognizer::RescoringScrf)) {
      in.lattice = make_lattice(system.hmm, em, system.hmm.params, cfg.lattice_beam, seq.id);
      in.baseline = labels_from_segments(in.lattice->best_path(system.hmm.params).segmentation);
      GridHypotheses& g = out[Recognizer::RescoringScrf][i];
      g.reference = seq.word;
      for (double scale : cfg.scrf_lm_scales) g.hyps.push_back(rescore_lattice(*system.rescoring, in, {scale}).letters);
    }
  }
  return out;
}

namespace {

std::vector<FrameClassifier> adapted_set(const Corpus& corpus, const SignerSystem& system, AdaptMode mode,
                                         LabelSource source, double fraction, const ExperimentConfig& cfg) {
  if (mode == AdaptMode::None || fraction == 0.0) return system.dnns;
  const Split split = split_corpus(corpus, system.test_signer, fraction, 0);
  const auto labels = adaptation_labels(corpus, split.adapt, source, system);
  std::vector<FrameClassifier> out;
  for (const auto& d : system.dnns)
    out.push_back(adapt_task_classifier(d, corpus, split.adapt, labels, system.pca, cfg, mode,
                                        derive_seed(cfg.rng_seed, "signer/" + system.test_signer + "/adapt/" +
                                                                      std::to_string(d.task) + "/" + to_string(mode))));
  return out;
}

}  // namespace

SignerAccuracy run_protocol(Recognizer recognizer, const Corpus& corpus, const SignerSystem& system,
                            AdaptMode mode, LabelSource source, double adapt_fraction, const ExperimentConfig& cfg) {
  ExperimentConfig one = cfg;
  one.recognizers = {recognizer};
  const auto dnns = adapted_set(corpus, system, mode, source, adapt_fraction, cfg);
  const Split split = split_corpus(corpus, system.test_signer, adapt_fraction, 0);
  auto hyps = recognition_hypotheses(corpus, split.evaluation, system, dnns, one);
  return tune_and_test(corpus, system.test_signer, hyps.at(recognizer));
}

// ---------------------------------------------------------------------------
// Experiment matrix

std::string condition_name(std::optional<LabelSource> source) {
  if (!source) return "No adapt.";
  return *source == LabelSource::GroundTruth ? "Ground truth" : "Forced align.";
}

double ExperimentResult::mean_frame_accuracy(int task, const std::string& arm, const std::string& source,
                                             double fraction) const {
  double s = 0.0;
  int n = 0;
  for (const auto& p : frame_accuracy)
    if (p.task == task && p.arm == arm && p.source == source && fraction_key(p.fraction) == fraction_key(fraction)) {
      s += p.accuracy;
      ++n;
    }
  return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

const AccuracyReport* ExperimentResult::report(Recognizer r, const std::string& condition) const {
  for (const auto& rep : recognition)
    if (rep.recognizer == display_name(r) && rep.condition == condition) return &rep;
  return nullptr;
}

namespace {

ConfusionMatrix frame_confusion(const FrameClassifier& model, const Corpus& corpus, const std::vector<int>& indices,
                                const PcaModel& pca) {
  const int C = corpus.alphabet.num_classes();
  ConfusionMatrix m;
  m.counts = Matrix::Zero(C, C);
  for (int i : indices) {
    const auto& seq = corpus.utterances[static_cast<std::size_t>(i)];
    const Matrix post = model.posteriorgram(static_features(pca, seq));
    LabelSeq hyp(static_cast<std::size_t>(post.rows()));
    for (Eigen::Index t = 0; t < post.rows(); ++t) post.row(t).maxCoeff(&hyp[static_cast<std::size_t>(t)]);
    accumulate(m, ground_truth_labels(seq, corpus.alphabet), hyp);
  }
  normalize(m);
  return m;
}

io::Json ids_of(const Corpus& corpus, const std::vector<int>& idx) {
  io::Json a = io::Json::array();
  for (int i : idx) a.push_back(corpus.utterances[static_cast<std::size_t>(i)].id);
  return a;
}

void check_disjoint(const std::vector<int>& a, const std::vector<int>& b, const std::string& what) {
  const std::set<int> s(a.begin(), a.end());
  for (int i : b)
    if (s.count(i)) throw DataError("provenance: " + what + " overlap");
}

}  // namespace

ExperimentResult run_experiment(const Corpus& corpus, const ExperimentConfig& cfg, const Logger& log) {
  cfg.validate();
  ExperimentResult result;
  result.provenance = io::Json::object();
  const std::vector<std::string> signers = cfg.test_signers.empty() ? corpus.signers() : cfg.test_signers;
  if (!cfg.confusion_signer.empty() && std::find(signers.begin(), signers.end(), cfg.confusion_signer) == signers.end())
    throw ConfigError("experiment.confusion_signer: '" + cfg.confusion_signer + "' is not a test signer");

  double max_fraction = std::max(cfg.recognition_fraction, cfg.confusion_fraction);
  for (double f : cfg.fractions) max_fraction = std::max(max_fraction, f);

  std::map<std::string, std::map<std::string, AccuracyReport>> reports;  // recognizer -> condition
  for (const auto& signer : signers) {
    const auto say = [&](const std::string& m) {
      if (log) log(signer + ": " + m);
    };
    const SignerSystem sys = build_signer_system(corpus, signer, cfg, log);
    const Split outer = split_corpus(corpus, signer, max_fraction, 0);
    check_disjoint(outer.train, outer.adapt, "training/adaptation");
    check_disjoint(outer.train, outer.evaluation, "training/evaluation");
    check_disjoint(outer.adapt, outer.evaluation, "adaptation/evaluation");
    result.provenance[signer] = {{"train", ids_of(corpus, outer.train)},
                                 {"adapt", ids_of(corpus, outer.adapt)},
                                 {"evaluation", ids_of(corpus, outer.evaluation)}};

    // Adaptation labels for the largest subset; smaller subsets are prefixes.
    std::map<LabelSource, std::vector<LabelSeq>> labels;
    const auto labels_for = [&](LabelSource src, const std::vector<int>& idx) {
      if (!labels.count(src)) labels[src] = adaptation_labels(corpus, outer.adapt, src, sys);
      return std::vector<LabelSeq>(labels[src].begin(), labels[src].begin() + static_cast<std::ptrdiff_t>(idx.size()));
    };
    std::map<std::tuple<int, AdaptMode, LabelSource, long>, FrameClassifier> cache;
    const auto adapted = [&](int task, AdaptMode mode, LabelSource src, double f) -> const FrameClassifier& {
      const auto key = std::make_tuple(task, mode, src, fraction_key(f));
      auto it = cache.find(key);
      if (it != cache.end()) return it->second;
      const Split s = split_corpus(corpus, signer, f, 0);
      FrameClassifier m = adapt_task_classifier(
          sys.dnns[static_cast<std::size_t>(task)], corpus, s.adapt, labels_for(src, s.adapt), sys.pca, cfg, mode,
          derive_seed(cfg.rng_seed, "signer/" + signer + "/adapt/" + std::to_string(task) + "/" + to_string(mode)));
      return cache.emplace(key, std::move(m)).first->second;
    };

    if (cfg.run_frame_accuracy) {
      for (int task : cfg.effective_frame_tasks()) {
        const LabeledWindows eval = task_windows(corpus, outer.evaluation, ground_truth_label_sets(corpus, outer.evaluation),
                                                 sys.pca, cfg.window, task);
        const auto add = [&](const std::string& arm, const std::string& src, double f, const FrameClassifier& m) {
          result.frame_accuracy.push_back({signer, task, arm, src, f, frame_accuracy(m, eval)});
        };
        add("none", "", 0.0, sys.dnns[static_cast<std::size_t>(task)]);
        if (task == kLetterTask && sys.speed_letter) add("speed", "", 0.0, *sys.speed_letter);
        for (auto src : cfg.label_sources)
          for (auto mode : cfg.modes)
            for (double f : cfg.fractions) add(to_string(mode), to_string(src), f, adapted(task, mode, src, f));
        char buf[96];
        std::snprintf(buf, sizeof buf, "frame accuracy for task %s done", corpus.alphabet.task_name(task).c_str());
        say(buf);
      }
    }

    if (!cfg.confusion_signer.empty() && signer == cfg.confusion_signer) {
      result.confusions.push_back({signer, "No adapt.", frame_confusion(sys.dnns[kLetterTask], corpus, outer.evaluation, sys.pca)});
      for (auto src : {LabelSource::ForcedAlignment, LabelSource::GroundTruth}) {
        const auto& m = adapted(kLetterTask, cfg.confusion_mode, src, cfg.confusion_fraction);
        result.confusions.push_back({signer, mode_label(cfg.confusion_mode) + " (" + condition_name(src) + ")",
                                     frame_confusion(m, corpus, outer.evaluation, sys.pca)});
      }
      say("confusion matrices done");
    }

    if (cfg.run_recognition) {
      std::vector<std::optional<LabelSource>> conditions = {std::nullopt};
      if (cfg.recognition_fraction > 0.0)
        for (auto src : {LabelSource::ForcedAlignment, LabelSource::GroundTruth})
          if (std::find(cfg.label_sources.begin(), cfg.label_sources.end(), src) != cfg.label_sources.end())
            conditions.push_back(src);
      for (const auto& cond : conditions) {
        std::vector<FrameClassifier> dnns;
        if (!cond) {
          dnns = sys.dnns;
        } else {
          for (int task = 0; task < kNumTasks; ++task)
            dnns.push_back(adapted(task, cfg.recognition_mode, *cond, cfg.recognition_fraction));
        }
        const auto hyps = recognition_hypotheses(corpus, outer.evaluation, sys, dnns, cfg);
        for (Recognizer r : cfg.recognizers) {
          AccuracyReport& rep = reports[display_name(r)][condition_name(cond)];
          rep.recognizer = display_name(r);
          rep.condition = condition_name(cond);
          rep.signers.push_back(tune_and_test(corpus, signer, hyps.at(r)));
          char buf[128];
          std::snprintf(buf, sizeof buf, "%s / %s: letter accuracy %.1f", rep.recognizer.c_str(), rep.condition.c_str(),
                        rep.signers.back().accuracy);
          say(buf);
        }
      }
    }
  }

  for (Recognizer r : cfg.recognizers)
    for (const auto& cond : {condition_name(std::nullopt), condition_name(LabelSource::ForcedAlignment),
                             condition_name(LabelSource::GroundTruth)}) {
      auto it = reports.find(display_name(r));
      if (it == reports.end()) continue;
      auto jt = it->second.find(cond);
      if (jt != it->second.end()) result.recognition.push_back(jt->second);
    }
  return result;
}

// ---------------------------------------------------------------------------
// Reports

std::string render_frame_accuracy_table(const ExperimentResult& result, const LabelAlphabet& alphabet) {
  std::vector<int> tasks;
  std::vector<double> fractions;
  std::vector<std::pair<std::string, std::string>> arms;  // (arm, source), adapted arms only
  bool speed = false;
  for (const auto& p : result.frame_accuracy) {
    if (std::find(tasks.begin(), tasks.end(), p.task) == tasks.end()) tasks.push_back(p.task);
    if (p.arm == "speed") speed = true;
    if (p.arm == "none" || p.arm == "speed") continue;
    if (std::find(arms.begin(), arms.end(), std::make_pair(p.arm, p.source)) == arms.end()) arms.emplace_back(p.arm, p.source);
    if (std::find_if(fractions.begin(), fractions.end(), [&](double f) { return fraction_key(f) == fraction_key(p.fraction); }) ==
        fractions.end())
      fractions.push_back(p.fraction);
  }
  std::sort(fractions.begin(), fractions.end());

  std::ostringstream out;
  char buf[64];
  out << "Frame accuracies (%), mean over test signers\n";
  for (int task : tasks) {
    out << "\nTask: " << alphabet.task_name(task) << "\n";
    std::snprintf(buf, sizeof buf, "%-14s%-8s", "Arm", "none");
    out << buf;
    for (double f : fractions) {
      std::snprintf(buf, sizeof buf, "%-8s", (std::to_string(static_cast<int>(std::lround(100 * f))) + "%").c_str());
      out << buf;
    }
    out << "\n";
    const double none = result.mean_frame_accuracy(task, "none", "", 0.0);
    if (task == kLetterTask && speed) {
      std::snprintf(buf, sizeof buf, "%-14s%-8.1f\n", "speed norm.", 100 * result.mean_frame_accuracy(task, "speed", "", 0.0));
      out << buf;
    }
    for (const auto& [arm, src] : arms) {
      const std::string name =
          source_label(label_source_from_string(src)) + " " + mode_label(adapt_mode_from_string(arm));
      std::snprintf(buf, sizeof buf, "%-14s%-8.1f", name.c_str(), 100 * none);
      out << buf;
      for (double f : fractions) {
        const double v = result.mean_frame_accuracy(task, arm, src, f);
        if (std::isnan(v))
          std::snprintf(buf, sizeof buf, "%-8s", "-");
        else
          std::snprintf(buf, sizeof buf, "%-8.1f", 100 * v);
        out << buf;
      }
      out << "\n";
    }
  }
  return out.str();
}

io::Json experiment_json(const ExperimentResult& result) {
  io::Json fa = io::Json::array();
  for (const auto& p : result.frame_accuracy)
    fa.push_back({{"signer", p.signer},
                  {"task", p.task},
                  {"arm", p.arm},
                  {"source", p.source},
                  {"fraction", p.fraction},
                  {"accuracy", p.accuracy}});
  io::Json rec = io::Json::array();
  for (const auto& r : result.recognition) rec.push_back(r.to_json());
  io::Json conf = io::Json::array();
  for (const auto& c : result.confusions) {
    io::Json rows = io::Json::array();
    for (int r = 0; r < c.matrix.num_classes(); ++r) {
      io::Json row = io::Json::array();
      for (int k = 0; k < c.matrix.num_classes(); ++k) row.push_back(c.matrix.probabilities(r, k));
      rows.push_back(row);
    }
    conf.push_back({{"signer", c.signer},
                    {"condition", c.condition},
                    {"probabilities", rows},
                    {"column_confusion_mass", io::to_json(c.matrix.column_confusion_mass())}});
  }
  return {{"frame_accuracy", fa}, {"recognition", rec}, {"confusion", conf}, {"provenance", result.provenance}};
}

std::vector<io::fs::path> write_reports(const io::fs::path& dir, const ExperimentResult& result,
                                        const LabelAlphabet& alphabet) {
  std::vector<io::fs::path> written;
  std::ostringstream text;
  if (!result.recognition.empty()) text << render_accuracy_table(result.recognition) << "\n";
  if (!result.frame_accuracy.empty()) text << render_frame_accuracy_table(result, alphabet) << "\n";
  for (std::size_t k = 0; k < result.confusions.size(); ++k) {
    const auto& c = result.confusions[k];
    const Vector mass = c.matrix.column_confusion_mass();
    char buf[160];
    std::snprintf(buf, sizeof buf, "Confusion %s, %s: boundary-column mass %.3f, letter-column mass %.3f\n",
                  c.signer.c_str(), c.condition.c_str(), mass(alphabet.start_class()) + mass(alphabet.end_class()),
                  mass.head(alphabet.num_letters()).sum());
    text << buf;
    std::string name = "confusion_" + c.signer + "_" + std::to_string(k) + ".csv";
    const auto path = dir / name;
    io::write_text(path, confusion_csv(c.matrix, alphabet, false));
    written.push_back(path);
  }
  io::write_text(dir / "report.txt", text.str());
  written.push_back(dir / "report.txt");
  io::write_json(dir / "report.json", experiment_json(result));
  written.push_back(dir / "report.json");
  return written;
}

}  // namespace fsr
