// fsr-cli: drives the recognition pipeline stage by stage and writes a run
// manifest next to every output.

#include "fsr/corpus.hpp"
#include "fsr/errors.hpp"
#include "fsr/eval.hpp"
#include "fsr/experiment.hpp"
#include "fsr/frontend.hpp"
#include "fsr/io.hpp"
#include "fsr/neuralnet.hpp"
#include "fsr/scrf.hpp"
#include "fsr/tandem.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using fsr::io::Json;

namespace {

constexpr const char* kVersion = "1.0.0";

// Flags shared by every subcommand plus the stage-specific ones.
struct Options {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
  std::string corpus;
  std::string models;
  std::string dnns;
  std::string test_signer;
  std::string set = "evaluation";
  int fold = 0;
  int task = -1;
  bool speed = false;
  std::string mode;
  std::string source = "ground_truth";
  double fraction = 0.2;
  std::optional<double> lm_weight;
  std::optional<double> insertion_penalty;
  std::optional<double> beam;
  double lm_scale = 1.0;
  std::string lattices;
  std::string ref;
  std::string hyp;
};

// Parsed --config file: paths, component configs and the seed.
struct RunConfig {
  fs::path corpus, models, out;
  fsr::SynthConfig synth;
  fsr::LabelAlphabet alphabet = fsr::LabelAlphabet::uppercase();
  fsr::ExperimentConfig experiment;
  std::uint64_t seed = 0;
  Json snapshot;
};

RunConfig load_run_config(const Options& o) {
  RunConfig rc;
  Json j = Json::object();
  if (!o.config.empty()) {
    if (!fs::exists(o.config)) throw fsr::ConfigError("config file " + o.config + " does not exist");
    j = fsr::io::read_json(o.config);
  }
  fsr::io::reject_unknown_keys(j, {"paths", "synth", "alphabet", "experiment", "rng_seed"}, "config");
  try {
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      fsr::io::reject_unknown_keys(p, {"corpus", "models", "out"}, "config.paths");
      rc.corpus = p.value("corpus", std::string());
      rc.models = p.value("models", std::string());
      rc.out = p.value("out", std::string());
    }
    if (j.contains("synth")) rc.synth = fsr::SynthConfig::from_json(j.at("synth"));
    if (j.contains("alphabet")) rc.alphabet = fsr::LabelAlphabet::from_json(j.at("alphabet"));
    if (j.contains("experiment")) rc.experiment = fsr::ExperimentConfig::from_json(j.at("experiment"));
    if (o.seed)
      rc.seed = *o.seed;
    else if (j.contains("rng_seed"))
      rc.seed = j.at("rng_seed").get<std::uint64_t>();
    else
      throw fsr::ConfigError("rng_seed: required; pass --seed or set rng_seed in the config");
  } catch (const Json::exception& e) {
    throw fsr::ConfigError(std::string("config: ") + e.what());
  }
  if (!o.corpus.empty()) rc.corpus = o.corpus;
  if (!o.models.empty()) rc.models = o.models;
  rc.out = o.out;
  if (rc.models.empty()) rc.models = rc.out;
  rc.synth.rng_seed = rc.seed;
  rc.experiment.rng_seed = rc.seed;
  rc.snapshot = {{"synth", rc.synth.to_json()},
                 {"alphabet", rc.alphabet.to_json()},
                 {"experiment", rc.experiment.to_json()},
                 {"rng_seed", rc.seed}};
  return rc;
}

// ---------------------------------------------------------------------------
// Artifacts and manifests

std::string producer_of(const std::string& file) {
  if (file == "corpus.json") return "gen";
  if (file == "pca.fsr") return "features";
  if (file.rfind("dnn_", 0) == 0) return "train-dnn";
  if (file == "tandem.fsr" || file == "hmm.fsr") return "train-hmm";
  if (file.rfind("scrf_", 0) == 0) return "train-scrf";
  return "the producing stage";
}

// Digest of a corpus directory: its manifest plus every utterance file.
std::string corpus_digest(const fs::path& dir) {
  const auto manifest = fsr::io::read_json(dir / "corpus.json");
  std::string all = fsr::io::sha256_file(dir / "corpus.json");
  for (const auto& e : manifest.at("utterances")) all += fsr::io::sha256_file(dir / e.at("file").get<std::string>());
  return fsr::io::sha256_hex(all);
}

class Manifest {
 public:
  Manifest(std::string subcommand, const RunConfig& rc) : name_(std::move(subcommand)), rc_(rc) {}

  // Records an input and checks it against the manifest of the run that wrote it.
  fs::path input(const fs::path& path) {
    const std::string file = path.filename().string();
    if (!fs::exists(path))
      throw fsr::DataError("missing artifact " + path.string() + "; produce it with `fsr-cli " + producer_of(file) + "`");
    const bool is_corpus = fs::is_directory(path);
    const std::string hash = is_corpus ? corpus_digest(path) : fsr::io::sha256_file(path);
    const fs::path dir = is_corpus ? path : path.parent_path();
    const std::string key = is_corpus ? "corpus.json" : file;
    if (fs::exists(dir) && fs::is_directory(dir))
      for (const auto& entry : fs::directory_iterator(dir)) {
        const auto fname = entry.path().filename().string();
        if (fname.rfind("manifest_", 0) != 0 || entry.path().extension() != ".json") continue;
        const auto m = fsr::io::read_json(entry.path());
        if (!m.contains("outputs") || !m.at("outputs").contains(key)) continue;
        if (m.at("outputs").at(key).get<std::string>() != hash)
          throw fsr::DataError("artifact " + path.string() + " does not match the hash recorded in " + entry.path().string() +
                               "; rerun `fsr-cli " + m.value("subcommand", producer_of(key)) + "`");
      }
    inputs_[path.generic_string()] = hash;
    return path;
  }

  void output(const fs::path& path, const std::string& key = {}) {
    const bool is_corpus = fs::is_directory(path);
    const std::string k = key.empty() ? fs::relative(path, rc_.out).generic_string() : key;
    outputs_[k] = is_corpus ? corpus_digest(path) : fsr::io::sha256_file(path);
  }

  void note(const std::string& key, Json value) { notes_[key] = std::move(value); }

  void write() const {
    Json j = {{"subcommand", name_},
              {"config", rc_.snapshot},
              {"rng_seed", rc_.seed},
              {"inputs", inputs_},
              {"outputs", outputs_},
              {"versions",
               {{"fsr", kVersion},
                {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                              std::to_string(EIGEN_MINOR_VERSION)},
                {"compiler", __VERSION__}}}};
    if (!notes_.empty()) j["details"] = notes_;
    fsr::io::write_json(rc_.out / ("manifest_" + name_ + ".json"), j);
  }

 private:
  std::string name_;
  const RunConfig& rc_;
  std::map<std::string, std::string> inputs_;
  std::map<std::string, std::string> outputs_;
  Json notes_ = Json::object();
};

fsr::Corpus open_corpus(const RunConfig& rc, Manifest& m) {
  if (rc.corpus.empty()) throw fsr::ConfigError("paths.corpus: required; pass --corpus");
  m.input(rc.corpus);
  return fsr::load_corpus(rc.corpus);
}

std::string require_signer(const Options& o, const fsr::Corpus& corpus) {
  if (o.test_signer.empty()) throw fsr::ConfigError("--test-signer: required");
  const auto s = corpus.signers();
  if (std::find(s.begin(), s.end(), o.test_signer) == s.end())
    throw fsr::DataError("unknown signer '" + o.test_signer + "'");
  return o.test_signer;
}

Json ids_of(const fsr::Corpus& corpus, const std::vector<int>& idx) {
  Json a = Json::array();
  for (int i : idx) a.push_back(corpus.utterances[static_cast<std::size_t>(i)].id);
  return a;
}

// Split provenance: which utterances each role may touch.
void note_split(Manifest& m, const fsr::Corpus& corpus, const fsr::Split& s) {
  m.note("split", {{"train", ids_of(corpus, s.train)},
                   {"adapt", ids_of(corpus, s.adapt)},
                   {"evaluation", ids_of(corpus, s.evaluation)}});
}

std::vector<int> select_set(const Options& o, const fsr::Corpus& corpus, const std::string& signer) {
  const fsr::Split s = fsr::split_corpus(corpus, signer, o.fraction, o.fold);
  if (o.set == "evaluation") return s.evaluation;
  if (o.set == "tune") return s.tune;
  if (o.set == "test") return s.test;
  if (o.set == "adapt") return s.adapt;
  if (o.set == "train") return s.train;
  throw fsr::ConfigError("--set: expected evaluation, tune, test, adapt or train");
}

fsr::PcaModel load_pca(const RunConfig& rc, Manifest& m) { return fsr::PcaModel::load(m.input(rc.models / "pca.fsr")); }

std::vector<fsr::FrameClassifier> load_dnns(const fs::path& dir, Manifest& m) {
  std::vector<fsr::FrameClassifier> out;
  for (int t = 0; t < fsr::kNumTasks; ++t)
    out.push_back(fsr::FrameClassifier::load(m.input(dir / ("dnn_" + std::to_string(t) + ".fsr"))));
  return out;
}

struct Tandem {
  fsr::PcaModel pca;
  std::vector<fsr::FrameClassifier> dnns;
  fsr::TandemFrontend frontend;
  fsr::HmmModel hmm;
};

Tandem load_tandem(const Options& o, const RunConfig& rc, Manifest& m) {
  Tandem t;
  t.pca = load_pca(rc, m);
  t.dnns = load_dnns(o.dnns.empty() ? rc.models : fs::path(o.dnns), m);
  t.frontend = fsr::TandemFrontend::load(m.input(rc.models / "tandem.fsr"));
  t.hmm = fsr::HmmModel::load(m.input(rc.models / "hmm.fsr"));
  return t;
}

void write_decodes(const RunConfig& rc, Manifest& m, const fsr::Corpus& corpus, const std::vector<int>& idx,
                   const std::vector<fsr::Decoding>& decs) {
  std::ostringstream hyp, ref;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& seq = corpus.utterances[static_cast<std::size_t>(idx[k])];
    hyp << fsr::format_decode_line(seq.id, corpus.alphabet.decode_word(decs[k].letters), decs[k].score) << "\n";
    ref << seq.id << "  " << corpus.alphabet.decode_word(seq.word) << "\n";
  }
  fsr::io::write_text(rc.out / "decode.txt", hyp.str());
  fsr::io::write_text(rc.out / "reference.txt", ref.str());
  m.output(rc.out / "decode.txt");
  m.output(rc.out / "reference.txt");
}

// `id  WORD [score]` lines; "-" is the empty word.
std::vector<std::pair<std::string, fsr::LabelSeq>> read_transcripts(const fs::path& path,
                                                                    const fsr::LabelAlphabet& alphabet) {
  std::istringstream in(fsr::io::read_text(path));
  std::vector<std::pair<std::string, fsr::LabelSeq>> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    std::istringstream ls(line);
    std::string id, word;
    if (!(ls >> id)) continue;
    if (!(ls >> word))
      throw fsr::DataError(path.string() + ":" + std::to_string(n) + ": expected `id  WORD`");
    out.emplace_back(id, word == "-" ? fsr::LabelSeq{} : alphabet.encode_word(word));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_gen(const Options&, const RunConfig& rc) {
  Manifest m("gen", rc);
  fsr::Corpus corpus{rc.alphabet, fsr::generate_synthetic(rc.synth, rc.alphabet)};
  fsr::save_corpus(rc.out, corpus);
  m.output(rc.out, "corpus.json");
  m.write();
  std::cerr << "wrote " << corpus.utterances.size() << " utterances to " << rc.out << "\n";
}

void cmd_features(const Options& o, const RunConfig& rc) {
  Manifest m("features", rc);
  const auto corpus = open_corpus(rc, m);
  const auto signer = require_signer(o, corpus);
  const auto split = fsr::split_corpus(corpus, signer, 0.0, 0);
  note_split(m, corpus, split);
  fsr::fit_static_pca(corpus, split.train, rc.experiment.static_dim).save(rc.out / "pca.fsr");
  m.output(rc.out / "pca.fsr");
  m.write();
}

void cmd_train_dnn(const Options& o, const RunConfig& rc) {
  Manifest m("train-dnn", rc);
  const auto corpus = open_corpus(rc, m);
  const auto signer = require_signer(o, corpus);
  const auto split = fsr::split_corpus(corpus, signer, 0.0, 0);
  note_split(m, corpus, split);
  const auto pca = load_pca(rc, m);
  std::vector<int> tasks;
  if (o.task >= 0) {
    if (o.task >= fsr::kNumTasks) throw fsr::ConfigError("--task: out of range");
    tasks = {o.task};
  } else {
    for (int t = 0; t < fsr::kNumTasks; ++t) tasks.push_back(t);
  }
  Json traces = Json::object();
  for (int t : tasks) {
    fsr::TrainingTrace trace;
    const auto rates = o.speed ? rc.experiment.speed_rates : std::vector<double>{};
    const std::string stem = "signer/" + signer + "/dnn/" + (o.speed ? std::string("speed") : std::to_string(t));
    const auto model = fsr::train_task_classifier(corpus, split.train, pca, rc.experiment, t,
                                                  fsr::derive_seed(rc.seed, stem), rates, &trace);
    const auto path = rc.out / ("dnn_" + std::to_string(t) + (o.speed ? "_speed" : "") + ".fsr");
    model.save(path);
    m.output(path);
    traces[path.filename().string()] = {{"selection_accuracy", trace.selection_accuracy}, {"best_epoch", trace.best_epoch}};
    std::cerr << corpus.alphabet.task_name(t) << ": best epoch " << trace.best_epoch << "\n";
  }
  m.note("training", traces);
  m.write();
}

void cmd_adapt_dnn(const Options& o, const RunConfig& rc) {
  Manifest m("adapt-dnn", rc);
  const auto corpus = open_corpus(rc, m);
  const auto signer = require_signer(o, corpus);
  if (o.mode.empty()) throw fsr::ConfigError("--mode: required (lin_up, lin_lon or fine_tune)");
  const auto mode = fsr::adapt_mode_from_string(o.mode);
  if (mode == fsr::AdaptMode::None) throw fsr::ConfigError("--mode: must name an adaptation mode");
  const auto source = fsr::label_source_from_string(o.source);
  const auto split = fsr::split_corpus(corpus, signer, o.fraction, 0);
  if (split.adapt.empty()) throw fsr::DataError("adapt-dnn: the adaptation fraction selects no utterances");
  note_split(m, corpus, split);

  fsr::SignerSystem sys;
  sys.test_signer = signer;
  sys.pca = load_pca(rc, m);
  sys.dnns = load_dnns(rc.models, m);
  if (source == fsr::LabelSource::ForcedAlignment) {
    sys.frontend = fsr::TandemFrontend::load(m.input(rc.models / "tandem.fsr"));
    sys.hmm = fsr::HmmModel::load(m.input(rc.models / "hmm.fsr"));
  }
  const auto labels = fsr::adaptation_labels(corpus, split.adapt, source, sys);
  for (const auto& base : sys.dnns) {
    if (o.task >= 0 && base.task != o.task) continue;
    const auto model = fsr::adapt_task_classifier(
        base, corpus, split.adapt, labels, sys.pca, rc.experiment, mode,
        fsr::derive_seed(rc.seed, "signer/" + signer + "/adapt/" + std::to_string(base.task) + "/" + fsr::to_string(mode)));
    const auto path = rc.out / ("dnn_" + std::to_string(base.task) + ".fsr");
    model.save(path);
    m.output(path);
  }
  m.note("adaptation", {{"mode", fsr::to_string(mode)}, {"label_source", fsr::to_string(source)}, {"fraction", o.fraction}});
  m.write();
}

void cmd_train_hmm(const Options& o, const RunConfig& rc) {
  Manifest m("train-hmm", rc);
  const auto corpus = open_corpus(rc, m);
  const auto signer = require_signer(o, corpus);
  const auto split = fsr::split_corpus(corpus, signer, 0.0, 0);
  note_split(m, corpus, split);
  const auto pca = load_pca(rc, m);
  const auto dnns = load_dnns(o.dnns.empty() ? rc.models : fs::path(o.dnns), m);
  const auto frontend = fsr::fit_tandem_frontend(corpus, split.train, pca, dnns, rc.experiment.tandem);
  std::vector<fsr::EmStats> stats;
  const auto hmm = fsr::train_tandem_hmm(corpus, split.train, pca, dnns, frontend, rc.experiment.hmm, &stats);
  frontend.save(rc.out / "tandem.fsr");
  hmm.save(rc.out / "hmm.fsr");
  m.output(rc.out / "tandem.fsr");
  m.output(rc.out / "hmm.fsr");
  Json ll = Json::array();
  for (const auto& s : stats) ll.push_back(s.log_likelihood);
  m.note("em_log_likelihood", ll);
  m.write();
}

fsr::DecodeParams decode_params(const Options& o, const fsr::HmmModel& hmm) {
  fsr::DecodeParams p = hmm.params;
  if (o.lm_weight) p.lm_weight = *o.lm_weight;
  if (o.insertion_penalty) p.insertion_penalty = *o.insertion_penalty;
  return p;
}

void cmd_decode(const Options& o, const RunConfig& rc) {
  Manifest m("decode", rc);
  const auto corpus = open_corpus(rc, m);
  const auto signer = require_signer(o, corpus);
  const auto t = load_tandem(o, rc, m);
  const auto idx = select_set(o, corpus, signer);
  const auto params = decode_params(o, t.hmm);
  std::vector<fsr::Decoding> decs;
  for (int i : idx) {
    const auto f = fsr::tandem_features(t.frontend, t.pca, t.dnns, corpus.utterances[static_cast<std::size_t>(i)]);
    decs.push_back(fsr::viterbi_decode(t.hmm, fsr::emission_table(t.hmm, f), params));
  }
  write_decodes(rc, m, corpus, idx, decs);
  m.write();
}

void cmd_align(const Options& o, const RunConfig& rc) {
  Manifest m("align", rc);
  const auto corpus = open_corpus(rc, m);
  const auto signer = require_signer(o, corpus);
  const auto t = load_tandem(o, rc, m);
  std::ostringstream out;
  for (int i : select_set(o, corpus, signer)) {
    const auto& seq = corpus.utterances[static_cast<std::size_t>(i)];
    const auto seg = fsr::forced_align(t.hmm, fsr::tandem_features(t.frontend, t.pca, t.dnns, seq), seq.word, corpus.alphabet);
    out << seq.id;
    for (const auto& s : seg) out << "  " << s.start << "-" << s.end << ":" << corpus.alphabet.symbol(s.label);
    out << "\n";
  }
  fsr::io::write_text(rc.out / "align.txt", out.str());
  m.output(rc.out / "align.txt");
  m.write();
}

void cmd_lattice(const Options& o, const RunConfig& rc) {
  Manifest m("lattice", rc);
  const auto corpus = open_corpus(rc, m);
  const auto signer = require_signer(o, corpus);
  const auto t = load_tandem(o, rc, m);
  const double beam = o.beam.value_or(rc.experiment.lattice_beam);
  const auto params = decode_params(o, t.hmm);
  Json paths = Json::object();
  for (int i : select_set(o, corpus, signer)) {
    const auto& seq = corpus.utterances[static_cast<std::size_t>(i)];
    const auto em = fsr::emission_table(t.hmm, fsr::tandem_features(t.frontend, t.pca, t.dnns, seq));
    const auto lat = fsr::make_lattice(t.hmm, em, params, beam, seq.id);
    const auto path = rc.out / "lattices" / (seq.id + ".lat");
    fsr::io::write_text(path, lat.to_text(corpus.alphabet));
    m.output(path);
    paths[seq.id] = lat.path_count();
  }
  m.note("path_counts", paths);
  m.write();
}

void cmd_train_scrf(const Options& o, const RunConfig& rc) {
  Manifest m("train-scrf", rc);
  const auto corpus = open_corpus(rc, m);
  const auto signer = require_signer(o, corpus);
  const auto split = fsr::split_corpus(corpus, signer, 0.0, 0);
  note_split(m, corpus, split);
  const auto t = load_tandem(o, rc, m);
  const auto mode = fsr::scrf_mode_from_string(o.mode.empty() ? std::string("first_pass") : o.mode);
  fsr::ScrfModel model;
  if (mode == fsr::ScrfMode::FirstPass) {
    model = fsr::train_first_pass_scrf(corpus, split.train, t.pca, t.dnns, t.frontend, t.hmm, rc.experiment.first_pass);
  } else {
    int skipped = 0;
    model = fsr::train_rescoring_scrf(corpus, split.train, t.pca, t.dnns, t.frontend, t.hmm, rc.experiment.rescoring,
                                      o.beam.value_or(rc.experiment.lattice_beam), &skipped);
    m.note("skipped_lattices", skipped);
  }
  const auto path = rc.out / ("scrf_" + fsr::to_string(mode) + ".json");
  model.save(path);
  m.output(path);
  m.write();
}

void cmd_rescore(const Options& o, const RunConfig& rc) {
  Manifest m("rescore", rc);
  const auto corpus = open_corpus(rc, m);
  const auto signer = require_signer(o, corpus);
  const auto t = load_tandem(o, rc, m);
  const auto model = fsr::ScrfModel::load(m.input(rc.models / "scrf_rescoring.json"), corpus.alphabet);
  const double beam = o.beam.value_or(rc.experiment.lattice_beam);
  const auto idx = select_set(o, corpus, signer);
  std::vector<fsr::Decoding> decs;
  for (int i : idx) {
    const auto& seq = corpus.utterances[static_cast<std::size_t>(i)];
    fsr::ScrfInput in;
    const auto s = fsr::static_features(t.pca, seq);
    in.posteriorgrams = fsr::posteriorgrams(t.dnns, s);
    in.lm = t.hmm.lm;
    if (!o.lattices.empty()) {
      in.lattice = fsr::Lattice::from_text(fsr::io::read_text(m.input(fs::path(o.lattices) / (seq.id + ".lat"))), corpus.alphabet);
    } else {
      const auto em = fsr::emission_table(t.hmm, t.frontend.apply(in.posteriorgrams, s));
      in.lattice = fsr::make_lattice(t.hmm, em, t.hmm.params, beam, seq.id);
    }
    if (in.lattice->num_frames != seq.length()) throw fsr::DataError(seq.id + ": lattice length differs from the utterance");
    in.baseline = fsr::labels_from_segments(in.lattice->best_path(t.hmm.params).segmentation);
    decs.push_back(fsr::rescore_lattice(model, in, {o.lm_scale}));
  }
  write_decodes(rc, m, corpus, idx, decs);
  m.write();
}

void cmd_decode_scrf(const Options& o, const RunConfig& rc) {
  Manifest m("decode-scrf", rc);
  const auto corpus = open_corpus(rc, m);
  const auto signer = require_signer(o, corpus);
  const auto t = load_tandem(o, rc, m);
  const auto model = fsr::ScrfModel::load(m.input(rc.models / "scrf_first_pass.json"), corpus.alphabet);
  const auto idx = select_set(o, corpus, signer);
  std::vector<fsr::Decoding> decs;
  for (int i : idx) {
    const auto in = fsr::make_scrf_input(t.pca, t.dnns, t.frontend, t.hmm, corpus.utterances[static_cast<std::size_t>(i)],
                                         std::nullopt);
    decs.push_back(fsr::decode_first_pass(model, in, {o.lm_scale}));
  }
  write_decodes(rc, m, corpus, idx, decs);
  m.write();
}

void cmd_eval(const Options& o, const RunConfig& rc) {
  Manifest m("eval", rc);
  if (o.ref.empty() || o.hyp.empty()) throw fsr::ConfigError("eval: --ref and --hyp are required");
  fsr::LabelAlphabet alphabet = rc.alphabet;
  if (!rc.corpus.empty()) alphabet = open_corpus(rc, m).alphabet;
  const auto refs = read_transcripts(m.input(o.ref), alphabet);
  const auto hyps = read_transcripts(m.input(o.hyp), alphabet);
  std::map<std::string, fsr::LabelSeq> by_id;
  for (const auto& [id, w] : hyps) by_id[id] = w;
  if (hyps.size() != refs.size()) throw fsr::DataError("eval: reference and hypothesis files list different utterance counts");

  std::map<std::string, fsr::EditCounts> per_signer;
  fsr::EditCounts total;
  for (const auto& [id, w] : refs) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw fsr::DataError("eval: no hypothesis for " + id);
    const auto c = fsr::align_counts(w, it->second);
    per_signer[id.substr(0, id.find('_'))] += c;
    total += c;
  }
  fsr::AccuracyReport rep;
  rep.recognizer = "decode";
  rep.condition = o.hyp;
  for (const auto& [signer, c] : per_signer) {
    fsr::SignerAccuracy sa;
    sa.signer = signer;
    sa.counts = c;
    sa.accuracy = c.accuracy();
    sa.fold_accuracy = {sa.accuracy};
    rep.signers.push_back(sa);
  }
  Json j = rep.to_json();
  j["total"] = {{"reference_letters", total.reference},
                {"substitutions", total.substitutions},
                {"deletions", total.deletions},
                {"insertions", total.insertions},
                {"accuracy", total.accuracy()}};
  fsr::io::write_json(rc.out / "report.json", j);
  fsr::io::write_text(rc.out / "report.txt", fsr::render_accuracy_table({rep}));
  m.output(rc.out / "report.json");
  m.output(rc.out / "report.txt");
  m.write();
  std::cout << fsr::render_accuracy_table({rep});
}

void cmd_experiment(const Options&, const RunConfig& rc) {
  Manifest m("experiment", rc);
  fsr::Corpus corpus;
  if (!rc.corpus.empty()) {
    corpus = open_corpus(rc, m);
  } else {
    corpus = fsr::Corpus{rc.alphabet, fsr::generate_synthetic(rc.synth, rc.alphabet)};
    m.note("corpus", "generated from config.synth");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = fsr::run_experiment(corpus, rc.experiment, [&](const std::string& s) {
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    std::fprintf(stderr, "[%7.1fs] %s\n", dt.count(), s.c_str());
  });
  for (const auto& p : fsr::write_reports(rc.out, result, corpus.alphabet)) m.output(p);
  m.note("split", result.provenance);
  m.write();
  std::cout << fsr::io::read_text(rc.out / "report.txt");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fingerspelling recognition toolkit"};
  app.require_subcommand(1);
  Options o;

  struct Spec {
    const char* name;
    const char* help;
    void (*run)(const Options&, const RunConfig&);
  };
  const std::vector<Spec> specs = {
      {"gen", "Generate a synthetic corpus", cmd_gen},
      {"features", "Fit the per-frame PCA on the training signers", cmd_features},
      {"train-dnn", "Train signer-independent frame classifiers", cmd_train_dnn},
      {"adapt-dnn", "Adapt frame classifiers to the test signer", cmd_adapt_dnn},
      {"train-hmm", "Fit the tandem frontend and train the tandem HMM", cmd_train_hmm},
      {"decode", "Decode with the tandem HMM", cmd_decode},
      {"align", "Force-align known words with the tandem HMM", cmd_align},
      {"lattice", "Write tandem HMM lattices", cmd_lattice},
      {"train-scrf", "Train a first-pass or rescoring SCRF", cmd_train_scrf},
      {"rescore", "Rescore tandem lattices with the SCRF", cmd_rescore},
      {"decode-scrf", "Decode with the first-pass SCRF", cmd_decode_scrf},
      {"eval", "Score hypotheses against references", cmd_eval},
      {"experiment", "Run the adaptation experiment matrix", cmd_experiment},
  };
  const Spec* chosen = nullptr;
  for (const auto& s : specs) {
    auto* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("--seed", o.seed, "Random seed (overrides rng_seed in the config)");
    sub->add_option("--config", o.config, "JSON run configuration");
    sub->add_option("--out", o.out, "Output directory")->required();
    sub->add_option("--corpus", o.corpus, "Corpus directory");
    sub->add_option("--models", o.models, "Directory of upstream model artifacts (default: --out)");
    sub->add_option("--test-signer", o.test_signer, "Held-out signer");
    const std::string name = s.name;
    if (name == "decode" || name == "align" || name == "lattice" || name == "rescore" || name == "decode-scrf" ||
        name == "train-hmm" || name == "train-scrf")
      sub->add_option("--dnns", o.dnns, "Directory of (possibly adapted) frame classifiers (default: --models)");
    if (name == "decode" || name == "align" || name == "lattice" || name == "rescore" || name == "decode-scrf") {
      sub->add_option("--set", o.set, "Utterances: evaluation, tune, test, adapt or train");
      sub->add_option("--fold", o.fold, "Fold index for the tune/test sets");
      sub->add_option("--fraction", o.fraction, "Adaptation fraction that defines the adapt set");
    }
    if (name == "train-dnn" || name == "adapt-dnn") sub->add_option("--task", o.task, "Single task index (default: all)");
    if (name == "train-dnn") sub->add_flag("--speed", o.speed, "Augment with speed-resampled copies");
    if (name == "adapt-dnn") {
      sub->add_option("--mode", o.mode, "lin_up, lin_lon or fine_tune");
      sub->add_option("--source", o.source, "ground_truth or forced_alignment");
      sub->add_option("--fraction", o.fraction, "Adaptation fraction of the test signer's data");
    }
    if (name == "train-scrf") sub->add_option("--mode", o.mode, "first_pass or rescoring");
    if (name == "decode" || name == "lattice") {
      sub->add_option("--lm-weight", o.lm_weight, "LM weight");
      sub->add_option("--insertion-penalty", o.insertion_penalty, "Per-letter insertion penalty");
    }
    if (name == "lattice" || name == "rescore" || name == "train-scrf") sub->add_option("--beam", o.beam, "Lattice beam");
    if (name == "rescore" || name == "decode-scrf") sub->add_option("--lm-scale", o.lm_scale, "LM feature scale");
    if (name == "rescore") sub->add_option("--lattices", o.lattices, "Read lattices from this directory");
    if (name == "eval") {
      sub->add_option("--ref", o.ref, "Reference transcriptions");
      sub->add_option("--hyp", o.hyp, "Decoder output");
    }
    sub->callback([&chosen, &s] { chosen = &s; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const RunConfig rc = load_run_config(o);
    fs::create_directories(rc.out);
    chosen->run(o, rc);
    return 0;
  } catch (const fsr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const Json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
