#include "fsr/corpus.hpp"

#include "fsr/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

namespace fsr {

namespace {

constexpr std::array<int, kNumPhonoFeatures> kDefaultPhonoSizes = {2, 3, 4, 3, 2, 4};
constexpr std::array<int, kNumPhonoFeatures> kPhonoMixers = {3, 5, 7, 11, 13, 17};
const char* const kStartSymbol = "<s>";
const char* const kEndSymbol = "</s>";

}  // namespace

// ---------------------------------------------------------------------------
// LabelAlphabet

LabelAlphabet::LabelAlphabet(std::vector<std::string> letters, std::array<PhonoTable, kNumPhonoFeatures> phono)
    : letters_(std::move(letters)), phono_(std::move(phono)) {
  std::set<std::string> seen;
  for (const auto& l : letters_) {
    if (l.empty() || l == kStartSymbol || l == kEndSymbol) throw ConfigError("invalid letter symbol '" + l + "'");
    if (!seen.insert(l).second) throw ConfigError("duplicate letter symbol '" + l + "'");
  }
  for (const auto& table : phono_) {
    if (table.values.empty()) throw ConfigError("phonological table '" + table.name + "' has no values");
    if (table.value_of_letter.size() != letters_.size())
      throw ConfigError("phonological table '" + table.name + "' must give one value per letter");
    for (int v : table.value_of_letter)
      if (v < 0 || v >= static_cast<int>(table.values.size()))
        throw ConfigError("phonological table '" + table.name + "' has an out-of-range value");
  }
}

LabelAlphabet LabelAlphabet::with_default_phono(std::vector<std::string> letters) {
  std::array<PhonoTable, kNumPhonoFeatures> phono;
  for (int f = 0; f < kNumPhonoFeatures; ++f) {
    auto& t = phono[static_cast<std::size_t>(f)];
    t.name = "phono" + std::to_string(f + 1);
    for (int v = 0; v < kDefaultPhonoSizes[static_cast<std::size_t>(f)]; ++v) t.values.push_back("v" + std::to_string(v));
    for (std::size_t i = 0; i < letters.size(); ++i)
      t.value_of_letter.push_back(static_cast<int>(((i + 1) * kPhonoMixers[static_cast<std::size_t>(f)] + i / 3 + f) %
                                                   t.values.size()));
  }
  return LabelAlphabet(std::move(letters), std::move(phono));
}

LabelAlphabet LabelAlphabet::uppercase() {
  std::vector<std::string> letters;
  for (char c = 'A'; c <= 'Z'; ++c) letters.emplace_back(1, c);
  return with_default_phono(std::move(letters));
}

LabelAlphabet LabelAlphabet::from_json(const io::Json& j) {
  try {
    auto letters = j.at("letters").get<std::vector<std::string>>();
    if (!j.contains("phono")) return with_default_phono(std::move(letters));
    const auto& tables = j.at("phono");
    if (tables.size() != kNumPhonoFeatures) throw ConfigError("alphabet.phono: expected 6 tables");
    std::array<PhonoTable, kNumPhonoFeatures> phono;
    for (std::size_t f = 0; f < kNumPhonoFeatures; ++f) {
      phono[f].name = tables[f].at("name").get<std::string>();
      phono[f].values = tables[f].at("values").get<std::vector<std::string>>();
      const auto& assign = tables[f].at("letters");
      for (const auto& l : letters) {
        if (!assign.contains(l)) throw ConfigError("alphabet.phono[" + std::to_string(f) + "].letters: missing '" + l + "'");
        const auto value = assign.at(l).get<std::string>();
        const auto it = std::find(phono[f].values.begin(), phono[f].values.end(), value);
        if (it == phono[f].values.end())
          throw ConfigError("alphabet.phono[" + std::to_string(f) + "].letters." + l + ": unknown value '" + value + "'");
        phono[f].value_of_letter.push_back(static_cast<int>(it - phono[f].values.begin()));
      }
    }
    return LabelAlphabet(std::move(letters), std::move(phono));
  } catch (const io::Json::exception& e) {
    throw ConfigError(std::string("alphabet: ") + e.what());
  }
}

io::Json LabelAlphabet::to_json() const {
  io::Json tables = io::Json::array();
  for (const auto& t : phono_) {
    io::Json assign = io::Json::object();
    for (std::size_t i = 0; i < letters_.size(); ++i)
      assign[letters_[i]] = t.values[static_cast<std::size_t>(t.value_of_letter[i])];
    tables.push_back({{"name", t.name}, {"values", t.values}, {"letters", assign}});
  }
  return {{"letters", letters_}, {"phono", tables}};
}

std::string LabelAlphabet::symbol(int c) const {
  if (c == start_class()) return kStartSymbol;
  if (c == end_class()) return kEndSymbol;
  return letters_.at(static_cast<std::size_t>(c));
}

int LabelAlphabet::index_of(std::string_view symbol) const {
  if (symbol == kStartSymbol) return start_class();
  if (symbol == kEndSymbol) return end_class();
  const auto it = std::find(letters_.begin(), letters_.end(), symbol);
  if (it == letters_.end()) throw DataError("letter not in alphabet: '" + std::string(symbol) + "'");
  return static_cast<int>(it - letters_.begin());
}

LabelSeq LabelAlphabet::encode_word(std::string_view word) const {
  // Greedy longest match so multi-character symbols work.
  LabelSeq out;
  std::size_t pos = 0;
  while (pos < word.size()) {
    int best = -1;
    std::size_t best_len = 0;
    for (int i = 0; i < num_letters(); ++i) {
      const auto& l = letters_[static_cast<std::size_t>(i)];
      if (l.size() > best_len && word.compare(pos, l.size(), l) == 0) {
        best = i;
        best_len = l.size();
      }
    }
    if (best < 0) throw DataError("letter not in alphabet: '" + std::string(word.substr(pos, 1)) + "' in word '" +
                                  std::string(word) + "'");
    out.push_back(best);
    pos += best_len;
  }
  return out;
}

std::string LabelAlphabet::decode_word(const LabelSeq& letters) const {
  std::string out;
  for (int c : letters) out += symbol(c);
  return out;
}

int LabelAlphabet::task_classes(int task) const {
  if (task == kLetterTask) return num_classes();
  return static_cast<int>(phono(task - 1).values.size()) + 2;
}

int LabelAlphabet::task_label(int task, int class_id) const {
  if (task == kLetterTask) return class_id;
  const auto& table = phono(task - 1);
  const int n = static_cast<int>(table.values.size());
  if (class_id == start_class()) return n;
  if (class_id == end_class()) return n + 1;
  return table.value_of_letter.at(static_cast<std::size_t>(class_id));
}

LabelSeq LabelAlphabet::task_labels(int task, const LabelSeq& class_labels) const {
  LabelSeq out(class_labels.size());
  std::transform(class_labels.begin(), class_labels.end(), out.begin(), [&](int c) { return task_label(task, c); });
  return out;
}

std::string LabelAlphabet::task_name(int task) const { return task == kLetterTask ? "letter" : phono(task - 1).name; }

// ---------------------------------------------------------------------------
// Segmentations

void validate_segmentation(const Segmentation& seg, int length, int num_classes) {
  int next = 0;
  for (const auto& s : seg) {
    if (s.start != next || s.end < s.start) throw DataError("segmentation does not tile the sequence");
    if (s.label < 0 || s.label >= num_classes) throw DataError("segment label out of range");
    next = s.end + 1;
  }
  if (next != length) throw DataError("segmentation does not tile the sequence");
}

LabelSeq labels_from_segments(const Segmentation& seg) {
  LabelSeq out;
  for (const auto& s : seg) out.insert(out.end(), static_cast<std::size_t>(s.length()), s.label);
  return out;
}

Segmentation runs_from_labels(const LabelSeq& labels) {
  Segmentation out;
  for (int t = 0; t < static_cast<int>(labels.size()); ++t) {
    if (!out.empty() && out.back().label == labels[static_cast<std::size_t>(t)])
      out.back().end = t;
    else
      out.push_back({t, t, labels[static_cast<std::size_t>(t)]});
  }
  return out;
}

Segmentation segments_for_word(const LabelSeq& labels, const LabelSeq& word, const LabelAlphabet& alphabet) {
  Segmentation out;
  std::size_t j = 0;
  for (const auto& run : runs_from_labels(labels)) {
    if (alphabet.is_boundary(run.label)) {
      out.push_back(run);
      continue;
    }
    if (j >= word.size() || word[j] != run.label) throw DataError("frame labels do not match the word");
    std::size_t k = 1;
    while (j + k < word.size() && word[j + k] == run.label) ++k;
    const int n = run.length();
    if (n < static_cast<int>(k)) throw DataError("frame labels do not match the word");
    int start = run.start;
    for (std::size_t i = 0; i < k; ++i) {
      const int len = n / static_cast<int>(k) + (static_cast<int>(i) < n % static_cast<int>(k) ? 1 : 0);
      out.push_back({start, start + len - 1, run.label});
      start += len;
    }
    j += k;
  }
  if (j != word.size()) throw DataError("frame labels do not match the word");
  return out;
}

LabelSeq letters_of(const Segmentation& seg, const LabelAlphabet& alphabet) {
  LabelSeq out;
  for (const auto& s : seg)
    if (!alphabet.is_boundary(s.label)) out.push_back(s.label);
  return out;
}

// ---------------------------------------------------------------------------
// FrameSequence

namespace {

void check_peaks(const FrameSequence& seq) {
  const auto& peaks = *seq.peaks;
  if (peaks.size() != seq.word.size()) throw DataError("invalid annotation: peak count differs from word length");
  for (std::size_t i = 0; i < peaks.size(); ++i) {
    if (peaks[i].letter != static_cast<int>(i)) throw DataError("invalid annotation: peaks must cover each letter once");
    if (peaks[i].frame < 0 || peaks[i].frame >= seq.length()) throw DataError("invalid annotation: peak outside sequence");
    if (i > 0 && peaks[i].frame <= peaks[i - 1].frame) throw DataError("invalid annotation: peaks not increasing");
  }
}

}  // namespace

void validate(const FrameSequence& seq, const LabelAlphabet& alphabet) {
  if (seq.length() < 1) throw DataError(seq.id + ": empty sequence");
  if (!seq.frames.allFinite()) throw DataError(seq.id + ": non-finite feature values");
  for (int c : seq.word)
    if (c < 0 || c >= alphabet.num_letters()) throw DataError(seq.id + ": word contains a non-letter class");
  if (seq.frame_labels) {
    const auto& labels = *seq.frame_labels;
    if (static_cast<int>(labels.size()) != seq.length()) throw DataError(seq.id + ": frame label count differs from T");
    // <s>* letters* </s>*
    int phase = 0;
    for (int c : labels) {
      if (c < 0 || c >= alphabet.num_classes()) throw DataError(seq.id + ": frame label out of range");
      const int p = c == alphabet.start_class() ? 0 : (c == alphabet.end_class() ? 2 : 1);
      if (p < phase) throw DataError(seq.id + ": non-signing label inside the word");
      phase = p;
    }
  }
  if (seq.peaks) check_peaks(seq);
}

Segmentation peaks_to_segmentation(const FrameSequence& seq, const LabelAlphabet& alphabet) {
  if (!seq.peaks) throw DataError("annotation required");
  check_peaks(seq);
  const auto& peaks = *seq.peaks;
  const int T = seq.length();
  Segmentation out;
  if (peaks.empty()) {
    const int half = (T + 1) / 2;
    out.push_back({0, half - 1, alphabet.start_class()});
    if (half < T) out.push_back({half, T - 1, alphabet.end_class()});
    return out;
  }

  int first = (peaks.front().frame + 1) / 2;
  int last = (peaks.back().frame + T - 1) / 2;
  if (seq.span) {
    first = seq.span->first;
    last = seq.span->last;
    if (first < 0 || last >= T || first > peaks.front().frame || last < peaks.back().frame)
      throw DataError("invalid annotation: signing span does not contain the peaks");
  }
  if (first > 0) out.push_back({0, first - 1, alphabet.start_class()});
  int start = first;
  for (std::size_t i = 0; i < peaks.size(); ++i) {
    const int end = i + 1 < peaks.size() ? (peaks[i].frame + peaks[i + 1].frame) / 2 : last;
    out.push_back({start, end, seq.word[i]});
    start = end + 1;
  }
  if (last < T - 1) out.push_back({last + 1, T - 1, alphabet.end_class()});
  return out;
}

LabelSeq peaks_to_frame_labels(const FrameSequence& seq, const LabelAlphabet& alphabet) {
  return labels_from_segments(peaks_to_segmentation(seq, alphabet));
}

LabelSeq ground_truth_labels(const FrameSequence& seq, const LabelAlphabet& alphabet) {
  if (seq.frame_labels) return *seq.frame_labels;
  return peaks_to_frame_labels(seq, alphabet);
}

Segmentation ground_truth_segmentation(const FrameSequence& seq, const LabelAlphabet& alphabet) {
  if (seq.frame_labels) return segments_for_word(*seq.frame_labels, seq.word, alphabet);
  return peaks_to_segmentation(seq, alphabet);
}

FrameSequence resample_speed(const FrameSequence& seq, double rate) {
  if (!(rate > 0.0) || !std::isfinite(rate)) throw ConfigError("invalid rate");
  const int T = seq.length();
  const int out_len = std::max(1, static_cast<int>(std::lround(rate * T)));

  FrameSequence out;
  out.id = seq.id;
  out.signer = seq.signer;
  out.word = seq.word;
  out.frames.resize(out_len, seq.dim());
  std::vector<int> nearest(static_cast<std::size_t>(out_len));
  for (int t = 0; t < out_len; ++t) {
    const double pos = out_len == 1 ? 0.0 : static_cast<double>(t) * (T - 1) / (out_len - 1);
    const int lo = std::min(static_cast<int>(std::floor(pos)), T - 1);
    const int hi = std::min(lo + 1, T - 1);
    const double frac = pos - lo;
    out.frames.row(t) = (1.0 - frac) * seq.frames.row(lo) + frac * seq.frames.row(hi);
    nearest[static_cast<std::size_t>(t)] = std::min(static_cast<int>(std::lround(pos)), T - 1);
  }
  if (seq.frame_labels) {
    LabelSeq labels(static_cast<std::size_t>(out_len));
    for (int t = 0; t < out_len; ++t) labels[static_cast<std::size_t>(t)] = (*seq.frame_labels)[static_cast<std::size_t>(nearest[static_cast<std::size_t>(t)])];
    out.frame_labels = std::move(labels);
  }
  if (seq.peaks) {
    const auto map = [&](int f) {
      return T == 1 ? 0 : static_cast<int>(std::lround(static_cast<double>(f) * (out_len - 1) / (T - 1)));
    };
    std::vector<Peak> peaks;
    bool ok = true;
    for (const auto& p : *seq.peaks) {
      const int f = map(p.frame);
      ok = ok && (peaks.empty() || f > peaks.back().frame);
      peaks.push_back({p.letter, f});
    }
    if (ok) {
      out.peaks = std::move(peaks);
      if (seq.span) out.span = SigningSpan{map(seq.span->first), map(seq.span->last)};
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

const std::vector<std::string>& default_word_list() {
  static const std::vector<std::string> words = {
      "TULIP", "ANDY",   "DRUCIE", "APPLE",  "ZEBRA",  "QUIZ",  "JAZZ",   "MOTHER", "FATHER", "WATER",
      "GREEN", "HOUSE",  "PIZZA",  "KNIFE",  "BOOK",   "CHAIR", "SCHOOL", "LEMON",  "RIVER",  "OCEAN",
      "TIGER", "VIOLIN", "YOGURT", "EXAM",   "WINDOW", "GARDEN", "PILOT", "FROG",   "MUSIC",  "BREAD",
      "SUGAR", "CAMERA", "NORTH",  "HELLO",  "JUICE",  "KITE",  "LIZARD", "QUEEN",  "VELVET", "WIZARD",
      "BOX",   "CRAB",   "DESK",   "MAPLE",  "PHONE",  "SALT",  "THUMB",  "UNCLE",  "YARD",   "OXYGEN"};
  return words;
}

std::string signer_name(int index) {
  std::string s = "signer";
  s += std::to_string(index + 1);
  return s;
}

SynthConfig SynthConfig::from_json(const io::Json& j) {
  SynthConfig c;
  io::reject_keys_outside(j, c.to_json(), "synth");
  try {
    c.n_signers = j.value("n_signers", c.n_signers);
    c.words_per_signer = j.value("words_per_signer", c.words_per_signer);
    c.word_list = j.value("word_list", c.word_list);
    if (j.contains("speed_range")) {
      c.speed_min = j.at("speed_range").at(0).get<double>();
      c.speed_max = j.at("speed_range").at(1).get<double>();
    }
    c.signer_speeds = j.value("signer_speeds", c.signer_speeds);
    if (j.contains("appearance")) {
      for (const auto& a : j.at("appearance")) {
        AffineMap m;
        const auto& rows = a.at("scale");
        m.scale.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
        for (std::size_t r = 0; r < rows.size(); ++r) {
          if (rows[r].size() != rows.size()) throw ConfigError("synth.appearance.scale must be square");
          for (std::size_t col = 0; col < rows.size(); ++col)
            m.scale(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(col)) = rows[r][col].get<double>();
        }
        m.offset = io::to_vector(a.at("offset"));
        c.appearance.push_back(std::move(m));
      }
    }
    c.appearance_scale = j.value("appearance_scale", c.appearance_scale);
    c.appearance_offset = j.value("appearance_offset", c.appearance_offset);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.prototype_scale = j.value("prototype_scale", c.prototype_scale);
    c.base_letter_frames = j.value("base_letter_frames", c.base_letter_frames);
    c.duration_jitter = j.value("duration_jitter", c.duration_jitter);
    if (j.contains("nonsigning_len_range")) {
      c.nonsigning_min = j.at("nonsigning_len_range").at(0).get<int>();
      c.nonsigning_max = j.at("nonsigning_len_range").at(1).get<int>();
    }
    c.nonsigning_step = j.value("nonsigning_step", c.nonsigning_step);
    c.rest_scale = j.value("rest_scale", c.rest_scale);
    c.nonsigning_variation = j.value("nonsigning_variation", c.nonsigning_variation);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
  } catch (const io::Json::exception& e) {
    throw ConfigError(std::string("synth: ") + e.what());
  }
  c.validate();
  return c;
}

io::Json SynthConfig::to_json() const {
  io::Json j = {{"n_signers", n_signers},
                {"words_per_signer", words_per_signer},
                {"word_list", word_list},
                {"speed_range", {speed_min, speed_max}},
                {"signer_speeds", signer_speeds},
                {"appearance_scale", appearance_scale},
                {"appearance_offset", appearance_offset},
                {"feature_dim", feature_dim},
                {"prototype_scale", prototype_scale},
                {"base_letter_frames", base_letter_frames},
                {"duration_jitter", duration_jitter},
                {"nonsigning_len_range", {nonsigning_min, nonsigning_max}},
                {"nonsigning_step", nonsigning_step},
                {"rest_scale", rest_scale},
                {"nonsigning_variation", nonsigning_variation},
                {"noise_sigma", noise_sigma},
                {"rng_seed", rng_seed}};
  io::Json maps = io::Json::array();
  for (const auto& m : appearance) {
    io::Json rows = io::Json::array();
    for (Eigen::Index r = 0; r < m.scale.rows(); ++r) rows.push_back(io::to_json(m.scale.row(r).transpose()));
    maps.push_back({{"scale", rows}, {"offset", io::to_json(m.offset)}});
  }
  j["appearance"] = maps;
  return j;
}

void SynthConfig::validate() const {
  if (n_signers < 1) throw ConfigError("synth.n_signers: must be >= 1");
  if (words_per_signer < 1) throw ConfigError("synth.words_per_signer: must be >= 1");
  if (!(speed_min > 0.0) || speed_max < speed_min) throw ConfigError("synth.speed_range: must lie in (0, inf)");
  if (!signer_speeds.empty() && static_cast<int>(signer_speeds.size()) != n_signers)
    throw ConfigError("synth.signer_speeds: one speed per signer required");
  for (double s : signer_speeds)
    if (!(s > 0.0)) throw ConfigError("synth.signer_speeds: speeds must be positive");
  if (feature_dim < 1) throw ConfigError("synth.feature_dim: must be >= 1");
  if (!appearance.empty()) {
    if (static_cast<int>(appearance.size()) != n_signers) throw ConfigError("synth.appearance: one map per signer required");
    for (const auto& m : appearance)
      if (m.scale.rows() != feature_dim || m.offset.size() != feature_dim)
        throw ConfigError("synth.appearance: map dimension differs from feature_dim");
  }
  if (!nonsigning_variation.empty() && static_cast<int>(nonsigning_variation.size()) != n_signers)
    throw ConfigError("synth.nonsigning_variation: one value per signer required");
  if (nonsigning_min < 1 || nonsigning_max < nonsigning_min) throw ConfigError("synth.nonsigning_len_range: invalid");
  if (!(noise_sigma >= 0.0)) throw ConfigError("synth.noise_sigma: must be >= 0");
  if (!(base_letter_frames > 0.0)) throw ConfigError("synth.base_letter_frames: must be > 0");
  if (duration_jitter < 0.0 || duration_jitter >= 1.0) throw ConfigError("synth.duration_jitter: must lie in [0, 1)");
}

std::vector<FrameSequence> generate_synthetic(const SynthConfig& cfg, const LabelAlphabet& alphabet) {
  cfg.validate();
  const auto& word_list = cfg.word_list.empty() ? default_word_list() : cfg.word_list;
  std::vector<LabelSeq> words;
  for (const auto& w : word_list) words.push_back(alphabet.encode_word(w));

  std::mt19937_64 rng(cfg.rng_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  const int D = cfg.feature_dim;
  const auto gaussian = [&](int n) {
    Vector v(n);
    for (int i = 0; i < n; ++i) v(i) = normal(rng);
    return v;
  };

  Matrix prototypes(alphabet.num_letters(), D);
  for (int l = 0; l < alphabet.num_letters(); ++l) prototypes.row(l) = cfg.prototype_scale * gaussian(D).transpose();
  const Vector rest_in = gaussian(D);
  const Vector rest_out = gaussian(D);

  std::vector<FrameSequence> out;
  for (int s = 0; s < cfg.n_signers; ++s) {
    const double speed = !cfg.signer_speeds.empty() ? cfg.signer_speeds[static_cast<std::size_t>(s)]
                         : cfg.n_signers == 1   ? cfg.speed_min
                                                : cfg.speed_min + (cfg.speed_max - cfg.speed_min) * s / (cfg.n_signers - 1);
    AffineMap look;
    if (!cfg.appearance.empty()) {
      look = cfg.appearance[static_cast<std::size_t>(s)];
    } else {
      Matrix g(D, D);
      for (int r = 0; r < D; ++r) g.row(r) = gaussian(D).transpose();
      look.scale = Matrix::Identity(D, D) + cfg.appearance_scale * g / std::sqrt(static_cast<double>(D));
      look.offset = cfg.appearance_offset * gaussian(D);
    }
    const double variation = cfg.nonsigning_variation.empty() ? 1.0 : cfg.nonsigning_variation[static_cast<std::size_t>(s)];
    const Vector signer_rest_in = rest_in + variation * cfg.rest_scale * gaussian(D);
    const Vector signer_rest_out = rest_out + variation * cfg.rest_scale * gaussian(D);
    std::uniform_int_distribution<int> pause(cfg.nonsigning_min, cfg.nonsigning_max);

    for (int w = 0; w < cfg.words_per_signer; ++w) {
      const LabelSeq& word = words[static_cast<std::size_t>(w) % words.size()];
      std::vector<int> durations;
      for (std::size_t i = 0; i < word.size(); ++i) {
        const double jitter = cfg.duration_jitter > 0.0 ? 1.0 + cfg.duration_jitter * uniform(rng) : 1.0;
        durations.push_back(std::max(1, static_cast<int>(std::lround(cfg.base_letter_frames * speed * jitter))));
      }
      const int pre = pause(rng);
      const int post = pause(rng);
      int T = pre + post;
      for (int d : durations) T += d;

      FrameSequence seq;
      seq.signer = signer_name(s);
      char id[64];
      std::snprintf(id, sizeof id, "%s_%04d", seq.signer.c_str(), w);
      seq.id = id;
      seq.word = word;
      seq.frames.resize(T, D);
      LabelSeq labels;
      std::vector<Peak> peaks;

      Vector x = signer_rest_in;
      for (int t = 0; t < pre; ++t) {
        seq.frames.row(t) = x.transpose();
        x += variation * cfg.nonsigning_step * gaussian(D);
        labels.push_back(alphabet.start_class());
      }
      int t = pre;
      for (std::size_t i = 0; i < word.size(); ++i) {
        const int d = durations[i];
        for (int k = 0; k < d; ++k, ++t) {
          seq.frames.row(t) = prototypes.row(word[i]);
          labels.push_back(word[i]);
        }
        peaks.push_back({static_cast<int>(i), t - d + (d - 1) / 2});
      }
      x = signer_rest_out;
      for (int k = 0; k < post; ++k, ++t) {
        seq.frames.row(t) = x.transpose();
        x += variation * cfg.nonsigning_step * gaussian(D);
        labels.push_back(alphabet.end_class());
      }

      seq.frames = (seq.frames * look.scale.transpose()).rowwise() + look.offset.transpose();
      if (cfg.noise_sigma > 0.0)
        for (int r = 0; r < T; ++r) seq.frames.row(r) += cfg.noise_sigma * gaussian(D).transpose();
      seq.span = SigningSpan{pre, T - post - 1};
      seq.frame_labels = std::move(labels);
      seq.peaks = std::move(peaks);
      out.push_back(std::move(seq));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus and splits

std::vector<std::string> Corpus::signers() const {
  std::set<std::string> s;
  for (const auto& u : utterances) s.insert(u.signer);
  return {s.begin(), s.end()};
}

int Corpus::find(std::string_view id) const {
  for (std::size_t i = 0; i < utterances.size(); ++i)
    if (utterances[i].id == id) return static_cast<int>(i);
  return -1;
}

Split split_corpus(const Corpus& corpus, std::string_view test_signer, double adapt_fraction, int fold_index) {
  if (!(adapt_fraction >= 0.0 && adapt_fraction <= 0.2 + 1e-12))
    throw ConfigError("adapt_fraction must lie in [0, 0.2]");
  if (fold_index < 0 || fold_index >= kNumFolds) throw ConfigError("fold index out of range");

  Split split;
  std::vector<int> own;
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
    if (corpus.utterances[i].signer == test_signer)
      own.push_back(static_cast<int>(i));
    else
      split.train.push_back(static_cast<int>(i));
  }
  if (own.empty()) throw DataError("unknown signer '" + std::string(test_signer) + "'");
  std::sort(own.begin(), own.end(),
            [&](int a, int b) { return corpus.utterances[static_cast<std::size_t>(a)].id < corpus.utterances[static_cast<std::size_t>(b)].id; });

  const int n = static_cast<int>(own.size());
  const int n_adapt = static_cast<int>(std::lround(adapt_fraction * n));
  const int eval_begin = static_cast<int>(std::lround(0.2 * n));
  const int m = n - eval_begin;
  split.adapt.assign(own.begin(), own.begin() + n_adapt);
  split.evaluation.assign(own.begin() + eval_begin, own.end());
  const auto chunk = [&](int c) {
    return std::vector<int>(own.begin() + eval_begin + c * m / kNumFolds, own.begin() + eval_begin + (c + 1) * m / kNumFolds);
  };
  split.test = chunk(fold_index);
  split.tune = chunk((fold_index + 1) % kNumFolds);
  return split;
}

// ---------------------------------------------------------------------------
// Persistence

void save_sequence(const io::fs::path& path, const FrameSequence& seq) {
  io::Json header = {{"kind", "utterance"}, {"id", seq.id}, {"signer", seq.signer}, {"word", seq.word}};
  if (seq.frame_labels) header["labels"] = *seq.frame_labels;
  if (seq.peaks) {
    io::Json peaks = io::Json::array();
    for (const auto& p : *seq.peaks) peaks.push_back({p.letter, p.frame});
    header["peaks"] = peaks;
  }
  if (seq.span) header["span"] = {seq.span->first, seq.span->last};
  io::write_container(path, header, {{"frames", seq.frames}});
}

FrameSequence load_sequence(const io::fs::path& path, const LabelAlphabet& alphabet) {
  const auto c = io::read_container(path);
  FrameSequence seq;
  try {
    seq.id = c.header.at("id").get<std::string>();
    seq.signer = c.header.at("signer").get<std::string>();
    seq.word = c.header.at("word").get<LabelSeq>();
    if (c.header.contains("labels")) seq.frame_labels = c.header.at("labels").get<LabelSeq>();
    if (c.header.contains("peaks")) {
      std::vector<Peak> peaks;
      for (const auto& p : c.header.at("peaks")) peaks.push_back({p.at(0).get<int>(), p.at(1).get<int>()});
      seq.peaks = std::move(peaks);
    }
    if (c.header.contains("span"))
      seq.span = SigningSpan{c.header.at("span").at(0).get<int>(), c.header.at("span").at(1).get<int>()};
  } catch (const io::Json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  seq.frames = c.tensor("frames");
  validate(seq, alphabet);
  return seq;
}

void save_corpus(const io::fs::path& dir, const Corpus& corpus) {
  io::fs::create_directories(dir);
  io::Json list = io::Json::array();
  for (const auto& u : corpus.utterances) {
    const auto rel = io::fs::path(u.signer) / (u.id + ".fsr");
    save_sequence(dir / rel, u);
    list.push_back({{"id", u.id}, {"signer", u.signer}, {"word", corpus.alphabet.decode_word(u.word)}, {"file", rel.generic_string()}});
  }
  io::write_json(dir / "alphabet.json", corpus.alphabet.to_json());
  io::write_json(dir / "corpus.json", {{"alphabet", "alphabet.json"}, {"utterances", list}});
}

Corpus load_corpus(const io::fs::path& dir) {
  if (!io::fs::exists(dir / "corpus.json")) throw DataError("missing corpus manifest " + (dir / "corpus.json").string());
  const auto manifest = io::read_json(dir / "corpus.json");
  Corpus corpus;
  corpus.alphabet = LabelAlphabet::from_json(io::read_json(dir / manifest.value("alphabet", "alphabet.json")));
  for (const auto& entry : manifest.at("utterances"))
    corpus.utterances.push_back(load_sequence(dir / entry.at("file").get<std::string>(), corpus.alphabet));
  return corpus;
}

}  // namespace fsr
