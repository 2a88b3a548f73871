#include "doctest.h"

#include "fixtures.hpp"

#include "fsr/corpus.hpp"
#include "fsr/errors.hpp"

#include <filesystem>
#include <set>

using namespace fsr;

namespace {

FrameSequence annotated(int T, const std::string& word, std::vector<int> peak_frames, SigningSpan span,
                        const LabelAlphabet& a) {
  FrameSequence s;
  s.id = "x";
  s.signer = "s";
  s.word = a.encode_word(word);
  s.frames = Matrix::Zero(T, 2);
  std::vector<Peak> peaks;
  for (std::size_t i = 0; i < peak_frames.size(); ++i) peaks.push_back({static_cast<int>(i), peak_frames[i]});
  s.peaks = peaks;
  s.span = span;
  return s;
}

Corpus toy_corpus(int n_signers, int words) {
  SynthConfig c;
  c.n_signers = n_signers;
  c.words_per_signer = words;
  c.feature_dim = 3;
  c.word_list = {"AB", "CAB", "BAD"};
  const auto a = LabelAlphabet::with_default_phono({"A", "B", "C", "D"});
  return Corpus{a, generate_synthetic(c, a)};
}

}  // namespace

TEST_CASE("alphabet layout and word codec") {
  const auto a = LabelAlphabet::uppercase();
  CHECK(a.num_letters() == 26);
  CHECK(a.start_class() == 26);
  CHECK(a.end_class() == 27);
  CHECK(a.symbol(a.start_class()) == "<s>");
  CHECK(a.symbol(a.end_class()) == "</s>");
  CHECK(a.decode_word(a.encode_word("TULIP")) == "TULIP");
  CHECK_THROWS_AS(a.encode_word("TU1IP"), DataError);
  for (int f = 0; f < kNumPhonoFeatures; ++f) CHECK(a.phono(f).value_of_letter.size() == 26u);
  // Boundary classes keep their own labels in every task.
  for (int task = 0; task < kNumTasks; ++task) {
    CHECK(a.task_label(task, a.start_class()) == a.task_classes(task) - 2);
    CHECK(a.task_label(task, a.end_class()) == a.task_classes(task) - 1);
  }
  CHECK(a.task_label(0, 5) == 5);

  const auto back = LabelAlphabet::from_json(a.to_json());
  CHECK(back.letters() == a.letters());
  for (int f = 0; f < kNumPhonoFeatures; ++f) CHECK(back.phono(f).value_of_letter == a.phono(f).value_of_letter);
  CHECK_THROWS_AS(LabelAlphabet::with_default_phono({"A", "A"}), ConfigError);
}

TEST_CASE("multi-character symbols decode by longest match") {
  const auto a = LabelAlphabet::with_default_phono({"A", "AB", "C"});
  CHECK(a.encode_word("ABC") == LabelSeq{1, 2});
  CHECK(a.encode_word("AAB") == LabelSeq{0, 1});
}

TEST_CASE("peaks to frame labels: midpoint boundaries") {
  const auto a = LabelAlphabet::uppercase();
  const auto A = a.index_of("A"), B = a.index_of("B");
  const auto s = a.start_class(), e = a.end_class();

  const auto labels = peaks_to_frame_labels(annotated(30, "AB", {10, 20}, {5, 25}, a), a);
  REQUIRE(labels.size() == 30u);
  for (int t = 0; t < 30; ++t) {
    const int want = t <= 4 ? s : t <= 15 ? A : t <= 25 ? B : e;
    CHECK(labels[static_cast<std::size_t>(t)] == want);
  }

  const auto single = peaks_to_frame_labels(annotated(15, "Q", {7}, {3, 12}, a), a);
  for (int t = 3; t <= 12; ++t) CHECK(single[static_cast<std::size_t>(t)] == a.index_of("Q"));
  CHECK(single[2] == s);
  CHECK(single[13] == e);
}

TEST_CASE("peaks to frame labels on a generated TULIP") {
  const auto a = LabelAlphabet::uppercase();
  SynthConfig c;
  c.n_signers = 1;
  c.words_per_signer = 1;
  c.word_list = {"TULIP"};
  auto seq = generate_synthetic(c, a).front();
  const auto& peaks = *seq.peaks;
  REQUIRE(peaks.size() == 5u);
  const auto labels = peaks_to_frame_labels(seq, a);
  const auto runs = runs_from_labels(labels);
  REQUIRE(runs.size() == 7u);
  CHECK(runs.front().label == a.start_class());
  CHECK(runs.back().label == a.end_class());
  for (int i = 0; i + 1 < 5; ++i) {
    const int mid = (peaks[static_cast<std::size_t>(i)].frame + peaks[static_cast<std::size_t>(i) + 1].frame) / 2;
    CHECK(runs[static_cast<std::size_t>(i) + 1].end == mid);
  }
  CHECK(letters_of(runs, a) == seq.word);
  validate_segmentation(runs, seq.length(), a.num_classes());
}

TEST_CASE("peak annotation errors") {
  const auto a = LabelAlphabet::uppercase();
  auto s = annotated(30, "AB", {10, 20}, {5, 25}, a);
  s.peaks.reset();
  CHECK_THROWS_WITH_AS(peaks_to_frame_labels(s, a), "annotation required", DataError);
  auto bad = annotated(30, "AB", {20, 10}, {5, 25}, a);
  CHECK_THROWS_AS(peaks_to_frame_labels(bad, a), DataError);
  try {
    peaks_to_frame_labels(bad, a);
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("invalid annotation") != std::string::npos);
  }
}

TEST_CASE("peaks without a span default to half-way flanks") {
  const auto a = LabelAlphabet::uppercase();
  auto s = annotated(30, "AB", {10, 20}, {0, 0}, a);
  s.span.reset();
  const auto labels = peaks_to_frame_labels(s, a);
  // <s> ends half-way between frame 0 and the first peak; </s> starts half-way after the last.
  CHECK(labels[4] == a.start_class());
  CHECK(labels[5] == a.index_of("A"));
  CHECK(labels[24] == a.index_of("B"));
  CHECK(labels[25] == a.end_class());
}

TEST_CASE("speed resampling") {
  const auto a = LabelAlphabet::uppercase();
  FrameSequence s;
  s.frames = Matrix(10, 2);
  for (int t = 0; t < 10; ++t) s.frames.row(t) << t, -t;
  s.frame_labels = LabelSeq(10, a.start_class());
  for (int t = 5; t < 10; ++t) (*s.frame_labels)[static_cast<std::size_t>(t)] = a.end_class();

  const auto same = resample_speed(s, 1.0);
  CHECK(same.frames == s.frames);
  CHECK(*same.frame_labels == *s.frame_labels);

  const auto fast = resample_speed(s, 1.2);
  CHECK(fast.length() == 12);
  CHECK(fast.frames(11, 0) == doctest::Approx(9.0));
  CHECK(fast.frame_labels->size() == 12u);

  FrameSequence two;
  two.frames = Matrix(2, 1);
  two.frames << 0, 10;
  const auto three = resample_speed(two, 1.5);
  REQUIRE(three.length() == 3);
  CHECK(three.frames(0, 0) == 0.0);
  CHECK(three.frames(1, 0) == doctest::Approx(5.0));
  CHECK(three.frames(2, 0) == 10.0);

  CHECK(resample_speed(two, 0.1).length() == 1);
  CHECK_THROWS_WITH_AS(resample_speed(s, 0.0), "invalid rate", ConfigError);
  CHECK_THROWS_AS(resample_speed(s, -1.0), ConfigError);

  for (int T : {1, 7, 23, 50})
    for (double r : {0.8, 1.2, 1.7}) {
      FrameSequence x;
      x.frames = Matrix::Random(T, 1);
      const auto back = resample_speed(resample_speed(x, r), 1.0 / r);
      CHECK(std::abs(back.length() - T) <= 1);
    }
}

TEST_CASE("noiseless generation reproduces prototypes") {
  const auto a = LabelAlphabet::uppercase();
  SynthConfig c;
  c.n_signers = 1;
  c.words_per_signer = 6;
  c.noise_sigma = 0.0;
  c.duration_jitter = 0.0;
  c.signer_speeds = {1.0};
  c.appearance = {AffineMap{Matrix::Identity(c.feature_dim, c.feature_dim), Vector::Zero(c.feature_dim)}};
  const auto corpus = generate_synthetic(c, a);
  std::map<int, Vector> proto;
  for (const auto& seq : corpus) {
    validate(seq, a);
    const auto& labels = *seq.frame_labels;
    for (int t = 0; t < seq.length(); ++t) {
      const int l = labels[static_cast<std::size_t>(t)];
      if (a.is_boundary(l)) continue;
      if (!proto.count(l)) proto[l] = seq.frames.row(t).transpose();
      CHECK(seq.frames.row(t).transpose() == proto[l]);
    }
  }
  CHECK(proto.size() > 3u);
}

TEST_CASE("generation is deterministic and speed scales durations") {
  const auto a = LabelAlphabet::uppercase();
  SynthConfig c;
  c.n_signers = 2;
  c.words_per_signer = 5;
  c.signer_speeds = {1.0, 1.8};
  c.duration_jitter = 0.0;
  const auto x = generate_synthetic(c, a);
  const auto y = generate_synthetic(c, a);
  REQUIRE(x.size() == y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(x[i].frames == y[i].frames);
    CHECK(*x[i].frame_labels == *y[i].frame_labels);
  }
  for (int w = 0; w < 5; ++w) {
    const auto& slow = x[static_cast<std::size_t>(5 + w)];
    const auto& fast = x[static_cast<std::size_t>(w)];
    REQUIRE(slow.word == fast.word);
    const auto letters = [&](const FrameSequence& s) {
      int n = 0;
      for (int l : *s.frame_labels) n += a.is_boundary(l) ? 0 : 1;
      return n;
    };
    const double n_letters = static_cast<double>(fast.word.size());
    CHECK(std::abs(letters(slow) - 1.8 * letters(fast)) <= n_letters);
  }

  SynthConfig bad = c;
  bad.word_list = {"AB3"};
  CHECK_THROWS_AS(generate_synthetic(bad, a), DataError);
  bad = c;
  bad.noise_sigma = -1.0;
  CHECK_THROWS_AS(generate_synthetic(bad, a), ConfigError);
}

TEST_CASE("synth config JSON round trip") {
  SynthConfig c;
  c.n_signers = 3;
  c.nonsigning_variation = {1.0, 2.0, 0.5};
  c.rng_seed = 42;
  const auto back = SynthConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK_THROWS_AS(SynthConfig::from_json(io::Json{{"n_signers", "four"}}), ConfigError);
}

TEST_CASE("split: fractions, folds and disjointness") {
  SynthConfig c;
  c.n_signers = 2;
  c.words_per_signer = 600;
  c.feature_dim = 2;
  const auto a = LabelAlphabet::uppercase();
  const Corpus corpus{a, generate_synthetic(c, a)};

  const auto s = split_corpus(corpus, "signer1", 0.2, 0);
  CHECK(s.train.size() == 600u);
  CHECK(s.adapt.size() == 120u);
  CHECK(s.evaluation.size() == 480u);
  std::set<int> all_tests;
  for (int f = 0; f < kNumFolds; ++f) {
    const auto fs = split_corpus(corpus, "signer1", 0.2, f);
    CHECK(fs.tune.size() == 60u);
    CHECK(fs.test.size() == 60u);
    std::set<int> adapt(fs.adapt.begin(), fs.adapt.end());
    std::set<int> tune(fs.tune.begin(), fs.tune.end());
    for (int i : fs.test) {
      CHECK(all_tests.insert(i).second);
      CHECK_FALSE(adapt.count(i));
      CHECK_FALSE(tune.count(i));
    }
    for (int i : fs.tune) CHECK_FALSE(adapt.count(i));
  }
  CHECK(all_tests == std::set<int>(s.evaluation.begin(), s.evaluation.end()));

  CHECK(split_corpus(corpus, "signer1", 0.0, 0).adapt.empty());
  CHECK(split_corpus(corpus, "signer1", 0.05, 0).adapt.size() == 30u);
  // Smaller adaptation sets are prefixes of larger ones.
  const auto small = split_corpus(corpus, "signer1", 0.1, 0).adapt;
  CHECK(std::equal(small.begin(), small.end(), s.adapt.begin()));
  CHECK_THROWS_AS(split_corpus(corpus, "nobody", 0.2, 0), DataError);
  CHECK_THROWS_AS(split_corpus(corpus, "signer1", 0.2, 8), ConfigError);
  CHECK_THROWS_AS(split_corpus(corpus, "signer1", 0.5, 0), ConfigError);
}

TEST_CASE("segmentations") {
  const auto a = LabelAlphabet::with_default_phono({"A", "B", "L"});
  const int s = a.start_class(), e = a.end_class(), A = 0, L = 2;
  const LabelSeq labels = {s, s, A, A, L, L, L, L, e};
  const auto runs = runs_from_labels(labels);
  CHECK(runs.size() == 4u);
  CHECK(labels_from_segments(runs) == labels);

  // A doubled letter is one run of frames but two segments.
  const auto seg = segments_for_word(labels, {A, L, L}, a);
  REQUIRE(seg.size() == 5u);
  CHECK(seg[2].label == L);
  CHECK(seg[3].label == L);
  CHECK(seg[2].end + 1 == seg[3].start);
  CHECK(letters_of(seg, a) == LabelSeq{A, L, L});
  CHECK_THROWS_AS(segments_for_word(labels, {A, A}, a), DataError);

  CHECK_THROWS_AS(validate_segmentation({{0, 1, s}, {3, 4, e}}, 5, a.num_classes()), DataError);
  CHECK_THROWS_AS(validate_segmentation({{0, 4, 9}}, 5, a.num_classes()), DataError);
  CHECK_NOTHROW(validate_segmentation({{0, 1, s}, {2, 4, e}}, 5, a.num_classes()));
}

TEST_CASE("corpus persistence round trip") {
  const auto corpus = toy_corpus(2, 4);
  const auto dir = std::filesystem::temp_directory_path() / "fsr_test_corpus";
  std::filesystem::remove_all(dir);
  save_corpus(dir, corpus);
  CHECK(std::filesystem::exists(dir / "signer1"));
  CHECK(std::filesystem::exists(dir / "signer2"));
  const auto back = load_corpus(dir);
  REQUIRE(back.utterances.size() == corpus.utterances.size());
  for (std::size_t i = 0; i < back.utterances.size(); ++i) {
    const auto& x = corpus.utterances[i];
    const auto& y = back.utterances[i];
    CHECK(x.id == y.id);
    CHECK(x.word == y.word);
    CHECK(*x.frame_labels == *y.frame_labels);
    CHECK(x.peaks->size() == y.peaks->size());
    // The payload is float32.
    CHECK(x.frames.cast<float>().cast<double>() == y.frames);
  }
  CHECK(back.alphabet.letters() == corpus.alphabet.letters());
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_corpus(dir), DataError);
}
