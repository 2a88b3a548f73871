#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

#include "fsr/errors.hpp"
#include "fsr/scrf.hpp"

#include <set>

using namespace fsr;

namespace {

ScrfModel first_pass_model(const LabelAlphabet& a, int L, std::mt19937_64& rng) {
  ScrfConfig cfg;
  cfg.mode = ScrfMode::FirstPass;
  cfg.max_segment = L;
  auto m = ScrfModel::create(cfg, a);
  fixture::randomize(m, rng);
  return m;
}

ScrfModel rescoring_model(const LabelAlphabet& a, std::mt19937_64& rng) {
  ScrfConfig cfg;
  cfg.mode = ScrfMode::Rescoring;
  auto m = ScrfModel::create(cfg, a);
  fixture::randomize(m, rng);
  return m;
}

// Attaches a lattice holding every HMM-grammar path of a tiny random
// instance; the input shares the lattice's LM so arc LM scores agree.
void attach_full_lattice(ScrfInput& in, int num_letters, std::mt19937_64& rng) {
  const auto hmm = fixture::random_hmm(num_letters, 1, 2, rng);
  const Matrix em = emission_table(hmm, fixture::random_features(in.length(), 2, rng));
  in.lm = hmm.lm;
  in.lattice = make_lattice(hmm, em, {}, std::numeric_limits<double>::infinity());
}

}  // namespace

TEST_CASE("zero weights score every segment as zero") {
  std::mt19937_64 rng(1);
  const auto a = fixture::letters(3);
  const auto in = fixture::random_scrf_input(a, 6, rng);
  auto m = ScrfModel::create({}, a);
  CHECK(segment_score(m, in, {0, 2, 0}, a.start_class()) == 0.0);
  const auto d = decode_first_pass(m, in);
  CHECK(d.score == 0.0);
}

TEST_CASE("hand-built three-frame segment template vector") {
  const auto a = fixture::letters(2);  // classes A B <s> </s>
  ScrfInput in;
  Matrix p(3, 4);
  p << 0.7, 0.1, 0.1, 0.1,  //
      0.2, 0.6, 0.1, 0.1,   //
      0.4, 0.4, 0.1, 0.1;
  in.posteriorgrams.push_back(p);
  for (int task = 1; task < kNumTasks; ++task) in.posteriorgrams.push_back(Matrix::Constant(3, a.task_classes(task), 1.0 / a.task_classes(task)));
  in.lm = BigramLm::train({{0, 1}}, 2);
  in.baseline = {0, 1, 0};

  SUBCASE("first pass") {
    auto m = ScrfModel::create({}, a);
    const SegmentFeatures f(m, in);
    const Vector v = segment_feature_vector(m, f, in, 0, 2, 1, 0, scrf_lm_value(in, 0, 1));
    const auto& l = m.layout;
    const int b = l.label_block(1);
    // Means over the three frames.
    CHECK(v(b + 0) == doctest::Approx(1.3 / 3));
    CHECK(v(b + 1) == doctest::Approx(1.1 / 3));
    // Samples at 0.25, 0.5, 0.75 of a 3-frame segment: positions 0.5, 1, 1.5 round to frames 1, 1, 2.
    CHECK(v(b + 4 + 0) == doctest::Approx(0.2));
    CHECK(v(b + 8 + 1) == doctest::Approx(0.6));
    CHECK(v(b + 12 + 0) == doctest::Approx(0.4));
    // Duration 3 falls in bin 3-4, then the bias.
    CHECK(v(b + 16) == 0.0);
    CHECK(v(b + 17) == 1.0);
    CHECK(v(b + 21) == 1.0);
    CHECK(v(l.lm) == doctest::Approx(std::log(2.0 / 4.0)));  // count(A,B)=1 of total 1, vocab 3
    CHECK(v(l.transition(0, 1)) == 1.0);
    // Each mean and sample block sums to one; duration, bias and transition add one each.
    CHECK(v.sum() == doctest::Approx(4.0 + 3.0 + std::log(0.5)));
  }
  SUBCASE("rescoring") {
    ScrfConfig cfg;
    cfg.mode = ScrfMode::Rescoring;
    auto m = ScrfModel::create(cfg, a);
    const SegmentFeatures f(m, in);
    const Vector v = segment_feature_vector(m, f, in, 0, 2, 0, -1, 0.0);
    CHECK(v(m.layout.agreement) == doctest::Approx(2.0 / 3));
    // Peak: max 0.7 minus the mean of the endpoint posteriors (0.7 + 0.4) / 2.
    CHECK(v(m.layout.peak) == doctest::Approx(0.7 - 0.55));
    CHECK(f.agreement(0, 2, a.start_class()) == 0.0);
  }
}

TEST_CASE("first-pass Viterbi and partition match enumeration") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const int letters = 1 + trial % 3;
    const int T = 1 + static_cast<int>(rng() % 7);
    const int L = 1 + static_cast<int>(rng() % 4);
    const auto a = fixture::letters(letters);
    const auto in = fixture::random_scrf_input(a, T, rng);
    const auto m = first_pass_model(a, L, rng);
    const auto ref = oracle::scrf_enumerate(m, in);
    const bool feasible = ref.count > 0;
    if (!feasible) {
      CHECK_THROWS_AS(decode_first_pass(m, in), DataError);
      continue;
    }
    const auto d = decode_first_pass(m, in);
    CHECK(std::abs(d.score - ref.score) < 1e-8);
    CHECK(std::abs(path_score(m, in, d.segmentation) - d.score) < 1e-8);
    const auto z = log_partition(m, in);
    CHECK(std::abs(z.forward - ref.log_sum) < 1e-8);
    CHECK(std::abs(z.forward - z.backward) < 1e-8);
    CHECK(d.score <= z.forward + 1e-12);
  }
}

TEST_CASE("max segment length one reduces to a frame-level chain") {
  std::mt19937_64 rng(11);
  const auto a = fixture::letters(3);
  const int C = a.num_classes();
  for (int trial = 0; trial < 5; ++trial) {
    const int T = 2 + trial;
    const auto in = fixture::random_scrf_input(a, T, rng);
    const auto m = first_pass_model(a, 1, rng);
    // Frame DP over labels, scoring each frame as a one-frame segment.
    Matrix best = Matrix::Constant(T, C, kNegInf);
    for (int y = 0; y < C; ++y)
      if (scrf_transition_allowed(a, -1, y)) best(0, y) = segment_score(m, in, {0, 0, y}, -1);
    for (int t = 1; t < T; ++t)
      for (int y = 0; y < C; ++y)
        for (int p = 0; p < C; ++p)
          if (best(t - 1, p) != kNegInf && scrf_transition_allowed(a, p, y))
            best(t, y) = std::max(best(t, y), best(t - 1, p) + segment_score(m, in, {t, t, y}, p));
    const double expected = best(T - 1, a.end_class());
    CHECK(decode_first_pass(m, in).score == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("decoding an empty utterance is an error") {
  const auto a = fixture::letters(2);
  ScrfInput in;
  in.posteriorgrams.push_back(Matrix(0, a.num_classes()));
  CHECK_THROWS_AS(decode_first_pass(ScrfModel::create({}, a), in), DataError);
}

TEST_CASE("log-likelihood gradient matches central differences") {
  std::mt19937_64 rng(3);
  const auto a = fixture::letters(3);
  auto check = [&](const ScrfModel& model, const std::vector<ScrfExample>& data) {
    Vector g;
    scrf_objective(model, data, &g);
    std::uniform_int_distribution<Eigen::Index> pick(0, model.weights.size() - 1);
    double worst = 0.0;
    for (int probe = 0; probe < 12; ++probe) {
      // Half the probes on weights that are active in this data.
      Eigen::Index i = pick(rng);
      if (probe % 2 == 0) g.cwiseAbs().maxCoeff(&i);
      const double h = 1e-5;
      ScrfModel plus = model, minus = model;
      plus.weights(i) += h;
      minus.weights(i) -= h;
      const double fd = (scrf_objective(plus, data, nullptr) - scrf_objective(minus, data, nullptr)) / (2 * h);
      const double rel = std::abs(fd - g(i)) / std::max({1e-6, std::abs(fd), std::abs(g(i))});
      worst = std::max(worst, rel);
    }
    CHECK(worst < 1e-4);
  };

  SUBCASE("first pass, supervised and latent") {
    auto m = first_pass_model(a, 3, rng);
    m.cfg.l2 = 0.1;
    std::vector<ScrfExample> data;
    for (int u = 0; u < 3; ++u) {
      ScrfExample ex;
      ex.input = fixture::random_scrf_input(a, 7, rng);
      ex.word = {0, 2};
      if (u != 1) ex.segmentation = {{0, 1, a.start_class()}, {2, 3, 0}, {4, 4, 2}, {5, 6, a.end_class()}};
      data.push_back(ex);
    }
    check(m, data);
  }
  SUBCASE("rescoring over lattices") {
    auto m = rescoring_model(a, rng);
    m.cfg.l2 = 0.05;
    std::vector<ScrfExample> data;
    for (int u = 0; u < 3; ++u) {
      ScrfExample ex;
      ex.input = fixture::random_scrf_input(a, 6, rng);
      attach_full_lattice(ex.input, 3, rng);
      ex.word = {1};
      data.push_back(ex);
    }
    check(m, data);
  }
}

TEST_CASE("latent numerator of an infeasible word is reported") {
  std::mt19937_64 rng(5);
  const auto a = fixture::letters(3);
  auto m = first_pass_model(a, 2, rng);
  ScrfExample ex;
  ex.input = fixture::random_scrf_input(a, 3, rng);
  ex.word = {0, 1, 2};  // needs at least five segments
  CHECK_THROWS_AS(example_log_likelihood(m, ex, nullptr), DataError);
}

TEST_CASE("training on no data shrinks the weights towards zero") {
  std::mt19937_64 rng(9);
  auto m = first_pass_model(fixture::letters(2), 3, rng);
  m.cfg.l2 = 1.0;
  m.cfg.iterations = 30;
  const double before = m.weights.norm();
  const auto trained = train_scrf(m, {});
  CHECK(trained.weights.norm() < 1e-3 * before);
}

TEST_CASE("training increases the objective monotonically") {
  std::mt19937_64 rng(2);
  const auto a = fixture::letters(2);
  ScrfConfig cfg;
  cfg.max_segment = 4;
  cfg.iterations = 10;
  auto m = ScrfModel::create(cfg, a);
  std::vector<ScrfExample> data;
  for (int u = 0; u < 4; ++u) {
    ScrfExample ex;
    ex.input = fixture::random_scrf_input(a, 6, rng);
    ex.word = {u % 2};
    ex.segmentation = {{0, 1, a.start_class()}, {2, 3, u % 2}, {4, 5, a.end_class()}};
    data.push_back(ex);
  }
  ScrfTrainTrace trace;
  train_scrf(m, data, &trace);
  REQUIRE(trace.objective.size() > 1);
  for (std::size_t i = 1; i < trace.objective.size(); ++i) CHECK(trace.objective[i] > trace.objective[i - 1]);
}

TEST_CASE("lattice rescoring") {
  std::mt19937_64 rng(4);
  const auto a = fixture::letters(3);

  SUBCASE("matches enumeration over lattice paths") {
    for (int trial = 0; trial < 10; ++trial) {
      const int T = 2 + trial % 5;
      auto in = fixture::random_scrf_input(a, T, rng);
      attach_full_lattice(in, 3, rng);
      const auto m = rescoring_model(a, rng);
      double best = kNegInf, sum = kNegInf;
      for (const auto& p : in.lattice->enumerate_paths()) {
        const double v = path_score(m, in, p);
        best = std::max(best, v);
        sum = log_add(sum, v);
      }
      CHECK(std::abs(rescore_lattice(m, in).score - best) < 1e-8);
      const auto z = log_partition(m, in);
      CHECK(std::abs(z.forward - sum) < 1e-8);
      CHECK(std::abs(z.backward - sum) < 1e-8);
    }
  }
  SUBCASE("single-path lattice returns that path") {
    auto in = fixture::random_scrf_input(a, 5, rng);
    const auto hmm = fixture::random_hmm(3, 1, 2, rng);
    in.lm = hmm.lm;
    in.lattice = make_lattice(hmm, emission_table(hmm, fixture::random_features(5, 2, rng)), {}, 0.0);
    REQUIRE(in.lattice->path_count() == 1.0);
    const auto m = rescoring_model(a, rng);
    CHECK(rescore_lattice(m, in).segmentation == in.lattice->enumerate_paths().front());
  }
  SUBCASE("agreement weight alone picks the path most consistent with the baseline") {
    for (int trial = 0; trial < 5; ++trial) {
      auto in = fixture::random_scrf_input(a, 5, rng);
      attach_full_lattice(in, 3, rng);
      ScrfConfig cfg;
      cfg.mode = ScrfMode::Rescoring;
      auto m = ScrfModel::create(cfg, a);
      m.weights(m.layout.agreement) = 1.0;
      const SegmentFeatures f(m, in);
      double best = kNegInf;
      for (const auto& p : in.lattice->enumerate_paths()) {
        double v = 0.0;
        for (const auto& s : p) v += f.agreement(s.start, s.end, s.label);
        best = std::max(best, v);
      }
      CHECK(rescore_lattice(m, in).score == doctest::Approx(best));
    }
  }
}

TEST_CASE("weight files round-trip by template name") {
  std::mt19937_64 rng(6);
  const auto a = fixture::letters(3);
  for (auto mode : {ScrfMode::FirstPass, ScrfMode::Rescoring}) {
    ScrfConfig cfg;
    cfg.mode = mode;
    auto m = ScrfModel::create(cfg, a);
    fixture::randomize(m, rng);
    const auto names = m.feature_names();
    CHECK(static_cast<Eigen::Index>(names.size()) == m.weights.size());
    CHECK(std::set<std::string>(names.begin(), names.end()).size() == names.size());
    const auto back = ScrfModel::from_json(m.to_json(), a);
    CHECK(back.weights == m.weights);
    CHECK(back.cfg.mode == mode);
  }
}

TEST_CASE("long boundary runs are split to fit the grammar") {
  const auto a = fixture::letters(2);
  ScrfConfig cfg;
  cfg.max_segment = 4;
  const auto m = ScrfModel::create(cfg, a);
  const Segmentation seg = {{0, 9, a.start_class()}, {10, 12, 0}, {13, 14, a.end_class()}};
  const auto out = fit_segmentation_to_grammar(m, seg);
  validate_segmentation(out, 15, a.num_classes());
  CHECK(out.size() == 5);
  for (const auto& s : out) CHECK(s.length() <= 4);
  CHECK_THROWS_AS(fit_segmentation_to_grammar(m, {{0, 0, a.start_class()}, {1, 7, 0}, {8, 8, a.end_class()}}), DataError);
}

TEST_CASE("decode output line") {
  CHECK(format_decode_line("signer1_0003", "TULIP", -1.5) == "signer1_0003  TULIP  -1.500000");
}
