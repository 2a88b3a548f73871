#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

#include "fsr/errors.hpp"
#include "fsr/tandem.hpp"

#include <limits>

using namespace fsr;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

TEST_CASE("bigram LM uses add-one smoothing over letters and </s>") {
  const auto lm = BigramLm::train({{0, 1}, {0}}, 2);
  // Contexts: <s> -> A twice; vocabulary of 3 predicted symbols.
  CHECK(lm.log_prob(2, 0) == doctest::Approx(std::log(3.0 / 5.0)));
  CHECK(lm.log_prob(2, 1) == doctest::Approx(std::log(1.0 / 5.0)));
  CHECK(lm.log_prob(2, 3) == doctest::Approx(std::log(1.0 / 5.0)));
  CHECK(lm.log_prob(0, 3) == doctest::Approx(std::log(2.0 / 5.0)));
  CHECK(lm.log_prob(0, 2) == -kInf);  // <s> is never predicted
  for (int prev = 0; prev <= 2; ++prev) {
    double total = 0.0;
    for (int next : {0, 1, 3}) total += std::exp(lm.log_prob(prev, next));
    CHECK(total == doctest::Approx(1.0));
  }
  CHECK(lm.word_log_prob({0, 1}) == doctest::Approx(std::log(3.0 / 5.0) + std::log(2.0 / 5.0) + std::log(2.0 / 4.0)));
}

TEST_CASE("tandem features") {
  std::mt19937_64 rng(1);
  std::vector<Matrix> post = {fixture::random_posteriors(10, 4, rng), fixture::random_posteriors(10, 3, rng)};
  post[0](0, 0) = 0.0;
  const Matrix stack = log_posterior_stack(post, 1e-8);
  CHECK(stack(0, 0) == doctest::Approx(std::log(1e-8)));
  CHECK(stack.allFinite());

  TandemFeatureConfig cfg;
  cfg.posterior_pca_dim = 5;
  const auto fe = TandemFrontend::fit({post}, cfg);
  const Matrix base = fixture::random_features(10, 3, rng);
  const Matrix out = fe.apply(post, base);
  CHECK(out.cols() == 5 + 3);
  CHECK(fe.output_dim(3) == 8);
  CHECK(out.rightCols(3) == base);

  cfg.include_base_features = false;
  cfg.posterior_pca_dim = 7;
  const auto full = TandemFrontend::fit({post}, cfg);
  const Matrix z = full.apply(post, base);
  // Full-rank projection is invertible: reconstruct the log-posteriors.
  const Matrix back = (z * full.pca.basis.transpose()).rowwise() + full.pca.mean.transpose();
  CHECK((back - stack).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("Viterbi decoding matches enumeration") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const int letters = 1 + trial % 3;
    const int states = 1 + trial % 2;
    const int T = 2 + static_cast<int>(rng() % 6);
    const auto m = fixture::random_hmm(letters, states, 2, rng);
    const Matrix em = emission_table(m, fixture::random_features(T, 2, rng));
    DecodeParams params;
    params.lm_weight = 0.5 + (trial % 4) * 0.5;
    params.insertion_penalty = -0.5 + (trial % 3) * 0.5;
    const auto ref = oracle::hmm_enumerate(m, em, params);
    if (ref.count == 0) {
      CHECK_THROWS_AS(viterbi_decode(m, em, params), DataError);
      continue;
    }
    const auto d = viterbi_decode(m, em, params);
    CHECK(std::abs(d.score - ref.score) < 1e-8);
    CHECK(std::abs(oracle::hmm_path_score(m, em, d.segmentation, params) - d.score) < 1e-8);
    validate_segmentation(d.segmentation, T, m.num_classes());
  }
}

TEST_CASE("equal emissions leave the decision to the LM and penalty") {
  std::mt19937_64 rng(3);
  auto m = fixture::random_hmm(2, 1, 2, rng);
  const Matrix em = Matrix::Zero(6, m.total_states());
  for (auto& c : m.classes) c.self_loop.setConstant(0.5);
  DecodeParams p;
  p.insertion_penalty = -100.0;
  CHECK(viterbi_decode(m, em, p).letters.empty());
  p.insertion_penalty = 100.0;
  CHECK(viterbi_decode(m, em, p).letters.size() == 4);
}

TEST_CASE("forced alignment") {
  std::mt19937_64 rng(4);
  const auto a = fixture::letters(3);
  SUBCASE("matches the best enumerated alignment of the chain") {
    for (int trial = 0; trial < 20; ++trial) {
      const auto m = fixture::random_hmm(3, 1 + trial % 2, 2, rng);
      const int T = 4 + static_cast<int>(rng() % 4);
      const Matrix em = emission_table(m, fixture::random_features(T, 2, rng));
      const LabelSeq word = {static_cast<int>(rng() % 3)};
      const auto chain = word_chain(word, a);
      double best = kNegInf;
      for (const auto& comp : oracle::compositions(T, T)) {
        if (comp.size() != chain.size()) continue;
        const auto p = oracle::make_segmentation(comp, chain);
        DecodeParams acoustic_only;
        acoustic_only.lm_weight = 0.0;
        best = std::max(best, oracle::hmm_path_score(m, em, p, acoustic_only));
      }
      if (best == kNegInf) {
        CHECK_THROWS_AS(forced_align(m, em, chain), DataError);
        continue;
      }
      const auto d = forced_align(m, em, chain);
      CHECK(std::abs(d.score - best) < 1e-8);
      CHECK(d.letters == word);
    }
  }
  SUBCASE("one-letter word labels every non-boundary frame with that letter") {
    const auto m = fixture::random_hmm(3, 3, 2, rng);
    const Matrix f = fixture::random_features(12, 2, rng);
    const auto seg = forced_align(m, f, {1}, a);
    validate_segmentation(seg, 12, a.num_classes());
    REQUIRE(seg.size() == 3);
    CHECK(seg[1].label == 1);
    CHECK(letters_of(seg, a) == LabelSeq{1});
  }
  SUBCASE("double letters stay separate segments") {
    const auto m = fixture::random_hmm(3, 2, 2, rng);
    const auto seg = forced_align(m, fixture::random_features(14, 2, rng), {2, 2, 0}, a);
    CHECK(letters_of(seg, a) == LabelSeq{2, 2, 0});
  }
  SUBCASE("too short for the chain") {
    const auto m = fixture::random_hmm(3, 3, 2, rng);
    CHECK_THROWS_AS(forced_align(m, fixture::random_features(4, 2, rng), {0, 1}, a), DataError);
  }
}

TEST_CASE("chain likelihood sums every state path") {
  std::mt19937_64 rng(5);
  const auto a = fixture::letters(2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = fixture::random_hmm(2, 2, 2, rng);
    const Matrix f = fixture::random_features(7, 2, rng);
    const auto chain = word_chain({static_cast<int>(trial % 2)}, a);
    CHECK(chain_log_likelihood(m, f, chain) == doctest::Approx(oracle::hmm_chain_sum(m, emission_table(m, f), chain)).epsilon(1e-12));
  }
}

TEST_CASE("EM") {
  std::mt19937_64 rng(6);
  SUBCASE("one state, one Gaussian, one class: sample statistics after one iteration") {
    auto m = fixture::random_hmm(1, 1, 3, rng);
    const Matrix f = fixture::random_features(50, 3, rng);
    std::vector<HmmTrainingItem> data = {{f, {0}, {}}};
    em_iteration(m, data);
    const auto& g = m.classes[0].states[0];
    const RowVector mean = f.colwise().mean();
    const RowVector var = (f.rowwise() - mean).array().square().colwise().mean();
    CHECK((g.means.row(0) - mean).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((g.variances.row(0) - var).cwiseAbs().maxCoeff() < 1e-10);
  }
  SUBCASE("one-frame utterances keep variances at the floor") {
    auto m = fixture::random_hmm(1, 1, 2, rng);
    m.variance_floor = 1e-6;
    std::vector<HmmTrainingItem> data = {{Matrix::Constant(1, 2, 0.5), {0}, {}}};
    em_train(m, data, 3);
    CHECK(m.classes[0].states[0].variances.minCoeff() >= 1e-6);
    CHECK(m.classes[0].states[0].variances.allFinite());
  }
  SUBCASE("likelihood is non-decreasing and parameters stay normalised") {
    const auto a = fixture::letters(3);
    std::vector<HmmTrainingItem> data;
    std::vector<LabelSeq> words;
    // Letters with distinct means so the data has structure.
    for (int u = 0; u < 12; ++u) {
      LabelSeq word = {u % 3, (u + 1) % 3};
      words.push_back(word);
      Matrix f(3 + 8 + 3, 2);
      std::normal_distribution<double> n(0.0, 0.3);
      for (int t = 0; t < f.rows(); ++t) {
        const int cls = t < 3 ? 3 : t >= 11 ? 4 : word[static_cast<std::size_t>((t - 3) / 4)];
        f(t, 0) = cls + n(rng);
        f(t, 1) = (cls % 2) + n(rng);
      }
      data.push_back({f, word_chain(word, a), {}});
    }
    HmmConfig cfg;
    cfg.mixtures = 2;
    auto m = init_hmm(data, a, BigramLm::train(words, 3), cfg);
    const auto stats = em_train(m, data, 10);
    for (std::size_t i = 1; i < stats.size(); ++i) CHECK(stats[i].log_likelihood >= stats[i - 1].log_likelihood - 1e-6);
    for (const auto& s : stats) CHECK(s.max_stochastic_error < 1e-8);
  }
}

TEST_CASE("lattices") {
  std::mt19937_64 rng(7);
  const auto a = fixture::letters(3);
  SUBCASE("beam zero keeps exactly the Viterbi path") {
    const auto m = fixture::random_hmm(3, 2, 2, rng);
    const Matrix em = emission_table(m, fixture::random_features(12, 2, rng));
    const auto lat = make_lattice(m, em, {}, 0.0);
    lat.validate();
    CHECK(lat.path_count() == 1.0);
    const auto v = viterbi_decode(m, em, {});
    CHECK(lat.enumerate_paths().front() == v.segmentation);
  }
  SUBCASE("infinite beam holds every feasible path") {
    for (int trial = 0; trial < 10; ++trial) {
      const auto m = fixture::random_hmm(1 + trial % 3, 1 + trial % 2, 2, rng);
      const int T = 3 + trial % 4;
      const Matrix em = emission_table(m, fixture::random_features(T, 2, rng));
      const auto ref = oracle::hmm_enumerate(m, em, {});
      const auto lat = make_lattice(m, em, {}, kInf);
      lat.validate();
      CHECK(lat.path_count() == static_cast<double>(ref.count));
      const auto best = lat.best_path({});
      CHECK(std::abs(best.score - ref.score) < 1e-8);
      for (const auto& p : lat.enumerate_paths()) validate_segmentation(p, T, m.num_classes());
    }
  }
  SUBCASE("one-best path equals Viterbi and survives a text round trip") {
    for (int trial = 0; trial < 5; ++trial) {
      const auto m = fixture::random_hmm(3, 3, 2, rng);
      const Matrix em = emission_table(m, fixture::random_features(20, 2, rng));
      DecodeParams p;
      p.lm_weight = 2.0;
      p.insertion_penalty = -1.0;
      const auto lat = make_lattice(m, em, p, 5.0, "utt" + std::to_string(trial));
      const auto v = viterbi_decode(m, em, p);
      const auto best = lat.best_path(p);
      CHECK(best.segmentation == v.segmentation);
      CHECK(best.score == doctest::Approx(v.score).epsilon(1e-12));
      const auto back = Lattice::from_text(lat.to_text(a), a);
      CHECK(back.to_text(a) == lat.to_text(a));
      CHECK(back.arcs.size() == lat.arcs.size());
      CHECK(back.best_path(p).score == best.score);
    }
  }
  SUBCASE("malformed lattice text is rejected") {
    CHECK_THROWS_AS(Lattice::from_text("frames 3\n", a), DataError);
  }
}

TEST_CASE("model files round-trip") {
  std::mt19937_64 rng(8);
  const auto m = fixture::random_hmm(3, 3, 4, rng, 2);
  const auto dir = std::filesystem::temp_directory_path() / "fsr_test_tandem";
  std::filesystem::create_directories(dir);
  m.save(dir / "hmm.fsr");
  const auto back = HmmModel::load(dir / "hmm.fsr");
  const Matrix f = fixture::random_features(10, 4, rng);
  // Payload is float32, so compare at single precision.
  CHECK((emission_table(back, f) - emission_table(m, f)).cwiseAbs().maxCoeff() < 1e-3);
  std::filesystem::remove_all(dir);
}
