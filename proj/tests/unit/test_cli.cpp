#include "doctest.h"

#include "fsr/io.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>

namespace fs = std::filesystem;
using fsr::io::Json;

namespace {

std::string cli() {
  const char* p = std::getenv("FSR_CLI");
  return p ? p : "fsr-cli";
}

int run(const std::string& args) {
  const std::string cmd = cli() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// A scratch directory removed when the test ends.
struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name)
      : dir(fs::temp_directory_path() / ("fsr_cli_" + name + "_" + std::to_string(::getpid()))) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string operator/(const std::string& s) const { return (dir / s).string(); }
};

const Json kTiny = {
    {"synth", {{"n_signers", 2}, {"words_per_signer", 20}, {"feature_dim", 4}}},
    {"experiment",
     {{"static_dim", 3},
      {"window", 3},
      {"train", {{"hidden", {8}}, {"max_epochs", 2}}},
      {"hmm", {{"em_iterations", 2}}},
      {"first_pass", {{"mode", "first_pass"}, {"iterations", 3}}},
      {"rescoring", {{"mode", "rescoring"}, {"iterations", 3}}}}}};

std::string write_config(const Scratch& s, const Json& j, const std::string& name = "cfg.json") {
  fsr::io::write_json(s / name, j);
  return s / name;
}

// Every stage of the pipeline into `out`.
void pipeline(const std::string& cfg, const std::string& out) {
  const std::string common = " --seed 4 --config " + cfg;
  REQUIRE(run("gen --out " + out + "/corpus" + common) == 0);
  const std::string stage = common + " --corpus " + out + "/corpus --test-signer signer2 --out " + out + "/models";
  REQUIRE(run("features" + stage) == 0);
  REQUIRE(run("train-dnn" + stage) == 0);
  REQUIRE(run("train-hmm" + stage) == 0);
  REQUIRE(run("decode" + common + " --corpus " + out + "/corpus --test-signer signer2 --models " + out +
              "/models --out " + out + "/dec") == 0);
  const std::string use = common + " --corpus " + out + "/corpus --test-signer signer2 --models " + out + "/models";
  REQUIRE(run("adapt-dnn" + use + " --mode lin_up --source forced_alignment --fraction 0.2 --task 0 --out " + out +
              "/adapted") == 0);
  REQUIRE(run("align" + use + " --set adapt --fraction 0.2 --out " + out + "/align") == 0);
  REQUIRE(run("lattice" + use + " --set test --fold 1 --out " + out + "/lat") == 0);
  REQUIRE(run("train-scrf" + use + " --mode first_pass --out " + out + "/models") == 0);
  REQUIRE(run("train-scrf" + use + " --mode rescoring --out " + out + "/models") == 0);
  REQUIRE(run("decode-scrf" + use + " --out " + out + "/scrf1") == 0);
  REQUIRE(run("rescore" + use + " --set test --fold 1 --lattices " + out + "/lat/lattices --out " + out + "/scrf2") == 0);
  REQUIRE(run("eval" + common + " --ref " + out + "/dec/reference.txt --hyp " + out + "/dec/decode.txt --out " + out +
              "/eval") == 0);
}

}  // namespace

TEST_CASE("usage errors and help") {
  Scratch s("usage");
  CHECK(run("--help") == 0);
  CHECK(run("") == 2);
  CHECK(run("bogus --out " + s / "x") == 2);
  CHECK(run("gen") == 2);  // --out is required
  // No seed anywhere.
  CHECK(run("gen --out " + s / "x") == 2);
  // Unknown fields are configuration errors, at any depth.
  CHECK(run("gen --seed 1 --out " + s / "x" + " --config " + write_config(s, {{"synht", Json::object()}})) == 2);
  CHECK(run("gen --seed 1 --out " + s / "x" + " --config " +
            write_config(s, {{"experiment", {{"hmm", {{"em_iteration", 3}}}}}})) == 2);
  CHECK(run("gen --seed 1 --out " + s / "x" + " --config " + write_config(s, {{"synth", {{"n_signers", "two"}}}})) == 2);
  CHECK(run("gen --seed 1 --out " + s / "x" + " --config " + s / "missing.json") == 2);
  CHECK(run("adapt-dnn --seed 1 --out " + s / "x" + " --corpus " + s / "nothing --test-signer signer1 --mode lin_up") == 3);
}

TEST_CASE("pipeline manifests and byte-identical reruns") {
  Scratch s("pipeline");
  const auto cfg = write_config(s, kTiny);
  // Same config, seed and paths twice: every file must match, manifests included.
  pipeline(cfg, s / "a");
  std::map<std::string, std::string> first;
  for (const auto& e : fs::recursive_directory_iterator(s.dir / "a"))
    if (e.is_regular_file()) first[fs::relative(e.path(), s.dir).string()] = fsr::io::sha256_file(e.path());
  fs::remove_all(s.dir / "a");
  pipeline(cfg, s / "a");
  std::map<std::string, std::string> second;
  for (const auto& e : fs::recursive_directory_iterator(s.dir / "a"))
    if (e.is_regular_file()) second[fs::relative(e.path(), s.dir).string()] = fsr::io::sha256_file(e.path());
  CHECK(first.size() > 30u);
  CHECK(first.count("a/models/scrf_rescoring.json") == 1);
  CHECK(first.count("a/adapted/dnn_0.fsr") == 1);
  CHECK(first == second);

  const auto m = fsr::io::read_json(s / "a/models/manifest_train-hmm.json");
  CHECK(m.at("subcommand") == "train-hmm");
  CHECK(m.at("rng_seed") == 4);
  CHECK(m.at("config").at("synth").at("n_signers") == 2);
  CHECK(m.at("outputs").contains("hmm.fsr"));
  CHECK(m.at("versions").contains("eigen"));
  CHECK(m.at("details").at("em_log_likelihood").size() == 2u);
  bool has_corpus = false;
  for (const auto& [k, v] : m.at("inputs").items()) has_corpus |= k.find("corpus") != std::string::npos;
  CHECK(has_corpus);
  // The evaluation set never touches training utterances.
  for (const auto& id : m.at("details").at("split").at("train")) CHECK(id.get<std::string>().rfind("signer1_", 0) == 0);

  const auto rep = fsr::io::read_json(s / "a/eval/report.json");
  CHECK(rep.at("total").at("reference_letters").get<long>() > 0);
  CHECK(rep.at("signers").size() == 1u);

  // Missing upstream artifacts name the producing subcommand; tampered ones fail the hash check.
  const std::string stage = " --seed 4 --config " + cfg + " --corpus " + s / "a/corpus" + " --test-signer signer2";
  CHECK(run("decode" + stage + " --models " + s / "nothing" + " --out " + s / "c") == 3);
  fsr::io::write_text(s / "a/models/hmm.fsr", "tampered");
  CHECK(run("decode" + stage + " --models " + s / "a/models" + " --out " + s / "c") == 3);
  CHECK(run("features --seed 4 --config " + cfg + " --corpus " + s / "a/corpus" + " --test-signer nobody --out " +
            s / "c") == 3);
}

TEST_CASE("eval scores transcripts") {
  Scratch s("eval");
  fsr::io::write_text(s / "ref.txt", "s1_0001  TULIP\ns1_0002  AB\n");
  fsr::io::write_text(s / "hyp.txt", "s1_0001  TULP -3.5\ns1_0002  ABCD -1.0\n");
  REQUIRE(run("eval --seed 1 --ref " + s / "ref.txt" + " --hyp " + s / "hyp.txt" + " --out " + s / "out") == 0);
  const auto rep = fsr::io::read_json(s / "out/report.json");
  const auto& t = rep.at("total");
  CHECK(t.at("reference_letters") == 7);
  CHECK(t.at("deletions") == 1);
  CHECK(t.at("insertions") == 2);
  CHECK(t.at("accuracy").get<double>() == doctest::Approx(100.0 * 4 / 7));

  fsr::io::write_text(s / "short.txt", "s1_0001  TULIP\n");
  CHECK(run("eval --seed 1 --ref " + s / "ref.txt" + " --hyp " + s / "short.txt" + " --out " + s / "out") == 3);
}
