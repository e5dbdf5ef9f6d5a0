// SPDX-License-Identifier: Apache-2.0
//
// Runs the stmoe binary end to end on a tiny corpus and model.
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

const fs::path& work() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "stmoe_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = "cd '" + work().string() + "' && '" STMOE_CLI_PATH "' " + args + " >>cli.log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(work() / p);
  return nlohmann::json::parse(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(work() / p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

nlohmann::json files_of(const fs::path& dir) { return read_json(dir / "manifest.json")["files"]; }

const std::string kTiny =
    " --override model.d_model=16 --override model.n_heads=2 --override model.n_layers=2"
    " --override model.n_experts=8 --override model.top_k=2 --override model.hops=2 --override model.d_space=4"
    " --override model.max_seq=16 --override train.seq_len=16 --override train.batch_size=4"
    " --override train.total_steps=12 --override train.warmup_steps=2 --override train.eval_interval=6"
    " --override analysis.n_batches=4 --override analysis.n_perm=9 --override analysis.n_boot=20"
    " --override corpus.train_tokens=6000 --override corpus.valid_tokens=600 --override corpus.n_prompts=5";

// Builds the shared corpus and checkpoint once.
void ensure_trained() {
  static const bool done = [] {
    REQUIRE(run("synth-corpus --out corpus --seed 3" + kTiny) == 0);
    REQUIRE(run("train --corpus corpus --out tr --seed 3" + kTiny) == 0);
    return true;
  }();
  (void)done;
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(run("") == 1);
  CHECK(run("frobnicate") == 1);
  CHECK(run("stats --preset huge") == 1);
  CHECK(run("synth-corpus --out x --override train.nope=3") == 1);
  CHECK(run("synth-corpus --out x --config does_not_exist.ini") == 1);
}

TEST_CASE("synth-corpus is idempotent for a fixed seed") {
  REQUIRE(run("synth-corpus --out c1 --seed 5" + kTiny) == 0);
  REQUIRE(run("synth-corpus --out c2 --seed 5" + kTiny) == 0);
  CHECK(files_of("c1") == files_of("c2"));
  CHECK(read_json("c1/manifest.json")["command"] == "synth-corpus");
  for (const char* f : {"train.txt", "valid.txt", "control_prompts.txt", "categories/digit.json", "config.ini"})
    CHECK(fs::exists(work() / "c1" / f));
  REQUIRE(run("synth-corpus --out c3 --seed 6" + kTiny) == 0);
  CHECK(files_of("c1") != files_of("c3"));
}

TEST_CASE("training reproduces from its echoed configuration") {
  ensure_trained();
  for (const char* f : {"model.ckpt", "metrics.csv", "train.json"}) CHECK(fs::exists(work() / "tr" / f));
  REQUIRE(run("train --config tr/config.ini --out tr2") == 0);
  CHECK(slurp("tr/model.ckpt") == slurp("tr2/model.ckpt"));
  CHECK(slurp("tr/metrics.csv") == slurp("tr2/metrics.csv"));
  CHECK(slurp("tr/config.ini") == slurp("tr2/config.ini"));
  std::istringstream metrics(slurp("tr/metrics.csv"));
  int lines = 0;
  for (std::string l; std::getline(metrics, l);) ++lines;
  CHECK(lines == 1 + 12);
}

TEST_CASE("runtime failures exit with 2") {
  CHECK(run("train --corpus no_such_corpus --out bad" + kTiny) == 2);
  CHECK(run("stats --checkpoint no_such.ckpt --corpus corpus --out bad2") == 2);
}

TEST_CASE("analysis commands produce their artifacts") {
  ensure_trained();
  const std::string ck = " --checkpoint tr/model.ckpt --config tr/config.ini";
  CHECK(run("eval --corpus corpus --out ev" + ck) == 0);
  CHECK(read_json("ev/eval.json").contains("ppl"));

  REQUIRE(run("dict --corpus corpus --out dict" + ck) == 0);
  CHECK(read_json("dict/dictionary.json").size() == 2 * 8);
  CHECK(fs::exists(work() / "dict/discovery.json"));

  REQUIRE(run("stats --corpus corpus --out st" + ck) == 0);
  CHECK(read_json("st/layer_stats.json").size() == 2);

  CHECK(run("cluster --out cl" + ck) == 0);
  CHECK(fs::exists(work() / "cl/clusters.json"));
  CHECK(run("rw-cosine --out rw" + ck) == 0);
  CHECK(read_json("rw/rw_cosine.json").contains("mean"));
  CHECK(run("syntax --corpus corpus --out sy" + ck) == 0);
  CHECK(fs::exists(work() / "sy/syntax.json"));
  CHECK(run("lens --prompt 'he moved to' --target the --out lens" + ck) == 0);
  CHECK(fs::exists(work() / "lens/lens.csv"));
  CHECK(run("polysemy --prompt-a 'he moved to the' --prompt-b 'the answer is' --token the --out po" + ck) == 0);
  CHECK(read_json("po/polysemy.json").contains("mean_jaccard"));
  CHECK(run("polysemy --prompt-a 'he moved' --prompt-b 'the answer is' --token the --out po2" + ck) == 2);

  // the echoed config of a bundle reproduces its artifacts
  REQUIRE(run("stats --config st/config.ini --checkpoint tr/model.ckpt --out st2") == 0);
  CHECK(slurp("st/layer_stats.json") == slurp("st2/layer_stats.json"));
}

TEST_CASE("interventions: identity, dose response, composition and spec errors") {
  ensure_trained();
  {
    std::ofstream(work() / "id.json") << R"({"variant":"suppress","layer":0,"experts":[]})";
    std::ofstream(work() / "dose.json") << R"({"variant":"steer","layer":0,"expert":3,"lambda":[0,0.5,1]})";
    std::ofstream(work() / "comp.json")
        << R"({"variant":"compose","a":{"variant":"steer","layer":0,"expert":1,"lambda":1},)"
           R"("b":{"variant":"steer","layer":1,"expert":2,"lambda":1},"category_b":"month"})";
    std::ofstream(work() / "bad.json") << R"({"variant":"knockout","layer":0,"experts":[99]})";
  }
  const std::string ck = " --checkpoint tr/model.ckpt --config tr/config.ini --category corpus/categories/digit.json";
  REQUIRE(run("intervene --spec id.json --out iv" + ck) == 0);
  const auto agg = read_json("iv/aggregate.json");
  CHECK(agg["conditions"]["modified"]["mean_kl"] == 0.0);
  CHECK(run("intervene --spec dose.json --out dose" + ck) == 0);
  CHECK(read_json("dose/dose_response.json").size() == 3);
  CHECK(run("intervene --spec comp.json --out comp" + ck) == 0);
  CHECK(fs::exists(work() / "comp/composition.json"));
  CHECK(run("intervene --spec bad.json --out bad3" + ck) == 1);
  std::ifstream log(work() / "cli.log");
  const std::string text{std::istreambuf_iterator<char>(log), {}};
  CHECK(text.find("spec.experts[0]") != std::string::npos);
}
