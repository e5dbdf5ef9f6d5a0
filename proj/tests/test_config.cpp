// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "stmoe/report.hpp"
#include "stmoe/run_config.hpp"

using namespace stmoe;
namespace fs = std::filesystem;

TEST_CASE("every key survives an INI round trip") {
  RunConfig c;
  c.seed = 99;
  c.preset = "marathon";
  c.train.lr = 1.0 / 3.0;
  c.corpus.filler_fraction = 0.123456789012345;
  c.lens.prompt = "the answer is";
  c.apply_override("model.hops=2");
  c.apply_override("model.router=linear");
  c.apply_override("dict.eps=0.25");
  const auto r = RunConfig::from_ini_text(c.to_ini());
  CHECK(r.keys() == c.keys());
  for (const auto& k : c.keys()) CHECK_MESSAGE(r.get(k) == c.get(k), k);
  CHECK(r.train.lr == c.train.lr);
  CHECK(r.to_ini() == c.to_ini());
  CHECK(r.model_config(100).hops == 2);
  CHECK(r.model_config(100).router == RouterMode::Linear);
  CHECK(r.model_config(100).vocab_size == 100);
}

TEST_CASE("bad keys and values name the key") {
  RunConfig c;
  auto msg = [&](const std::string& a) -> std::string {
    try {
      c.apply_override(a);
    } catch (const Error& e) {
      CHECK(e.code() == Errc::Config);
      return e.what();
    }
    return "";
  };
  CHECK(msg("train.nope=1").find("train.nope") != std::string::npos);
  CHECK(msg("train.lr=fast").find("train.lr") != std::string::npos);
  CHECK(msg("model.wings=2").find("model.wings") != std::string::npos);
  CHECK(msg("model.router=quantum").find("model.router") != std::string::npos);
  CHECK(msg("model.preset=huge").find("model.preset") != std::string::npos);
  CHECK(msg("noequals").find("key=value") != std::string::npos);
  CHECK_THROWS_AS((void)RunConfig::from_ini_text("[train]\nlr = 1 2\n"), Error);
  CHECK_THROWS_AS((void)RunConfig::load("/nonexistent/config.ini"), Error);
}

TEST_CASE("validation rejects out-of-range values") {
  RunConfig c;
  CHECK_NOTHROW(c.validate());
  c.set("analysis.level", "1.5");
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.set("intervene.prompt_set", "all");
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.set("model.top_k", "999");
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("sub-seeds are distinct and follow the top-level seed") {
  RunConfig a, b;
  b.seed = 2;
  CHECK(a.sub_seed("train") != a.sub_seed("corpus"));
  CHECK(a.sub_seed("train") != b.sub_seed("train"));
  CHECK(a.train_config().seed == a.sub_seed("train"));
  CHECK(a.corpus_config().seed == a.sub_seed("corpus"));
}

TEST_CASE("sha256 test vectors") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("report bundle manifest lists sorted files with hashes") {
  const auto dir = fs::temp_directory_path() / "stmoe_bundle_test";
  fs::remove_all(dir);
  ReportBundle b(dir, "stats", 7);
  b.write("z.txt", "zzz");
  b.write("sub/a.txt", "abc");
  b.write_json("m.json", {{"k", 1}});
  CHECK_THROWS_AS(b.add_existing("missing.txt"), Error);
  const auto m = b.finalize();
  CHECK(m["command"] == "stats");
  CHECK(m["seed"] == 7);
  CHECK(m["version"] == kToolVersion);
  REQUIRE(m["files"].size() == 3);
  CHECK(m["files"][0]["path"] == "m.json");
  CHECK(m["files"][1]["path"] == "sub/a.txt");
  CHECK(m["files"][1]["sha256"] == sha256_hex("abc"));
  CHECK(m["files"][1]["bytes"] == 3);
  CHECK(m["files"][2]["path"] == "z.txt");
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(sha256_file(dir / "z.txt") == sha256_hex("zzz"));
}
