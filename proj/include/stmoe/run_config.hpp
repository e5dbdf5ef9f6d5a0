// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: an INI file plus key=value overrides. Every key is
// addressed as "section.name" ("seed" lives at top level). The effective
// configuration can be written back out and re-read to reproduce a run.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "stmoe/corpus.hpp"
#include "stmoe/model.hpp"
#include "stmoe/trainer.hpp"

namespace stmoe {

struct AnalysisParams {
  int n_batches = 50;
  int geometry_hop = 0;
  int n_perm = 200;
  int n_boot = 500;
  double level = 0.95;
  int max_points = 1500;
  int top_n_content = 50;
  double ratio_cap = 2.0;
  int max_pairs = 15;
  double fdr_alpha = 0.05;
};

struct DictParams {
  int top_k = 10;
  int hub_random = 64;
  double hub_z = 2.0;
  int min_cluster_size = 3;
  double eps = 0.3;
};

struct LensParams {
  std::string prompt;
  std::string target;
};

struct PolysemyParams {
  std::string prompt_a;
  std::string prompt_b;
  std::string token;
};

struct InterveneParams {
  std::string spec;      // JSON spec file
  std::string category;  // CategorySpec JSON file
  std::string prompt_set = "prompts";  // prompts | relevant | control
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string preset = "desk";
  std::map<std::string, std::string> model_overrides;  // "model.<field>" -> value, applied over the preset
  std::string corpus_dir;
  int max_vocab = 4096;
  CorpusConfig corpus;
  TrainConfig train;
  AnalysisParams analysis;
  DictParams dict;
  LensParams lens;
  PolysemyParams polysemy;
  InterveneParams intervene;

  // Throws Errc::Config naming the key on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  [[nodiscard]] std::string get(const std::string& key) const;
  [[nodiscard]] std::vector<std::string> keys() const;

  [[nodiscard]] std::string to_ini() const;
  static RunConfig from_ini_text(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);

  // "key=value"
  void apply_override(const std::string& assignment);

  // Named sub-seeds: train, permutation, bootstrap, hub, corpus, sample.
  [[nodiscard]] std::uint64_t sub_seed(const std::string& name) const;

  // Preset resolved for the given vocabulary, then model.* overrides.
  [[nodiscard]] ModelConfig model_config(int vocab_size) const;
  // Train config with its seed taken from the "train" sub-seed.
  [[nodiscard]] TrainConfig train_config() const;
  [[nodiscard]] CorpusConfig corpus_config() const;

  void validate() const;
};

}  // namespace stmoe
