// SPDX-License-Identifier: Apache-2.0
//
// Synthetic planted-category corpus: templated sentences over disjoint
// lexicons (digits, months, countries) mixed with filler prose built from
// function-word frames.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stmoe/category.hpp"

namespace stmoe {

struct CorpusConfig {
  std::int64_t train_tokens = 1'000'000;
  std::int64_t valid_tokens = 50'000;
  double filler_fraction = 0.5;  // share of sentences with no planted slot
  int n_prompts = 20;            // per category and prompt set
  int n_control_prompts = 24;
  std::uint64_t seed = 1;

  void validate() const;
};

struct PlantedCorpus {
  std::string train_text;
  std::string valid_text;
  std::vector<CategorySpec> categories;
  std::vector<std::string> control_prompts;  // neutral prefixes
};

// The fixed lexicons, exposed for tests.
struct Lexicon {
  std::string name;
  std::vector<std::string> words;
};
const std::vector<Lexicon>& planted_lexicons();
const std::vector<Lexicon>& filler_lexicons();

PlantedCorpus synth_corpus(const CorpusConfig& cfg);

}  // namespace stmoe
