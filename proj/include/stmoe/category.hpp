// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stmoe/vocab.hpp"

namespace stmoe {

struct CategorySpec {
  std::string name;
  std::vector<std::string> seeds;
  std::vector<std::string> prompts;           // steering validation set
  std::vector<std::string> relevant_prompts;  // contexts where the category is the expected continuation

  // Ids of seeds present in the vocabulary, sorted and unique.
  [[nodiscard]] std::vector<int> seed_ids(const Vocab& vocab) const;
  [[nodiscard]] double in_vocab_fraction(const Vocab& vocab) const;
};

void to_json(nlohmann::json& j, const CategorySpec& c);
void from_json(const nlohmann::json& j, CategorySpec& c);

CategorySpec load_category(const std::filesystem::path& path);
void save_category(const CategorySpec& spec, const std::filesystem::path& path);

}  // namespace stmoe
