// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace stmoe {

// Word-level vocabulary. Id 0 is the unknown token.
struct Vocab {
  static constexpr int kUnk = 0;
  static constexpr const char* kUnkText = "<unk>";

  std::vector<std::string> tokens;
  std::vector<std::int64_t> freq;  // corpus counts; freq[0] counts OOV occurrences
  std::unordered_map<std::string, int> index;

  [[nodiscard]] int size() const { return static_cast<int>(tokens.size()); }
  [[nodiscard]] int id(std::string_view word) const;  // kUnk when absent
  [[nodiscard]] bool contains(std::string_view word) const;
  [[nodiscard]] const std::string& text(int id) const;

  // Rebuild `index` from `tokens`.
  void reindex();
};

// Splits on whitespace; every ASCII punctuation character is its own token.
// Case is preserved.
std::vector<std::string> tokenize(std::string_view text);

// Keeps the max_size - 1 most frequent words, ties broken lexicographically.
Vocab build_vocab(std::string_view corpus, int max_size);

std::vector<int> encode(std::string_view text, const Vocab& vocab);
std::string decode(std::span<const int> ids, const Vocab& vocab);

// Documents are separated by blank lines.
std::vector<std::vector<int>> encode_documents(std::string_view text, const Vocab& vocab);

}  // namespace stmoe
