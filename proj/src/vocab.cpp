// SPDX-License-Identifier: Apache-2.0
#include "stmoe/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "stmoe/error.hpp"

namespace stmoe {

int Vocab::id(std::string_view word) const {
  const auto it = index.find(std::string(word));
  return it == index.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view word) const { return index.count(std::string(word)) != 0; }

const std::string& Vocab::text(int i) const {
  if (i < 0 || i >= size()) throw Error(Errc::OutOfVocab, "token id " + std::to_string(i));
  return tokens[static_cast<std::size_t>(i)];
}

void Vocab::reindex() {
  index.clear();
  for (int i = 1; i < size(); ++i) index.emplace(tokens[static_cast<std::size_t>(i)], i);
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c) && c != '<' && c != '>') {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(ch);
    }
  }
  flush();
  return out;
}

Vocab build_vocab(std::string_view corpus, int max_size) {
  if (max_size < 2) throw Error(Errc::OutOfRange, "vocab max_size must be >= 2");
  std::map<std::string, std::int64_t> counts;
  for (auto& w : tokenize(corpus)) ++counts[w];
  counts.erase(Vocab::kUnkText);
  if (counts.empty()) throw Error(Errc::EmptyInput, "empty corpus");

  std::vector<std::pair<std::string, std::int64_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocab v;
  v.tokens.push_back(Vocab::kUnkText);
  v.freq.push_back(0);
  const auto keep = std::min(ranked.size(), static_cast<std::size_t>(max_size - 1));
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (i < keep) {
      v.tokens.push_back(ranked[i].first);
      v.freq.push_back(ranked[i].second);
    } else {
      v.freq[0] += ranked[i].second;
    }
  }
  v.reindex();
  return v;
}

std::vector<int> encode(std::string_view text, const Vocab& vocab) {
  std::vector<int> ids;
  for (const auto& w : tokenize(text)) ids.push_back(vocab.id(w));
  return ids;
}

std::string decode(std::span<const int> ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab.text(ids[i]);
  }
  return out;
}

std::vector<std::vector<int>> encode_documents(std::string_view text, const Vocab& vocab) {
  std::vector<std::vector<int>> docs;
  std::vector<int> cur;
  std::size_t start = 0;
  bool blank_run = false;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    const bool blank = std::all_of(line.begin(), line.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
    if (blank) {
      if (!cur.empty() && !blank_run) {
        docs.push_back(std::move(cur));
        cur.clear();
      }
      blank_run = true;
    } else {
      blank_run = false;
      for (int id : encode(line, vocab)) cur.push_back(id);
    }
    start = end + 1;
  }
  if (!cur.empty()) docs.push_back(std::move(cur));
  return docs;
}

}  // namespace stmoe
