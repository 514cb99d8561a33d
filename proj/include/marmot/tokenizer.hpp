#pragma once

// Whitespace / punctuation tokenizer over a fixed vocabulary file.

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <fstream>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "marmot/errors.hpp"
#include "marmot/model.hpp"

namespace marmot {

class Vocabulary {
 public:
  static constexpr const char* reserved[special::count] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                                           "[MASK]"};

  Vocabulary() {
    for (const char* r : reserved) add(r);
  }

  explicit Vocabulary(std::vector<std::string> tokens) {
    if (tokens.size() < special::count) {
      throw InputError("vocabulary must start with the " + std::to_string(special::count) +
                       " reserved tokens");
    }
    for (std::size_t i = 0; i < special::count; ++i) {
      if (tokens[i] != reserved[i]) {
        throw InputError("vocabulary entry " + std::to_string(i) + " must be " + reserved[i] +
                         ", found '" + tokens[i] + "'");
      }
    }
    for (auto& t : tokens) {
      if (index_.count(t)) throw InputError("duplicate vocabulary entry '" + t + "'");
      add(std::move(t));
    }
  }

  /// One token per line; line number (0-based) is the id.
  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open vocabulary file '" + path + "'");
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      tokens.push_back(line);
    }
    return Vocabulary(std::move(tokens));
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write vocabulary file '" + path + "'");
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }

  std::size_t id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? special::unk : it->second;
  }

  bool contains(std::string_view word) const { return index_.count(std::string(word)) != 0; }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void add(std::string t) {
    index_.emplace(t, tokens_.size());
    tokens_.push_back(std::move(t));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Lowercased words; whitespace and punctuation both separate words and are dropped.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c) || std::ispunct(c)) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

/// Word ids with [UNK] fallback, truncated to `max_len` tokens (0 = no limit).
inline std::vector<std::size_t> tokenize(std::string_view text, const Vocabulary& vocab,
                                         std::size_t max_len = 0) {
  std::vector<std::size_t> ids;
  for (const auto& w : split_words(text)) {
    if (max_len && ids.size() == max_len) break;
    ids.push_back(vocab.id(w));
  }
  return ids;
}

/// Reserved tokens followed by every distinct word of `texts`, sorted.
inline Vocabulary build_vocabulary(const std::vector<std::string>& texts) {
  std::set<std::string> words;
  for (const auto& t : texts)
    for (auto& w : split_words(t)) words.insert(std::move(w));
  std::vector<std::string> tokens(std::begin(Vocabulary::reserved), std::end(Vocabulary::reserved));
  for (const auto& w : words) {
    if (std::find(tokens.begin(), tokens.end(), w) == tokens.end()) tokens.push_back(w);
  }
  return Vocabulary(std::move(tokens));
}

}  // namespace marmot
