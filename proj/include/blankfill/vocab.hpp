// Copyright (c) 2026, The blankfill Authors
// SPDX-License-Identifier: Apache-2.0
//
// Word-level tokenizer, vocabulary files, sentence segmentation and corpus
// loading. Text is lowercased and split on whitespace; every ASCII punctuation
// character is its own token.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "blankfill/errors.hpp"

namespace blankfill {

using TokenId = std::size_t;

namespace detail {

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
inline bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }
inline char to_lower(char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); }

/// Calls emit(word, newline_before) for every token of `text`.
template <typename Emit>
void for_each_word(std::string_view text, Emit&& emit) {
  std::string current;
  bool newline_pending = false;
  auto flush = [&] {
    if (!current.empty()) {
      emit(current, newline_pending);
      newline_pending = false;
      current.clear();
    }
  };
  for (const char c : text) {
    if (is_space(c)) {
      flush();
      if (c == '\n') newline_pending = true;
    } else if (is_punct(c)) {
      flush();
      emit(std::string(1, c), newline_pending);
      newline_pending = false;
    } else {
      current.push_back(to_lower(c));
    }
  }
  flush();
}

}  // namespace detail

/// Lowercased word/punctuation tokens of `text`.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  detail::for_each_word(text, [&](const std::string& w, bool) { words.push_back(w); });
  return words;
}

/// Canonical form of `text`: its tokens joined by single spaces.
inline std::string normalize_text(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

/// Token offsets at which sentences start. A sentence ends after any token
/// whose last character is '.', '!' or '?', and at every newline.
inline std::vector<std::size_t> split_sentences(std::string_view text) {
  std::vector<std::size_t> starts;
  std::size_t index = 0;
  bool boundary = true;
  auto terminal = [](char c) { return c == '.' || c == '!' || c == '?'; };
  detail::for_each_word(text, [&](const std::string& w, bool newline_before) {
    // "?!" and "..." close one sentence, not several
    const bool trailing = boundary && index > 0 && !newline_before && w.size() == 1 && terminal(w[0]);
    if ((boundary || newline_before) && !trailing) starts.push_back(index);
    boundary = terminal(w.back());
    ++index;
  });
  return starts;
}

/// Token-id bijection with fixed reserved ids.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kMask = 2;
  static constexpr TokenId kStart = 3;
  static constexpr TokenId kEnd = 4;
  static constexpr std::size_t kNumReserved = 5;

  static constexpr std::string_view kPadText = "[PAD]";
  static constexpr std::string_view kUnkText = "[UNK]";
  static constexpr std::string_view kMaskText = "[MASK]";
  static constexpr std::string_view kStartText = "[START]";
  static constexpr std::string_view kEndText = "[END]";

  static std::string sentinel_text(std::size_t k) { return "[MASK_" + std::to_string(k) + "]"; }

  Vocab() : Vocab(std::vector<std::string>{}, 0) {}

  /// Builds from a corpus: reserved tokens, then `n_sentinels` sentinel masks,
  /// then the most frequent words (ties broken lexicographically) until
  /// `max_size` entries.
  static Vocab build(std::istream& corpus, std::size_t max_size, std::size_t n_sentinels = 0) {
    const std::size_t reserved = kNumReserved + n_sentinels;
    if (max_size <= reserved) {
      throw ContractError("vocab max size " + std::to_string(max_size) + " must exceed the " +
                          std::to_string(reserved) + " reserved tokens");
    }
    std::map<std::string, std::size_t> counts;
    std::string line;
    while (std::getline(corpus, line)) {
      detail::for_each_word(line, [&](const std::string& w, bool) { ++counts[w]; });
    }
    if (counts.empty()) throw IngestionError("corpus contains no tokens");
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> words;
    for (const auto& [w, n] : ranked) {
      if (words.size() + reserved >= max_size) break;
      words.push_back(w);
    }
    return Vocab(std::move(words), n_sentinels);
  }

  static Vocab build_from_text(std::string_view corpus, std::size_t max_size, std::size_t n_sentinels = 0) {
    std::istringstream in{std::string(corpus)};
    return build(in, max_size, n_sentinels);
  }

  /// Parses the one-token-per-line file format.
  static Vocab parse(std::istream& in) {
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
    const std::string_view reserved[] = {kPadText, kUnkText, kMaskText, kStartText, kEndText};
    if (lines.size() < kNumReserved) throw IngestionError("vocab file lacks the reserved tokens");
    for (std::size_t i = 0; i < kNumReserved; ++i) {
      if (lines[i] != reserved[i]) {
        throw IngestionError("vocab line " + std::to_string(i) + " must be " + std::string(reserved[i]));
      }
    }
    std::size_t n_sentinels = 0;
    while (kNumReserved + n_sentinels < lines.size() &&
           lines[kNumReserved + n_sentinels] == sentinel_text(n_sentinels + 1)) {
      ++n_sentinels;
    }
    std::vector<std::string> words(lines.begin() + static_cast<std::ptrdiff_t>(kNumReserved + n_sentinels),
                                   lines.end());
    return Vocab(std::move(words), n_sentinels);
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocab file " + path.string());
    return parse(in);
  }

  std::string serialize() const {
    std::string out;
    for (const auto& t : tokens_) {
      out += t;
      out.push_back('\n');
    }
    return out;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write vocab file " + path.string());
    out << serialize();
    if (!out) throw IoError("failed writing vocab file " + path.string());
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t sentinel_count() const { return n_sentinels_; }

  /// Sentinel mask k, 1-based.
  TokenId sentinel(std::size_t k) const {
    if (k == 0 || k > n_sentinels_) {
      throw ContractError("sentinel " + std::to_string(k) + " not in vocab (" +
                          std::to_string(n_sentinels_) + " available)");
    }
    return kNumReserved + k - 1;
  }

  bool is_mask_like(TokenId id) const { return id == kMask || (id >= kNumReserved && id < kNumReserved + n_sentinels_); }
  bool is_special(TokenId id) const { return id < kNumReserved + n_sentinels_; }

  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) {
      throw ContractError("token id " + std::to_string(id) + " out of range for vocab of " +
                          std::to_string(tokens_.size()));
    }
    return tokens_[id];
  }

  std::optional<TokenId> find(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  TokenId id_or_unk(std::string_view token) const { return find(token).value_or(kUnk); }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    detail::for_each_word(text, [&](const std::string& w, bool) { ids.push_back(id_or_unk(w)); });
    return ids;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (const TokenId id : ids) {
      if (!out.empty()) out.push_back(' ');
      out += token(id);
    }
    return out;
  }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  Vocab(std::vector<std::string> words, std::size_t n_sentinels) : n_sentinels_(n_sentinels) {
    tokens_ = {std::string(kPadText), std::string(kUnkText), std::string(kMaskText), std::string(kStartText),
               std::string(kEndText)};
    for (std::size_t k = 1; k <= n_sentinels; ++k) tokens_.push_back(sentinel_text(k));
    for (auto& w : words) tokens_.push_back(std::move(w));
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], i).second) {
        throw IngestionError("duplicate vocab entry '" + tokens_[i] + "'");
      }
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t n_sentinels_ = 0;
};

/// A tokenized document with the token offsets where its sentences start.
struct Document {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> sentence_starts;

  std::size_t size() const { return tokens.size(); }

  /// [start, end) of sentence i.
  std::pair<std::size_t, std::size_t> sentence(std::size_t i) const {
    const std::size_t end = i + 1 < sentence_starts.size() ? sentence_starts[i + 1] : tokens.size();
    return {sentence_starts[i], end};
  }

  /// Keeps the first `max_tokens` tokens and the sentence starts inside them.
  void truncate(std::size_t max_tokens) {
    if (tokens.size() <= max_tokens) return;
    tokens.resize(max_tokens);
    std::erase_if(sentence_starts, [max_tokens](std::size_t s) { return s >= max_tokens; });
  }
};

inline Document make_document(std::string_view text, const Vocab& vocab) {
  return Document{vocab.encode(text), split_sentences(text)};
}

/// One document per non-blank line.
inline std::vector<Document> read_corpus(std::istream& in, const Vocab& vocab) {
  std::vector<Document> docs;
  std::string line;
  while (std::getline(in, line)) {
    auto doc = make_document(line, vocab);
    if (!doc.tokens.empty()) docs.push_back(std::move(doc));
  }
  return docs;
}

inline std::vector<Document> load_corpus(const std::filesystem::path& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus " + path.string());
  auto docs = read_corpus(in, vocab);
  if (docs.empty()) throw IngestionError("corpus " + path.string() + " has no documents");
  return docs;
}

}  // namespace blankfill
