/*
 * Copyright (c) 2026, The rplm Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Character-level corpus handling: UTF-8 tokenization, vocabulary, dialogue
// pairs and the query/[EOQ]/response/[EOS] sequence layout.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "rplm/errors.hpp"

namespace rplm {

using TokenId = std::uint32_t;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEoq = 2;
inline constexpr TokenId kEos = 3;
inline constexpr TokenId kUnk = 4;
inline constexpr std::size_t kCount = 5;
inline constexpr std::string_view kNames[kCount] = {"[PAD]", "[BOS]", "[EOQ]", "[EOS]",
                                                    "[UNK]"};
}  // namespace special

inline bool is_reserved(TokenId id) { return id < special::kCount; }

// ---------------------------------------------------------------------------
// UTF-8

namespace utf8 {

/// Decodes one scalar starting at text[pos]; advances pos. Throws DataError
/// on malformed input (overlongs, surrogates and out-of-range included).
inline char32_t decode(std::string_view text, std::size_t& pos) {
  const auto byte = [&](std::size_t i) { return static_cast<unsigned char>(text[i]); };
  const unsigned char lead = byte(pos);
  std::size_t len;
  char32_t cp;
  if (lead < 0x80) {
    ++pos;
    return lead;
  } else if ((lead & 0xE0) == 0xC0) {
    len = 2;
    cp = lead & 0x1F;
  } else if ((lead & 0xF0) == 0xE0) {
    len = 3;
    cp = lead & 0x0F;
  } else if ((lead & 0xF8) == 0xF0) {
    len = 4;
    cp = lead & 0x07;
  } else {
    throw DataError("invalid UTF-8 lead byte at offset " + std::to_string(pos));
  }
  if (pos + len > text.size()) throw DataError("truncated UTF-8 sequence");
  for (std::size_t i = 1; i < len; ++i) {
    const unsigned char c = byte(pos + i);
    if ((c & 0xC0) != 0x80) {
      throw DataError("invalid UTF-8 continuation at offset " + std::to_string(pos + i));
    }
    cp = (cp << 6) | (c & 0x3F);
  }
  static constexpr char32_t kMin[5] = {0, 0, 0x80, 0x800, 0x10000};
  if (cp < kMin[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
    throw DataError("invalid UTF-8 scalar at offset " + std::to_string(pos));
  }
  pos += len;
  return cp;
}

inline bool is_space(char32_t cp) {
  switch (cp) {
    case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20: case 0x85:
    case 0xA0: case 0x1680: case 0x2028: case 0x2029: case 0x202F: case 0x205F:
    case 0x3000:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}

/// Code-point order of two single-scalar (or arbitrary) UTF-8 strings.
/// Byte order of valid UTF-8 coincides with code-point order.
inline bool codepoint_less(std::string_view a, std::string_view b) { return a < b; }

}  // namespace utf8

/// One token per Unicode scalar, whitespace dropped.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t start = pos;
    const char32_t cp = utf8::decode(text, pos);
    if (!utf8::is_space(cp)) tokens.emplace_back(text.substr(start, pos - start));
  }
  if (tokens.empty()) throw EmptyInputError("tokenize: no tokens in input");
  return tokens;
}

inline std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (const auto& t : tokens) out += t;
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocab {
 public:
  Vocab() {
    for (auto name : special::kNames) add(std::string(name));
  }

  /// Reserved tokens followed by `tokens` in order. Duplicates or reserved
  /// names among `tokens` are rejected.
  static Vocab from_tokens(std::span<const std::string> tokens) {
    Vocab v;
    for (const auto& t : tokens) {
      if (v.index_.count(t)) throw FormatError("duplicate vocabulary token '" + t + "'");
      v.add(t);
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? special::kUnk : it->second;
  }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) throw IndexError("token id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }

  std::vector<TokenId> encode(std::span<const std::string> tokens) const {
    std::vector<TokenId> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
  }

  void write(std::ostream& os) const {
    for (const auto& t : tokens_) os << t << '\n';
  }

  static Vocab read(std::istream& is) {
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) lines.push_back(line);
    if (lines.size() < special::kCount) throw FormatError("vocab file shorter than reserved block");
    for (std::size_t i = 0; i < special::kCount; ++i) {
      if (lines[i] != special::kNames[i]) {
        throw FormatError("vocab line " + std::to_string(i + 1) + ": expected reserved token " +
                          std::string(special::kNames[i]));
      }
    }
    return from_tokens(std::span<const std::string>(lines).subspan(special::kCount));
  }

 private:
  void add(std::string token) {
    index_.emplace(token, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(std::move(token));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// ---------------------------------------------------------------------------
// Dialogue pairs

struct DialoguePair {
  std::vector<std::string> query;
  std::vector<std::string> response;
  std::size_t group = 0;  // pairs with identical query text share a group
};

/// Assigns group ids by first appearance of each distinct query text.
inline std::size_t assign_groups(std::span<DialoguePair> pairs) {
  std::map<std::vector<std::string>, std::size_t> groups;
  for (auto& p : pairs) {
    auto [it, inserted] = groups.emplace(p.query, groups.size());
    p.group = it->second;
  }
  return groups.size();
}

/// Parses `query<TAB>response` lines. Errors name the 1-based line number.
inline std::vector<DialoguePair> read_corpus(std::istream& is) {
  std::vector<DialoguePair> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw DataError("corpus line " + std::to_string(lineno) +
                      ": expected exactly two TAB-separated fields");
    }
    DialoguePair pair;
    try {
      pair.query = tokenize(std::string_view(line).substr(0, tab));
      pair.response = tokenize(std::string_view(line).substr(tab + 1));
    } catch (const Error& e) {
      throw DataError("corpus line " + std::to_string(lineno) + ": " + e.what());
    }
    pairs.push_back(std::move(pair));
  }
  assign_groups(pairs);
  return pairs;
}

/// Reserved tokens, then corpus tokens by descending frequency (ties in
/// code-point order), truncated to max_size entries.
inline Vocab build_vocab(std::span<const DialoguePair> corpus, std::size_t max_size) {
  if (max_size <= special::kCount) {
    throw ParameterError("build_vocab: max_size must exceed the " +
                         std::to_string(special::kCount) + " reserved tokens");
  }
  if (corpus.empty()) throw EmptyInputError("build_vocab: empty corpus");
  std::unordered_map<std::string, std::size_t> freq;
  for (const auto& p : corpus) {
    for (const auto& t : p.query) ++freq[t];
    for (const auto& t : p.response) ++freq[t];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return utf8::codepoint_less(a.first, b.first);
  });
  std::vector<std::string> tokens;
  for (const auto& [tok, count] : ranked) {
    if (tokens.size() + special::kCount >= max_size) break;
    tokens.push_back(tok);
  }
  return Vocab::from_tokens(tokens);
}

// ---------------------------------------------------------------------------
// Training instances

/// Token ids laid out as query, [EOQ], response, [EOS]. Positions m and n are
/// 1-based counts: ids[m - 1] == [EOQ], ids[n - 1] == [EOS]. ids may carry
/// trailing [PAD] beyond n when batched.
struct TrainingInstance {
  std::vector<TokenId> ids;
  std::size_t m = 0;
  std::size_t n = 0;
  std::vector<std::uint8_t> y_src;  // length m
  std::vector<TokenId> topic_ids;   // sorted indices set in y_kwd

  std::vector<std::uint8_t> y_kwd(std::size_t vocab_size) const {
    std::vector<std::uint8_t> dense(vocab_size, 0);
    for (TokenId id : topic_ids) dense.at(id) = 1;
    return dense;
  }
};

inline TrainingInstance assemble_sequence(std::span<const std::string> query,
                                          std::span<const std::string> response,
                                          const Vocab& vocab) {
  if (query.empty() || response.empty()) {
    throw EmptyInputError("assemble_sequence: query and response must be non-empty");
  }
  TrainingInstance inst;
  inst.ids = vocab.encode(query);
  inst.ids.push_back(special::kEoq);
  const auto body = vocab.encode(response);
  inst.ids.insert(inst.ids.end(), body.begin(), body.end());
  inst.ids.push_back(special::kEos);
  inst.m = query.size() + 1;
  inst.n = query.size() + response.size() + 2;
  inst.y_src.assign(inst.m, 0);
  return inst;
}

inline std::vector<std::string> read_token_lines(std::istream& is) {
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

/// Stopword file: one token per line.
inline std::unordered_set<std::string> read_stopwords(std::istream& is) {
  auto lines = read_token_lines(is);
  return {lines.begin(), lines.end()};
}

}  // namespace rplm
