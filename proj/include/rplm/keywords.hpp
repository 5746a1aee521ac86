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

// Keyword pipelines that produce the supervision targets:
//  - response keywords (TF-IDF over the training responses),
//  - informative query words (max PMI against the response keywords) -> y_src,
//  - sampled group keywords mapped onto the vocabulary -> y_kwd,
//  - high-precision keyword sets for the hit-rate metrics.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rplm/corpus.hpp"
#include "rplm/errors.hpp"
#include "rplm/random.hpp"

namespace rplm {

using Stopwords = std::unordered_set<std::string>;

inline std::size_t ceil_fraction(double fraction, std::size_t count) {
  return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(count) - 1e-9));
}

/// Pluggable keyword extractor. Implementations return keywords ranked best
/// first; a keyword may span several tokens.
class KeywordExtractor {
 public:
  virtual ~KeywordExtractor() = default;
  virtual std::vector<std::string> extract(std::span<const std::string> tokens) const = 0;
};

/// Document frequencies over a collection of token sequences.
struct DocumentFrequency {
  std::size_t documents = 0;
  std::unordered_map<std::string, std::size_t> counts;

  void add(std::span<const std::string> doc) {
    ++documents;
    std::unordered_set<std::string> seen(doc.begin(), doc.end());
    for (const auto& t : seen) ++counts[t];
  }

  /// Smoothed inverse document frequency ln((1 + N) / (1 + df)) + 1.
  double idf(const std::string& token) const {
    auto it = counts.find(token);
    const double df = it == counts.end() ? 0.0 : static_cast<double>(it->second);
    return std::log((1.0 + static_cast<double>(documents)) / (1.0 + df)) + 1.0;
  }
};

/// Ranks the distinct non-stopword tokens of `tokens` by tf * idf (ties in
/// code-point order) and keeps the top ceil(top_fraction * distinct).
inline std::vector<std::string> extract_keywords(std::span<const std::string> tokens,
                                                 const Stopwords& stopwords, double top_fraction,
                                                 const DocumentFrequency& df) {
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) {
    throw ParameterError("extract_keywords: top_fraction must be in (0, 1]");
  }
  std::map<std::string, std::size_t> tf;
  for (const auto& t : tokens) {
    if (!stopwords.count(t)) ++tf[t];
  }
  std::vector<std::pair<std::string, double>> scored;
  scored.reserve(tf.size());
  for (const auto& [tok, count] : tf) scored.emplace_back(tok, static_cast<double>(count) * df.idf(tok));
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t keep = std::min(scored.size(), ceil_fraction(top_fraction, scored.size()));
  std::vector<std::string> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) out.push_back(scored[i].first);
  return out;
}

class TfidfExtractor : public KeywordExtractor {
 public:
  TfidfExtractor(DocumentFrequency df, Stopwords stopwords, double top_fraction)
      : df_(std::move(df)), stopwords_(std::move(stopwords)), top_fraction_(top_fraction) {
    if (!(top_fraction > 0.0 && top_fraction <= 1.0)) {
      throw ParameterError("TfidfExtractor: top_fraction must be in (0, 1]");
    }
  }

  std::vector<std::string> extract(std::span<const std::string> tokens) const override {
    return extract_keywords(tokens, stopwords_, top_fraction_, df_);
  }

  const Stopwords& stopwords() const { return stopwords_; }

 private:
  DocumentFrequency df_;
  Stopwords stopwords_;
  double top_fraction_;
};

// ---------------------------------------------------------------------------
// Point-wise mutual information

/// Pair-level co-occurrence statistics between query words and response
/// keywords. A pair contributes at most once to each count.
struct CooccurrenceCounts {
  std::size_t total = 0;
  std::unordered_map<std::string, std::size_t> word;
  std::unordered_map<std::string, std::size_t> keyword;
  std::map<std::pair<std::string, std::string>, std::size_t> joint;

  void add(std::span<const std::string> query, std::span<const std::string> keywords) {
    ++total;
    std::set<std::string> words(query.begin(), query.end());
    std::set<std::string> keys(keywords.begin(), keywords.end());
    for (const auto& w : words) ++word[w];
    for (const auto& k : keys) ++keyword[k];
    for (const auto& w : words)
      for (const auto& k : keys) ++joint[{w, k}];
  }

  std::size_t word_count(const std::string& w) const {
    auto it = word.find(w);
    return it == word.end() ? 0 : it->second;
  }
  std::size_t keyword_count(const std::string& k) const {
    auto it = keyword.find(k);
    return it == keyword.end() ? 0 : it->second;
  }
  std::size_t joint_count(const std::string& w, const std::string& k) const {
    auto it = joint.find({w, k});
    return it == joint.end() ? 0 : it->second;
  }
};

inline constexpr double kNoCooccurrence = -std::numeric_limits<double>::infinity();

/// log(P(w, k) / (P(w) P(k))). Never co-occurring -> kNoCooccurrence.
inline double pmi(const std::string& word, const std::string& keyword,
                  const CooccurrenceCounts& counts) {
  const std::size_t cw = counts.word_count(word);
  const std::size_t ck = counts.keyword_count(keyword);
  if (cw == 0 || ck == 0) {
    throw NumericError("pmi undefined: zero marginal count for '" + (cw == 0 ? word : keyword) +
                       "'");
  }
  const std::size_t joint = counts.joint_count(word, keyword);
  if (joint == 0) return kNoCooccurrence;
  const double total = static_cast<double>(counts.total);
  return std::log(static_cast<double>(joint) * total /
                  (static_cast<double>(cw) * static_cast<double>(ck)));
}

/// y_src for one pair: length |query| + 1, the final ([EOQ]) slot always 0.
/// Each distinct non-stopword query token is scored by its max PMI against
/// the pair's response keywords; the top ceil(select_fraction * candidates)
/// tokens with a finite score are marked at every occurrence. Ties keep the
/// earlier first occurrence.
inline std::vector<std::uint8_t> informative_query_words(
    std::span<const std::string> query, std::span<const std::string> response_keywords,
    const CooccurrenceCounts& counts, const Stopwords& stopwords, double select_fraction) {
  std::vector<std::uint8_t> y(query.size() + 1, 0);
  std::vector<std::string> candidates;
  for (const auto& t : query) {
    if (stopwords.count(t)) continue;
    if (std::find(candidates.begin(), candidates.end(), t) == candidates.end()) {
      candidates.push_back(t);
    }
  }
  if (candidates.empty()) return y;
  std::vector<std::pair<std::string, double>> scored;
  for (const auto& w : candidates) {
    double best = kNoCooccurrence;
    if (counts.word_count(w) > 0) {
      for (const auto& k : response_keywords) {
        if (counts.keyword_count(k) == 0) continue;
        best = std::max(best, pmi(w, k, counts));
      }
    }
    scored.emplace_back(w, best);
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t keep = std::min(scored.size(), ceil_fraction(select_fraction, candidates.size()));
  std::unordered_set<std::string> selected;
  for (std::size_t i = 0; i < keep; ++i) {
    if (scored[i].second == kNoCooccurrence) break;
    selected.insert(scored[i].first);
  }
  for (std::size_t i = 0; i < query.size(); ++i) y[i] = selected.count(query[i]) ? 1 : 0;
  return y;
}

/// Aggregates the keyword sets of one reference group, samples
/// ceil(sample_fraction * K) of the K keywords without replacement and marks
/// the vocabulary index of every character of every sampled keyword.
/// Returns sorted unique ids; keywords absent from the vocabulary are skipped.
inline std::vector<TokenId> build_topic_targets(
    std::span<const std::vector<std::string>> group_keywords, const Vocab& vocab,
    std::uint64_t seed, double sample_fraction = 0.8) {
  std::set<std::string> aggregate;
  for (const auto& kws : group_keywords) aggregate.insert(kws.begin(), kws.end());
  std::vector<std::string> pool(aggregate.begin(), aggregate.end());
  const std::size_t take = std::min(pool.size(), ceil_fraction(sample_fraction, pool.size()));
  Rng rng(seed);
  for (std::size_t i = 0; i < take; ++i) {
    std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  }
  std::set<TokenId> ids;
  for (std::size_t i = 0; i < take; ++i) {
    std::size_t pos = 0;
    const std::string& kw = pool[i];
    while (pos < kw.size()) {
      const std::size_t start = pos;
      utf8::decode(kw, pos);
      const TokenId id = vocab.id(kw.substr(start, pos - start));
      if (!is_reserved(id)) ids.insert(id);
    }
  }
  return {ids.begin(), ids.end()};
}

/// Number of keywords sampled from an aggregate of `aggregate_size`.
inline std::size_t topic_sample_size(std::size_t aggregate_size, double sample_fraction = 0.8) {
  return std::min(aggregate_size, ceil_fraction(sample_fraction, aggregate_size));
}

/// High-precision keyword set for the hit-rate metrics: extractor output with
/// stopwords removed.
inline std::set<std::string> evaluation_keywords(std::span<const std::string> sentence,
                                                 const Stopwords& stopwords,
                                                 const KeywordExtractor& extractor) {
  std::set<std::string> out;
  if (sentence.empty()) return out;
  for (auto& k : extractor.extract(sentence)) {
    if (!stopwords.count(k)) out.insert(std::move(k));
  }
  return out;
}

}  // namespace rplm
