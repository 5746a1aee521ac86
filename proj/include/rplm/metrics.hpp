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

// Automatic evaluation: corpus BLEU, Dist-n and keyword hit rates.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rplm/errors.hpp"

namespace rplm {

using Tokens = std::vector<std::string>;
using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

inline NgramCounts count_ngrams(std::span<const std::string> tokens, std::size_t n) {
  NgramCounts out;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++out[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)];
  }
  return out;
}

/// Corpus BLEU-n with uniform weights, clipping against the maximum count
/// over references, brevity penalty against the closest reference length
/// (shorter on ties) and no smoothing.
inline double bleu_n(std::span<const Tokens> predictions,
                     std::span<const std::vector<Tokens>> references, std::size_t n) {
  if (n < 1 || n > 4) throw ParameterError("bleu_n: n must be in [1, 4]");
  if (predictions.size() != references.size()) {
    throw ShapeError("bleu_n: predictions and references are not aligned");
  }
  if (predictions.empty()) throw EmptyInputError("bleu_n: empty corpus");

  std::vector<std::size_t> matched(n + 1, 0), total(n + 1, 0);
  std::size_t hyp_len = 0, ref_len = 0;
  for (std::size_t k = 0; k < predictions.size(); ++k) {
    const auto& pred = predictions[k];
    const auto& refs = references[k];
    if (refs.empty()) throw EmptyInputError("bleu_n: prediction without reference");
    hyp_len += pred.size();
    std::size_t closest = refs.front().size();
    for (const auto& r : refs) {
      const auto d = [&](std::size_t len) {
        return len > pred.size() ? len - pred.size() : pred.size() - len;
      };
      if (d(r.size()) < d(closest) || (d(r.size()) == d(closest) && r.size() < closest)) {
        closest = r.size();
      }
    }
    ref_len += closest;
    for (std::size_t i = 1; i <= n; ++i) {
      const auto counts = count_ngrams(pred, i);
      NgramCounts max_ref;
      for (const auto& r : refs) {
        for (const auto& [gram, c] : count_ngrams(r, i)) {
          auto& slot = max_ref[gram];
          slot = std::max(slot, c);
        }
      }
      for (const auto& [gram, c] : counts) {
        auto it = max_ref.find(gram);
        if (it != max_ref.end()) matched[i] += std::min(c, it->second);
        total[i] += c;
      }
    }
  }
  double log_sum = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    if (matched[i] == 0 || total[i] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched[i]) / static_cast<double>(total[i]));
  }
  const double bp = hyp_len > ref_len ? 1.0
                                      : std::exp(1.0 - static_cast<double>(ref_len) /
                                                           static_cast<double>(hyp_len));
  return bp * std::exp(log_sum / static_cast<double>(n));
}

/// Distinct n-grams over total n-grams, pooled across all predictions.
inline double dist_n(std::span<const Tokens> predictions, std::size_t n) {
  if (n < 1) throw ParameterError("dist_n: n must be >= 1");
  std::set<std::vector<std::string>> distinct;
  std::size_t total = 0;
  for (const auto& pred : predictions) {
    for (std::size_t i = 0; i + n <= pred.size(); ++i) {
      distinct.emplace(pred.begin() + i, pred.begin() + i + n);
      ++total;
    }
  }
  if (total == 0) throw UndefinedMetricError("dist_n: no " + std::to_string(n) + "-grams to count");
  return static_cast<double>(distinct.size()) / static_cast<double>(total);
}

struct EvalRecord {
  Tokens query;
  Tokens prediction;
  std::vector<Tokens> references;
  std::set<std::string> query_keywords;      // K^q
  std::set<std::string> response_keywords;   // K^r, from the prediction
  std::set<std::string> reference_keywords;  // K^{r_g}
};

struct HitRates {
  double query = 0.0;
  double response = 0.0;
};

/// Share of predicted-response keywords found in the query set and in the
/// reference set. An empty predicted set scores (0, 0).
inline HitRates hit_pair(const std::set<std::string>& response_kw,
                         const std::set<std::string>& query_kw,
                         const std::set<std::string>& reference_kw) {
  if (response_kw.empty()) return {};
  std::size_t in_query = 0, in_ref = 0;
  for (const auto& k : response_kw) {
    in_query += query_kw.count(k);
    in_ref += reference_kw.count(k);
  }
  const double denom = static_cast<double>(response_kw.size());
  return {static_cast<double>(in_query) / denom, static_cast<double>(in_ref) / denom};
}

inline HitRates corpus_hit(std::span<const EvalRecord> records) {
  if (records.empty()) throw EmptyInputError("corpus_hit: no records");
  HitRates acc;
  for (const auto& r : records) {
    const auto h = hit_pair(r.response_keywords, r.query_keywords, r.reference_keywords);
    acc.query += h.query;
    acc.response += h.response;
  }
  const auto n = static_cast<double>(records.size());
  return {acc.query / n, acc.response / n};
}

}  // namespace rplm
