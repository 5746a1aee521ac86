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

// Response generation: greedy, beam search and top-k sampling, plus the
// query-copy and phrase-repetition diagnostics.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rplm/corpus.hpp"
#include "rplm/errors.hpp"
#include "rplm/model.hpp"
#include "rplm/random.hpp"

namespace rplm {

enum class Strategy { kGreedy, kBeam, kTopK };

inline Strategy parse_strategy(std::string_view s) {
  if (s == "greedy") return Strategy::kGreedy;
  if (s == "beam") return Strategy::kBeam;
  if (s == "top-k" || s == "topk" || s == "top_k") return Strategy::kTopK;
  throw ParameterError("unknown decoding strategy '" + std::string(s) + "'");
}

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kGreedy: return "greedy";
    case Strategy::kBeam: return "beam";
    case Strategy::kTopK: return "top-k";
  }
  return "?";
}

inline std::vector<TokenId> default_banned_tokens() {
  return {special::kPad, special::kBos, special::kEoq, special::kUnk};
}

struct DecodeConfig {
  Strategy strategy = Strategy::kTopK;
  std::size_t top_k = 20;
  std::size_t beam_width = 5;
  std::size_t max_response_len = 30;  // generated tokens, [EOS] included
  std::uint64_t seed = 1;
  std::vector<TokenId> banned = default_banned_tokens();

  void validate() const {
    if (top_k < 1) throw ParameterError("top_k must be >= 1");
    if (beam_width < 1) throw ParameterError("beam_width must be >= 1");
    if (max_response_len < 1) throw ParameterError("max_response_len must be >= 1");
  }
};

struct DecodeResult {
  std::vector<TokenId> ids;         // response body, [EOS] stripped
  std::vector<std::string> tokens;  // response body as strings
  std::vector<double> step_probs;   // probability of every chosen token, [EOS] included
  double log_prob = 0.0;
  bool finished = false;            // ended with [EOS]
  bool copied = false;
  bool repetitive = false;
  bool degenerate = false;          // empty response
};

// ---------------------------------------------------------------------------
// Diagnostics

/// Length of the longest common contiguous token run.
inline std::size_t longest_common_substring(std::span<const std::string> a,
                                            std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  std::size_t best = 0;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : 0;
      best = std::max(best, cur[j]);
    }
    std::swap(prev, cur);
  }
  return best;
}

/// Response copies the query: common substring longer than 4 tokens.
inline bool detect_copy(std::span<const std::string> query, std::span<const std::string> response) {
  return longest_common_substring(query, response) > 4;
}

/// Some n-gram (n <= 4) loops more than 3 times back to back.
inline bool detect_repetition(std::span<const std::string> response) {
  const std::size_t len = response.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    for (std::size_t i = 0; i + n <= len; ++i) {
      std::size_t repeats = 1;
      std::size_t next = i + n;
      while (next + n <= len &&
             std::equal(response.begin() + i, response.begin() + i + n, response.begin() + next)) {
        ++repeats;
        next += n;
      }
      if (repeats > 3) return true;
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// Distributions and sampling

/// P(x_{p+1} | x_1..x_p) from the last logit row, banned tokens masked to
/// exactly zero and the remainder renormalized. prefix must contain [EOQ] at
/// 1-based position m.
template <typename T>
std::vector<double> next_token_distribution(const Model<T>& model, std::span<const TokenId> prefix,
                                            std::size_t m, std::span<const TokenId> banned) {
  if (m == 0 || m > prefix.size() || prefix[m - 1] != special::kEoq) {
    throw ContractError("next_token_distribution: prefix must hold [EOQ] at position m");
  }
  if (prefix.size() >= model.config().max_seq_len) {
    throw LengthError("prefix of " + std::to_string(prefix.size()) +
                      " tokens leaves no room under max_seq_len " +
                      std::to_string(model.config().max_seq_len));
  }
  NoGradGuard no_grad;
  const auto trace = model.forward(prefix, m);
  const std::size_t vocab = model.config().vocab_size;
  const std::size_t last = trace.logits.dim(0) - 1;
  std::vector<char> allowed(vocab, 1);
  for (TokenId b : banned) {
    if (b < vocab) allowed[b] = 0;
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < vocab; ++j) {
    if (allowed[j]) mx = std::max(mx, static_cast<double>(trace.logits.at(last, j)));
  }
  std::vector<double> dist(vocab, 0.0);
  if (mx == -std::numeric_limits<double>::infinity()) {
    throw ContractError("next_token_distribution: every token is banned");
  }
  double total = 0.0;
  for (std::size_t j = 0; j < vocab; ++j) {
    if (allowed[j]) total += (dist[j] = std::exp(static_cast<double>(trace.logits.at(last, j)) - mx));
  }
  for (auto& p : dist) p /= total;
  return dist;
}

/// Indices of the k most probable entries, ties to the lower index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> dist, std::size_t k) {
  std::vector<std::size_t> idx(dist.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, dist.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return dist[a] != dist[b] ? dist[a] > dist[b] : a < b;
                    });
  idx.resize(k);
  return idx;
}

/// Samples from the renormalized k most probable entries. k > |dist| clamps.
inline std::size_t top_k_sample(std::span<const double> dist, std::size_t k, Rng& rng) {
  if (k < 1) throw ParameterError("top_k_sample: k must be >= 1");
  if (dist.empty()) throw ShapeError("top_k_sample: empty distribution");
  const auto idx = top_k_indices(dist, k);
  double total = 0.0;
  for (auto i : idx) total += dist[i];
  const double target = rng.uniform() * total;
  double cum = 0.0;
  std::size_t fallback = idx.front();
  for (auto i : idx) {
    if (dist[i] <= 0.0) break;
    cum += dist[i];
    fallback = i;
    if (target < cum) return i;
  }
  return fallback;
}

inline std::size_t argmax(std::span<const double> dist) { return top_k_indices(dist, 1).front(); }

// ---------------------------------------------------------------------------
// Search

/// Next-token distribution given the tokens generated so far.
using NextTokenFn = std::function<std::vector<double>(std::span<const TokenId> generated)>;

struct Hypothesis {
  std::vector<TokenId> tokens;  // [EOS] included when finished
  std::vector<double> probs;
  double score = 0.0;           // summed log-probability
  bool finished = false;
};

/// Greedy: argmax per step until [EOS] or max_len tokens.
inline Hypothesis greedy_search(const NextTokenFn& next, std::size_t max_len, TokenId eos) {
  Hypothesis h;
  for (std::size_t step = 0; step < max_len; ++step) {
    const auto dist = next(h.tokens);
    const auto tok = static_cast<TokenId>(argmax(dist));
    h.tokens.push_back(tok);
    h.probs.push_back(dist[tok]);
    h.score += std::log(dist[tok]);
    if (tok == eos) {
      h.finished = true;
      break;
    }
  }
  return h;
}

/// Beam search over summed log-probabilities, no length normalization.
/// Each step ranks every extension of the live beam; an [EOS] extension is
/// set aside as finished when it ranks within the top `beam`, other
/// extensions refill the beam in rank order. Stops once the best finished
/// score can no longer be beaten. Returns the best finished hypothesis, or
/// the best unfinished one when none finished within max_len.
inline Hypothesis beam_search(const NextTokenFn& next, std::size_t beam, std::size_t max_len,
                              TokenId eos) {
  if (beam < 1) throw ParameterError("beam_search: beam must be >= 1");
  struct Candidate {
    std::size_t parent;
    TokenId token;
    double prob;
    double score;
  };
  std::vector<Hypothesis> alive{Hypothesis{}};
  std::vector<Hypothesis> finished;
  for (std::size_t step = 0; step < max_len && !alive.empty(); ++step) {
    std::vector<Candidate> candidates;
    for (std::size_t h = 0; h < alive.size(); ++h) {
      const auto dist = next(alive[h].tokens);
      for (std::size_t tok = 0; tok < dist.size(); ++tok) {
        if (dist[tok] > 0.0) {
          candidates.push_back({h, static_cast<TokenId>(tok), dist[tok],
                                alive[h].score + std::log(dist[tok])});
        }
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    std::vector<Hypothesis> next_alive;
    for (std::size_t rank = 0; rank < candidates.size() && next_alive.size() < beam; ++rank) {
      const auto& c = candidates[rank];
      Hypothesis h = alive[c.parent];
      h.tokens.push_back(c.token);
      h.probs.push_back(c.prob);
      h.score = c.score;
      if (c.token == eos) {
        if (rank < beam) {
          h.finished = true;
          finished.push_back(std::move(h));
        }
      } else {
        next_alive.push_back(std::move(h));
      }
    }
    alive = std::move(next_alive);
    if (!finished.empty() && !alive.empty()) {
      double best_finished = -std::numeric_limits<double>::infinity();
      for (const auto& f : finished) best_finished = std::max(best_finished, f.score);
      if (best_finished >= alive.front().score) break;
    }
  }
  const auto& pool = finished.empty() ? alive : finished;
  if (pool.empty()) return Hypothesis{};
  std::size_t best = 0;
  for (std::size_t i = 1; i < pool.size(); ++i) {
    if (pool[i].score > pool[best].score) best = i;
  }
  return pool[best];
}

// ---------------------------------------------------------------------------

/// Decodes a response for `query_ids` (no [EOQ]) with the given strategy.
template <typename T>
DecodeResult decode(const Model<T>& model, std::span<const TokenId> query_ids,
                    const DecodeConfig& cfg, const Vocab& vocab) {
  cfg.validate();
  if (query_ids.empty()) throw EmptyInputError("decode: empty query");
  std::vector<TokenId> prefix(query_ids.begin(), query_ids.end());
  prefix.push_back(special::kEoq);
  const std::size_t m = prefix.size();
  const std::size_t max_seq = model.config().max_seq_len;
  if (m + 1 >= max_seq) {
    throw LengthError("query of " + std::to_string(query_ids.size()) +
                      " tokens exceeds the length budget");
  }
  // The finished sequence, [BOS] included, must fit max_seq_len rows.
  const std::size_t max_len = std::min(cfg.max_response_len, max_seq - 1 - m);

  NextTokenFn next = [&](std::span<const TokenId> generated) {
    std::vector<TokenId> full(prefix);
    full.insert(full.end(), generated.begin(), generated.end());
    return next_token_distribution(model, full, m, cfg.banned);
  };

  Hypothesis h;
  if (cfg.strategy == Strategy::kBeam) {
    h = beam_search(next, cfg.beam_width, max_len, special::kEos);
  } else if (cfg.strategy == Strategy::kGreedy) {
    h = greedy_search(next, max_len, special::kEos);
  } else {
    Rng rng(cfg.seed);
    for (std::size_t step = 0; step < max_len; ++step) {
      const auto dist = next(h.tokens);
      const auto tok = static_cast<TokenId>(top_k_sample(dist, cfg.top_k, rng));
      h.tokens.push_back(tok);
      h.probs.push_back(dist[tok]);
      h.score += std::log(dist[tok]);
      if (tok == special::kEos) {
        h.finished = true;
        break;
      }
    }
  }

  DecodeResult r;
  r.step_probs = h.probs;
  r.log_prob = h.score;
  r.finished = h.finished;
  for (TokenId id : h.tokens) {
    if (id == special::kEos) break;
    r.ids.push_back(id);
    r.tokens.push_back(vocab.token(id));
  }
  std::vector<std::string> query_tokens;
  for (TokenId id : query_ids) query_tokens.push_back(vocab.token(id));
  r.copied = detect_copy(query_tokens, r.tokens);
  r.repetitive = detect_repetition(r.tokens);
  r.degenerate = r.tokens.empty();
  return r;
}

/// Tokenizes `query`, then decodes. The returned tokens exclude all special
/// tokens.
template <typename T>
DecodeResult generate(const Model<T>& model, std::string_view query, const DecodeConfig& cfg,
                      const Vocab& vocab) {
  const auto tokens = tokenize(query);
  return decode(model, vocab.encode(tokens), cfg, vocab);
}

/// Salience of each query position (last query token through [EOQ]) for a
/// given response.
template <typename T>
std::vector<double> salience_for(const Model<T>& model, std::span<const TokenId> query_ids,
                                 std::span<const TokenId> response_ids) {
  std::vector<TokenId> ids(query_ids.begin(), query_ids.end());
  ids.push_back(special::kEoq);
  const std::size_t m = ids.size();
  ids.insert(ids.end(), response_ids.begin(), response_ids.end());
  ids.push_back(special::kEos);
  if (ids.size() >= model.config().max_seq_len) {
    throw LengthError("query and response exceed max_seq_len");
  }
  NoGradGuard no_grad;
  const auto trace = model.forward(ids, m);
  const auto s = salience_scores(trace, ids.size());
  return {s.data().begin(), s.data().end()};
}

}  // namespace rplm
