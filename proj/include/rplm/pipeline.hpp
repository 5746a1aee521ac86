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

// Corpus -> training instances: vocabulary, keyword statistics, supervision
// targets, and the on-disk instance store.

#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "rplm/corpus.hpp"
#include "rplm/errors.hpp"
#include "rplm/keywords.hpp"

namespace rplm {

struct PipelineConfig {
  std::size_t max_vocab = 12000;
  std::size_t max_seq_len = 128;  // internal rows, [BOS] included
  double keyword_fraction = 0.5;  // response keyword extraction
  double select_fraction = 0.34;  // informative query words
  double topic_fraction = 0.8;    // keywords sampled per reference group
  std::uint64_t seed = 1;

  void validate() const {
    if (max_vocab <= special::kCount) throw ParameterError("max_vocab must exceed the reserved tokens");
    if (max_seq_len < 4) throw ParameterError("max_seq_len must be >= 4");
    for (double f : {keyword_fraction, select_fraction, topic_fraction}) {
      if (!(f > 0.0 && f <= 1.0)) throw ParameterError("keyword fractions must lie in (0, 1]");
    }
  }
};

struct PipelineStats {
  std::size_t pairs = 0;
  std::size_t groups = 0;
  std::size_t instances = 0;
  std::size_t skipped_long = 0;
  double mean_group_keywords = 0.0;
  double oov_rate = 0.0;
};

/// Keyword statistics fitted on the training split.
struct KeywordModel {
  DocumentFrequency df;
  CooccurrenceCounts counts;
  Stopwords stopwords;
  double keyword_fraction = 0.5;

  std::vector<std::string> response_keywords(std::span<const std::string> response) const {
    return extract_keywords(response, stopwords, keyword_fraction, df);
  }
};

inline KeywordModel fit_keyword_model(std::span<const DialoguePair> pairs, Stopwords stopwords,
                                      double keyword_fraction) {
  KeywordModel km;
  km.stopwords = std::move(stopwords);
  km.keyword_fraction = keyword_fraction;
  for (const auto& p : pairs) km.df.add(p.response);
  for (const auto& p : pairs) km.counts.add(p.query, km.response_keywords(p.response));
  return km;
}

/// Instances for `pairs` (groups already assigned). Pairs whose sequence
/// does not fit max_seq_len are skipped and counted.
inline std::vector<TrainingInstance> build_instances(std::span<const DialoguePair> pairs,
                                                     const Vocab& vocab, const KeywordModel& km,
                                                     const PipelineConfig& cfg,
                                                     PipelineStats* stats = nullptr) {
  cfg.validate();
  std::vector<std::vector<std::string>> keywords;
  keywords.reserve(pairs.size());
  for (const auto& p : pairs) keywords.push_back(km.response_keywords(p.response));

  std::map<std::size_t, std::vector<std::vector<std::string>>> group_keywords;
  for (std::size_t i = 0; i < pairs.size(); ++i) group_keywords[pairs[i].group].push_back(keywords[i]);
  std::map<std::size_t, std::vector<TokenId>> group_targets;
  double keyword_total = 0.0;
  for (const auto& [group, kws] : group_keywords) {
    std::set<std::string> aggregate;
    for (const auto& k : kws) aggregate.insert(k.begin(), k.end());
    keyword_total += static_cast<double>(aggregate.size());
    group_targets[group] =
        build_topic_targets(kws, vocab, cfg.seed * 0x9E3779B97F4A7C15ULL + group, cfg.topic_fraction);
  }

  std::vector<TrainingInstance> out;
  std::size_t tokens = 0, unknown = 0, skipped = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    auto inst = assemble_sequence(p.query, p.response, vocab);
    for (TokenId id : inst.ids) {
      if (id == special::kEoq || id == special::kEos) continue;
      ++tokens;
      unknown += id == special::kUnk;
    }
    if (inst.n + 1 > cfg.max_seq_len) {
      ++skipped;
      continue;
    }
    inst.y_src = informative_query_words(p.query, keywords[i], km.counts, km.stopwords,
                                         cfg.select_fraction);
    inst.topic_ids = group_targets[p.group];
    out.push_back(std::move(inst));
  }
  if (stats) {
    stats->pairs = pairs.size();
    stats->groups = group_keywords.size();
    stats->instances = out.size();
    stats->skipped_long = skipped;
    stats->mean_group_keywords =
        group_keywords.empty() ? 0.0 : keyword_total / static_cast<double>(group_keywords.size());
    stats->oov_rate = tokens ? static_cast<double>(unknown) / static_cast<double>(tokens) : 0.0;
  }
  return out;
}

inline std::string format_stats(const PipelineStats& s) {
  std::ostringstream os;
  os << "pairs\t" << s.pairs << "\n"
     << "groups\t" << s.groups << "\n"
     << "instances\t" << s.instances << "\n"
     << "skipped_long\t" << s.skipped_long << "\n"
     << "mean_group_keywords\t" << s.mean_group_keywords << "\n"
     << "oov_rate\t" << s.oov_rate << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Instance store: a header line, then one instance per line as
// `m<TAB>n<TAB>ids<TAB>y_src<TAB>topic_ids`, ids space-separated and y_src a
// string of 0/1 digits.

inline constexpr std::string_view kInstanceStoreHeader = "rplm-instances 1";

inline void write_instances(std::ostream& os, std::span<const TrainingInstance> instances) {
  os << kInstanceStoreHeader << '\n';
  for (const auto& inst : instances) {
    os << inst.m << '\t' << inst.n << '\t';
    for (std::size_t i = 0; i < inst.ids.size(); ++i) os << (i ? " " : "") << inst.ids[i];
    os << '\t';
    for (auto b : inst.y_src) os << (b ? '1' : '0');
    os << '\t';
    for (std::size_t i = 0; i < inst.topic_ids.size(); ++i) os << (i ? " " : "") << inst.topic_ids[i];
    os << '\n';
  }
}

inline std::vector<TrainingInstance> read_instances(std::istream& is, std::size_t vocab_size) {
  std::string line;
  if (!std::getline(is, line) || line != kInstanceStoreHeader) {
    throw FormatError("instance store: missing header");
  }
  std::vector<TrainingInstance> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    const auto fail = [&](const std::string& why) {
      return FormatError("instance store line " + std::to_string(lineno) + ": " + why);
    };
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 5) throw fail("expected 5 fields");
    TrainingInstance inst;
    auto parse_ids = [&](const std::string& text) {
      std::vector<TokenId> ids;
      std::istringstream ss(text);
      long long v;
      while (ss >> v) {
        if (v < 0 || static_cast<std::size_t>(v) >= vocab_size) throw fail("token id out of range");
        ids.push_back(static_cast<TokenId>(v));
      }
      if (!ss.eof()) throw fail("malformed id list");
      return ids;
    };
    try {
      inst.m = std::stoul(fields[0]);
      inst.n = std::stoul(fields[1]);
    } catch (const std::exception&) {
      throw fail("malformed m/n");
    }
    inst.ids = parse_ids(fields[2]);
    for (char c : fields[3]) {
      if (c != '0' && c != '1') throw fail("malformed y_src");
      inst.y_src.push_back(c == '1');
    }
    inst.topic_ids = parse_ids(fields[4]);
    if (inst.m < 2 || inst.n <= inst.m || inst.ids.size() != inst.n || inst.y_src.size() != inst.m ||
        inst.ids[inst.m - 1] != special::kEoq || inst.ids[inst.n - 1] != special::kEos) {
      throw fail("inconsistent instance layout");
    }
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace rplm
