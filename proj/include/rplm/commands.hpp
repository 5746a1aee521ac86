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

// The preprocess / train / generate / eval / repl subcommands.

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "rplm/checkpoint.hpp"
#include "rplm/config.hpp"
#include "rplm/corpus.hpp"
#include "rplm/decoder.hpp"
#include "rplm/errors.hpp"
#include "rplm/keywords.hpp"
#include "rplm/metrics.hpp"
#include "rplm/pipeline.hpp"
#include "rplm/trainer.hpp"

namespace rplm {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

/// Maps a library error onto the process exit code.
inline int exit_code_for(const Error& e) {
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParameterError*>(&e)) {
    return kExitUsage;
  }
  return kExitData;
}

namespace cmd_detail {

inline std::ifstream open_input(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("no ") + what + " configured");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(std::string("cannot open ") + what + " '" + path + "'");
  return in;
}

inline std::ofstream open_output(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("no ") + what + " configured");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError(std::string("cannot create ") + what + " '" + path + "'");
  return out;
}

inline std::vector<DialoguePair> read_corpus_file(const std::string& path, const char* what) {
  auto in = open_input(path, what);
  try {
    return read_corpus(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline Stopwords read_stopword_file(const std::string& path) {
  if (path.empty()) return {};
  auto in = open_input(path, "stopword file");
  return read_stopwords(in);
}

inline Vocab read_vocab_file(const std::string& path) {
  auto in = open_input(path, "vocab file");
  return Vocab::read(in);
}

inline std::vector<TrainingInstance> read_store(const std::string& path, std::size_t vocab_size) {
  auto in = open_input(path, "instance store");
  return read_instances(in, vocab_size);
}

/// Model configuration from the run config, sized to the vocabulary.
inline ModelConfig model_config(const RunConfig& cfg, const Vocab& vocab) {
  ModelConfig m = cfg.model;
  m.vocab_size = vocab.size();
  try {
    m.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  return m;
}

inline LoadedCheckpoint load_for_inference(const RunConfig& cfg, const Vocab& vocab) {
  if (cfg.checkpoint.empty()) throw ConfigError("no checkpoint configured");
  if (!std::filesystem::exists(cfg.checkpoint)) {
    throw ConfigError("cannot open checkpoint '" + cfg.checkpoint + "'");
  }
  const ModelConfig expected = model_config(cfg, vocab);
  return load_checkpoint(cfg.checkpoint, &expected);
}

inline DecodeConfig decode_config(const RunConfig& cfg) {
  DecodeConfig d = cfg.decode;
  d.seed = cfg.seed;
  return d;
}

/// Tokens of a possibly empty text.
inline std::vector<std::string> tokens_of(std::string_view text) {
  for (std::size_t pos = 0; pos < text.size();) {
    if (!utf8::is_space(utf8::decode(text, pos))) return tokenize(text);
  }
  return {};
}

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) return out;
    start = tab + 1;
  }
}

inline std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace cmd_detail

// ---------------------------------------------------------------------------

/// Vocabulary, instance stores and pipeline statistics from the corpus files.
inline PipelineStats cmd_preprocess(const RunConfig& cfg, std::ostream& log = std::cerr) {
  using namespace cmd_detail;
  cfg.validate();
  auto train_pairs = read_corpus_file(cfg.train_corpus, "training corpus");
  std::vector<DialoguePair> valid_pairs;
  if (!cfg.valid_corpus.empty()) valid_pairs = read_corpus_file(cfg.valid_corpus, "validation corpus");
  if (train_pairs.empty()) throw EmptyInputError("training corpus has no pairs");
  const Stopwords stopwords = read_stopword_file(cfg.stopwords);

  PipelineConfig pc = cfg.pipeline;
  pc.max_seq_len = cfg.model.max_seq_len;
  pc.seed = cfg.seed;
  const Vocab vocab = build_vocab(train_pairs, pc.max_vocab);
  const KeywordModel km = fit_keyword_model(train_pairs, stopwords, pc.keyword_fraction);
  PipelineStats stats;
  const auto train_set = build_instances(train_pairs, vocab, km, pc, &stats);
  PipelineStats valid_stats;
  const auto valid_set = build_instances(valid_pairs, vocab, km, pc, &valid_stats);

  auto vocab_out = open_output(cfg.vocab, "vocab file");
  vocab.write(vocab_out);
  auto train_out = open_output(cfg.train_store, "training store");
  write_instances(train_out, train_set);
  if (!cfg.valid_corpus.empty()) {
    auto valid_out = open_output(cfg.valid_store, "validation store");
    write_instances(valid_out, valid_set);
  }
  auto stats_out = open_output(cfg.stats, "statistics file");
  stats_out << format_stats(stats) << "vocab_size\t" << vocab.size() << "\n";
  if (!cfg.valid_corpus.empty()) stats_out << "valid_instances\t" << valid_set.size() << "\n";
  log << "preprocess: " << stats.pairs << " pairs, " << stats.groups << " groups, "
      << stats.instances << " instances, vocab " << vocab.size() << "\n";
  return stats;
}

/// Trains from the instance stores and writes the best checkpoint plus the
/// validation log. With `resume`, training continues from the configured
/// checkpoint, optimizer state and step counter included.
inline TrainResult cmd_train(const RunConfig& cfg, std::ostream& log = std::cerr) {
  using namespace cmd_detail;
  cfg.validate();
  const Vocab vocab = read_vocab_file(cfg.vocab);
  const ModelConfig mc = model_config(cfg, vocab);
  const auto train_set = read_store(cfg.train_store, vocab.size());
  if (train_set.empty()) throw EmptyInputError("training store has no instances");
  std::vector<TrainingInstance> valid_set;
  if (!cfg.valid_store.empty() && std::filesystem::exists(cfg.valid_store)) {
    valid_set = read_store(cfg.valid_store, vocab.size());
  }
  if (valid_set.empty()) valid_set = train_set;

  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  Model<float> model(mc, cfg.seed);
  Adam<float> optimizer(tc);
  if (cfg.resume) {
    auto loaded = load_for_inference(cfg, vocab);
    model.copy_from(loaded.model);
    optimizer = loaded.optimizer;
    log << "train: resuming at step " << optimizer.step_count() << "\n";
  }
  const std::size_t start_step = optimizer.step_count();
  auto metrics = cfg.resume ? std::ofstream(cfg.metrics_log, std::ios::binary | std::ios::app)
                            : open_output(cfg.metrics_log, "metrics log");
  if (!metrics) throw ConfigError("cannot open metrics log '" + cfg.metrics_log + "'");

  auto result = train(model, optimizer, train_set, valid_set, tc);
  for (const auto& rec : result.log) metrics << format_metrics(rec) << '\n';
  if (result.best) {
    result.best->restore(model, optimizer);
    save_checkpoint(cfg.checkpoint, model, &optimizer, tc, cfg.seed);
  }
  log << "train: steps " << start_step << " -> " << result.steps << ", best validation loss "
      << result.best_valid << "\n";
  if (result.diverged) {
    throw NumericError("training diverged at step " + std::to_string(result.steps + 1) +
                       (result.best ? "; last good checkpoint kept" : ""));
  }
  return result;
}

/// One line per query: `query<TAB>response<TAB>logprob<TAB>copied<TAB>repetitive`.
inline void cmd_generate(const RunConfig& cfg, std::ostream& log = std::cerr) {
  using namespace cmd_detail;
  cfg.validate();
  const Vocab vocab = read_vocab_file(cfg.vocab);
  const auto loaded = load_for_inference(cfg, vocab);
  auto in = open_input(cfg.generate_input, "generation input");
  std::vector<std::string> queries;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    queries.push_back(line);
  }
  auto out = open_output(cfg.generate_output, "generation output");
  DecodeConfig dc = decode_config(cfg);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    DecodeResult r;
    dc.seed = cfg.seed * 1000003ULL + i;
    try {
      r = generate(loaded.model, queries[i], dc, vocab);
    } catch (const EmptyInputError& e) {
      throw DataError("generation input line " + std::to_string(i + 1) + ": " + e.what());
    } catch (const LengthError& e) {
      throw DataError("generation input line " + std::to_string(i + 1) + ": " + e.what());
    }
    out << join_tokens(tokenize(queries[i])) << '\t' << join_tokens(r.tokens) << '\t'
        << fixed(r.log_prob) << '\t' << (r.copied ? 1 : 0) << '\t' << (r.repetitive ? 1 : 0) << '\n';
  }
  log << "generate: " << queries.size() << " responses (" << strategy_name(dc.strategy) << ")\n";
}

struct EvalReport {
  double bleu2 = 0, bleu3 = 0, bleu4 = 0;
  double dist1 = 0, dist2 = 0;
  HitRates hit;
  double copy_rate = 0, repetition_rate = 0;
};

/// Reads `query<TAB>prediction<TAB>reference...` lines and scores them.
inline EvalReport evaluate_lines(std::istream& in, const Stopwords& stopwords,
                                 double keyword_fraction) {
  using namespace cmd_detail;
  std::vector<EvalRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto fields = split_tabs(line);
    if (fields.size() < 3) {
      throw DataError("eval line " + std::to_string(lineno) +
                      ": expected query, prediction and at least one reference");
    }
    EvalRecord r;
    try {
      r.query = tokens_of(fields[0]);
      r.prediction = tokens_of(fields[1]);
      for (std::size_t f = 2; f < fields.size(); ++f) r.references.push_back(tokens_of(fields[f]));
    } catch (const Error& e) {
      throw DataError("eval line " + std::to_string(lineno) + ": " + e.what());
    }
    records.push_back(std::move(r));
  }
  if (records.empty()) throw EmptyInputError("eval input has no records");

  DocumentFrequency df;
  for (const auto& r : records) {
    df.add(r.query);
    df.add(r.prediction);
    for (const auto& ref : r.references) df.add(ref);
  }
  const TfidfExtractor extractor(df, stopwords, keyword_fraction);
  std::vector<Tokens> predictions;
  std::vector<std::vector<Tokens>> references;
  std::size_t copies = 0, loops = 0;
  for (auto& r : records) {
    r.query_keywords = evaluation_keywords(r.query, stopwords, extractor);
    r.response_keywords = evaluation_keywords(r.prediction, stopwords, extractor);
    for (const auto& ref : r.references) {
      auto k = evaluation_keywords(ref, stopwords, extractor);
      r.reference_keywords.insert(k.begin(), k.end());
    }
    predictions.push_back(r.prediction);
    references.push_back(r.references);
    copies += detect_copy(r.query, r.prediction);
    loops += detect_repetition(r.prediction);
  }
  auto undefined_as_nan = [](auto&& f) {
    try {
      return f();
    } catch (const UndefinedMetricError&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };
  EvalReport rep;
  rep.bleu2 = bleu_n(predictions, references, 2);
  rep.bleu3 = bleu_n(predictions, references, 3);
  rep.bleu4 = bleu_n(predictions, references, 4);
  rep.dist1 = undefined_as_nan([&] { return dist_n(predictions, 1); });
  rep.dist2 = undefined_as_nan([&] { return dist_n(predictions, 2); });
  rep.hit = corpus_hit(records);
  const double inv = 1.0 / static_cast<double>(records.size());
  rep.copy_rate = static_cast<double>(copies) * inv;
  rep.repetition_rate = static_cast<double>(loops) * inv;
  return rep;
}

inline std::string format_report(const EvalReport& r) {
  using cmd_detail::fixed;
  std::string out;
  const std::pair<const char*, double> rows[] = {
      {"bleu2", r.bleu2},         {"bleu3", r.bleu3},           {"bleu4", r.bleu4},
      {"dist1", r.dist1},         {"dist2", r.dist2},           {"hit_q", r.hit.query},
      {"hit_r", r.hit.response},  {"copy_rate", r.copy_rate},   {"repetition_rate", r.repetition_rate}};
  for (const auto& [name, v] : rows) out += std::string(name) + '\t' + fixed(v) + '\n';
  return out;
}

inline EvalReport cmd_eval(const RunConfig& cfg, std::ostream& log = std::cerr) {
  using namespace cmd_detail;
  cfg.validate();
  const Stopwords stopwords = read_stopword_file(cfg.stopwords);
  auto in = open_input(cfg.eval_input, "eval input");
  const auto report = evaluate_lines(in, stopwords, cfg.pipeline.keyword_fraction);
  auto out = open_output(cfg.eval_output, "eval report");
  out << format_report(report);
  log << format_report(report);
  return report;
}

/// Interactive loop: one query per input line, answered with the decoded
/// response and, when enabled, the per-character salience of the query.
inline void cmd_repl(const RunConfig& cfg, std::istream& in, std::ostream& out) {
  using namespace cmd_detail;
  cfg.validate();
  const Vocab vocab = read_vocab_file(cfg.vocab);
  const auto loaded = load_for_inference(cfg, vocab);
  DecodeConfig dc = decode_config(cfg);
  std::string line;
  std::size_t turn = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tokens = tokens_of(line);
    if (tokens.empty()) continue;
    dc.seed = cfg.seed * 1000003ULL + turn++;
    DecodeResult r;
    try {
      r = generate(loaded.model, line, dc, vocab);
    } catch (const LengthError& e) {
      out << "! " << e.what() << '\n';
      continue;
    }
    out << join_tokens(r.tokens) << '\n';
    if (cfg.show_salience && !r.ids.empty()) {
      const auto s = salience_for(loaded.model, vocab.encode(tokens), r.ids);
      out << "salience";
      for (std::size_t i = 0; i < tokens.size(); ++i) out << ' ' << tokens[i] << ':' << fixed(s[i], 3);
      out << '\n';
    }
    out.flush();
  }
}

}  // namespace rplm
