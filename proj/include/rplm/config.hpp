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

// Run configuration: `key = value` lines with `#` comments, every key
// overridable from the command line.

#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rplm/decoder.hpp"
#include "rplm/errors.hpp"
#include "rplm/model.hpp"
#include "rplm/optim.hpp"
#include "rplm/pipeline.hpp"

namespace rplm {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;
  PipelineConfig pipeline;
  std::uint64_t seed = 1;

  std::string train_corpus, valid_corpus, stopwords;
  std::string vocab = "vocab.txt";
  std::string train_store = "train.instances";
  std::string valid_store = "valid.instances";
  std::string stats = "stats.tsv";
  std::string checkpoint = "model.ckpt";
  std::string metrics_log = "metrics.tsv";
  std::string generate_input, generate_output = "generated.tsv";
  std::string eval_input, eval_output = "eval.tsv";
  bool resume = false;
  bool show_salience = true;

  /// Applies one key. Throws ConfigError for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);

  /// Range checks of every section.
  void validate() const {
    try {
      model.validate();
      train.validate();
      decode.validate();
      pipeline.validate();
    } catch (const ParameterError& e) {
      throw ConfigError(e.what());
    }
  }

  static std::vector<std::string> keys();
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || v.empty()) {
    throw ConfigError("config key '" + key + "': invalid number '" + v + "'");
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': invalid number '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto size = [&](const char* name, auto member) {
      t[name] = [member](RunConfig& c, const std::string& k, const std::string& v) {
        member(c) = parse_number<std::size_t>(k, v);
      };
    };
    auto real = [&](const char* name, auto member) {
      t[name] = [member](RunConfig& c, const std::string& k, const std::string& v) {
        member(c) = parse_double(k, v);
      };
    };
    auto flag = [&](const char* name, auto member) {
      t[name] = [member](RunConfig& c, const std::string& k, const std::string& v) {
        member(c) = parse_bool(k, v);
      };
    };
    auto path = [&](const char* name, auto member) {
      t[name] = [member](RunConfig& c, const std::string&, const std::string& v) { member(c) = v; };
    };

    size("layers", [](RunConfig& c) -> auto& { return c.model.layers; });
    size("hidden", [](RunConfig& c) -> auto& { return c.model.hidden; });
    size("heads", [](RunConfig& c) -> auto& { return c.model.heads; });
    size("ff_size", [](RunConfig& c) -> auto& { return c.model.ff_size; });
    size("max_seq_len", [](RunConfig& c) -> auto& { return c.model.max_seq_len; });
    real("gamma1", [](RunConfig& c) -> auto& { return c.model.gamma1; });
    real("gamma2", [](RunConfig& c) -> auto& { return c.model.gamma2; });
    real("dropout", [](RunConfig& c) -> auto& { return c.model.dropout; });
    flag("ssa_include_eoq", [](RunConfig& c) -> auto& { return c.model.ssa_include_eoq; });

    real("lr", [](RunConfig& c) -> auto& { return c.train.lr; });
    size("warmup_steps", [](RunConfig& c) -> auto& { return c.train.warmup_steps; });
    flag("lr_decay", [](RunConfig& c) -> auto& { return c.train.lr_decay; });
    size("batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; });
    size("max_epochs", [](RunConfig& c) -> auto& { return c.train.max_epochs; });
    size("max_steps", [](RunConfig& c) -> auto& { return c.train.max_steps; });
    size("eval_interval", [](RunConfig& c) -> auto& { return c.train.eval_interval; });
    real("beta1", [](RunConfig& c) -> auto& { return c.train.beta1; });
    real("beta2", [](RunConfig& c) -> auto& { return c.train.beta2; });
    real("adam_eps", [](RunConfig& c) -> auto& { return c.train.adam_eps; });
    real("clip_norm", [](RunConfig& c) -> auto& { return c.train.clip_norm; });

    t["strategy"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      try {
        c.decode.strategy = parse_strategy(v);
      } catch (const ParameterError&) {
        throw ConfigError("config key '" + k + "': unknown strategy '" + v + "'");
      }
    };
    size("top_k", [](RunConfig& c) -> auto& { return c.decode.top_k; });
    size("beam_width", [](RunConfig& c) -> auto& { return c.decode.beam_width; });
    size("max_response_len", [](RunConfig& c) -> auto& { return c.decode.max_response_len; });

    size("max_vocab", [](RunConfig& c) -> auto& { return c.pipeline.max_vocab; });
    real("keyword_fraction", [](RunConfig& c) -> auto& { return c.pipeline.keyword_fraction; });
    real("select_fraction", [](RunConfig& c) -> auto& { return c.pipeline.select_fraction; });
    real("topic_fraction", [](RunConfig& c) -> auto& { return c.pipeline.topic_fraction; });

    t["seed"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.seed = parse_number<std::uint64_t>(k, v);
    };

    path("train_corpus", [](RunConfig& c) -> auto& { return c.train_corpus; });
    path("valid_corpus", [](RunConfig& c) -> auto& { return c.valid_corpus; });
    path("stopwords", [](RunConfig& c) -> auto& { return c.stopwords; });
    path("vocab", [](RunConfig& c) -> auto& { return c.vocab; });
    path("train_store", [](RunConfig& c) -> auto& { return c.train_store; });
    path("valid_store", [](RunConfig& c) -> auto& { return c.valid_store; });
    path("stats", [](RunConfig& c) -> auto& { return c.stats; });
    path("checkpoint", [](RunConfig& c) -> auto& { return c.checkpoint; });
    path("metrics_log", [](RunConfig& c) -> auto& { return c.metrics_log; });
    path("generate_input", [](RunConfig& c) -> auto& { return c.generate_input; });
    path("generate_output", [](RunConfig& c) -> auto& { return c.generate_output; });
    path("eval_input", [](RunConfig& c) -> auto& { return c.eval_input; });
    path("eval_output", [](RunConfig& c) -> auto& { return c.eval_output; });
    flag("resume", [](RunConfig& c) -> auto& { return c.resume; });
    flag("show_salience", [](RunConfig& c) -> auto& { return c.show_salience; });
    return t;
  }();
  return table;
}

}  // namespace config_detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  std::string k = key;
  std::replace(k.begin(), k.end(), '-', '_');
  const auto& table = config_detail::setters();
  auto it = table.find(k);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(*this, k, value);
}

inline std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : config_detail::setters()) out.push_back(k);
  return out;
}

/// Parses `key = value` lines. Blank lines and text after `#` are ignored.
inline RunConfig parse_config(std::istream& is, RunConfig base = {}) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = config_detail::trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = config_detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = config_detail::trim(std::string_view(body).substr(eq + 1));
    try {
      base.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in);
}

}  // namespace rplm
