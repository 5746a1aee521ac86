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

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rplm/commands.hpp"

namespace {

// Remaining `--key value` / `--key=value` arguments become config overrides.
void apply_overrides(rplm::RunConfig& cfg, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& arg = extras[i];
    if (arg.rfind("--", 0) != 0 || arg.size() == 2) {
      throw rplm::ConfigError("unexpected argument '" + arg + "'");
    }
    std::string key = arg.substr(2);
    std::string value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key.resize(eq);
    } else {
      if (i + 1 >= extras.size()) throw rplm::ConfigError("missing value for '" + arg + "'");
      value = extras[++i];
    }
    cfg.set(key, value);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rplm: query-aware response language model"};
  app.require_subcommand(1, 1);
  app.allow_extras();

  std::string config_path;
  std::uint64_t seed = 0;
  std::string checkpoint;
  for (const char* name : {"preprocess", "train", "generate", "eval", "repl"}) {
    auto* sub = app.add_subcommand(name);
    sub->allow_extras();
    sub->add_option("--config", config_path, "configuration file")->required();
    sub->add_option("--seed", seed, "global seed");
    sub->add_option("--checkpoint", checkpoint, "checkpoint path");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : rplm::kExitUsage;
  }

  auto* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  try {
    rplm::RunConfig cfg = rplm::load_config(config_path);
    auto extras = sub->remaining();
    const auto top = app.remaining();
    extras.insert(extras.end(), top.begin(), top.end());
    apply_overrides(cfg, extras);
    if (sub->count("--seed")) cfg.seed = seed;
    if (sub->count("--checkpoint")) cfg.checkpoint = checkpoint;
    cfg.validate();

    if (command == "preprocess") {
      rplm::cmd_preprocess(cfg);
    } else if (command == "train") {
      rplm::cmd_train(cfg);
    } else if (command == "generate") {
      rplm::cmd_generate(cfg);
    } else if (command == "eval") {
      rplm::cmd_eval(cfg);
    } else {
      rplm::cmd_repl(cfg, std::cin, std::cout);
    }
  } catch (const rplm::Error& e) {
    std::cerr << "rplm " << command << ": " << e.what() << "\n";
    return rplm::exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "rplm " << command << ": " << e.what() << "\n";
    return rplm::kExitData;
  }
  return rplm::kExitOk;
}
