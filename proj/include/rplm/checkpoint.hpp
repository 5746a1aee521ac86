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

// Checkpoint file, little-endian:
//
//   "RPLM" | version u32 | header length u32 | header (UTF-8 key=value lines)
//   then per tensor: name length u16 | name | rank u8 | dims u32 x rank |
//                    float32 data
//
// The header carries the full model and training configuration, the seed,
// the step counter and the tensor count. Adam moments are stored as tensors
// named "adam.m.<param>" / "adam.v.<param>".

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "rplm/errors.hpp"
#include "rplm/model.hpp"
#include "rplm/optim.hpp"

namespace rplm {

inline constexpr char kCheckpointMagic[4] = {'R', 'P', 'L', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt {

template <typename U>
void put(std::ostream& os, U value) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>(value >> (8 * i));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U get(std::istream& is, const std::string& what) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
    throw FormatError("checkpoint truncated while reading " + what);
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Record {
  std::string name;
  Shape dims;
  std::vector<float> data;
};

inline void write_record(std::ostream& os, const std::string& name, const Shape& dims,
                         std::span<const float> data) {
  put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(dims.size()));
  for (auto d : dims) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  for (float f : data) put<std::uint32_t>(os, std::bit_cast<std::uint32_t>(f));
}

inline Record read_record(std::istream& is, std::size_t index) {
  Record r;
  const std::string where = "tensor record " + std::to_string(index);
  const auto name_len = get<std::uint16_t>(is, where + " name length");
  r.name.resize(name_len);
  if (!is.read(r.name.data(), name_len)) throw FormatError("checkpoint truncated in " + where);
  const auto rank = get<std::uint8_t>(is, "rank of '" + r.name + "'");
  for (std::size_t i = 0; i < rank; ++i) r.dims.push_back(get<std::uint32_t>(is, "dims of '" + r.name + "'"));
  r.data.resize(numel(r.dims));
  for (auto& f : r.data) f = std::bit_cast<float>(get<std::uint32_t>(is, "data of '" + r.name + "'"));
  return r;
}

}  // namespace ckpt

struct CheckpointHeader {
  ModelConfig model;
  TrainConfig train;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::size_t tensors = 0;
  bool has_optimizer = false;
};

inline std::string render_header(const CheckpointHeader& h) {
  using ckpt::fmt;
  std::ostringstream os;
  const auto& m = h.model;
  const auto& t = h.train;
  os << "model.layers=" << m.layers << '\n'
     << "model.hidden=" << m.hidden << '\n'
     << "model.heads=" << m.heads << '\n'
     << "model.ff_size=" << m.ff_size << '\n'
     << "model.vocab_size=" << m.vocab_size << '\n'
     << "model.max_seq_len=" << m.max_seq_len << '\n'
     << "model.gamma1=" << fmt(m.gamma1) << '\n'
     << "model.gamma2=" << fmt(m.gamma2) << '\n'
     << "model.dropout=" << fmt(m.dropout) << '\n'
     << "model.ssa_include_eoq=" << (m.ssa_include_eoq ? 1 : 0) << '\n'
     << "train.lr=" << fmt(t.lr) << '\n'
     << "train.warmup_steps=" << t.warmup_steps << '\n'
     << "train.lr_decay=" << (t.lr_decay ? 1 : 0) << '\n'
     << "train.batch_size=" << t.batch_size << '\n'
     << "train.max_epochs=" << t.max_epochs << '\n'
     << "train.max_steps=" << t.max_steps << '\n'
     << "train.eval_interval=" << t.eval_interval << '\n'
     << "train.beta1=" << fmt(t.beta1) << '\n'
     << "train.beta2=" << fmt(t.beta2) << '\n'
     << "train.adam_eps=" << fmt(t.adam_eps) << '\n'
     << "train.clip_norm=" << fmt(t.clip_norm) << '\n'
     << "train.seed=" << t.seed << '\n'
     << "seed=" << h.seed << '\n'
     << "step=" << h.step << '\n'
     << "optimizer=" << (h.has_optimizer ? 1 : 0) << '\n'
     << "tensors=" << h.tensors << '\n';
  return os.str();
}

inline CheckpointHeader parse_header(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint header line without '=': " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto take = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("checkpoint header missing key '" + key + "'");
    return it->second;
  };
  auto u64 = [&](const std::string& key) {
    const auto& s = take(key);
    try {
      std::size_t used = 0;
      auto v = std::stoull(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return static_cast<std::uint64_t>(v);
    } catch (const std::exception&) {
      throw FormatError("checkpoint header key '" + key + "' is not an integer: " + s);
    }
  };
  auto f64 = [&](const std::string& key) {
    const auto& s = take(key);
    try {
      std::size_t used = 0;
      double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw FormatError("checkpoint header key '" + key + "' is not a number: " + s);
    }
  };
  CheckpointHeader h;
  auto& m = h.model;
  m.layers = u64("model.layers");
  m.hidden = u64("model.hidden");
  m.heads = u64("model.heads");
  m.ff_size = u64("model.ff_size");
  m.vocab_size = u64("model.vocab_size");
  m.max_seq_len = u64("model.max_seq_len");
  m.gamma1 = f64("model.gamma1");
  m.gamma2 = f64("model.gamma2");
  m.dropout = f64("model.dropout");
  m.ssa_include_eoq = u64("model.ssa_include_eoq") != 0;
  auto& t = h.train;
  t.lr = f64("train.lr");
  t.warmup_steps = u64("train.warmup_steps");
  t.lr_decay = u64("train.lr_decay") != 0;
  t.batch_size = u64("train.batch_size");
  t.max_epochs = u64("train.max_epochs");
  t.max_steps = u64("train.max_steps");
  t.eval_interval = u64("train.eval_interval");
  t.beta1 = f64("train.beta1");
  t.beta2 = f64("train.beta2");
  t.adam_eps = f64("train.adam_eps");
  t.clip_norm = f64("train.clip_norm");
  t.seed = u64("train.seed");
  h.seed = u64("seed");
  h.step = u64("step");
  h.has_optimizer = u64("optimizer") != 0;
  h.tensors = u64("tensors");
  try {
    m.validate();
  } catch (const ParameterError& e) {
    throw FormatError(std::string("checkpoint header declares an invalid model: ") + e.what());
  }
  return h;
}

inline void write_checkpoint(std::ostream& os, const Model<float>& model,
                             const Adam<float>* optimizer, const TrainConfig& train,
                             std::uint64_t seed) {
  const auto params = model.parameters();
  CheckpointHeader h;
  h.model = model.config();
  h.train = train;
  h.seed = seed;
  h.step = optimizer ? optimizer->step_count() : 0;
  h.has_optimizer = optimizer && optimizer->first_moments().size() == params.size();
  h.tensors = params.size() * (h.has_optimizer ? 3 : 1);
  const std::string header = render_header(h);
  os.write(kCheckpointMagic, 4);
  ckpt::put<std::uint32_t>(os, kCheckpointVersion);
  ckpt::put<std::uint32_t>(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& p : params) ckpt::write_record(os, p.name, p.tensor.dims(), p.tensor.data());
  if (h.has_optimizer) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      ckpt::write_record(os, "adam.m." + params[i].name, params[i].tensor.dims(),
                         optimizer->first_moments()[i]);
      ckpt::write_record(os, "adam.v." + params[i].name, params[i].tensor.dims(),
                         optimizer->second_moments()[i]);
    }
  }
}

inline void save_checkpoint(const std::string& path, const Model<float>& model,
                            const Adam<float>* optimizer, const TrainConfig& train,
                            std::uint64_t seed) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path);
  write_checkpoint(os, model, optimizer, train, seed);
  if (!os) throw DataError("failed writing checkpoint: " + path);
}

struct LoadedCheckpoint {
  CheckpointHeader header;
  Model<float> model;
  Adam<float> optimizer;
};

/// Reads a checkpoint; the model is built from the header's configuration.
/// With `expected`, every tensor must also match the shapes that
/// configuration implies. Nothing is returned unless the file is complete.
inline LoadedCheckpoint read_checkpoint(std::istream& is, const ModelConfig* expected = nullptr) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw FormatError("not a checkpoint: bad magic");
  }
  const auto version = ckpt::get<std::uint32_t>(is, "format version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = ckpt::get<std::uint32_t>(is, "header length");
  std::string text(header_len, '\0');
  if (!is.read(text.data(), header_len)) throw FormatError("checkpoint truncated in header");
  const CheckpointHeader header = parse_header(text);

  LoadedCheckpoint out{header, Model<float>(header.model, 0),
                       Adam<float>(header.train.beta1, header.train.beta2, header.train.adam_eps)};
  const auto params = out.model.parameters();
  std::map<std::string, std::pair<Shape, std::span<float>>> slots;
  std::vector<Shape> expected_dims;
  if (expected) {
    for (const auto& p : Model<float>(*expected, 0).parameters()) expected_dims.push_back(p.tensor.dims());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<float> t = params[i].tensor;
    slots[params[i].name] = {t.dims(), t.mutable_data()};
  }
  if (header.has_optimizer) {
    out.optimizer.ensure_state(params);
    for (std::size_t i = 0; i < params.size(); ++i) {
      slots["adam.m." + params[i].name] = {params[i].tensor.dims(), out.optimizer.first_moments()[i]};
      slots["adam.v." + params[i].name] = {params[i].tensor.dims(), out.optimizer.second_moments()[i]};
    }
  }
  if (header.tensors != slots.size()) {
    throw FormatError("checkpoint declares " + std::to_string(header.tensors) +
                      " tensors but its configuration implies " + std::to_string(slots.size()));
  }
  std::map<std::string, bool> seen;
  for (std::size_t i = 0; i < header.tensors; ++i) {
    auto rec = ckpt::read_record(is, i);
    auto it = slots.find(rec.name);
    if (it == slots.end()) throw FormatError("unexpected tensor record '" + rec.name + "'");
    if (seen[rec.name]) throw FormatError("duplicate tensor record '" + rec.name + "'");
    seen[rec.name] = true;
    if (rec.dims != it->second.first) {
      throw FormatError("tensor record '" + rec.name + "' has shape " + shape_str(rec.dims) +
                        " but the header configuration implies " + shape_str(it->second.first));
    }
    std::copy(rec.data.begin(), rec.data.end(), it->second.second.begin());
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after tensor table");
  if (expected) {
    if (expected_dims.size() != params.size()) {
      throw FormatError("checkpoint has " + std::to_string(params.size()) +
                        " parameter tensors, requested configuration expects " +
                        std::to_string(expected_dims.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].tensor.dims() != expected_dims[i]) {
        throw FormatError("tensor record '" + params[i].name + "' has shape " +
                          shape_str(params[i].tensor.dims()) + " but the requested configuration expects " +
                          shape_str(expected_dims[i]));
      }
    }
  }
  out.optimizer.set_step_count(header.step);
  return out;
}

inline LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  return read_checkpoint(is, expected);
}

}  // namespace rplm
