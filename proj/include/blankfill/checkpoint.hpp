// Copyright (c) 2026, The blankfill Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file layout (all integers little-endian):
//
//   blankfill-checkpoint 1\n
//   key=value\n ...            model config, tensor count, caller metadata
//   \n                         end of header
//   per tensor:
//     u32 name length, name bytes, u32 rank, u64 dim[rank],
//     f32 payload[product(dims)]

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "blankfill/errors.hpp"
#include "blankfill/model.hpp"

namespace blankfill {

inline constexpr std::string_view kCheckpointMagic = "blankfill-checkpoint 1";

using Metadata = std::map<std::string, std::string>;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

inline Metadata config_to_metadata(const ModelConfig& c) {
  auto fmt = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  return {
      {"model.n_layers", std::to_string(c.n_layers)},
      {"model.hidden_size", std::to_string(c.hidden_size)},
      {"model.n_heads", std::to_string(c.n_heads)},
      {"model.ffn_size", std::to_string(c.ffn_size)},
      {"model.vocab_size", std::to_string(c.vocab_size)},
      {"model.max_pos1", std::to_string(c.max_pos1)},
      {"model.max_pos2", std::to_string(c.max_pos2)},
      {"model.dropout", fmt(c.dropout)},
      {"model.attention_dropout", fmt(c.attention_dropout)},
      {"model.use_pos2", c.use_pos2 ? "true" : "false"},
      {"model.tie_output", c.tie_output ? "true" : "false"},
  };
}

inline ModelConfig config_from_metadata(const Metadata& m) {
  auto get = [&](const std::string& key) -> const std::string& {
    const auto it = m.find(key);
    if (it == m.end()) throw CheckpointHeaderError("checkpoint header lacks " + key);
    return it->second;
  };
  auto as_size = [&](const std::string& key) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(get(key), &used);
      if (used != get(key).size()) throw std::invalid_argument(key);
      return static_cast<std::size_t>(v);
    } catch (const std::logic_error&) {
      throw CheckpointHeaderError("checkpoint header: bad integer for " + key);
    }
  };
  auto as_double = [&](const std::string& key) {
    try {
      return std::stod(get(key));
    } catch (const std::logic_error&) {
      throw CheckpointHeaderError("checkpoint header: bad number for " + key);
    }
  };
  auto as_bool = [&](const std::string& key) {
    const auto& v = get(key);
    if (v == "true") return true;
    if (v == "false") return false;
    throw CheckpointHeaderError("checkpoint header: bad boolean for " + key);
  };
  ModelConfig c;
  c.n_layers = as_size("model.n_layers");
  c.hidden_size = as_size("model.hidden_size");
  c.n_heads = as_size("model.n_heads");
  c.ffn_size = as_size("model.ffn_size");
  c.vocab_size = as_size("model.vocab_size");
  c.max_pos1 = as_size("model.max_pos1");
  c.max_pos2 = as_size("model.max_pos2");
  c.dropout = as_double("model.dropout");
  c.attention_dropout = as_double("model.attention_dropout");
  c.use_pos2 = as_bool("model.use_pos2");
  c.tie_output = as_bool("model.tie_output");
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw CheckpointHeaderError(std::string("checkpoint header: ") + e.what());
  }
  return c;
}

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <typename U>
  U get_le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointTruncatedError("checkpoint truncated");
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Serializes header and arrays to the on-disk byte layout.
inline std::string encode_checkpoint(const Metadata& header, const std::vector<NamedArray>& arrays) {
  std::string out(kCheckpointMagic);
  out.push_back('\n');
  Metadata full = header;
  full["tensors"] = std::to_string(arrays.size());
  for (const auto& [k, v] : full) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ContractError("checkpoint metadata key/value contains a separator: " + k);
    }
    out += k + "=" + v + "\n";
  }
  out.push_back('\n');
  for (const auto& a : arrays) {
    if (shape_numel(a.shape) != a.values.size()) throw ContractError("checkpoint array " + a.name + " shape mismatch");
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
    for (const auto d : a.shape) detail::put_le<std::uint64_t>(out, d);
    for (const float f : a.values) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline std::pair<Metadata, std::vector<NamedArray>> decode_checkpoint(std::string bytes) {
  const auto magic_end = bytes.find('\n');
  if (magic_end == std::string::npos || bytes.compare(0, magic_end, kCheckpointMagic) != 0) {
    throw CheckpointHeaderError("not a blankfill checkpoint (bad magic line)");
  }
  const auto header_end = bytes.find("\n\n", magic_end);
  if (header_end == std::string::npos) throw CheckpointTruncatedError("checkpoint header is unterminated");
  Metadata header;
  std::istringstream lines(bytes.substr(magic_end + 1, header_end - magic_end));
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) throw CheckpointHeaderError("malformed header line '" + line + "'");
    header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count_it = header.find("tensors");
  if (count_it == header.end()) throw CheckpointHeaderError("checkpoint header lacks tensor count");
  std::size_t count = 0;
  try {
    count = std::stoull(count_it->second);
  } catch (const std::logic_error&) {
    throw CheckpointHeaderError("checkpoint header: bad tensor count");
  }

  detail::ByteReader in(bytes.substr(header_end + 2));
  std::vector<NamedArray> arrays;
  for (std::size_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = in.get_bytes(in.get_le<std::uint32_t>());
    const auto rank = in.get_le<std::uint32_t>();
    if (rank > 8) throw CheckpointHeaderError("tensor " + a.name + " has implausible rank");
    for (std::uint32_t r = 0; r < rank; ++r) a.shape.push_back(static_cast<std::size_t>(in.get_le<std::uint64_t>()));
    const std::size_t n = shape_numel(a.shape);
    if (n > in.remaining() / 4) throw CheckpointTruncatedError("checkpoint truncated in tensor " + a.name);
    a.values.resize(n);
    for (auto& f : a.values) f = std::bit_cast<float>(in.get_le<std::uint32_t>());
    arrays.push_back(std::move(a));
  }
  if (in.remaining() != 0) throw CheckpointHeaderError("trailing bytes after last tensor");
  return {std::move(header), std::move(arrays)};
}

inline void write_file_atomically(const std::filesystem::path& path, const std::string& bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename T>
std::vector<NamedArray> to_arrays(const Parameters<T>& params, std::string_view prefix = "") {
  std::vector<NamedArray> out;
  for (const auto& [name, t] : params.entries()) {
    NamedArray a{std::string(prefix) + name, t.shape(), {}};
    a.values.reserve(t.numel());
    for (const T v : t.data()) a.values.push_back(static_cast<float>(v));
    out.push_back(std::move(a));
  }
  return out;
}

/// Model parameters plus whatever else the caller stores alongside them
/// (optimizer moments, training counters).
template <typename T>
struct LoadedCheckpoint {
  GlmModel<T> model;
  Metadata metadata;             // non-model header keys
  std::vector<NamedArray> extra; // arrays that are not model parameters
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const GlmModel<T>& model, const Metadata& metadata = {},
                     const std::vector<NamedArray>& extra = {}) {
  Metadata header = config_to_metadata(model.config());
  for (const auto& [k, v] : metadata) {
    if (k.starts_with("model.") || k == "tensors") throw ContractError("reserved checkpoint key " + k);
    header[k] = v;
  }
  auto arrays = to_arrays(model.params());
  arrays.insert(arrays.end(), extra.begin(), extra.end());
  write_file_atomically(path, encode_checkpoint(header, arrays));
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  auto [header, arrays] = decode_checkpoint(read_file(path));
  const ModelConfig cfg = config_from_metadata(header);
  std::map<std::string, NamedArray*> by_name;
  for (auto& a : arrays) by_name[a.name] = &a;

  Parameters<T> params;
  for (const auto& [name, shape] : parameter_layout(cfg)) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointShapeError("checkpoint lacks parameter " + name);
    if (it->second->shape != shape) {
      throw CheckpointShapeError("parameter " + name + " has shape " + shape_str(it->second->shape) +
                                 ", config implies " + shape_str(shape));
    }
    std::vector<T> values(it->second->values.begin(), it->second->values.end());
    params.add(name, Tensor<T>(shape, std::move(values)));
    by_name.erase(it);
  }
  std::vector<NamedArray> extra;
  for (auto& a : arrays) {
    if (by_name.contains(a.name)) extra.push_back(std::move(a));
  }
  Metadata meta;
  for (const auto& [k, v] : header) {
    if (!k.starts_with("model.") && k != "tensors") meta[k] = v;
  }
  return LoadedCheckpoint<T>{GlmModel<T>(cfg, std::move(params)), std::move(meta), std::move(extra)};
}

}  // namespace blankfill
