#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "unlearn/error.hpp"
#include "unlearn/model.hpp"
#include "unlearn/tensor.hpp"

// "ULKT" container.
//
//   offset 0   magic "ULKT"
//          4   format version, u32 little-endian
//          8   manifest length in bytes, u64 little-endian
//         16   manifest: UTF-8 JSON {config, kind, tensors: [{name, offset, shape}]}
//              with tensors sorted by name and offsets relative to the data
//              section
//   16 + len   tensor data, f32 little-endian, concatenated in manifest order
//
// The same container holds model checkpoints (kind "model") and task vectors
// (kind "task_vector").

namespace unlearn {

inline constexpr std::string_view kCheckpointMagic = "ULKT";
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointHeaderSize = 16;

inline constexpr std::string_view kKindModel = "model";
inline constexpr std::string_view kKindTaskVector = "task_vector";

using Bytes = std::vector<std::uint8_t>;

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"n_layers", c.n_layers},     {"n_heads", c.n_heads},         {"d_model", c.d_model},
                        {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
                        {"init_seed", c.init_seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.init_seed = j.value("init_seed", 0u);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  return c;
}

namespace detail {

inline void put_u32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(Bytes& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_le(const std::uint8_t* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

// Encodes `params` under `kind`. Tensors are written in name order.
inline Bytes encode_container(const ParameterSet& params, std::string_view kind) {
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params.tensors) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += 4 * t.numel();
  }
  const nlohmann::json manifest{{"config", config_to_json(params.config)}, {"kind", kind}, {"tensors", tensors}};
  const std::string text = manifest.dump();

  Bytes out;
  out.reserve(kCheckpointHeaderSize + text.size() + offset);
  out.insert(out.end(), kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [_, t] : params.tensors) {
    for (float v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

struct DecodedContainer {
  std::string kind;
  ParameterSet params;
};

// Parses and validates a container: magic, version, manifest, exact size,
// and that names/shapes match the embedded config.
inline DecodedContainer decode_container(const Bytes& bytes) {
  if (bytes.size() < kCheckpointHeaderSize) throw FormatError("checkpoint truncated: header incomplete");
  if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
    throw FormatError("checkpoint magic mismatch: expected \"ULKT\"");
  }
  const auto version = static_cast<std::uint32_t>(detail::get_le(bytes.data() + 4, 4));
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t mlen = detail::get_le(bytes.data() + 8, 8);
  if (mlen > bytes.size() - kCheckpointHeaderSize) throw FormatError("checkpoint truncated: manifest incomplete");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + kCheckpointHeaderSize,
                                     bytes.begin() + static_cast<std::ptrdiff_t>(kCheckpointHeaderSize + mlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }

  DecodedContainer out;
  try {
    out.kind = manifest.at("kind").get<std::string>();
    out.params.config = config_from_json(manifest.at("config"));
    out.params.config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  if (out.kind != kKindModel && out.kind != kKindTaskVector) {
    throw FormatError("checkpoint manifest: unknown kind '" + out.kind + "'");
  }

  const auto expected = parameter_shapes(out.params.config);
  const std::size_t data_start = kCheckpointHeaderSize + mlen;
  const std::uint8_t* data = bytes.data() + data_start;
  const std::size_t data_len = bytes.size() - data_start;
  std::uint64_t next_offset = 0;
  std::string prev_name;
  try {
    const auto& entries = manifest.at("tensors");
    if (!entries.is_array() || entries.size() != expected.size()) {
      throw FormatError("checkpoint manifest: tensor list does not match config");
    }
    for (const auto& e : entries) {
      auto name = e.at("name").get<std::string>();
      auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      if (!prev_name.empty() && name <= prev_name) throw FormatError("checkpoint manifest: tensors not sorted by name");
      auto it = expected.find(name);
      if (it == expected.end()) throw FormatError("checkpoint manifest: unexpected tensor '" + name + "'");
      if (it->second != shape) {
        throw FormatError("checkpoint shape mismatch for '" + name + "': " + shape_str(shape) + " vs config " +
                          shape_str(it->second));
      }
      if (offset != next_offset) throw FormatError("checkpoint manifest: non-contiguous offset for '" + name + "'");
      const std::size_t n = shape_numel(shape);
      if (offset + 4 * n > data_len) throw FormatError("checkpoint truncated: data for '" + name + "' incomplete");
      std::vector<float> values(n);
      for (std::size_t i = 0; i < n; ++i) {
        values[i] = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(data + offset + 4 * i, 4)));
      }
      out.params.tensors.emplace(name, Tensor(std::move(shape), std::move(values)));
      next_offset = offset + 4 * n;
      prev_name = std::move(name);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  if (next_offset != data_len) throw FormatError("checkpoint has trailing bytes after tensor data");
  return out;
}

inline Bytes save_checkpoint(const ParameterSet& params) {
  params.validate();
  return encode_container(params, kKindModel);
}

inline ParameterSet load_checkpoint(const Bytes& bytes) {
  auto dec = decode_container(bytes);
  if (dec.kind != kKindModel) throw FormatError("expected a model checkpoint, found kind '" + dec.kind + "'");
  return std::move(dec.params);
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "' for reading");
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

inline ParameterSet load_checkpoint_file(const std::filesystem::path& path) { return load_checkpoint(read_file(path)); }

inline void save_checkpoint_file(const std::filesystem::path& path, const ParameterSet& params) {
  write_file(path, save_checkpoint(params));
}

}  // namespace unlearn
