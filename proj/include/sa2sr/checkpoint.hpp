// Copyright 2026 The sa2sr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Checkpoint container, little-endian:
//
//   "SA2S" | u16 version | u32 count
//   count x { u16 name_len | name (UTF-8) | u8 rank | rank x u32 dims | f32 values }
//   u32 meta_len | meta_len bytes of "key=value\n" lines, keys sorted
//
// Metadata carries the configuration echo and epoch counters.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>

#include "sa2sr/audio.hpp"
#include "sa2sr/error.hpp"
#include "sa2sr/history.hpp"
#include "sa2sr/params.hpp"

namespace sa2sr {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  ParameterStore params;
  std::map<std::string, std::string> metadata;

  bool has_record() const { return metadata.contains("record"); }
  EpochRecord record() const { return EpochRecord::from_json(nlohmann::json::parse(metadata.at("record"))); }
};

inline std::string encode_checkpoint(const ParameterStore& params, const std::map<std::string, std::string>& metadata) {
  std::string out = "SA2S";
  bytes::put<std::uint16_t>(out, kCheckpointVersion);
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, p] : params) {
    if (name.size() > 0xFFFF) throw Error("checkpoint: parameter name too long");
    bytes::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    bytes::put<std::uint8_t>(out, 2);
    bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rows()));
    bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.cols()));
    for (double v : p.value.values()) bytes::put<float>(out, static_cast<float>(v));
  }
  std::string meta;
  for (const auto& [k, v] : metadata) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw Error("checkpoint: metadata key/value may not contain '=' (key) or newlines");
    meta += k + "=" + v + "\n";
  }
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& data, const std::string& name = "checkpoint") {
  bytes::Reader r(data, name);
  if (r.get_string(4) != "SA2S") r.fail("bad magic");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>();
    const std::string pname = r.get_string(len);
    const auto rank = r.get<std::uint8_t>();
    if (rank < 1 || rank > 2) r.fail("unsupported rank " + std::to_string(rank) + " for " + pname);
    std::size_t rows = 1, cols = r.get<std::uint32_t>();
    if (rank == 2) {
      rows = cols;
      cols = r.get<std::uint32_t>();
    }
    Tensor t(rows, cols);
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = r.get<float>();
    if (ck.params.contains(pname)) r.fail("duplicate parameter " + pname);
    ck.params.add(pname, std::move(t));
  }
  const auto meta_len = r.get<std::uint32_t>();
  std::istringstream meta(r.get_string(meta_len));
  std::string line;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) r.fail("malformed metadata line");
    ck.metadata[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params, const EpochRecord* record,
                            std::map<std::string, std::string> metadata = {}) {
  if (record) {
    metadata["epoch"] = std::to_string(record->epoch);
    metadata["record"] = record->to_json().dump();
  }
  bytes::write_file_atomic(path, encode_checkpoint(params, metadata));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(bytes::read_file(path), path.string());
}

/// Copies every parameter of `src` whose name starts with prefix into `dst`,
/// requiring matching shapes. Returns the number copied.
inline std::size_t copy_parameters(const ParameterStore& src, ParameterStore& dst, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& [name, p] : src) {
    if (!name.starts_with(prefix)) continue;
    Parameter& d = dst.at(name);
    if (!d.value.same_shape(p.value)) {
      throw Error("parameter " + name + " has shape " + p.value.shape_string() + " in checkpoint but " +
                  d.value.shape_string() + " in model");
    }
    d.value = p.value;
    ++n;
  }
  return n;
}

}  // namespace sa2sr
