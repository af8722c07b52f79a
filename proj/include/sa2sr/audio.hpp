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

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "sa2sr/error.hpp"

namespace sa2sr {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Mono PCM audio with amplitudes in [-1, 1].
struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;

  std::size_t size() const { return samples.size(); }
  double duration_seconds() const { return static_cast<double>(samples.size()) / sample_rate; }

  void validate() const {
    if (samples.empty()) throw Error("corrupt audio: empty waveform");
    if (sample_rate < 8000) throw Error("unsupported sample rate " + std::to_string(sample_rate) + " (need >= 8000)");
    for (double s : samples)
      if (!std::isfinite(s)) throw Error("corrupt audio: non-finite sample");
  }
};

namespace bytes {

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

/// Bounds-checked little-endian reader over an in-memory buffer. Errors carry
/// the byte offset at which the read failed.
class Reader {
 public:
  Reader(const std::string& data, std::string what) : data_(data), what_(std::move(what)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(what_ + ": " + msg + " at byte offset " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) fail("truncated input");
  }
  const std::string& data_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Writes through a temporary sibling and renames, so readers never observe a
/// partially written file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& data) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace bytes

/// Parses a RIFF/WAVE buffer holding 16-bit little-endian mono PCM.
inline Waveform parse_wav(const std::string& data, const std::string& name = "wav") {
  bytes::Reader r(data, name);
  if (r.get_string(4) != "RIFF") r.fail("missing RIFF magic");
  r.get<std::uint32_t>();
  if (r.get_string(4) != "WAVE") r.fail("missing WAVE tag");
  bool have_fmt = false;
  Waveform wave;
  while (r.remaining() >= 8) {
    const std::string id = r.get_string(4);
    const auto len = r.get<std::uint32_t>();
    if (id == "fmt ") {
      if (len < 16) r.fail("short fmt chunk");
      const auto format = r.get<std::uint16_t>();
      const auto channels = r.get<std::uint16_t>();
      const auto rate = r.get<std::uint32_t>();
      r.get<std::uint32_t>();
      r.get<std::uint16_t>();
      const auto bits = r.get<std::uint16_t>();
      r.skip(len - 16 + (len & 1u));
      if (format != 1) r.fail("only PCM format is supported");
      if (channels != 1) r.fail("only mono audio is supported");
      if (bits != 16) r.fail("only 16-bit samples are supported");
      wave.sample_rate = static_cast<int>(rate);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) r.fail("data chunk before fmt chunk");
      const std::size_t n = len / 2;
      wave.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) wave.samples[i] = r.get<std::int16_t>() / 32768.0;
      if (len & 1u) r.skip(1);
      break;
    } else {
      r.skip(len + (len & 1u));
    }
  }
  if (!have_fmt) r.fail("no fmt chunk");
  if (wave.samples.empty()) r.fail("no audio samples");
  wave.validate();
  return wave;
}

inline Waveform read_wav(const std::filesystem::path& path) { return parse_wav(bytes::read_file(path), path.string()); }

inline std::string encode_wav(const Waveform& wave) {
  std::string out;
  const auto data_len = static_cast<std::uint32_t>(wave.samples.size() * 2);
  out += "RIFF";
  bytes::put<std::uint32_t>(out, 36 + data_len);
  out += "WAVEfmt ";
  bytes::put<std::uint32_t>(out, 16);
  bytes::put<std::uint16_t>(out, 1);
  bytes::put<std::uint16_t>(out, 1);
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(wave.sample_rate));
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(wave.sample_rate * 2));
  bytes::put<std::uint16_t>(out, 2);
  bytes::put<std::uint16_t>(out, 16);
  out += "data";
  bytes::put<std::uint32_t>(out, data_len);
  for (double s : wave.samples) {
    const double clipped = std::clamp(s, -1.0, 32767.0 / 32768.0);
    bytes::put<std::int16_t>(out, static_cast<std::int16_t>(std::lround(clipped * 32768.0)));
  }
  return out;
}

inline void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  bytes::write_file_atomic(path, encode_wav(wave));
}

}  // namespace sa2sr
