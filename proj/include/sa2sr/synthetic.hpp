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

// Deterministic toy corpora built from pure tones.
//
//   asr        each character is a tone at its own mel-spaced frequency
//   sentiment  class set by amplitude level and envelope direction
//   avd        anchor tone, then activation <- f0 of one tone, valence <-
//              amplitude envelope of the next, dominance <- length of the last
//   combined   character tones whose durations carry activation, whose
//              log-gain slope carries valence (sentiment is its tercile) and
//              whose trailing silence carries dominance
//
// Latent values u in [0, 1] map to the 1..7 scale as 1 + 6u.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "sa2sr/audio.hpp"
#include "sa2sr/dataset.hpp"
#include "sa2sr/error.hpp"
#include "sa2sr/frontend.hpp"
#include "sa2sr/tokens.hpp"

namespace sa2sr {

enum class SynthKind { kAsr, kSentiment, kAvd, kCombined };

inline SynthKind synth_kind(const std::string& name) {
  if (name == "asr") return SynthKind::kAsr;
  if (name == "sentiment") return SynthKind::kSentiment;
  if (name == "avd") return SynthKind::kAvd;
  if (name == "combined") return SynthKind::kCombined;
  throw Error("unknown synthetic corpus kind '" + name + "' (expected asr, sentiment, avd or combined)");
}

inline std::string synth_kind_name(SynthKind k) {
  switch (k) {
    case SynthKind::kAsr:
      return "asr";
    case SynthKind::kSentiment:
      return "sentiment";
    case SynthKind::kAvd:
      return "avd";
    case SynthKind::kCombined:
      return "combined";
  }
  return "asr";
}

struct SynthOptions {
  double validation_fraction = 0.25;
  int sample_rate = 16000;
  double noise_amplitude = 1e-3;
};

/// Generator-side view of one utterance, including the acoustic parameters
/// the labels were derived from.
struct SynthUtterance {
  std::string name;  // file stem
  Waveform wave;
  UtteranceRecord record;
  std::array<double, 3> latent = {0, 0, 0};  // u for activation, valence, dominance
  double f0 = 0;                             // avd: fundamental of the activation tone (Hz)
  double amplitude_ratio = 0;                // avd: end-to-start amplitude of the valence tone
  double duration = 0;                       // avd: duration of the dominance tone (s)
};

namespace synth_detail {

inline const double kPi = std::acos(-1.0);

/// Tone frequency for a token id: 28 points mel-spaced over 200..5000 Hz.
inline double token_frequency(int id) {
  const double lo = hz_to_mel(200.0), hi = hz_to_mel(5000.0);
  return mel_to_hz(lo + (hi - lo) * static_cast<double>(id) / 27.0);
}

inline std::mt19937_64 utterance_rng(std::uint64_t seed, SynthKind kind, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(kind), static_cast<std::uint32_t>(index)};
  return std::mt19937_64(seq);
}

class Builder {
 public:
  Builder(int rate, std::mt19937_64& rng) : rate_(rate), rng_(rng) {}

  void silence(double seconds) { samples_.resize(samples_.size() + count(seconds), 0.0); }

  /// Tone with 10 ms raised-cosine fades. gain(tau) scales the amplitude
  /// over the utterance-level position tau in [0, 1] supplied by the caller.
  template <class Gain>
  void tone(double hz, double seconds, double amplitude, double harmonic, Gain gain) {
    const std::size_t n = count(seconds);
    const std::size_t fade = std::min(count(0.01), n / 2);
    const double phase = std::uniform_real_distribution<double>(0.0, 2 * kPi)(rng_);
    for (std::size_t i = 0; i < n; ++i) {
      double env = 1.0;
      if (i < fade) env = 0.5 - 0.5 * std::cos(kPi * static_cast<double>(i) / static_cast<double>(fade));
      if (n - 1 - i < fade) env = 0.5 - 0.5 * std::cos(kPi * static_cast<double>(n - 1 - i) / static_cast<double>(fade));
      const double t = static_cast<double>(i) / rate_;
      const double s = std::sin(2 * kPi * hz * t + phase) + harmonic * std::sin(4 * kPi * hz * t + phase);
      samples_.push_back(amplitude * env * gain(samples_.size()) * s / (1.0 + harmonic));
    }
  }
  void tone(double hz, double seconds, double amplitude, double harmonic = 0.0) {
    tone(hz, seconds, amplitude, harmonic, [](std::size_t) { return 1.0; });
  }

  std::size_t size() const { return samples_.size(); }

  Waveform finish(double noise) {
    std::uniform_real_distribution<double> d(-noise, noise);
    Waveform w;
    w.sample_rate = rate_;
    w.samples = std::move(samples_);
    for (double& s : w.samples) s = std::clamp(s + d(rng_), -1.0, 1.0);
    return w;
  }

  std::size_t count(double seconds) const { return static_cast<std::size_t>(std::llround(seconds * rate_)); }

 private:
  int rate_;
  std::mt19937_64& rng_;
  std::vector<double> samples_;
};

inline std::string random_letters(std::mt19937_64& rng) {
  const int n = std::uniform_int_distribution<int>(2, 5)(rng);
  std::string s;
  for (int i = 0; i < n; ++i) s.push_back(static_cast<char>('a' + std::uniform_int_distribution<int>(0, 25)(rng)));
  return s;
}

inline std::array<double, 3> to_likert(const std::array<double, 3>& u) {
  return {1.0 + 6.0 * u[0], 1.0 + 6.0 * u[1], 1.0 + 6.0 * u[2]};
}

}  // namespace synth_detail

/// The avd corpus maps each latent u in [0, 1] to one acoustic parameter.
/// Per-utterance feature normalization erases absolute levels, so every
/// cue is carried by a tone whose shape or length varies against fixed
/// anchor tones rather than by loudness alone.
inline double avd_f0(double u_a) { return 150.0 * std::pow(16.0, u_a); }
inline double avd_amplitude_ratio(double u_v) { return std::pow(10.0, 2.0 * (2.0 * u_v - 1.0)); }
inline double avd_duration(double u_d) { return 0.1 + 0.9 * u_d; }
inline std::array<double, 3> avd_latent_from_acoustics(double f0, double amplitude_ratio, double duration) {
  return {std::log(f0 / 150.0) / std::log(16.0), 0.5 + std::log10(amplitude_ratio) / 4.0, (duration - 0.1) / 0.9};
}

inline std::vector<SynthUtterance> synthesize(SynthKind kind, std::size_t n, std::uint64_t seed,
                                              const SynthOptions& opt = {}) {
  using namespace synth_detail;
  if (n < 8) throw Error("synthetic corpus needs n >= 8");
  if (!(opt.validation_fraction >= 0.0 && opt.validation_fraction < 1.0))
    throw Error("validation_fraction must lie in [0, 1)");
  const auto n_val = static_cast<std::size_t>(std::llround(opt.validation_fraction * static_cast<double>(n)));
  std::vector<SynthUtterance> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = utterance_rng(seed, kind, i);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Builder b(opt.sample_rate, rng);
    SynthUtterance u;
    char stem[32];
    std::snprintf(stem, sizeof stem, "%s_%04zu", synth_kind_name(kind).c_str(), i);
    u.name = stem;
    UtteranceRecord& r = u.record;
    r.split = i >= n - n_val ? "validation" : "train";

    switch (kind) {
      case SynthKind::kAsr: {
        const std::string text = random_letters(rng);
        b.silence(0.1);
        for (std::size_t c = 0; c < text.size(); ++c) {
          if (c) b.silence(0.05);
          b.tone(token_frequency(tokens::to_id(text[c])), 0.12, 0.3);
        }
        b.silence(0.1);
        r.transcript = text;
        break;
      }
      case SynthKind::kSentiment: {
        const int cls = static_cast<int>(i % 3);
        const double base[3] = {0.1, 0.3, 0.9};
        const double level = base[cls] * (0.9 + 0.2 * unit(rng));
        const double hz = 300.0 + 2700.0 * unit(rng);
        const double seconds = 0.4 + 0.4 * unit(rng);
        b.silence(0.1);
        const std::size_t start = b.size(), len = b.count(seconds);
        b.tone(hz, seconds, level, 0.0, [&](std::size_t pos) {
          const double tau = static_cast<double>(pos - start) / static_cast<double>(std::max<std::size_t>(len, 1));
          if (cls == 0) return 1.0 - 0.7 * tau;
          if (cls == 2) return 0.3 + 0.7 * tau;
          return 1.0;
        });
        b.silence(0.1);
        r.sentiment = cls;
        break;
      }
      case SynthKind::kAvd: {
        u.latent = {unit(rng), unit(rng), unit(rng)};
        u.f0 = avd_f0(u.latent[0]);
        u.amplitude_ratio = avd_amplitude_ratio(u.latent[1]);
        u.duration = avd_duration(u.latent[2]);
        // 4 kHz anchor, activation tone, valence tone with an exponential
        // envelope from 1/sqrt(ratio) to sqrt(ratio), dominance tone at 6 kHz.
        b.silence(0.1);
        b.tone(4000.0, 0.15, 0.3);
        b.tone(u.f0, 0.2, 0.3);
        const std::size_t start = b.size();
        const double len = static_cast<double>(b.count(0.4));
        const double half_log = 0.5 * std::log(u.amplitude_ratio);
        b.tone(3000.0, 0.4, 0.3, 0.0, [&](std::size_t pos) {
          return std::exp(half_log * (2.0 * static_cast<double>(pos - start) / len - 1.0));
        });
        b.tone(6000.0, u.duration, 0.3);
        b.silence(0.1);
        const auto likert = to_likert(u.latent);
        r.avd = std::array<double, 3>{likert_to_unit(likert[0]), likert_to_unit(likert[1]), likert_to_unit(likert[2])};
        break;
      }
      case SynthKind::kCombined: {
        const int cls = static_cast<int>(i % 3);
        const std::string text = random_letters(rng);
        // Valence stays inside the middle 80% of its tercile so the
        // sentiment label is never ambiguous.
        u.latent = {unit(rng), (cls + 0.1 + 0.8 * unit(rng)) / 3.0, unit(rng)};
        const double char_seconds = 0.09 + 0.06 * u.latent[0];
        const double slope = std::log(3.0) * (2.0 * u.latent[1] - 1.0);
        const double trailing = 0.1 + 0.3 * u.latent[2];
        const double active = static_cast<double>(text.size()) * char_seconds +
                              static_cast<double>(text.size() - 1) * 0.05;
        b.silence(0.1);
        const std::size_t start = b.size();
        const double active_samples = active * opt.sample_rate;
        auto gain = [&](std::size_t pos) {
          const double tau = static_cast<double>(pos - start) / active_samples;
          return std::exp(slope * (2.0 * tau - 1.0));
        };
        for (std::size_t c = 0; c < text.size(); ++c) {
          if (c) b.silence(0.05);
          b.tone(token_frequency(tokens::to_id(text[c])), char_seconds, 0.25, 0.0, gain);
        }
        b.silence(trailing);
        r.transcript = text;
        r.sentiment = cls;
        const auto likert = to_likert(u.latent);
        r.avd = std::array<double, 3>{likert_to_unit(likert[0]), likert_to_unit(likert[1]), likert_to_unit(likert[2])};
        break;
      }
    }
    u.wave = b.finish(opt.noise_amplitude);
    r.audio = std::filesystem::path("audio") / (u.name + ".wav");
    out.push_back(std::move(u));
  }
  return out;
}

/// Writes out_dir/audio/<name>.wav for every utterance plus
/// out_dir/manifest.jsonl. Returns the manifest path.
inline std::filesystem::path write_synthetic_corpus(const std::filesystem::path& out_dir,
                                                    const std::vector<SynthUtterance>& corpus) {
  std::filesystem::create_directories(out_dir / "audio");
  std::string manifest;
  for (const auto& u : corpus) {
    write_wav(out_dir / u.record.audio, u.wave);
    UtteranceRecord r = u.record;
    r.audio = out_dir / u.record.audio;
    manifest += record_to_json(r, out_dir).dump() + "\n";
  }
  const auto path = out_dir / "manifest.jsonl";
  bytes::write_file_atomic(path, manifest);
  return path;
}

inline std::filesystem::path generate_synthetic(SynthKind kind, std::size_t n, std::uint64_t seed,
                                                const std::filesystem::path& out_dir, const SynthOptions& opt = {}) {
  return write_synthetic_corpus(out_dir, synthesize(kind, n, seed, opt));
}

}  // namespace sa2sr
