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

// Log mel filterbank energy (LFBE) features and the train-side augmentation
// chain: per-utterance normalization, speed perturbation, SpecAugment-style
// band masking and frame stacking.

#pragma once

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "sa2sr/audio.hpp"
#include "sa2sr/error.hpp"
#include "sa2sr/tensor.hpp"

namespace sa2sr {

struct FrontendConfig {
  int n_mels = 40;
  double window_ms = 25.0;
  double hop_ms = 10.0;
  std::vector<double> speed_factors = {0.9, 1.1};
  double mask_prob = 0.5;
  int stack = 3;
  int skip = 2;
  double log_floor = 1e-10;
  int max_time_mask = 10;
  int max_freq_mask = 8;

  void validate() const {
    if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) throw Error("frontend: mask_prob must lie in [0, 1]");
    if (!(hop_ms > 0.0 && window_ms > hop_ms)) throw Error("frontend: need window_ms > hop_ms > 0");
    if (n_mels < 1) throw Error("frontend: n_mels must be >= 1");
    for (double f : speed_factors)
      if (!(f > 0.0)) throw Error("frontend: speed factors must be positive");
    if (stack < 1 || skip < 0) throw Error("frontend: need stack >= 1 and skip >= 0");
    if (!(log_floor > 0.0)) throw Error("frontend: log_floor must be positive");
    if (max_time_mask < 1 || max_freq_mask < 1) throw Error("frontend: mask widths must be >= 1");
  }

  std::size_t window_samples(int sample_rate) const {
    return static_cast<std::size_t>(std::lround(window_ms * sample_rate / 1000.0));
  }
  std::size_t hop_samples(int sample_rate) const {
    return static_cast<std::size_t>(std::lround(hop_ms * sample_rate / 1000.0));
  }
};

/// T x F feature frames plus a per-frame validity mask.
struct FeatureMatrix {
  Tensor frames;
  std::vector<std::uint8_t> mask;
  double frame_shift_ms = 10.0;
  std::vector<std::string> meta;
  /// Channels that had zero variance during normalization and were zeroed.
  std::vector<int> zero_variance_channels;

  std::size_t num_frames() const { return frames.rows(); }
  std::size_t dim() const { return frames.cols(); }
  std::size_t valid_frames() const {
    return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
  }
  bool has_tag(const std::string& tag) const { return std::find(meta.begin(), meta.end(), tag) != meta.end(); }

  void validate() const {
    if (frames.cols() == 0 || frames.rows() == 0) throw Error("feature matrix is empty");
    if (mask.size() != frames.rows()) throw Error("feature mask length does not match frame count");
    if (valid_frames() == 0) throw Error("feature mask has no valid frames");
    for (double v : frames.values())
      if (!std::isfinite(v)) throw Error("feature matrix holds a non-finite value");
  }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Edge and center frequencies (Hz) of the triangular filters: n_mels + 2
/// points equally spaced on the HTK mel scale from 0 Hz to Nyquist. Filter m
/// rises from edges[m] to edges[m + 1] and falls to edges[m + 2].
inline std::vector<double> mel_band_edges(int n_mels, int sample_rate) {
  const double top = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(static_cast<std::size_t>(n_mels) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  return edges;
}

/// n_mels x (n_fft/2 + 1) matrix of triangular filter weights, peak 1.
inline Tensor mel_filterbank(int n_mels, std::size_t n_fft, int sample_rate) {
  const auto edges = mel_band_edges(n_mels, sample_rate);
  const std::size_t bins = n_fft / 2 + 1;
  Tensor fb(static_cast<std::size_t>(n_mels), bins);
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
      double w = 0.0;
      if (f > lo && f <= mid)
        w = (f - lo) / (mid - lo);
      else if (f > mid && f < hi)
        w = (hi - f) / (hi - mid);
      fb(static_cast<std::size_t>(m), k) = w;
    }
  }
  return fb;
}

inline std::size_t fft_size_for(std::size_t window) {
  std::size_t n = 1;
  while (n < window) n <<= 1;
  return n;
}

/// Symmetric Hann window.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n, 1.0);
  if (n == 1) return w;
  const double pi = std::acos(-1.0);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * pi * static_cast<double>(i) / static_cast<double>(n - 1));
  return w;
}

inline std::size_t lfbe_frame_count(std::size_t n_samples, std::size_t window, std::size_t hop) {
  if (n_samples < window) return 0;
  return (n_samples - window) / hop + 1;
}

inline FeatureMatrix extract_lfbe(const Waveform& wave, const FrontendConfig& cfg) {
  cfg.validate();
  if (wave.samples.empty()) throw Error("utterance too short: empty waveform");
  for (double s : wave.samples)
    if (!std::isfinite(s)) throw Error("corrupt audio: non-finite sample");
  if (wave.sample_rate < 8000) throw Error("unsupported sample rate " + std::to_string(wave.sample_rate));

  const std::size_t win = cfg.window_samples(wave.sample_rate);
  const std::size_t hop = cfg.hop_samples(wave.sample_rate);
  if (wave.size() < win) {
    throw Error("utterance too short: " + std::to_string(wave.size()) + " samples < window of " + std::to_string(win));
  }
  const std::size_t n_frames = lfbe_frame_count(wave.size(), win, hop);
  const std::size_t n_fft = fft_size_for(win);
  const std::size_t bins = n_fft / 2 + 1;
  const Tensor fb = mel_filterbank(cfg.n_mels, n_fft, wave.sample_rate);
  const auto window = hann_window(win);

  Eigen::FFT<double> fft;
  std::vector<double> buf(n_fft, 0.0);
  std::vector<std::complex<double>> spec;
  std::vector<double> power(bins);

  FeatureMatrix out;
  out.frames = Tensor(n_frames, static_cast<std::size_t>(cfg.n_mels));
  out.mask.assign(n_frames, 1);
  out.frame_shift_ms = cfg.hop_ms;
  out.meta = {"raw"};
  for (std::size_t t = 0; t < n_frames; ++t) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (std::size_t i = 0; i < win; ++i) buf[i] = wave.samples[t * hop + i] * window[i];
    fft.fwd(spec, buf);
    for (std::size_t k = 0; k < bins; ++k) power[k] = std::norm(spec[k]);
    for (std::size_t m = 0; m < static_cast<std::size_t>(cfg.n_mels); ++m) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += fb(m, k) * power[k];
      out.frames(t, m) = std::log(std::max(e, cfg.log_floor));
    }
  }
  return out;
}

/// Per-channel standardization over valid frames using population statistics.
/// Channels with zero variance become all zeros and are listed in
/// zero_variance_channels.
inline FeatureMatrix normalize_per_utterance(const FeatureMatrix& feats) {
  feats.validate();
  const std::size_t n = feats.valid_frames();
  if (n < 2) throw Error("degenerate normalization: need at least 2 valid frames");
  FeatureMatrix out = feats;
  out.zero_variance_channels.clear();
  const std::size_t T = feats.num_frames(), F = feats.dim();
  for (std::size_t f = 0; f < F; ++f) {
    double mean = 0.0;
    for (std::size_t t = 0; t < T; ++t)
      if (feats.mask[t]) mean += feats.frames(t, f);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t t = 0; t < T; ++t)
      if (feats.mask[t]) var += (feats.frames(t, f) - mean) * (feats.frames(t, f) - mean);
    var /= static_cast<double>(n);
    // Rounding noise on a constant channel stays far below this.
    const bool constant = var <= 1e-20 * std::max(1.0, mean * mean);
    if (constant) out.zero_variance_channels.push_back(static_cast<int>(f));
    const double inv_sd = constant ? 0.0 : 1.0 / std::sqrt(var);
    for (std::size_t t = 0; t < T; ++t)
      if (feats.mask[t]) out.frames(t, f) = constant ? 0.0 : (feats.frames(t, f) - mean) * inv_sd;
  }
  out.meta.push_back("normalized");
  if (!out.zero_variance_channels.empty()) out.meta.push_back("zero_variance");
  return out;
}

/// Resamples by linear interpolation at stride `factor`; factor > 1 speeds up
/// (shorter output), factor < 1 slows down.
inline Waveform speed_perturb(const Waveform& wave, double factor) {
  if (!(factor > 0.0) || !std::isfinite(factor)) throw Error("invalid speed factor " + std::to_string(factor));
  if (wave.samples.empty()) throw Error("corrupt audio: empty waveform");
  if (factor == 1.0) return wave;
  const std::size_t n = wave.size();
  const auto out_len = static_cast<std::size_t>(std::llround(static_cast<double>(n) / factor));
  Waveform out;
  out.sample_rate = wave.sample_rate;
  out.samples.resize(out_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    const double pos = static_cast<double>(i) * factor;
    const auto j = static_cast<std::size_t>(pos);
    if (j + 1 >= n) {
      out.samples[i] = wave.samples[n - 1];
    } else {
      const double frac = pos - static_cast<double>(j);
      out.samples[i] = (1.0 - frac) * wave.samples[j] + frac * wave.samples[j + 1];
    }
  }
  return out;
}

/// Zeroes at most one time band and one frequency band, each with probability
/// cfg.mask_prob. Deterministic in rng_seed; the validity mask is unchanged.
inline FeatureMatrix spec_augment(const FeatureMatrix& feats, const FrontendConfig& cfg, std::uint64_t rng_seed) {
  feats.validate();
  cfg.validate();
  FeatureMatrix out = feats;
  std::mt19937_64 rng(rng_seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const std::size_t T = feats.num_frames(), F = feats.dim();
  // Both coins are drawn up front so the two decisions stay independent.
  const bool mask_time = coin(rng) < cfg.mask_prob;
  const bool mask_freq = coin(rng) < cfg.mask_prob;
  if (mask_time) {
    const std::size_t max_w = std::min<std::size_t>(static_cast<std::size_t>(cfg.max_time_mask), T);
    const std::size_t w = std::uniform_int_distribution<std::size_t>(1, max_w)(rng);
    const std::size_t t0 = std::uniform_int_distribution<std::size_t>(0, T - w)(rng);
    for (std::size_t t = t0; t < t0 + w; ++t)
      for (std::size_t f = 0; f < F; ++f) out.frames(t, f) = 0.0;
  }
  if (mask_freq) {
    const std::size_t max_w = std::min<std::size_t>(static_cast<std::size_t>(cfg.max_freq_mask), F);
    const std::size_t w = std::uniform_int_distribution<std::size_t>(1, max_w)(rng);
    const std::size_t f0 = std::uniform_int_distribution<std::size_t>(0, F - w)(rng);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t f = f0; f < f0 + w; ++f) out.frames(t, f) = 0.0;
  }
  out.meta.push_back("augmented");
  if (mask_time) out.meta.push_back("time_masked");
  if (mask_freq) out.meta.push_back("freq_masked");
  return out;
}

/// Concatenates `stack` consecutive frames and advances by skip + 1 frames.
/// Missing tail frames are zero; output frame t is valid iff input frame
/// t * (skip + 1) is valid.
inline FeatureMatrix stack_and_skip(const FeatureMatrix& feats, int stack, int skip) {
  feats.validate();
  if (stack < 1 || skip < 0) throw Error("stack_and_skip: need stack >= 1 and skip >= 0");
  const std::size_t T = feats.num_frames(), F = feats.dim();
  const auto step = static_cast<std::size_t>(skip) + 1;
  const auto k = static_cast<std::size_t>(stack);
  const std::size_t out_t = (T + step - 1) / step;
  FeatureMatrix out;
  out.frames = Tensor(out_t, k * F);
  out.mask.resize(out_t);
  out.frame_shift_ms = feats.frame_shift_ms * static_cast<double>(step);
  out.meta = feats.meta;
  out.meta.push_back("stacked");
  for (std::size_t t = 0; t < out_t; ++t) {
    out.mask[t] = feats.mask[t * step];
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t src = t * step + j;
      if (src >= T) break;
      for (std::size_t f = 0; f < F; ++f) out.frames(t, j * F + f) = feats.frames(src, f);
    }
  }
  return out;
}

// ---- feature blob --------------------------------------------------------
//
// "LFBE" | u16 version | u32 T | u32 F | T*F f32 row-major | T mask bytes,
// all little-endian.

inline constexpr std::uint16_t kFeatureBlobVersion = 1;

inline std::string encode_feature_blob(const FeatureMatrix& feats) {
  std::string out = "LFBE";
  bytes::put<std::uint16_t>(out, kFeatureBlobVersion);
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(feats.num_frames()));
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(feats.dim()));
  for (double v : feats.frames.values()) bytes::put<float>(out, static_cast<float>(v));
  for (std::uint8_t m : feats.mask) out.push_back(static_cast<char>(m ? 1 : 0));
  return out;
}

inline FeatureMatrix decode_feature_blob(const std::string& data, const std::string& name = "feature blob") {
  bytes::Reader r(data, name);
  if (r.get_string(4) != "LFBE") r.fail("bad magic");
  const auto version = r.get<std::uint16_t>();
  if (version != kFeatureBlobVersion) r.fail("unsupported version " + std::to_string(version));
  const auto T = r.get<std::uint32_t>();
  const auto F = r.get<std::uint32_t>();
  FeatureMatrix out;
  out.frames = Tensor(T, F);
  for (std::size_t i = 0; i < out.frames.size(); ++i) out.frames[i] = r.get<float>();
  out.mask.resize(T);
  for (std::size_t t = 0; t < T; ++t) out.mask[t] = r.get<std::uint8_t>();
  if (r.remaining() != 0) r.fail("trailing bytes");
  out.meta = {"loaded"};
  return out;
}

inline void write_feature_blob(const std::filesystem::path& path, const FeatureMatrix& feats) {
  bytes::write_file_atomic(path, encode_feature_blob(feats));
}

inline FeatureMatrix read_feature_blob(const std::filesystem::path& path) {
  return decode_feature_blob(bytes::read_file(path), path.string());
}

}  // namespace sa2sr
