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

// Model blocks: a stacked bidirectional LSTM acoustic encoder shared by a
// per-frame token softmax, an LSTM sentiment summarizer, and the emotion
// regressor (masked 1-D convolutions, multi-head self-attention, mean and
// variance pooling, linear AVD projection).

#pragma once

#include <Eigen/QR>

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sa2sr/autodiff.hpp"
#include "sa2sr/error.hpp"
#include "sa2sr/frontend.hpp"
#include "sa2sr/params.hpp"
#include "sa2sr/tokens.hpp"

namespace sa2sr {

struct EncoderConfig {
  int layers = 5;
  int hidden = 192;
  int input_dim = 120;

  void validate() const {
    if (layers < 1 || hidden < 1 || input_dim < 1) throw Error("encoder: layers, hidden and input_dim must be >= 1");
  }
  int output_dim() const { return 2 * hidden; }
};

struct SentimentHeadConfig {
  int summarizer_hidden = 192;
  int classes = 3;

  void validate() const {
    if (summarizer_hidden < 1) throw Error("sentiment head: summarizer_hidden must be >= 1");
    if (classes != 3) throw Error("sentiment head: exactly 3 classes (negative, neutral, positive)");
  }
};

struct RegressorConfig {
  std::array<int, 2> conv_filters = {6, 3};
  std::array<int, 2> conv_strides = {3, 2};
  int conv_channels = 64;
  int attn_heads = 4;
  int attn_dim = 64;
  double leaky_alpha = 0.3;
  int output_dim = 3;
  double norm_eps = 1e-5;

  void validate() const {
    for (int i = 0; i < 2; ++i)
      if (conv_strides[i] < 1 || conv_filters[i] < conv_strides[i])
        throw Error("regressor: each conv filter must be >= its stride >= 1");
    if (conv_channels < 1) throw Error("regressor: conv_channels must be >= 1");
    if (attn_heads < 1 || attn_dim % attn_heads != 0) throw Error("regressor: attn_dim must be divisible by attn_heads");
    if (!(leaky_alpha > 0.0 && leaky_alpha < 1.0)) throw Error("regressor: leaky_alpha must lie in (0, 1)");
    if (output_dim < 1) throw Error("regressor: output_dim must be >= 1");
  }

  /// Smallest all-valid input length for which both convolutions emit a frame.
  int min_input_length() const {
    return conv_filters[0] + conv_strides[0] * (conv_filters[1] - 1);
  }
};

struct ModelConfig {
  EncoderConfig encoder;
  SentimentHeadConfig sentiment;
  RegressorConfig regressor;

  void validate() const {
    encoder.validate();
    sentiment.validate();
    regressor.validate();
  }
};

/// Output length of a valid (unpadded) convolution.
inline std::size_t conv_output_length(std::size_t length, int filter, int stride) {
  if (length < static_cast<std::size_t>(filter)) return 0;
  return (length - static_cast<std::size_t>(filter)) / static_cast<std::size_t>(stride) + 1;
}

/// Output position j is valid iff every input in its receptive field is valid.
inline std::vector<std::uint8_t> conv_output_mask(const std::vector<std::uint8_t>& mask, int filter, int stride) {
  const std::size_t n = conv_output_length(mask.size(), filter, stride);
  std::vector<std::uint8_t> out(n, 1);
  for (std::size_t j = 0; j < n; ++j)
    for (int k = 0; k < filter; ++k)
      if (!mask[j * static_cast<std::size_t>(stride) + static_cast<std::size_t>(k)]) out[j] = 0;
  return out;
}

// ---- initialization ---------------------------------------------------------

namespace init_detail {

inline std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Each parameter draws from its own stream so adding or resizing one block
// leaves the others unchanged.
inline std::mt19937_64 stream_for(std::uint64_t seed, const std::string& name) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(name_hash(name)), static_cast<std::uint32_t>(name_hash(name) >> 32)};
  return std::mt19937_64(seq);
}

inline Tensor glorot(std::uint64_t seed, const std::string& name, std::size_t rows, std::size_t cols, double fan_in,
                     double fan_out) {
  auto rng = stream_for(seed, name);
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t(rows, cols);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

// rows x cols with orthonormal rows (rows <= cols), from a QR factorization of
// a Gaussian matrix with the sign convention that makes diag(R) positive.
inline Tensor orthogonal(std::uint64_t seed, const std::string& name, std::size_t rows, std::size_t cols) {
  auto rng = stream_for(seed, name);
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::MatrixXd g(static_cast<Eigen::Index>(cols), static_cast<Eigen::Index>(rows));
  for (Eigen::Index c = 0; c < g.cols(); ++c)
    for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, c) = dist(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(g.rows(), g.cols());
  const Eigen::MatrixXd r = qr.matrixQR().topRows(g.cols()).triangularView<Eigen::Upper>();
  for (Eigen::Index c = 0; c < q.cols(); ++c)
    if (r(c, c) < 0) q.col(c) *= -1.0;
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t(i, j) = q(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
  return t;
}

inline void add_lstm(ParameterStore& store, std::uint64_t seed, const std::string& prefix, int input, int hidden) {
  const auto in = static_cast<std::size_t>(input), h = static_cast<std::size_t>(hidden);
  store.add(prefix + "/W", glorot(seed, prefix + "/W", in, 4 * h, static_cast<double>(in), static_cast<double>(4 * h)));
  // Keras-style orthogonal recurrent kernel: H x 4H with orthonormal rows.
  store.add(prefix + "/U", orthogonal(seed, prefix + "/U", h, 4 * h));
  Tensor b(1, 4 * h);
  for (std::size_t j = h; j < 2 * h; ++j) b[j] = 1.0;
  store.add(prefix + "/b", std::move(b));
}

inline void add_linear(ParameterStore& store, std::uint64_t seed, const std::string& prefix, std::size_t in,
                       std::size_t out, double fan_in, double fan_out) {
  store.add(prefix + "/W", glorot(seed, prefix + "/W", in, out, fan_in, fan_out));
  store.add(prefix + "/b", Tensor(1, out));
}

}  // namespace init_detail

/// Creates every parameter of encoder, token head, sentiment head and
/// regressor. Gate layout inside each LSTM is (input, forget, cell, output).
inline ParameterStore init_parameters(std::uint64_t seed, const ModelConfig& cfg) {
  cfg.validate();
  ParameterStore store;
  const auto& enc = cfg.encoder;
  int in = enc.input_dim;
  for (int l = 0; l < enc.layers; ++l) {
    const std::string p = "encoder/l" + std::to_string(l);
    init_detail::add_lstm(store, seed, p + "/fw", in, enc.hidden);
    init_detail::add_lstm(store, seed, p + "/bw", in, enc.hidden);
    in = 2 * enc.hidden;
  }
  const auto d = static_cast<std::size_t>(enc.output_dim());
  init_detail::add_linear(store, seed, "token_head", d, tokens::kVocabSize, static_cast<double>(d), tokens::kVocabSize);

  const auto s = static_cast<std::size_t>(cfg.sentiment.summarizer_hidden);
  init_detail::add_lstm(store, seed, "sentiment/lstm", enc.output_dim(), cfg.sentiment.summarizer_hidden);
  init_detail::add_linear(store, seed, "sentiment/out", s, 3, static_cast<double>(s), 3.0);

  const auto& rc = cfg.regressor;
  const auto ch = static_cast<std::size_t>(rc.conv_channels);
  const auto k1 = static_cast<std::size_t>(rc.conv_filters[0]), k2 = static_cast<std::size_t>(rc.conv_filters[1]);
  init_detail::add_linear(store, seed, "regressor/conv1", k1 * d, ch, static_cast<double>(k1 * d),
                          static_cast<double>(k1 * ch));
  init_detail::add_linear(store, seed, "regressor/conv2", k2 * ch, ch, static_cast<double>(k2 * ch),
                          static_cast<double>(k2 * ch));
  const auto a = static_cast<std::size_t>(rc.attn_dim);
  init_detail::add_linear(store, seed, "regressor/proj", ch, a, static_cast<double>(ch), static_cast<double>(a));
  for (const char* m : {"q", "k", "v", "o"})
    init_detail::add_linear(store, seed, std::string("regressor/attn/") + m, a, a, static_cast<double>(a),
                            static_cast<double>(a));
  const auto od = static_cast<std::size_t>(rc.output_dim);
  init_detail::add_linear(store, seed, "regressor/out", 2 * a, od, static_cast<double>(2 * a), static_cast<double>(od));
  return store;
}

// ---- forward blocks ---------------------------------------------------------

/// Encoder output: T x 2H, zero rows at padding frames.
struct SequenceEncoding {
  ad::DiffArray values;
  std::vector<std::uint8_t> mask;
};

/// One LSTM direction over the valid rows of `inputs`. Returns the hidden
/// state per row (padding rows map to zeros) and the final hidden state.
struct LstmResult {
  ad::DiffArray outputs;
  ad::DiffArray final_hidden;
};

inline LstmResult lstm_forward(Binding& bind, const std::string& prefix, const ad::DiffArray& inputs,
                               const std::vector<std::uint8_t>& mask, bool reverse) {
  ad::Tape& tape = bind.tape();
  const ad::DiffArray W = bind(prefix + "/W");
  const ad::DiffArray U = bind(prefix + "/U");
  const ad::DiffArray b = bind(prefix + "/b");
  if (inputs.cols() != W.rows()) {
    throw ShapeError("lstm " + prefix + ": input width " + std::to_string(inputs.cols()) + " vs expected " +
                     std::to_string(W.rows()));
  }
  const std::size_t T = inputs.rows();
  const std::size_t H = U.rows();
  const ad::DiffArray projected = tape.add_rowwise(tape.matmul(inputs, W), b);
  const ad::DiffArray zero_row = tape.constant(Tensor(1, H));

  std::vector<ad::DiffArray> rows(T, zero_row);
  ad::DiffArray h, c;
  for (std::size_t step = 0; step < T; ++step) {
    const std::size_t t = reverse ? T - 1 - step : step;
    if (!mask[t]) continue;
    ad::DiffArray z = tape.slice(projected, 0, t, t + 1);
    if (h) z = tape.add(z, tape.matmul(h, U));
    const ad::DiffArray gate_in = tape.sigmoid(tape.slice(z, 1, 0, H));
    const ad::DiffArray cell_in = tape.tanh(tape.slice(z, 1, 2 * H, 3 * H));
    const ad::DiffArray gate_out = tape.sigmoid(tape.slice(z, 1, 3 * H, 4 * H));
    if (c) {
      const ad::DiffArray gate_forget = tape.sigmoid(tape.slice(z, 1, H, 2 * H));
      c = tape.add(tape.mul(gate_forget, c), tape.mul(gate_in, cell_in));
    } else {
      c = tape.mul(gate_in, cell_in);
    }
    h = tape.mul(gate_out, tape.tanh(c));
    rows[t] = h;
  }
  if (!h) throw Error("empty sequence: no valid frames");
  return {tape.concat(rows, 0), h};
}

inline SequenceEncoding encoder_forward(Binding& bind, const FeatureMatrix& feats, const EncoderConfig& cfg) {
  cfg.validate();
  feats.validate();
  if (feats.dim() != static_cast<std::size_t>(cfg.input_dim)) {
    throw ShapeError("encoder: feature dimension " + std::to_string(feats.dim()) + " does not match input_dim " +
                     std::to_string(cfg.input_dim));
  }
  ad::Tape& tape = bind.tape();
  ad::DiffArray x = tape.constant(feats.frames);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "encoder/l" + std::to_string(l);
    const auto fw = lstm_forward(bind, p + "/fw", x, feats.mask, false);
    const auto bw = lstm_forward(bind, p + "/bw", x, feats.mask, true);
    x = tape.concat({fw.outputs, bw.outputs}, 1);
  }
  return {x, feats.mask};
}

/// T x 29 per-frame log-probabilities over the token inventory.
inline ad::DiffArray token_head_forward(Binding& bind, const SequenceEncoding& enc) {
  ad::Tape& tape = bind.tape();
  const ad::DiffArray logits = tape.add_rowwise(tape.matmul(enc.values, bind("token_head/W")), bind("token_head/b"));
  return tape.log_softmax(logits, 1);
}

/// 1 x 3 class log-probabilities over (negative, neutral, positive).
inline ad::DiffArray sentiment_head_forward(Binding& bind, const SequenceEncoding& enc,
                                            const SentimentHeadConfig& cfg) {
  cfg.validate();
  if (std::none_of(enc.mask.begin(), enc.mask.end(), [](std::uint8_t m) { return m != 0; }))
    throw Error("empty sequence: sentiment head needs at least one valid frame");
  ad::Tape& tape = bind.tape();
  const auto summary = lstm_forward(bind, "sentiment/lstm", enc.values, enc.mask, false);
  const ad::DiffArray logits =
      tape.add_rowwise(tape.matmul(summary.final_hidden, bind("sentiment/out/W")), bind("sentiment/out/b"));
  return tape.log_softmax(logits, 1);
}

struct RegressorOutput {
  ad::DiffArray avd;                  // 1 x output_dim
  ad::DiffArray pooled;               // 1 x 2*attn_dim: [mean | variance]
  std::vector<Tensor> attention;      // per head, L2 x L2 row-stochastic weights
  std::vector<std::uint8_t> mask;     // validity of the L2 attention positions
};

namespace regressor_detail {

// Per-channel standardization over valid rows followed by LeakyReLU.
inline ad::DiffArray normalize_and_activate(ad::Tape& tape, const ad::DiffArray& x,
                                            const std::vector<std::uint8_t>& mask, const RegressorConfig& cfg) {
  const ad::DiffArray ones = tape.constant(Tensor(x.rows(), 1, 1.0));
  const ad::DiffArray mean = tape.masked_reduce(x, 0, mask, ad::MaskedReduction::kMean);
  const ad::DiffArray var = tape.masked_reduce(x, 0, mask, ad::MaskedReduction::kVar);
  const ad::DiffArray sd = tape.sqrt(tape.add_scalar(var, cfg.norm_eps));
  const ad::DiffArray centered = tape.sub(x, tape.matmul(ones, mean));
  const ad::DiffArray normed = tape.div(centered, tape.matmul(ones, sd));
  return tape.leaky_relu(normed, cfg.leaky_alpha);
}

inline ad::DiffArray masked_conv(Binding& bind, const std::string& prefix, const ad::DiffArray& x, int filter,
                                 int stride) {
  ad::Tape& tape = bind.tape();
  const ad::DiffArray windows = tape.unfold(x, static_cast<std::size_t>(filter), static_cast<std::size_t>(stride));
  return tape.add_rowwise(tape.matmul(windows, bind(prefix + "/W")), bind(prefix + "/b"));
}

}  // namespace regressor_detail

/// Multi-head self-attention over the valid positions followed by masked mean
/// and population-variance pooling and the linear AVD projection. `inputs` is
/// L x attn_dim.
inline RegressorOutput attention_pool_forward(Binding& bind, const ad::DiffArray& inputs,
                                              const std::vector<std::uint8_t>& mask, const RegressorConfig& cfg) {
  cfg.validate();
  ad::Tape& tape = bind.tape();
  const std::size_t L = inputs.rows();
  const auto d = static_cast<std::size_t>(cfg.attn_dim);
  const auto heads = static_cast<std::size_t>(cfg.attn_heads);
  const std::size_t dh = d / heads;
  if (inputs.cols() != d) throw ShapeError("attention: input width does not match attn_dim");
  if (mask.size() != L || std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }))
    throw Error("sequence too short for regressor: no valid attention positions");

  auto linear = [&](const std::string& p, const ad::DiffArray& v) {
    return tape.add_rowwise(tape.matmul(v, bind(p + "/W")), bind(p + "/b"));
  };
  const ad::DiffArray q = linear("regressor/attn/q", inputs);
  const ad::DiffArray k = linear("regressor/attn/k", inputs);
  const ad::DiffArray v = linear("regressor/attn/v", inputs);

  // Padded keys receive kLogZero so their softmax weight is exactly zero.
  Tensor key_bias(L, L);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j) key_bias(i, j) = mask[j] ? 0.0 : ad::kLogZero;
  const ad::DiffArray key_mask = tape.constant(std::move(key_bias));

  RegressorOutput out;
  out.mask = mask;
  std::vector<ad::DiffArray> head_outputs;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < heads; ++h) {
    const ad::DiffArray qh = tape.slice(q, 1, h * dh, (h + 1) * dh);
    const ad::DiffArray kh = tape.slice(k, 1, h * dh, (h + 1) * dh);
    const ad::DiffArray vh = tape.slice(v, 1, h * dh, (h + 1) * dh);
    const ad::DiffArray scores = tape.add(tape.scale(tape.matmul(qh, tape.transpose(kh)), scale), key_mask);
    const ad::DiffArray weights = tape.softmax(scores, 1);
    out.attention.push_back(weights.value());
    head_outputs.push_back(tape.matmul(weights, vh));
  }
  const ad::DiffArray attended = linear("regressor/attn/o", tape.concat(head_outputs, 1));
  const ad::DiffArray mean = tape.masked_reduce(attended, 0, mask, ad::MaskedReduction::kMean);
  const ad::DiffArray var = tape.masked_reduce(attended, 0, mask, ad::MaskedReduction::kVar);
  out.pooled = tape.concat({mean, var}, 1);
  out.avd = linear("regressor/out", out.pooled);
  return out;
}

inline RegressorOutput regressor_forward(Binding& bind, const SequenceEncoding& enc, const RegressorConfig& cfg) {
  cfg.validate();
  ad::Tape& tape = bind.tape();
  const auto too_short = [&] {
    return Error("sequence too short for regressor: length " + std::to_string(enc.mask.size()) + ", need >= " +
                 std::to_string(cfg.min_input_length()) + " valid frames");
  };
  const auto mask1 = conv_output_mask(enc.mask, cfg.conv_filters[0], cfg.conv_strides[0]);
  if (std::none_of(mask1.begin(), mask1.end(), [](std::uint8_t m) { return m != 0; })) throw too_short();
  const auto mask2 = conv_output_mask(mask1, cfg.conv_filters[1], cfg.conv_strides[1]);
  if (std::none_of(mask2.begin(), mask2.end(), [](std::uint8_t m) { return m != 0; })) throw too_short();

  ad::DiffArray x =
      regressor_detail::masked_conv(bind, "regressor/conv1", enc.values, cfg.conv_filters[0], cfg.conv_strides[0]);
  x = regressor_detail::normalize_and_activate(tape, x, mask1, cfg);
  x = regressor_detail::masked_conv(bind, "regressor/conv2", x, cfg.conv_filters[1], cfg.conv_strides[1]);
  x = regressor_detail::normalize_and_activate(tape, x, mask2, cfg);
  x = tape.add_rowwise(tape.matmul(x, bind("regressor/proj/W")), bind("regressor/proj/b"));
  return attention_pool_forward(bind, x, mask2, cfg);
}

}  // namespace sa2sr
