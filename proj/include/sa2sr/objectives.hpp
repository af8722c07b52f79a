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

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sa2sr/autodiff.hpp"
#include "sa2sr/error.hpp"
#include "sa2sr/tokens.hpp"

namespace sa2sr {

struct LossValue {
  ad::DiffArray total;
  std::map<std::string, double> components;
};

/// Fewest frames that can carry `target`: one per label plus a blank between
/// each pair of equal neighbours.
inline std::size_t ctc_min_frames(const std::vector<int>& target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// (T x V) summed over all blank-augmented alignments. Only frames with a set
/// mask entry participate. The forward variables live in log space on the
/// tape, so gradients come from differentiating the recursion itself.
inline ad::DiffArray ctc_loss(ad::Tape& tape, const ad::DiffArray& log_probs, const std::vector<int>& target,
                              const std::vector<std::uint8_t>& mask = {}, int blank = tokens::kBlank) {
  const std::size_t V = log_probs.cols();
  if (blank < 0 || static_cast<std::size_t>(blank) >= V) throw Error("ctc: blank index outside vocabulary");
  if (!mask.empty() && mask.size() != log_probs.rows()) throw ShapeError("ctc: mask length does not match frames");
  for (int y : target)
    if (y < 0 || static_cast<std::size_t>(y) >= V || y == blank) throw Error("ctc: invalid target label " + std::to_string(y));

  std::vector<std::size_t> frames;
  for (std::size_t t = 0; t < log_probs.rows(); ++t)
    if (mask.empty() || mask[t]) frames.push_back(t);
  if (frames.empty() || frames.size() < ctc_min_frames(target)) {
    throw Error("target unalignable: " + std::to_string(frames.size()) + " frames for " +
                std::to_string(target.size()) + " labels");
  }

  const std::size_t S = 2 * target.size() + 1;
  std::vector<std::size_t> ext(S, static_cast<std::size_t>(blank));
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = static_cast<std::size_t>(target[i]);

  auto emissions = [&](std::size_t t) {
    std::vector<std::size_t> idx(S);
    for (std::size_t s = 0; s < S; ++s) idx[s] = t * V + ext[s];
    return tape.gather(log_probs, std::move(idx), 1, S);
  };

  // Indices into [kLogZero | alpha_prev]: slot 0 is the log-zero pad.
  std::vector<std::size_t> from_prev(S), from_skip(S, 0);
  for (std::size_t s = 0; s < S; ++s) {
    from_prev[s] = s;
    if (s >= 2 && ext[s] != static_cast<std::size_t>(blank) && ext[s] != ext[s - 2]) from_skip[s] = s - 1;
  }

  Tensor start(1, S, ad::kLogZero);
  start[0] = 0.0;
  if (S > 1) start[1] = 0.0;
  ad::DiffArray alpha = tape.add(emissions(frames.front()), tape.constant(std::move(start)));
  const ad::DiffArray pad = tape.constant(Tensor(1, 1, ad::kLogZero));
  for (std::size_t i = 1; i < frames.size(); ++i) {
    std::vector<ad::DiffArray> paths = {alpha};
    if (S > 1) {
      const ad::DiffArray shifted = tape.concat({pad, alpha}, 1);
      paths.push_back(tape.gather(shifted, from_prev, 1, S));
      paths.push_back(tape.gather(shifted, from_skip, 1, S));
    }
    alpha = tape.add(tape.logsumexp(paths), emissions(frames[i]));
  }
  std::vector<std::size_t> finals = {S - 1};
  if (S > 1) finals.push_back(S - 2);
  const std::size_t n_final = finals.size();
  return tape.neg(tape.reduce_logsumexp(tape.gather(alpha, std::move(finals), 1, n_final)));
}

/// -log p(label) for 1 x 3 class log-probabilities.
inline ad::DiffArray sentiment_ce(ad::Tape& tape, const ad::DiffArray& class_log_probs, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= class_log_probs.cols())
    throw Error("sentiment label " + std::to_string(label) + " out of range");
  return tape.neg(tape.gather(class_log_probs, {static_cast<std::size_t>(label)}, 1, 1));
}

/// total = asr + lambda * sentiment.
inline LossValue global_loss(ad::Tape& tape, const ad::DiffArray& asr, const ad::DiffArray& sentiment, double lambda) {
  if (!(lambda >= 0.0)) throw Error("global loss weight lambda must be >= 0");
  LossValue out;
  out.total = tape.add(asr, tape.scale(sentiment, lambda));
  out.components["asr"] = asr.item();
  out.components["sentiment"] = sentiment.item();
  return out;
}

inline constexpr double kCccEpsilon = 1e-8;

/// Concordance correlation coefficient with population statistics over the
/// batch. The denominator is lifted by kCccEpsilon only when it is itself
/// below kCccEpsilon.
inline ad::DiffArray ccc(ad::Tape& tape, const ad::DiffArray& y, const ad::DiffArray& yhat) {
  if (!y.value().same_shape(yhat.value()))
    throw ShapeError("ccc: shape mismatch " + y.value().shape_string() + " vs " + yhat.value().shape_string());
  if (y.value().size() < 2) throw Error("CCC undefined: batch size < 2");
  const ad::DiffArray mu_y = tape.reduce_mean(y);
  const ad::DiffArray mu_p = tape.reduce_mean(yhat);
  const ad::DiffArray cov = tape.reduce_mean(tape.mul(tape.sub(y, mu_y), tape.sub(yhat, mu_p)));
  ad::DiffArray den =
      tape.add(tape.add(tape.reduce_var(y), tape.reduce_var(yhat)), tape.square(tape.sub(mu_y, mu_p)));
  if (den.item() < kCccEpsilon) den = tape.add_scalar(den, kCccEpsilon);
  return tape.div(tape.scale(cov, 2.0), den);
}

/// -(CCC_A + CCC_V + CCC_D) / 3 over batch x 3 predictions and targets.
inline LossValue ccc_loss(ad::Tape& tape, const ad::DiffArray& pred, const ad::DiffArray& truth) {
  if (!pred.value().same_shape(truth.value()) || pred.cols() != 3)
    throw ShapeError("ccc_loss: expected matching batch x 3 arrays, got " + pred.value().shape_string() + " and " +
                     truth.value().shape_string());
  if (pred.rows() < 2) throw Error("CCC undefined: batch size < 2");
  static const char* kNames[3] = {"ccc_a", "ccc_v", "ccc_d"};
  LossValue out;
  std::vector<ad::DiffArray> dims;
  for (std::size_t d = 0; d < 3; ++d) {
    const ad::DiffArray c = ccc(tape, tape.slice(truth, 1, d, d + 1), tape.slice(pred, 1, d, d + 1));
    out.components[kNames[d]] = c.item();
    dims.push_back(c);
  }
  out.total = tape.scale(tape.reduce_sum(tape.concat(dims, 1)), -1.0 / 3.0);
  return out;
}

}  // namespace sa2sr
