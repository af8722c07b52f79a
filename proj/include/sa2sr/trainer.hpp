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

// Pre-training (CTC + sentiment) and fine-tuning (CCC regression) loops,
// validation, early stopping and best-model tracking.
//
// Each utterance is run on its own tape; a mini-batch sums per-utterance
// gradients scaled by 1/batch before one Adam step. Fine-tuning puts a
// whole batch on one tape because CCC couples the batch rows.

#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "sa2sr/audio.hpp"
#include "sa2sr/config.hpp"
#include "sa2sr/dataset.hpp"
#include "sa2sr/frontend.hpp"
#include "sa2sr/history.hpp"
#include "sa2sr/metrics.hpp"
#include "sa2sr/network.hpp"
#include "sa2sr/objectives.hpp"
#include "sa2sr/optimizer.hpp"
#include "sa2sr/params.hpp"
#include "sa2sr/tokens.hpp"

namespace sa2sr {

using WarningSink = std::function<void(const std::string&)>;

inline WarningSink stderr_warnings() {
  return [](const std::string& msg) { std::cerr << "sa2sr: warning: " << msg << "\n"; };
}

/// Runs fn(i) for i in [0, n) over up to `threads` workers. The first
/// exception thrown by any worker is rethrown here.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

/// One utterance after feature extraction and normalization, before the
/// per-epoch augmentation and frame stacking.
struct PreparedUtterance {
  std::string id;
  std::vector<FeatureMatrix> variants;  // [0] is the original speed
  std::vector<int> target;
  std::string reference;  // transcript as the token inventory spells it
  std::optional<int> sentiment;
  std::optional<std::array<double, 3>> avd;
};

inline PreparedUtterance prepare_utterance(const UtteranceRecord& r, const FrontendConfig& cfg, bool speed_variants) {
  PreparedUtterance u;
  u.id = r.audio.lexically_normal().generic_string();
  if (r.transcript) {
    u.target = tokens::encode(*r.transcript);
    u.reference = tokens::decode(u.target);
  }
  u.sentiment = r.sentiment;
  u.avd = r.avd;
  const Waveform wave = read_wav(r.audio);
  u.variants.push_back(normalize_per_utterance(extract_lfbe(wave, cfg)));
  if (speed_variants)
    for (double f : cfg.speed_factors)
      if (f != 1.0) u.variants.push_back(normalize_per_utterance(extract_lfbe(speed_perturb(wave, f), cfg)));
  return u;
}

inline std::vector<PreparedUtterance> prepare_utterances(const std::vector<UtteranceRecord>& records,
                                                         const FrontendConfig& cfg, bool speed_variants,
                                                         unsigned threads = 1) {
  std::vector<PreparedUtterance> out(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    try {
      out[i] = prepare_utterance(records[i], cfg, speed_variants);
    } catch (const Error& e) {
      throw Error(records[i].audio.string() + ": " + e.what());
    }
  });
  return out;
}

/// Deterministic per-(seed, epoch, utterance, variant) stream seed.
inline std::uint64_t augment_seed(std::uint64_t seed, int epoch, const std::string& id, std::size_t variant) {
  const std::uint64_t h = init_detail::name_hash(id);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(h),
                    static_cast<std::uint32_t>(h >> 32), static_cast<std::uint32_t>(variant)};
  std::array<std::uint32_t, 2> words{};
  seq.generate(words.begin(), words.end());
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

/// Encoder input for one utterance: optional SpecAugment, then stacking.
inline FeatureMatrix model_input(const FeatureMatrix& normalized, const FrontendConfig& cfg, bool augment,
                                 std::uint64_t augment_rng) {
  if (augment) return stack_and_skip(spec_augment(normalized, cfg, augment_rng), cfg.stack, cfg.skip);
  return stack_and_skip(normalized, cfg.stack, cfg.skip);
}

struct EvalScope {
  bool asr_sentiment = true;
  bool avd = true;
};

/// Validation metrics over prepared (un-augmented) utterances. CER is
/// corpus level: total edits over total reference characters. Metrics whose
/// labels are absent stay 0.
inline metrics::EvalReport evaluate(const ParameterStore& params, const ModelConfig& model, const FrontendConfig& fe,
                                    const std::vector<PreparedUtterance>& data, EvalScope scope,
                                    const WarningSink& warn = stderr_warnings()) {
  if (data.empty()) throw Error("evaluation set is empty");
  std::size_t edits = 0, ref_chars = 0;
  std::vector<int> labels, predicted;
  Tensor scores;
  std::vector<std::vector<double>> score_rows;
  std::array<std::vector<double>, 3> truth, pred;
  for (const auto& u : data) {
    const FeatureMatrix x = model_input(u.variants.front(), fe, false, 0);
    ad::Tape tape;
    Binding bind(tape, params, true);
    const SequenceEncoding enc = encoder_forward(bind, x, model.encoder);
    if (scope.asr_sentiment && !u.reference.empty()) {
      const auto lp = token_head_forward(bind, enc);
      const std::string hyp = metrics::greedy_decode(lp.value(), enc.mask);
      edits += metrics::edit_distance(u.reference, hyp);
      ref_chars += u.reference.size();
    }
    if (scope.asr_sentiment && u.sentiment) {
      const Tensor lp = sentiment_head_forward(bind, enc, model.sentiment).value();
      std::vector<double> row(lp.cols());
      for (std::size_t k = 0; k < lp.cols(); ++k) row[k] = std::exp(lp(0, k));
      predicted.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
      score_rows.push_back(std::move(row));
      labels.push_back(*u.sentiment);
    }
    if (scope.avd && u.avd) {
      const Tensor y = regressor_forward(bind, enc, model.regressor).avd.value();
      for (std::size_t d = 0; d < 3; ++d) {
        truth[d].push_back((*u.avd)[d]);
        pred[d].push_back(y(0, d));
      }
    }
  }
  const double cer = ref_chars ? static_cast<double>(edits) / static_cast<double>(ref_chars) : 0.0;
  double auc = 0.0, war = 0.0;
  if (!labels.empty()) {
    war = metrics::weighted_average_recall(predicted, labels);
    scores = Tensor(score_rows.size(), score_rows.front().size());
    for (std::size_t i = 0; i < score_rows.size(); ++i)
      for (std::size_t k = 0; k < score_rows[i].size(); ++k) scores(i, k) = score_rows[i][k];
    try {
      auc = metrics::auc_ovr(scores, labels);
    } catch (const Error& e) {
      warn(std::string(e.what()) + "; reporting AUC 0.5");
      auc = 0.5;
    }
  }
  std::array<double, 3> ccc{0, 0, 0};
  if (!truth[0].empty())
    for (std::size_t d = 0; d < 3; ++d) ccc[d] = metrics::ccc(truth[d], pred[d]);
  return metrics::EvalReport::make(cer, auc, war, ccc);
}

/// Freezes the blocks a mode does not train. Pre-training never touches the
/// regressor; fine-tuning never touches the token and sentiment heads.
inline void apply_mode_freezing(ParameterStore& params, const TrainRunConfig& cfg) {
  params.set_frozen("", false);
  if (cfg.mode == RunMode::kPretrain) {
    params.set_frozen("regressor/", true);
  } else {
    params.set_frozen("token_head/", true);
    params.set_frozen("sentiment/", true);
    if (cfg.freeze_encoder) params.set_frozen("encoder/", true);
  }
}

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  bool stopped_early = false;
};

class Trainer {
 public:
  Trainer(TrainRunConfig cfg, ParameterStore params, std::vector<PreparedUtterance> train,
          std::vector<PreparedUtterance> validation, WarningSink warn = stderr_warnings())
      : cfg_(std::move(cfg)),
        params_(std::move(params)),
        train_(std::move(train)),
        validation_(std::move(validation)),
        warn_(std::move(warn)),
        adam_(cfg_.adam) {
    cfg_.validate();
    if (train_.empty()) throw Error("training set is empty");
    if (validation_.empty()) throw Error("validation set is empty");
    for (const auto& u : train_) check_labels(u, "training");
    for (const auto& u : validation_) check_labels(u, "validation");
    apply_mode_freezing(params_, cfg_);
    best_ = params_;
  }

  const TrainRunConfig& config() const { return cfg_; }
  const ParameterStore& params() const { return params_; }
  ParameterStore& params() { return params_; }
  /// Parameters from the epoch with the best stopping value so far.
  const ParameterStore& best_params() const { return best_; }
  const std::vector<EpochRecord>& history() const { return history_; }
  int epochs_done() const { return static_cast<int>(history_.size()); }

  /// One pass over the training set followed by validation.
  EpochRecord run_epoch() {
    const auto t0 = std::chrono::steady_clock::now();
    const int epoch = epochs_done() + 1;
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_losses = cfg_.mode == RunMode::kPretrain ? pretrain_pass(epoch) : finetune_pass(epoch);
    rec.validation = validate();
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history_.push_back(rec);
    const StopDecision d = early_stop(history_, cfg_.patience, cfg_.stop_criterion());
    if (d.best_epoch == epoch) best_ = params_;
    return rec;
  }

  /// Runs until early stopping fires or max_epochs. `on_epoch` sees every
  /// record as it is produced; returning true from `stop_when` ends the run
  /// after that epoch.
  TrainResult run(const std::function<void(const EpochRecord&)>& on_epoch = {},
                  const std::function<bool(const EpochRecord&)>& stop_when = {}) {
    TrainResult result;
    while (epochs_done() < cfg_.max_epochs) {
      const EpochRecord rec = run_epoch();
      if (on_epoch) on_epoch(rec);
      const StopDecision d = early_stop(history_, cfg_.patience, cfg_.stop_criterion());
      result.best_epoch = d.best_epoch;
      if (d.stop || (stop_when && stop_when(rec))) {
        result.stopped_early = true;
        break;
      }
    }
    result.history = history_;
    return result;
  }

  metrics::EvalReport validate() const {
    EvalScope scope;
    scope.asr_sentiment = cfg_.mode == RunMode::kPretrain;
    scope.avd = cfg_.mode == RunMode::kFinetune;
    return evaluate(params_, cfg_.model, cfg_.frontend, validation_, scope, warn_);
  }

 private:
  struct Item {
    std::size_t utt;
    std::size_t variant;
  };

  void check_labels(const PreparedUtterance& u, const std::string& split) const {
    if (cfg_.mode == RunMode::kPretrain && (u.target.empty() || !u.sentiment))
      throw Error(split + " utterance " + u.id + " lacks the transcript or sentiment pre-training needs");
    if (cfg_.mode == RunMode::kFinetune && !u.avd)
      throw Error(split + " utterance " + u.id + " lacks the activation/valence/dominance fine-tuning needs");
  }

  std::vector<std::vector<Item>> batches(int epoch) const {
    std::vector<Item> items;
    for (std::size_t i = 0; i < train_.size(); ++i)
      for (std::size_t v = 0; v < (cfg_.speed_perturb ? train_[i].variants.size() : 1); ++v) items.push_back({i, v});
    std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x5eedu};
    std::mt19937_64 rng(seq);
    std::shuffle(items.begin(), items.end(), rng);
    std::vector<std::vector<Item>> out;
    for (std::size_t i = 0; i < items.size(); i += static_cast<std::size_t>(cfg_.batch_size))
      out.emplace_back(items.begin() + static_cast<std::ptrdiff_t>(i),
                       items.begin() + static_cast<std::ptrdiff_t>(
                                           std::min(items.size(), i + static_cast<std::size_t>(cfg_.batch_size))));
    return out;
  }

  FeatureMatrix input_for(const Item& it, int epoch) const {
    const auto& u = train_[it.utt];
    return model_input(u.variants[it.variant], cfg_.frontend, cfg_.spec_augment,
                       augment_seed(cfg_.seed, epoch, u.id, it.variant));
  }

  std::map<std::string, double> pretrain_pass(int epoch) {
    double asr_sum = 0, sent_sum = 0, total_sum = 0;
    std::size_t used = 0;
    for (const auto& batch : batches(epoch)) {
      std::vector<std::pair<const Item*, FeatureMatrix>> ready;
      for (const auto& it : batch) {
        FeatureMatrix x = input_for(it, epoch);
        const auto& u = train_[it.utt];
        if (x.valid_frames() < ctc_min_frames(u.target)) {
          warn_("skipping " + u.id + ": target unalignable (" + std::to_string(x.valid_frames()) + " frames for " +
                std::to_string(u.target.size()) + " labels)");
          continue;
        }
        ready.emplace_back(&it, std::move(x));
      }
      if (ready.empty()) continue;
      params_.zero_grad();
      const double inv = 1.0 / static_cast<double>(ready.size());
      for (const auto& [it, x] : ready) {
        const auto& u = train_[it->utt];
        ad::Tape tape;
        Binding bind(tape, params_);
        const SequenceEncoding enc = encoder_forward(bind, x, cfg_.model.encoder);
        const auto asr = ctc_loss(tape, token_head_forward(bind, enc), u.target, enc.mask);
        const auto sent = sentiment_ce(tape, sentiment_head_forward(bind, enc, cfg_.model.sentiment), *u.sentiment);
        const LossValue loss = global_loss(tape, asr, sent, cfg_.lambda);
        tape.backward(tape.scale(loss.total, inv));
        bind.accumulate_into(params_);
        asr_sum += loss.components.at("asr");
        sent_sum += loss.components.at("sentiment");
        total_sum += loss.total.item();
        ++used;
      }
      adam_.step(params_);
    }
    if (used == 0) throw Error("no trainable utterance in this epoch: every target was unalignable");
    const double n = static_cast<double>(used);
    return {{"asr", asr_sum / n}, {"sentiment", sent_sum / n}, {"total", total_sum / n}};
  }

  std::map<std::string, double> finetune_pass(int epoch) {
    std::map<std::string, double> sums;
    std::size_t steps = 0;
    for (const auto& batch : batches(epoch)) {
      if (batch.size() < 2) {
        warn_("dropping a batch of size " + std::to_string(batch.size()) + ": CCC is undefined below 2");
        continue;
      }
      params_.zero_grad();
      ad::Tape tape;
      Binding bind(tape, params_);
      std::vector<ad::DiffArray> rows;
      Tensor truth(batch.size(), 3);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& u = train_[batch[b].utt];
        const SequenceEncoding enc = encoder_forward(bind, input_for(batch[b], epoch), cfg_.model.encoder);
        rows.push_back(regressor_forward(bind, enc, cfg_.model.regressor).avd);
        for (std::size_t d = 0; d < 3; ++d) truth(b, d) = (*u.avd)[d];
      }
      const LossValue loss = ccc_loss(tape, tape.concat(rows, 0), tape.leaf(truth, false));
      tape.backward(loss.total);
      bind.accumulate_into(params_);
      adam_.step(params_);
      sums["total"] += loss.total.item();
      for (const auto& [k, v] : loss.components) sums[k] += v;
      ++steps;
    }
    if (steps == 0) throw Error("no fine-tuning batch of size >= 2 in this epoch");
    for (auto& [k, v] : sums) v /= static_cast<double>(steps);
    return sums;
  }

  TrainRunConfig cfg_;
  ParameterStore params_;
  ParameterStore best_;
  std::vector<PreparedUtterance> train_;
  std::vector<PreparedUtterance> validation_;
  WarningSink warn_;
  Adam adam_;
  std::vector<EpochRecord> history_;
};

}  // namespace sa2sr
