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

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <random>

#include "sa2sr/checkpoint.hpp"
#include "sa2sr/config.hpp"
#include "sa2sr/synthetic.hpp"
#include "sa2sr/trainer.hpp"
#include "test_support.hpp"

namespace sa2sr {
namespace {

using testing::TempDir;

// ---- Adam -------------------------------------------------------------------

ParameterStore scalar_store(double v) {
  ParameterStore s;
  Tensor t(1, 1);
  t[0] = v;
  s.add("w", t);
  return s;
}

void set_grad(ParameterStore& s, const std::string& name, double g) {
  s.at(name).grad.fill(g);
  s.at(name).has_grad = true;
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParameterStore s;
  std::mt19937_64 rng(3);
  s.add("a", testing::random_tensor(rng, 3, 4));
  s.add("b", testing::random_tensor(rng, 1, 5));
  const auto before = s.checksum();
  Adam adam(AdamConfig{});
  for (int i = 0; i < 5; ++i) {
    set_grad(s, "a", 0.0);
    set_grad(s, "b", 0.0);
    adam.step(s);
  }
  EXPECT_EQ(s.checksum(), before);
}

TEST(Adam, FirstStepWithUnitGradientMovesByLearningRate) {
  AdamConfig cfg;
  cfg.lr = 1e-3;
  ParameterStore s = scalar_store(0.5);
  set_grad(s, "w", 1.0);
  Adam adam(cfg);
  adam.step(s);
  // m_hat = 1, v_hat = 1 after bias correction: update = lr / (1 + eps).
  EXPECT_NEAR(s.at("w").value[0], 0.5 - cfg.lr / (1.0 + cfg.eps), 1e-15);
  EXPECT_FALSE(s.at("w").has_grad);
  EXPECT_EQ(s.at("w").grad[0], 0.0);
}

TEST(Adam, FrozenParameterIsBitIdentical) {
  ParameterStore s = scalar_store(0.25);
  Tensor t(2, 2);
  t.fill(1.0);
  s.add("frozen/x", t);
  s.set_frozen("frozen/", true);
  set_grad(s, "w", 1.0);
  set_grad(s, "frozen/x", 3.0);
  const auto before = s.checksum("frozen/");
  Adam adam(AdamConfig{});
  adam.step(s);
  EXPECT_EQ(s.checksum("frozen/"), before);
  EXPECT_NE(s.at("w").value[0], 0.25);
}

TEST(Adam, MinimizesQuadratic) {
  AdamConfig cfg;
  cfg.lr = 1e-2;
  ParameterStore s = scalar_store(3.0);
  Adam adam(cfg);
  for (int i = 0; i < 5000; ++i) {
    set_grad(s, "w", 2.0 * (s.at("w").value[0] - 1.0));
    adam.step(s);
  }
  EXPECT_LT(std::abs(s.at("w").value[0] - 1.0), 1e-3);
}

TEST(Adam, MissingGradientIsAnError) {
  ParameterStore s = scalar_store(1.0);
  Adam adam(AdamConfig{});
  EXPECT_THROW(adam.step(s), Error);
}

TEST(Adam, GradientClippingBoundsTheGlobalNorm) {
  AdamConfig cfg;
  cfg.clip_norm = 1.0;
  ParameterStore a = scalar_store(0.0), b = scalar_store(0.0);
  set_grad(a, "w", 1e6);
  set_grad(b, "w", 1.0);
  Adam(cfg).step(a);
  Adam(cfg).step(b);
  // Adam is scale free on the first step, so both land on the same value.
  EXPECT_DOUBLE_EQ(a.at("w").value[0], b.at("w").value[0]);
}

TEST(Adam, RejectsBadHyperparameters) {
  AdamConfig c;
  c.lr = 0;
  EXPECT_THROW(Adam{c}, Error);
  c = AdamConfig{};
  c.beta1 = 0.9999;
  EXPECT_THROW(Adam{c}, Error);
}

// ---- early stopping -----------------------------------------------------------

TEST(EarlyStop, PlateauAfterEpochTwoStopsAfterPatience) {
  std::vector<double> m = {0.5, 0.4};
  for (int i = 0; i < 24; ++i) m.push_back(0.4 + 0.01 * (i % 3));
  // 24 epochs past the best: keep going.
  auto d = early_stop(m, 25);
  EXPECT_FALSE(d.stop);
  EXPECT_EQ(d.best_epoch, 2);
  m.push_back(0.4);  // a tie is not an improvement
  d = early_stop(m, 25);
  EXPECT_TRUE(d.stop);
  EXPECT_EQ(d.best_epoch, 2);
  EXPECT_EQ(m.size(), 27u);
}

TEST(EarlyStop, MonotoneDecreaseNeverStops) {
  std::vector<double> m;
  for (int e = 0; e < 200; ++e) {
    m.push_back(1.0 - 0.001 * e);
    const auto d = early_stop(m, 25);
    ASSERT_FALSE(d.stop);
    ASSERT_EQ(d.best_epoch, e + 1);
  }
}

TEST(EarlyStop, PatienceOneStopsRightAfterARise) {
  const auto d = early_stop(std::vector<double>{0.3, 0.5}, 1);
  EXPECT_TRUE(d.stop);
  EXPECT_EQ(d.best_epoch, 1);
}

TEST(EarlyStop, ReturnsArgminNeverALaterEpoch) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> m;
    for (int e = 0; e < 40; ++e) m.push_back(std::round(u(rng) * 10) / 10);
    const auto d = early_stop(m, 5);
    const auto first_min = std::min_element(m.begin(), m.end()) - m.begin() + 1;
    EXPECT_EQ(d.best_epoch, first_min);
    EXPECT_EQ(d.stop, static_cast<int>(m.size()) - first_min >= 5);
  }
}

TEST(EarlyStop, CriterionSelectsTheMonitoredValue) {
  std::vector<EpochRecord> h(3);
  const double cer[3] = {0.5, 0.4, 0.45}, auc[3] = {0.6, 0.9, 0.7};
  const std::array<double, 3> ccc[3] = {{0.1, 0.1, 0.1}, {0.2, 0.2, 0.2}, {0.9, 0.9, 0.9}};
  for (int i = 0; i < 3; ++i) {
    h[i].epoch = i + 1;
    h[i].validation = metrics::EvalReport::make(cer[i], auc[i], 0.5, ccc[i]);
  }
  EXPECT_EQ(early_stop(h, 1, StopCriterion::kCerMinusAuc).best_epoch, 2);
  EXPECT_EQ(early_stop(h, 1, StopCriterion::kCer).best_epoch, 2);
  EXPECT_EQ(early_stop(h, 1, StopCriterion::kNegMeanCcc).best_epoch, 3);
  EXPECT_THROW(early_stop(std::vector<EpochRecord>{}, 1, StopCriterion::kCer), Error);
}

// ---- checkpoints ----------------------------------------------------------------

ModelConfig tiny_model() {
  ModelConfig m;
  m.encoder = {1, 6, 120};
  m.sentiment.summarizer_hidden = 5;
  m.regressor.conv_channels = 6;
  m.regressor.attn_heads = 2;
  m.regressor.attn_dim = 8;
  return m;
}

TEST(Checkpoint, RoundTripAtSinglePrecision) {
  TempDir dir("ckpt");
  const ParameterStore p = init_parameters(5, tiny_model());
  EpochRecord rec;
  rec.epoch = 7;
  rec.train_losses = {{"total", 1.25}};
  rec.validation = metrics::EvalReport::make(0.2, 0.8, 0.6, {0.1, 0.2, 0.3});
  save_checkpoint(dir / "a.ckpt", p, &rec, {{"note", "x=y"}});
  const Checkpoint ck = load_checkpoint(dir / "a.ckpt");
  ASSERT_EQ(ck.params.names(), p.names());
  for (const auto& [name, q] : p) {
    const Tensor& r = ck.params.at(name).value;
    ASSERT_TRUE(r.same_shape(q.value)) << name;
    for (std::size_t i = 0; i < r.size(); ++i) ASSERT_EQ(r[i], static_cast<double>(static_cast<float>(q.value[i])));
  }
  EXPECT_EQ(ck.metadata.at("note"), "x=y");
  EXPECT_EQ(ck.record().epoch, 7);
  EXPECT_DOUBLE_EQ(ck.record().validation.war, 0.6);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  TempDir dir("ckpt");
  save_checkpoint(dir / "a.ckpt", init_parameters(2, tiny_model()), nullptr, {{"k", "v"}});
  const Checkpoint ck = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(dir / "b.ckpt", ck.params, nullptr, ck.metadata);
  EXPECT_EQ(bytes::read_file(dir / "a.ckpt"), bytes::read_file(dir / "b.ckpt"));
}

TEST(Checkpoint, WrongMagicIsRejected) {
  std::string data = encode_checkpoint(scalar_store(1.0), {});
  data[0] = 'X';
  try {
    decode_checkpoint(data);
    FAIL() << "expected rejection";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
  }
}

TEST(Checkpoint, VersionMismatchIsRejected) {
  std::string data = encode_checkpoint(scalar_store(1.0), {});
  data[4] = 9;
  EXPECT_THROW(decode_checkpoint(data), FormatError);
}

TEST(Checkpoint, TruncationReportsTheByteOffset) {
  const std::string data = encode_checkpoint(scalar_store(1.0), {{"a", "b"}});
  for (std::size_t cut : {3ul, 9ul, 20ul, data.size() - 1}) {
    try {
      decode_checkpoint(data.substr(0, cut));
      FAIL() << "cut at " << cut;
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      EXPECT_NE(msg.find("byte offset"), std::string::npos) << msg;
    }
  }
  EXPECT_THROW(decode_checkpoint(data + "x"), FormatError);
}

TEST(Checkpoint, CopyParametersChecksShapes) {
  ParameterStore src = init_parameters(1, tiny_model());
  ParameterStore dst = init_parameters(2, tiny_model());
  EXPECT_GT(copy_parameters(src, dst, "encoder/"), 0u);
  EXPECT_EQ(src.checksum("encoder/"), dst.checksum("encoder/"));
  EXPECT_NE(src.checksum("regressor/"), dst.checksum("regressor/"));
  ModelConfig wider = tiny_model();
  wider.encoder.hidden = 7;
  ParameterStore other = init_parameters(1, wider);
  EXPECT_THROW(copy_parameters(src, other, "encoder/"), Error);
}

// ---- configuration -------------------------------------------------------------

TEST(Config, ParsesCommentsAndRejectsUnknownKeys) {
  const auto kv = KeyValueConfig::parse("# run\nlambda = 0   # ASR only\n\nbatch_size=4\nspeed_factors = 0.9, 1.1\n");
  const TrainRunConfig c = run_config_from(kv);
  EXPECT_EQ(c.lambda, 0.0);
  EXPECT_EQ(c.batch_size, 4);
  EXPECT_EQ(c.frontend.speed_factors, (std::vector<double>{0.9, 1.1}));
  EXPECT_EQ(c.stop_criterion(), StopCriterion::kCer);
  EXPECT_THROW(run_config_from(KeyValueConfig::parse("lamda = 1\n")), Error);
  EXPECT_THROW(KeyValueConfig::parse("no equals sign\n"), Error);
  EXPECT_THROW(run_config_from(KeyValueConfig::parse("batch_size = four\n")), Error);
}

TEST(Config, EchoRoundTripsExactly) {
  TrainRunConfig c;
  c.mode = RunMode::kFinetune;
  c.batch_size = 6;
  c.adam.lr = 1.0 / 3.0;
  c.freeze_encoder = true;
  c.frontend.speed_factors = {0.85, 1.15};
  c.model.encoder.layers = 3;
  const std::string text = to_key_value(c).text();
  const TrainRunConfig back = run_config_from(KeyValueConfig::parse(text));
  EXPECT_EQ(to_key_value(back).text(), text);
  EXPECT_EQ(back.adam.lr, c.adam.lr);
  EXPECT_TRUE(back.freeze_encoder);
}

TEST(Config, BatchSizeHasNoDefault) {
  TrainRunConfig c;
  EXPECT_THROW(c.validate(), Error);
  c.batch_size = 2;
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, SeedFromEnvironment) {
  ::setenv("SA2SR_SEED", "1234", 1);
  EXPECT_EQ(env_seed(7), 1234u);
  ::setenv("SA2SR_SEED", "x1", 1);
  EXPECT_THROW(env_seed(7), Error);
  ::unsetenv("SA2SR_SEED");
  EXPECT_EQ(env_seed(7), 7u);
}

// ---- training loops ----------------------------------------------------------------

struct Corpus {
  std::vector<PreparedUtterance> train, validation;
};

Corpus corpus(const TempDir& dir, SynthKind kind, std::size_t n, const FrontendConfig& fe, bool speed) {
  const auto manifest = generate_synthetic(kind, n, 21, dir.path());
  const ManifestSplit m = load_manifest(manifest);
  return {prepare_utterances(m.train, fe, speed), prepare_utterances(m.validation, fe, false)};
}

TrainRunConfig small_run(RunMode mode) {
  TrainRunConfig c;
  c.mode = mode;
  c.model = tiny_model();
  c.batch_size = 4;
  c.max_epochs = 3;
  c.adam.lr = 3e-3;
  c.seed = 17;
  return c;
}

WarningSink collect(std::vector<std::string>& out) {
  return [&out](const std::string& m) { out.push_back(m); };
}

TEST(Trainer, SameSeedGivesBitIdenticalRecords) {
  TempDir dir("train");
  const TrainRunConfig c = small_run(RunMode::kPretrain);
  const Corpus data = corpus(dir, SynthKind::kCombined, 10, c.frontend, true);
  auto once = [&] {
    Trainer t(c, init_parameters(c.seed, c.model), data.train, data.validation, [](const std::string&) {});
    std::vector<std::map<std::string, double>> losses;
    for (int e = 0; e < 2; ++e) losses.push_back(t.run_epoch().train_losses);
    return std::make_pair(losses, t.params().checksum());
  };
  const auto a = once(), b = once();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Trainer, LambdaZeroTotalEqualsAsrLoss) {
  TempDir dir("train");
  TrainRunConfig c = small_run(RunMode::kPretrain);
  c.lambda = 0.0;
  const Corpus data = corpus(dir, SynthKind::kCombined, 8, c.frontend, false);
  Trainer t(c, init_parameters(c.seed, c.model), data.train, data.validation, [](const std::string&) {});
  const auto rec = t.run_epoch();
  EXPECT_DOUBLE_EQ(rec.train_losses.at("total"), rec.train_losses.at("asr"));
  EXPECT_GT(rec.train_losses.at("sentiment"), 0.0);
}

TEST(Trainer, PretrainLossDecreasesOnOverfitSet) {
  TempDir dir("train");
  TrainRunConfig c = small_run(RunMode::kPretrain);
  c.speed_perturb = false;
  c.spec_augment = false;
  c.batch_size = 8;
  c.adam.lr = 2e-3;
  SynthOptions opt;
  opt.validation_fraction = 0.0;
  const ManifestSplit m = load_manifest(generate_synthetic(SynthKind::kCombined, 8, 4, dir.path(), opt));
  const auto train = prepare_utterances(m.train, c.frontend, false);
  Trainer t(c, init_parameters(c.seed, c.model), train, train, [](const std::string&) {});
  std::vector<double> total;
  for (int e = 0; e < 10; ++e) total.push_back(t.run_epoch().train_losses.at("total"));
  for (std::size_t e = 1; e < total.size(); ++e) EXPECT_LT(total[e], total[e - 1]) << "epoch " << e + 1;
}

TEST(Trainer, PretrainNeverTouchesTheRegressor) {
  TempDir dir("train");
  const TrainRunConfig c = small_run(RunMode::kPretrain);
  const Corpus data = corpus(dir, SynthKind::kCombined, 8, c.frontend, false);
  ParameterStore p = init_parameters(c.seed, c.model);
  const auto reg = p.checksum("regressor/"), enc = p.checksum("encoder/");
  Trainer t(c, std::move(p), data.train, data.validation, [](const std::string&) {});
  t.run_epoch();
  EXPECT_EQ(t.params().checksum("regressor/"), reg);
  EXPECT_NE(t.params().checksum("encoder/"), enc);
}

TEST(Trainer, FrozenEncoderChecksumConstantDuringFinetune) {
  TempDir dir("train");
  TrainRunConfig c = small_run(RunMode::kFinetune);
  c.freeze_encoder = true;
  const Corpus data = corpus(dir, SynthKind::kAvd, 12, c.frontend, true);
  ParameterStore p = init_parameters(c.seed, c.model);
  const auto enc = p.checksum("encoder/"), reg = p.checksum("regressor/");
  Trainer t(c, std::move(p), data.train, data.validation, [](const std::string&) {});
  for (int e = 0; e < 3; ++e) {
    t.run_epoch();
    EXPECT_EQ(t.params().checksum("encoder/"), enc);
  }
  EXPECT_NE(t.params().checksum("regressor/"), reg);
}

TEST(Trainer, UnfrozenFinetuneUpdatesTheEncoder) {
  TempDir dir("train");
  const TrainRunConfig c = small_run(RunMode::kFinetune);
  const Corpus data = corpus(dir, SynthKind::kAvd, 12, c.frontend, false);
  ParameterStore p = init_parameters(c.seed, c.model);
  const auto enc = p.checksum("encoder/"), tok = p.checksum("token_head/");
  Trainer t(c, std::move(p), data.train, data.validation, [](const std::string&) {});
  t.run_epoch();
  EXPECT_NE(t.params().checksum("encoder/"), enc);
  EXPECT_EQ(t.params().checksum("token_head/"), tok);
}

TEST(Trainer, SingletonFinetuneBatchIsDroppedWithWarning) {
  TempDir dir("train");
  TrainRunConfig c = small_run(RunMode::kFinetune);
  c.speed_perturb = false;
  const Corpus data = corpus(dir, SynthKind::kAvd, 12, c.frontend, false);  // 9 train
  std::vector<std::string> warnings;
  Trainer t(c, init_parameters(c.seed, c.model), data.train, data.validation, collect(warnings));
  t.run_epoch();
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("CCC is undefined"), std::string::npos);
}

TEST(Trainer, UnalignableUtteranceIsSkippedWithWarning) {
  TempDir dir("train");
  TrainRunConfig c = small_run(RunMode::kPretrain);
  c.speed_perturb = false;
  Corpus data = corpus(dir, SynthKind::kCombined, 8, c.frontend, false);
  // A transcript far longer than the frames can carry.
  data.train[0].target.assign(500, 1);
  std::vector<std::string> warnings;
  Trainer t(c, init_parameters(c.seed, c.model), data.train, data.validation, collect(warnings));
  const auto rec = t.run_epoch();
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("unalignable"), std::string::npos);
  EXPECT_TRUE(std::isfinite(rec.train_losses.at("total")));
}

TEST(Trainer, BestParametersFollowTheStoppingMetric) {
  TempDir dir("train");
  TrainRunConfig c = small_run(RunMode::kPretrain);
  c.max_epochs = 4;
  const Corpus data = corpus(dir, SynthKind::kCombined, 8, c.frontend, false);
  Trainer t(c, init_parameters(c.seed, c.model), data.train, data.validation, [](const std::string&) {});
  std::vector<std::uint64_t> sums;
  const TrainResult r = t.run([&](const EpochRecord&) { sums.push_back(t.params().checksum()); });
  ASSERT_EQ(r.history.size(), 4u);
  EXPECT_EQ(r.best_epoch, early_stop(r.history, c.patience, StopCriterion::kCerMinusAuc).best_epoch);
  EXPECT_EQ(t.best_params().checksum(), sums[static_cast<std::size_t>(r.best_epoch - 1)]);
}

TEST(Trainer, RequiresLabelsAndValidationData) {
  TempDir dir("train");
  const TrainRunConfig c = small_run(RunMode::kPretrain);
  const Corpus avd = corpus(dir, SynthKind::kAvd, 8, c.frontend, false);
  EXPECT_THROW(Trainer(c, init_parameters(1, c.model), avd.train, avd.validation), Error);
  EXPECT_THROW(Trainer(c, init_parameters(1, c.model), avd.train, {}), Error);
}

TEST(Trainer, AugmentationSeedDependsOnEveryInput) {
  const auto base = augment_seed(1, 2, "a.wav", 0);
  EXPECT_EQ(base, augment_seed(1, 2, "a.wav", 0));
  EXPECT_NE(base, augment_seed(2, 2, "a.wav", 0));
  EXPECT_NE(base, augment_seed(1, 3, "a.wav", 0));
  EXPECT_NE(base, augment_seed(1, 2, "b.wav", 0));
  EXPECT_NE(base, augment_seed(1, 2, "a.wav", 1));
}

TEST(Trainer, ParallelForVisitsEveryIndexOnceAndRethrows) {
  std::vector<int> hits(100, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  EXPECT_EQ(std::count(hits.begin(), hits.end(), 1), 100);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) { if (i == 7) throw Error("boom"); }), Error);
}

}  // namespace
}  // namespace sa2sr
