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

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sa2sr/checkpoint.hpp"
#include "sa2sr/config.hpp"
#include "sa2sr/correlation.hpp"
#include "sa2sr/dataset.hpp"
#include "sa2sr/synthetic.hpp"
#include "test_support.hpp"

namespace sa2sr {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

ManifestSplit parse(const std::string& text, ManifestMode mode) {
  std::istringstream in(text);
  return parse_manifest(in, "/data", mode, "m.jsonl");
}

// ---- manifests --------------------------------------------------------------------

TEST(Manifest, EmptyFileIsAnError) {
  EXPECT_NE(error_of([] { parse("", ManifestMode::kAny); }).find("empty manifest"), std::string::npos);
  EXPECT_NE(error_of([] { parse("\n  \n", ManifestMode::kAny); }).find("empty manifest"), std::string::npos);
}

TEST(Manifest, LikertValuesRescaleToUnitRange) {
  const auto m = parse(R"({"audio": "a.wav", "activation": 4, "valence": 1, "dominance": 7})", ManifestMode::kFinetune);
  ASSERT_EQ(m.train.size(), 1u);
  const auto avd = *m.train[0].avd;
  EXPECT_DOUBLE_EQ(avd[0], 0.0);
  EXPECT_DOUBLE_EQ(avd[1], -1.0);
  EXPECT_DOUBLE_EQ(avd[2], 1.0);
  EXPECT_DOUBLE_EQ(unit_to_likert(likert_to_unit(5.5)), 5.5);
}

TEST(Manifest, SentimentNamesMapToFixedOrder) {
  const auto m = parse(
      "{\"audio\": \"a.wav\", \"transcript\": \"hi\", \"sentiment\": \"positive\"}\n"
      "{\"audio\": \"b.wav\", \"transcript\": \"hi\", \"sentiment\": \"negative\"}\n"
      "{\"audio\": \"c.wav\", \"transcript\": \"hi\", \"sentiment\": \"neutral\"}\n",
      ManifestMode::kPretrain);
  ASSERT_EQ(m.train.size(), 3u);
  EXPECT_EQ(*m.train[0].sentiment, 2);
  EXPECT_EQ(*m.train[1].sentiment, 0);
  EXPECT_EQ(*m.train[2].sentiment, 1);
}

TEST(Manifest, SplitsAndRelativePaths) {
  const auto m = parse(
      "{\"audio\": \"a.wav\"}\n"
      "{\"audio\": \"/abs/b.wav\", \"split\": \"dev\"}\n"
      "{\"audio\": \"c.wav\", \"split\": \"test\"}\n",
      ManifestMode::kAny);
  ASSERT_EQ(m.train.size(), 1u);
  ASSERT_EQ(m.validation.size(), 1u);
  ASSERT_EQ(m.test.size(), 1u);
  EXPECT_EQ(m.train[0].audio, fs::path("/data/a.wav"));
  EXPECT_EQ(m.validation[0].audio, fs::path("/abs/b.wav"));
  EXPECT_EQ(&m.get("test"), &m.test);
  EXPECT_THROW(m.get("holdout"), Error);
}

TEST(Manifest, ModeRequirementsRejectEveryOffendingLine) {
  const std::string text =
      "{\"audio\": \"a.wav\", \"transcript\": \"ok\", \"sentiment\": \"neutral\"}\n"
      "{\"audio\": \"b.wav\", \"sentiment\": \"neutral\"}\n"
      "{\"audio\": \"c.wav\", \"transcript\": \"ok\"}\n";
  const std::string msg = error_of([&] { parse(text, ManifestMode::kPretrain); });
  EXPECT_NE(msg.find("2 invalid record"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
  EXPECT_EQ(msg.find("line 1"), std::string::npos) << msg;
  // The same lines carry nothing fine-tuning needs.
  EXPECT_NE(error_of([&] { parse(text, ManifestMode::kFinetune); }).find("3 invalid record"), std::string::npos);
  EXPECT_EQ(parse(text, ManifestMode::kAny).train.size(), 3u);
}

TEST(Manifest, RejectsOutOfScaleAndPartialAvd) {
  EXPECT_NE(error_of([] {
              parse(R"({"audio": "a.wav", "activation": 0.5, "valence": 4, "dominance": 4})", ManifestMode::kAny);
            }).find("[1, 7]"),
            std::string::npos);
  EXPECT_NE(error_of([] { parse(R"({"audio": "a.wav", "valence": 4})", ManifestMode::kAny); }).find("together"),
            std::string::npos);
}

TEST(Manifest, DuplicateAndCrossSplitPathsAreErrors) {
  EXPECT_NE(error_of([] { parse("{\"audio\": \"a.wav\"}\n{\"audio\": \"./a.wav\"}\n", ManifestMode::kAny); })
                .find("duplicate audio"),
            std::string::npos);
  EXPECT_NE(error_of([] {
              parse("{\"audio\": \"a.wav\"}\n{\"audio\": \"a.wav\", \"split\": \"test\"}\n", ManifestMode::kAny);
            }).find("also appears in split"),
            std::string::npos);
}

TEST(Manifest, MalformedLinesAreReportedWithLineNumbers) {
  const std::string msg = error_of([] { parse("{\"audio\": \"a.wav\"}\nnot json\n[1]\n", ManifestMode::kAny); });
  EXPECT_NE(msg.find("line 2: not valid JSON"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 3: expected a JSON object"), std::string::npos) << msg;
}

// ---- synthetic corpora ------------------------------------------------------------

std::map<std::string, std::string> directory_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = bytes::read_file(e.path());
  return out;
}

TEST(Synthetic, SameArgumentsGiveIdenticalBytes) {
  for (const char* kind : {"asr", "sentiment", "avd", "combined"}) {
    TempDir a("synth"), b("synth");
    generate_synthetic(synth_kind(kind), 9, 5, a.path());
    generate_synthetic(synth_kind(kind), 9, 5, b.path());
    const auto fa = directory_bytes(a.path());
    EXPECT_EQ(fa.size(), 10u) << kind;
    EXPECT_EQ(fa, directory_bytes(b.path())) << kind;
  }
}

TEST(Synthetic, DifferentSeedsDiffer) {
  const auto a = synthesize(SynthKind::kCombined, 8, 1), b = synthesize(SynthKind::kCombined, 8, 2);
  EXPECT_NE(a[0].wave.samples, b[0].wave.samples);
}

TEST(Synthetic, NeedsAtLeastEightUtterances) {
  EXPECT_THROW(synthesize(SynthKind::kAsr, 7, 1), Error);
  EXPECT_THROW(synth_kind("speech"), Error);
}

TEST(Synthetic, ManifestLoadsUnderEveryMode) {
  TempDir dir("synth");
  const auto m = load_manifest(generate_synthetic(SynthKind::kCombined, 12, 3, dir.path()), ManifestMode::kPretrain);
  EXPECT_EQ(m.train.size(), 9u);
  EXPECT_EQ(m.validation.size(), 3u);
  EXPECT_NO_THROW(load_manifest(dir / "manifest.jsonl", ManifestMode::kFinetune));
  for (const auto& r : m.train) EXPECT_TRUE(fs::exists(r.audio)) << r.audio;
}

TEST(Synthetic, AsrTranscriptsHaveTwoToFiveLetters) {
  for (const auto& u : synthesize(SynthKind::kAsr, 40, 8)) {
    ASSERT_TRUE(u.record.transcript);
    EXPECT_GE(u.record.transcript->size(), 2u);
    EXPECT_LE(u.record.transcript->size(), 5u);
    EXPECT_FALSE(u.record.sentiment);
  }
}

TEST(Synthetic, AvdRecordsInvertFromAcousticParameters) {
  for (const auto& u : synthesize(SynthKind::kAvd, 50, 4)) {
    const auto latent = avd_latent_from_acoustics(u.f0, u.amplitude_ratio, u.duration);
    const auto& avd = *u.record.avd;
    for (std::size_t d = 0; d < 3; ++d) {
      EXPECT_NEAR(latent[d], u.latent[d], 1e-12);
      // Likert 1 + 6u, then (v - 4) / 3.
      EXPECT_NEAR(avd[d], 2.0 * latent[d] - 1.0, 1e-12);
    }
  }
}

TEST(Synthetic, SentimentSeparableByMeanFrameEnergy) {
  // The linear classifier on a scalar is a pair of thresholds; it reaches
  // 100% accuracy iff the per-class energy ranges are ordered and disjoint.
  const FrontendConfig fe;
  std::array<std::pair<double, double>, 3> range;
  range.fill({1e300, -1e300});
  for (const auto& u : synthesize(SynthKind::kSentiment, 30, 6)) {
    const std::size_t win = fe.window_samples(16000), hop = fe.hop_samples(16000);
    double total = 0.0;
    std::size_t frames = 0;
    for (std::size_t s = 0; s + win <= u.wave.size(); s += hop, ++frames) {
      double e = 0.0;
      for (std::size_t k = 0; k < win; ++k) e += u.wave.samples[s + k] * u.wave.samples[s + k];
      total += e / static_cast<double>(win);
    }
    auto& r = range[static_cast<std::size_t>(*u.record.sentiment)];
    const double mean = total / static_cast<double>(frames);
    r = {std::min(r.first, mean), std::max(r.second, mean)};
  }
  EXPECT_LT(range[0].second, range[1].first);
  EXPECT_LT(range[1].second, range[2].first);
}

TEST(Synthetic, CombinedValenceFollowsSentimentClass) {
  for (const auto& u : synthesize(SynthKind::kCombined, 60, 2)) {
    const int cls = *u.record.sentiment;
    const double v = u.latent[1];
    EXPECT_GT(v, cls / 3.0) << u.name;
    EXPECT_LT(v, (cls + 1) / 3.0) << u.name;
    EXPECT_TRUE(u.record.transcript && u.record.avd);
  }
}

// ---- correlation analysis --------------------------------------------------------

TEST(Correlation, PairsExpandCountsAndKeepFirstSeenOrder) {
  std::istringstream in("# header\nnegative Sad 2\npositive Happy\nneutral\tSad\t0\n");
  const auto p = parse_labeled_pairs(in);
  EXPECT_EQ(p.sentiment, (std::vector<int>{0, 0, 2}));
  EXPECT_EQ(p.emotion_order, (std::vector<std::string>{"Sad", "Happy"}));
}

TEST(Correlation, BadLinesNameTheirLocation) {
  auto msg_of = [](const std::string& text) {
    return error_of([&] {
      std::istringstream in(text);
      parse_labeled_pairs(in, "pairs.tsv");
    });
  };
  EXPECT_NE(msg_of("negative\n").find("pairs.tsv:1"), std::string::npos);
  EXPECT_NE(msg_of("\nglad Happy\n").find("pairs.tsv:2"), std::string::npos);
  EXPECT_NE(msg_of("negative Sad -3\n").find("non-negative"), std::string::npos);
  EXPECT_NE(msg_of("negative Sad 1 2\n").find("too many"), std::string::npos);
}

TEST(Correlation, GroupingAndOrdinalSpearman) {
  const auto pairs = read_labeled_pairs(fs::path(SA2SR_FIXTURE_DIR) / "iemocap_sentiment_counts.tsv");
  const auto rep = analyze_correlation(pairs, parse_assignments("Frustrated=Anger"),
                                       {{"Sad", 0}, {"Anger", 0}, {"Neutral", 1}, {"Happy", 2}});
  EXPECT_EQ(rep.matrix.col_labels, (std::vector<std::string>{"Sad", "Anger", "Neutral", "Happy"}));
  EXPECT_EQ(rep.matrix.emotion_profile("Anger"), (std::vector<long long>{490 + 658, 518 + 1049, 94 + 141}));
  ASSERT_TRUE(rep.spearman);
  EXPECT_GT(*rep.spearman, 0.0);
  EXPECT_THROW(analyze_correlation(pairs, {}, {{"Sad", 0}}), Error);
  EXPECT_THROW(parse_assignments("a=b,c"), Error);
}

// ---- command line ----------------------------------------------------------------

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun cli(const TempDir& scratch, const std::string& args, const std::string& env = "") {
  static int n = 0;
  const auto out = scratch / ("stdout" + std::to_string(n));
  const auto err = scratch / ("stderr" + std::to_string(n++));
  const std::string cmd = env + " \"" SA2SR_CLI_PATH "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  CliRun r{WIFEXITED(status) ? WEXITSTATUS(status) : -1, "", ""};
  if (fs::exists(out)) r.out = bytes::read_file(out);
  if (fs::exists(err)) r.err = bytes::read_file(err);
  return r;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// Small enough for a few epochs in well under a second.
const char* kTinyConfig =
    "# tiny network for command-line tests\n"
    "encoder_layers = 1\nencoder_hidden = 6\nsummarizer_hidden = 5\n"
    "conv_channels = 6\nattn_heads = 2\nattn_dim = 8\n"
    "batch_size = 4\nmax_epochs = 2\nlr = 0.003\n";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    bytes::write_file_atomic(dir / "tiny.conf", kTinyConfig);
    ASSERT_EQ(cli(dir, "gen-synth --kind combined --n 10 --seed 3 --out " + q(dir / "syn")).code, 0);
  }
  fs::path manifest() const { return dir / "syn" / "manifest.jsonl"; }
  std::string base(const std::string& out) const {
    return "--manifest " + q(manifest()) + " --config " + q(dir / "tiny.conf") + " --out " + q(dir / out);
  }
  TempDir dir{"cli"};
};

TEST_F(Cli, GenSynthIsIdempotentAndHonorsEnvironmentSeed) {
  ASSERT_EQ(cli(dir, "gen-synth --kind combined --n 10 --seed 3 --out " + q(dir / "again")).code, 0);
  EXPECT_EQ(directory_bytes(dir / "syn"), directory_bytes(dir / "again"));
  ASSERT_EQ(cli(dir, "gen-synth --kind combined --n 10 --out " + q(dir / "env"), "SA2SR_SEED=3").code, 0);
  EXPECT_EQ(directory_bytes(dir / "syn"), directory_bytes(dir / "env"));
}

TEST_F(Cli, PretrainLambdaZeroIsTheAsrOnlyBaseline) {
  const CliRun r = cli(dir, "pretrain " + base("asr_only") + " --lambda 0");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto conf = KeyValueConfig::load(dir / "asr_only" / "effective.conf");
  EXPECT_EQ(conf.get_double("lambda", -1), 0.0);
  const auto history = read_history(dir / "asr_only" / "history.jsonl");
  ASSERT_EQ(history.size(), 2u);
  for (const auto& h : history) EXPECT_DOUBLE_EQ(h.train_losses.at("total"), h.train_losses.at("asr"));
  const auto report = nlohmann::json::parse(bytes::read_file(dir / "asr_only" / "report.json"));
  // The ASR-only baseline keeps the epoch with the lowest CER.
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i)
    if (history[i].validation.cer < history[best].validation.cer) best = i;
  EXPECT_EQ(report.at("best_epoch").get<int>(), static_cast<int>(best) + 1);
}

TEST_F(Cli, FinetuneFreezeEncoderKeepsPretrainedEncoder) {
  ASSERT_EQ(cli(dir, "pretrain " + base("pre")).code, 0);
  const CliRun r =
      cli(dir, "finetune " + base("fine") + " --init " + q(dir / "pre" / "best.ckpt") + " --freeze-encoder");
  ASSERT_EQ(r.code, 0) << r.err;
  const Checkpoint pre = load_checkpoint(dir / "pre" / "best.ckpt");
  const Checkpoint fine = load_checkpoint(dir / "fine" / "best.ckpt");
  EXPECT_EQ(pre.params.checksum("encoder/"), fine.params.checksum("encoder/"));
  EXPECT_NE(pre.params.checksum("regressor/"), fine.params.checksum("regressor/"));
  EXPECT_EQ(fine.metadata.at("mode"), "finetune");
  EXPECT_TRUE(KeyValueConfig::load(dir / "fine" / "effective.conf").get_bool("freeze_encoder", false));

  const CliRun ev = cli(dir, "evaluate --checkpoint " + q(dir / "fine" / "best.ckpt") + " --manifest " + q(manifest()) +
                              " --split validation --out " + q(dir / "eval"));
  ASSERT_EQ(ev.code, 0) << ev.err;
  const auto rep = nlohmann::json::parse(bytes::read_file(dir / "eval" / "report.json"));
  EXPECT_EQ(rep.at("utterances").get<int>(), 3);
  const auto best = fine.record().validation;
  // The checkpoint holds float32 weights, so scores agree to single precision.
  EXPECT_NEAR(rep.at("ccc_v").get<double>(), best.ccc_avd[1], 1e-4);
  EXPECT_EQ(rep.at("cer").get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(dir / "eval" / "report.txt"));
}

TEST_F(Cli, FinetuneWithoutInitIsTheNoPretrainingBaseline) {
  const CliRun r = cli(dir, "finetune " + base("scratch"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.err.find("initialized"), std::string::npos);
}

TEST_F(Cli, AnalyzeCorrelationOnPublishedCounts) {
  const CliRun r = cli(dir, "analyze-correlation --pairs " +
                             q(fs::path(SA2SR_FIXTURE_DIR) / "iemocap_sentiment_counts.tsv") + " --out " +
                             q(dir / "corr"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(bytes::read_file(dir / "corr" / "confusion.json"));
  EXPECT_EQ(j.at("columns").size(), 5u);
  EXPECT_EQ(j.at("rows").size(), 3u);
  long long neutral = 0;
  for (const auto& c : j.at("counts").at(1)) neutral += c.get<long long>();
  EXPECT_EQ(neutral, 4270);
  EXPECT_NE(r.out.find("4270"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "corr" / "confusion.txt"));
}

TEST_F(Cli, ErrorsExitNonzeroWithOneLineDiagnostic) {
  auto one_line_error = [](const CliRun& r) {
    EXPECT_NE(r.code, 0);
    EXPECT_EQ(r.err.rfind("sa2sr: error: ", 0), 0u) << r.err;
    EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1) << r.err;
  };
  one_line_error(cli(dir, "pretrain " + base("x") + " --no-such-flag"));
  one_line_error(cli(dir, "evaluate --checkpoint " + q(dir / "missing.ckpt") + " --manifest " + q(manifest()) +
                              " --out " + q(dir / "x")));
  one_line_error(cli(dir, "frobnicate"));
  // A transcript-only manifest cannot drive pre-training.
  ASSERT_EQ(cli(dir, "gen-synth --kind asr --n 8 --out " + q(dir / "asr")).code, 0);
  const CliRun mismatch = cli(dir, "pretrain --manifest " + q(dir / "asr" / "manifest.jsonl") + " --config " +
                                    q(dir / "tiny.conf") + " --out " + q(dir / "x"));
  one_line_error(mismatch);
  EXPECT_NE(mismatch.err.find("needs 'sentiment'"), std::string::npos);
  bytes::write_file_atomic(dir / "bad.conf", "encoder_layerz = 2\n");
  const CliRun bad = cli(dir, "pretrain --manifest " + q(manifest()) + " --config " + q(dir / "bad.conf") +
                               " --batch-size 4 --out " + q(dir / "x"));
  one_line_error(bad);
  EXPECT_NE(bad.err.find("unknown config key"), std::string::npos);
}

TEST_F(Cli, RerunIntoFreshDirectoryIsByteIdentical) {
  ASSERT_EQ(cli(dir, "pretrain " + base("r1") + " --seed 9").code, 0);
  ASSERT_EQ(cli(dir, "pretrain " + base("r2") + " --seed 9").code, 0);
  for (const char* f : {"best.ckpt", "report.json", "effective.conf"})
    EXPECT_EQ(bytes::read_file(dir / "r1" / f), bytes::read_file(dir / "r2" / f)) << f;
  const auto h1 = read_history(dir / "r1" / "history.jsonl"), h2 = read_history(dir / "r2" / "history.jsonl");
  ASSERT_EQ(h1.size(), h2.size());
  for (std::size_t i = 0; i < h1.size(); ++i) {
    EXPECT_EQ(h1[i].train_losses, h2[i].train_losses);
    EXPECT_EQ(h1[i].validation.to_json(), h2[i].validation.to_json());
  }
}

TEST_F(Cli, EffectiveConfigReproducesTheRun) {
  ASSERT_EQ(cli(dir, "pretrain " + base("orig") + " --lambda 50 --seed 4 --set patience=7").code, 0);
  const auto conf = KeyValueConfig::load(dir / "orig" / "effective.conf");
  EXPECT_EQ(conf.get_int("patience", 0), 7);
  EXPECT_EQ(conf.get_int("seed", 0), 4);
  // Flags beat the file, the file beats the environment seed.
  const CliRun again = cli(dir,
                        "pretrain --manifest " + q(manifest()) + " --config " + q(dir / "orig" / "effective.conf") +
                            " --out " + q(dir / "replay"),
                        "SA2SR_SEED=99");
  ASSERT_EQ(again.code, 0) << again.err;
  EXPECT_EQ(bytes::read_file(dir / "orig" / "best.ckpt"), bytes::read_file(dir / "replay" / "best.ckpt"));
  EXPECT_EQ(bytes::read_file(dir / "orig" / "effective.conf"), bytes::read_file(dir / "replay" / "effective.conf"));
}

TEST_F(Cli, ExtractFeaturesWritesOneBlobPerUtterance) {
  const CliRun r =
      cli(dir, "extract-features --manifest " + q(manifest()) + " --out " + q(dir / "feats") + " --threads 3");
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream index(dir / "feats" / "index.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(index, line)) {
    const auto j = nlohmann::json::parse(line);
    const FeatureMatrix f = read_feature_blob(dir / "feats" / j.at("features").get<std::string>());
    EXPECT_EQ(f.num_frames(), j.at("frames").get<std::size_t>());
    EXPECT_EQ(f.dim(), 40u);
    // Stored features are normalized per channel: mean 0 and variance 1,
    // or all zero for a constant channel.
    for (std::size_t c = 0; c < f.dim(); ++c) {
      double mean = 0, sq = 0;
      for (std::size_t t = 0; t < f.num_frames(); ++t) mean += f.frames(t, c) / static_cast<double>(f.num_frames());
      for (std::size_t t = 0; t < f.num_frames(); ++t) sq += (f.frames(t, c) - mean) * (f.frames(t, c) - mean);
      const double var = sq / static_cast<double>(f.num_frames());
      EXPECT_NEAR(mean, 0.0, 1e-5);
      if (var > 0) {
        EXPECT_NEAR(var, 1.0, 1e-4);
      }
    }
    ++n;
  }
  EXPECT_EQ(n, 10);
}

}  // namespace
}  // namespace sa2sr
