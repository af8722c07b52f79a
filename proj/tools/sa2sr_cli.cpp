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

// sa2sr command line: gen-synth, extract-features, pretrain, finetune,
// evaluate, analyze-correlation. Every command writes under --out and exits
// nonzero with a one-line diagnostic on error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sa2sr/checkpoint.hpp"
#include "sa2sr/config.hpp"
#include "sa2sr/correlation.hpp"
#include "sa2sr/dataset.hpp"
#include "sa2sr/synthetic.hpp"
#include "sa2sr/trainer.hpp"

namespace fs = std::filesystem;
using namespace sa2sr;

namespace {

struct RunFlags {
  std::string manifest;
  std::string out;
  std::string config;
  std::string init;
  std::vector<std::string> sets;
  std::optional<double> lambda;
  std::optional<double> lr;
  std::optional<int> batch_size;
  std::optional<int> max_epochs;
  std::optional<int> patience;
  std::optional<std::uint64_t> seed;
  bool freeze_encoder = false;
  unsigned threads = 1;
};

// Keys that describe the network and features; a checkpoint passed to
// --init supplies these so the architecture matches the saved weights.
bool architecture_key(const std::string& k) {
  static const std::vector<std::string> keys = {"n_mels", "window_ms", "hop_ms", "stack", "skip", "log_floor",
                                                "encoder_layers", "encoder_hidden", "summarizer_hidden",
                                                "conv_channels", "attn_heads", "attn_dim", "leaky_alpha"};
  return std::find(keys.begin(), keys.end(), k) != keys.end();
}

KeyValueConfig checkpoint_config(const Checkpoint& ck, const std::string& path) {
  if (!ck.metadata.contains("config")) throw Error(path + ": checkpoint carries no configuration");
  KeyValueConfig kv;
  const auto j = nlohmann::json::parse(ck.metadata.at("config"));
  for (auto it = j.begin(); it != j.end(); ++it) kv.set(it.key(), it.value().get<std::string>());
  return kv;
}

std::string config_json(const KeyValueConfig& kv) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : kv.values()) j[k] = v;
  return j.dump();
}

/// defaults < SA2SR_SEED < --init architecture < --config < --set < flags.
KeyValueConfig effective_config(const RunFlags& f, RunMode mode, const std::optional<Checkpoint>& init) {
  KeyValueConfig kv;
  kv.set("mode", run_mode_name(mode));
  kv.set("seed", std::to_string(env_seed(0)));
  if (init) {
    const KeyValueConfig saved = checkpoint_config(*init, f.init);
    for (const auto& [k, v] : saved.values())
      if (architecture_key(k)) kv.set(k, v);
  }
  if (!f.config.empty()) {
    const KeyValueConfig file = KeyValueConfig::load(f.config);
    if (file.contains("mode") && file.get_string("mode", "") != run_mode_name(mode))
      throw Error(f.config + ": mode = " + file.get_string("mode", "") + " does not match command " +
                  run_mode_name(mode));
    kv.merge(file);
  }
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw Error("--set expects key=value, got '" + s + "'");
    kv.set(KeyValueConfig::trim(s.substr(0, eq)), KeyValueConfig::trim(s.substr(eq + 1)));
  }
  if (f.lambda) kv.set("lambda", format_double(*f.lambda));
  if (f.lr) kv.set("lr", format_double(*f.lr));
  if (f.batch_size) kv.set("batch_size", std::to_string(*f.batch_size));
  if (f.max_epochs) kv.set("max_epochs", std::to_string(*f.max_epochs));
  if (f.patience) kv.set("patience", std::to_string(*f.patience));
  if (f.seed) kv.set("seed", std::to_string(*f.seed));
  if (f.freeze_encoder) kv.set("freeze_encoder", "true");
  return kv;
}

void add_run_options(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--manifest", f.manifest, "JSON-lines manifest")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "output directory")->required();
  cmd->add_option("--config", f.config, "key = value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--set", f.sets, "override one configuration key (key=value); repeatable");
  cmd->add_option("--init", f.init, "initialize from this checkpoint")->check(CLI::ExistingFile);
  cmd->add_option("--lambda", f.lambda, "sentiment loss weight");
  cmd->add_option("--lr", f.lr, "Adam learning rate");
  cmd->add_option("--batch-size", f.batch_size, "mini-batch size");
  cmd->add_option("--max-epochs", f.max_epochs, "epoch limit");
  cmd->add_option("--patience", f.patience, "early-stopping patience in epochs");
  cmd->add_option("--seed", f.seed, "random seed (default: SA2SR_SEED or 0)");
  cmd->add_option("--threads", f.threads, "feature extraction workers")->check(CLI::Range(1u, 256u));
}

int run_training(const RunFlags& f, RunMode mode) {
  std::optional<Checkpoint> init;
  if (!f.init.empty()) init = load_checkpoint(f.init);
  const KeyValueConfig kv = effective_config(f, mode, init);
  const TrainRunConfig cfg = run_config_from(kv);
  cfg.validate();

  const ManifestSplit data =
      load_manifest(f.manifest, mode == RunMode::kPretrain ? ManifestMode::kPretrain : ManifestMode::kFinetune);
  if (data.train.empty()) throw Error(f.manifest + ": no train records");
  if (data.validation.empty()) throw Error(f.manifest + ": no validation records (early stopping needs them)");

  const fs::path out(f.out);
  fs::create_directories(out);
  bytes::write_file_atomic(out / "effective.conf", kv.text());
  fs::remove(out / "history.jsonl");

  ParameterStore params = init_parameters(cfg.seed, cfg.model);
  if (init) {
    // Fine-tuning takes only the encoder; pre-training resumes everything.
    const std::size_t n = copy_parameters(init->params, params, mode == RunMode::kFinetune ? "encoder/" : "");
    std::cerr << "sa2sr: initialized " << n << " parameters from " << f.init << "\n";
  }

  auto train = prepare_utterances(data.train, cfg.frontend, cfg.speed_perturb, f.threads);
  auto validation = prepare_utterances(data.validation, cfg.frontend, false, f.threads);
  Trainer trainer(cfg, std::move(params), std::move(train), std::move(validation));

  std::map<std::string, std::string> meta{{"config", config_json(kv)}, {"mode", run_mode_name(mode)}};
  const TrainResult result = trainer.run([&](const EpochRecord& rec) {
    append_history(out / "history.jsonl", rec);
    const auto& v = rec.validation;
    std::fprintf(stderr, "epoch %d  train %.6f  cer %.4f  auc %.4f  ccc %.4f/%.4f/%.4f\n", rec.epoch,
                 rec.train_losses.at("total"), v.cer, v.auc, v.ccc_avd[0], v.ccc_avd[1], v.ccc_avd[2]);
  });

  EpochRecord best = result.history.at(static_cast<std::size_t>(result.best_epoch - 1));
  best.wall_seconds = 0;  // keeps re-runs byte-identical
  save_checkpoint(out / "best.ckpt", trainer.best_params(), &best, meta);
  nlohmann::json report = best.validation.to_json();
  report["best_epoch"] = result.best_epoch;
  report["epochs"] = static_cast<int>(result.history.size());
  report["stopped_early"] = result.stopped_early;
  bytes::write_file_atomic(out / "report.json", report.dump(2) + "\n");
  std::cout << "best epoch " << result.best_epoch << " of " << result.history.size() << "\n"
            << best.validation.to_key_value();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sa2sr: sentiment-aware speech recognition pre-training for speech emotion recognition"};
  app.require_subcommand(1);

  // gen-synth
  std::string kind = "combined", synth_out;
  std::size_t synth_n = 32;
  std::optional<std::uint64_t> synth_seed;
  SynthOptions synth_opt;
  auto* gen = app.add_subcommand("gen-synth", "write a deterministic synthetic corpus");
  gen->add_option("--kind", kind, "asr | sentiment | avd | combined")
      ->check(CLI::IsMember({"asr", "sentiment", "avd", "combined"}));
  gen->add_option("--n", synth_n, "number of utterances (>= 8)");
  gen->add_option("--seed", synth_seed, "random seed (default: SA2SR_SEED or 0)");
  gen->add_option("--validation-fraction", synth_opt.validation_fraction, "share of utterances in validation")
      ->check(CLI::Range(0.0, 0.99));
  gen->add_option("--out", synth_out, "output directory")->required();

  // extract-features
  std::string fx_manifest, fx_out, fx_config;
  unsigned fx_threads = std::max(1u, std::thread::hardware_concurrency());
  auto* fx = app.add_subcommand("extract-features", "compute normalized LFBE feature blobs for a manifest");
  fx->add_option("--manifest", fx_manifest, "JSON-lines manifest")->required()->check(CLI::ExistingFile);
  fx->add_option("--out", fx_out, "output directory")->required();
  fx->add_option("--config", fx_config, "key = value configuration file")->check(CLI::ExistingFile);
  fx->add_option("--threads", fx_threads, "worker threads")->check(CLI::Range(1u, 256u));

  // pretrain / finetune
  RunFlags pre_flags, fine_flags;
  auto* pre = app.add_subcommand("pretrain", "CTC + sentiment pre-training of the acoustic encoder");
  add_run_options(pre, pre_flags);
  auto* fine = app.add_subcommand("finetune", "CCC fine-tuning of the activation/valence/dominance regressor");
  add_run_options(fine, fine_flags);
  fine->add_flag("--freeze-encoder", fine_flags.freeze_encoder, "keep the encoder weights fixed");

  // evaluate
  std::string ev_ckpt, ev_manifest, ev_out, ev_split = "test";
  auto* ev = app.add_subcommand("evaluate", "score a checkpoint on one manifest split");
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--manifest", ev_manifest, "JSON-lines manifest")->required()->check(CLI::ExistingFile);
  ev->add_option("--split", ev_split, "train | validation | test")
      ->check(CLI::IsMember({"train", "validation", "test"}));
  ev->add_option("--out", ev_out, "output directory")->required();

  // analyze-correlation
  std::string ac_pairs, ac_out, ac_group, ac_ordinal;
  auto* ac = app.add_subcommand("analyze-correlation", "text sentiment vs. speech emotion confusion and Spearman");
  ac->add_option("--pairs", ac_pairs, "labeled pairs file: <sentiment> <emotion> [count]")
      ->required()
      ->check(CLI::ExistingFile);
  ac->add_option("--group", ac_group, "merge emotion classes, e.g. Frustrated=Anger");
  ac->add_option("--ordinal", ac_ordinal, "ordinal value per emotion class for Spearman, e.g. Sad=0,Happy=2");
  ac->add_option("--out", ac_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "sa2sr: error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*gen) {
      const auto path = generate_synthetic(synth_kind(kind), synth_n, synth_seed.value_or(env_seed(0)), synth_out,
                                           synth_opt);
      std::cout << path.string() << "\n";
    } else if (*fx) {
      FrontendConfig fe;
      if (!fx_config.empty()) fe = run_config_from(KeyValueConfig::load(fx_config)).frontend;
      fe.validate();
      const ManifestSplit data = load_manifest(fx_manifest);
      std::vector<UtteranceRecord> records;
      for (const auto* split : {&data.train, &data.validation, &data.test})
        records.insert(records.end(), split->begin(), split->end());
      const fs::path out(fx_out);
      fs::create_directories(out / "features");
      std::vector<nlohmann::json> index(records.size());
      const fs::path manifest_dir = fs::path(fx_manifest).parent_path();
      parallel_for(records.size(), fx_threads, [&](std::size_t i) {
        const auto& r = records[i];
        FeatureMatrix feats;
        try {
          feats = normalize_per_utterance(extract_lfbe(read_wav(r.audio), fe));
        } catch (const Error& e) {
          throw Error(r.audio.string() + ": " + e.what());
        }
        char name[32];
        std::snprintf(name, sizeof name, "%06zu.lfbe", i);
        write_feature_blob(out / "features" / name, feats);
        index[i] = {{"audio", r.audio.lexically_relative(manifest_dir).generic_string()},
                    {"features", std::string("features/") + name},
                    {"split", r.split},
                    {"frames", feats.num_frames()},
                    {"dim", feats.dim()}};
      });
      std::string lines;
      for (const auto& j : index) lines += j.dump() + "\n";
      bytes::write_file_atomic(out / "index.jsonl", lines);
      std::cout << records.size() << " utterances\n";
    } else if (*pre) {
      return run_training(pre_flags, RunMode::kPretrain);
    } else if (*fine) {
      return run_training(fine_flags, RunMode::kFinetune);
    } else if (*ev) {
      const Checkpoint ck = load_checkpoint(ev_ckpt);
      TrainRunConfig cfg = run_config_from(checkpoint_config(ck, ev_ckpt));
      const ManifestSplit data = load_manifest(ev_manifest);
      const auto& records = data.get(ev_split);
      if (records.empty()) throw Error(ev_manifest + ": split " + ev_split + " has no records");
      // A checkpoint is scored only on the heads its mode trained.
      const std::string mode = ck.metadata.contains("mode") ? ck.metadata.at("mode") : "";
      EvalScope scope;
      const auto any_of = [&](auto pred) { return std::any_of(records.begin(), records.end(), pred); };
      scope.asr_sentiment =
          mode != "finetune" && any_of([](const UtteranceRecord& r) { return r.transcript || r.sentiment; });
      scope.avd = mode != "pretrain" && any_of([](const UtteranceRecord& r) { return r.avd.has_value(); });
      if (!scope.asr_sentiment && !scope.avd)
        throw Error(ev_manifest + ": split " + ev_split + " carries no labels for a " + mode + " checkpoint");
      const auto utts = prepare_utterances(records, cfg.frontend, false);
      const metrics::EvalReport report = evaluate(ck.params, cfg.model, cfg.frontend, utts, scope);
      const fs::path out(ev_out);
      fs::create_directories(out);
      nlohmann::json j = report.to_json();
      j["split"] = ev_split;
      j["utterances"] = records.size();
      bytes::write_file_atomic(out / "report.json", j.dump(2) + "\n");
      bytes::write_file_atomic(out / "report.txt", report.to_key_value());
      std::cout << report.to_key_value();
    } else if (*ac) {
      const LabeledPairs pairs = read_labeled_pairs(ac_pairs);
      std::map<std::string, double> ordinal;
      for (const auto& [k, v] : parse_assignments(ac_ordinal)) {
        try {
          ordinal[k] = std::stod(v);
        } catch (const std::exception&) {
          throw Error("--ordinal: value for " + k + " is not a number: '" + v + "'");
        }
      }
      const CorrelationReport rep = analyze_correlation(pairs, parse_assignments(ac_group), ordinal);
      const fs::path out(ac_out);
      fs::create_directories(out);
      bytes::write_file_atomic(out / "confusion.txt", rep.matrix.to_text());
      bytes::write_file_atomic(out / "confusion.json", rep.matrix.to_json().dump(2) + "\n");
      nlohmann::json j = {{"pairs", pairs.sentiment.size()}};
      if (rep.spearman) j["spearman"] = *rep.spearman;
      bytes::write_file_atomic(out / "report.json", j.dump(2) + "\n");
      std::cout << rep.matrix.to_text();
      if (rep.spearman) std::cout << "spearman " << *rep.spearman << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "sa2sr: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
