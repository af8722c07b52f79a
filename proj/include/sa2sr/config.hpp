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

// Flat "key = value" configuration with '#' comments, and the training run
// configuration built from it.

#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sa2sr/error.hpp"
#include "sa2sr/frontend.hpp"
#include "sa2sr/history.hpp"
#include "sa2sr/network.hpp"
#include "sa2sr/optimizer.hpp"

namespace sa2sr {

class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::string& name = "config") {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string body = trim(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos)
        throw Error(name + ":" + std::to_string(line_no) + ": expected 'key = value'");
      const std::string key = trim(body.substr(0, eq));
      if (key.empty()) throw Error(name + ":" + std::to_string(line_no) + ": empty key");
      cfg.values_[key] = trim(body.substr(eq + 1));
    }
    return cfg;
  }

  static KeyValueConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }

  /// Entries of `over` replace ours.
  void merge(const KeyValueConfig& over) {
    for (const auto& [k, v] : over.values_) values_[k] = v;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool contains(const std::string& key) const { return values_.contains(key); }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return parse_double(key, it->second);
  }
  long long get_int(const std::string& key, long long fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    long long v = 0;
    const auto& s = it->second;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw Error("config key " + key + ": not an integer: '" + s + "'");
    return v;
  }
  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const auto& s = it->second;
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw Error("config key " + key + ": not a boolean: '" + s + "'");
  }
  std::vector<double> get_list(const std::string& key, const std::vector<double>& fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    std::stringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(parse_double(key, item));
    }
    return out;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

 private:
  static double parse_double(const std::string& key, const std::string& s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw Error("config key " + key + ": not a number: '" + s + "'");
    }
  }

  std::map<std::string, std::string> values_;
};

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

enum class RunMode { kPretrain, kFinetune };

inline std::string run_mode_name(RunMode m) { return m == RunMode::kPretrain ? "pretrain" : "finetune"; }

struct TrainRunConfig {
  RunMode mode = RunMode::kPretrain;
  double lambda = 200.0;
  AdamConfig adam;
  int batch_size = 0;  // required; no default
  int patience = 25;
  int max_epochs = 100;
  std::uint64_t seed = 0;
  bool freeze_encoder = false;
  bool speed_perturb = true;
  bool spec_augment = true;
  FrontendConfig frontend;
  ModelConfig model;

  void validate() const {
    if (batch_size < 1) throw Error("batch_size is required and must be >= 1");
    if (!(lambda >= 0.0)) throw Error("lambda must be >= 0");
    if (patience < 1) throw Error("patience must be >= 1");
    if (max_epochs < 1) throw Error("max_epochs must be >= 1");
    adam.validate();
    frontend.validate();
    model.validate();
    if (model.encoder.input_dim != frontend.n_mels * frontend.stack)
      throw Error("encoder input_dim " + std::to_string(model.encoder.input_dim) + " must equal n_mels * stack = " +
                  std::to_string(frontend.n_mels * frontend.stack));
    if (mode == RunMode::kFinetune && batch_size < 2) throw Error("finetune needs batch_size >= 2 (CCC is undefined below)");
  }

  StopCriterion stop_criterion() const {
    if (mode == RunMode::kFinetune) return StopCriterion::kNegMeanCcc;
    return lambda == 0.0 ? StopCriterion::kCer : StopCriterion::kCerMinusAuc;
  }
};

/// Every key the run configuration understands.
inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "mode",          "lambda",         "lr",           "beta1",         "beta2",         "adam_eps",
      "clip_norm",     "batch_size",     "patience",     "max_epochs",    "seed",          "freeze_encoder",
      "speed_perturb", "spec_augment",   "n_mels",       "window_ms",     "hop_ms",        "speed_factors",
      "mask_prob",     "stack",          "skip",         "log_floor",     "max_time_mask", "max_freq_mask",
      "encoder_layers", "encoder_hidden", "summarizer_hidden", "conv_channels", "attn_heads", "attn_dim",
      "leaky_alpha"};
  return keys;
}

inline TrainRunConfig run_config_from(const KeyValueConfig& kv) {
  for (const auto& [k, v] : kv.values())
    if (std::find(config_keys().begin(), config_keys().end(), k) == config_keys().end())
      throw Error("unknown config key '" + k + "'");
  TrainRunConfig c;
  const std::string mode = kv.get_string("mode", "pretrain");
  if (mode == "pretrain") c.mode = RunMode::kPretrain;
  else if (mode == "finetune") c.mode = RunMode::kFinetune;
  else throw Error("config key mode: expected pretrain or finetune, got '" + mode + "'");
  c.lambda = kv.get_double("lambda", c.lambda);
  c.adam.lr = kv.get_double("lr", c.adam.lr);
  c.adam.beta1 = kv.get_double("beta1", c.adam.beta1);
  c.adam.beta2 = kv.get_double("beta2", c.adam.beta2);
  c.adam.eps = kv.get_double("adam_eps", c.adam.eps);
  c.adam.clip_norm = kv.get_double("clip_norm", c.adam.clip_norm);
  c.batch_size = static_cast<int>(kv.get_int("batch_size", c.batch_size));
  c.patience = static_cast<int>(kv.get_int("patience", c.patience));
  c.max_epochs = static_cast<int>(kv.get_int("max_epochs", c.max_epochs));
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
  c.freeze_encoder = kv.get_bool("freeze_encoder", c.freeze_encoder);
  c.speed_perturb = kv.get_bool("speed_perturb", c.speed_perturb);
  c.spec_augment = kv.get_bool("spec_augment", c.spec_augment);
  auto& f = c.frontend;
  f.n_mels = static_cast<int>(kv.get_int("n_mels", f.n_mels));
  f.window_ms = kv.get_double("window_ms", f.window_ms);
  f.hop_ms = kv.get_double("hop_ms", f.hop_ms);
  f.speed_factors = kv.get_list("speed_factors", f.speed_factors);
  f.mask_prob = kv.get_double("mask_prob", f.mask_prob);
  f.stack = static_cast<int>(kv.get_int("stack", f.stack));
  f.skip = static_cast<int>(kv.get_int("skip", f.skip));
  f.log_floor = kv.get_double("log_floor", f.log_floor);
  f.max_time_mask = static_cast<int>(kv.get_int("max_time_mask", f.max_time_mask));
  f.max_freq_mask = static_cast<int>(kv.get_int("max_freq_mask", f.max_freq_mask));
  auto& m = c.model;
  m.encoder.layers = static_cast<int>(kv.get_int("encoder_layers", m.encoder.layers));
  m.encoder.hidden = static_cast<int>(kv.get_int("encoder_hidden", m.encoder.hidden));
  m.encoder.input_dim = f.n_mels * f.stack;
  m.sentiment.summarizer_hidden = static_cast<int>(kv.get_int("summarizer_hidden", m.sentiment.summarizer_hidden));
  m.regressor.conv_channels = static_cast<int>(kv.get_int("conv_channels", m.regressor.conv_channels));
  m.regressor.attn_heads = static_cast<int>(kv.get_int("attn_heads", m.regressor.attn_heads));
  m.regressor.attn_dim = static_cast<int>(kv.get_int("attn_dim", m.regressor.attn_dim));
  m.regressor.leaky_alpha = kv.get_double("leaky_alpha", m.regressor.leaky_alpha);
  return c;
}

/// Full echo of a run configuration; parsing it back yields the same run.
inline KeyValueConfig to_key_value(const TrainRunConfig& c) {
  KeyValueConfig kv;
  kv.set("mode", run_mode_name(c.mode));
  kv.set("lambda", format_double(c.lambda));
  kv.set("lr", format_double(c.adam.lr));
  kv.set("beta1", format_double(c.adam.beta1));
  kv.set("beta2", format_double(c.adam.beta2));
  kv.set("adam_eps", format_double(c.adam.eps));
  kv.set("clip_norm", format_double(c.adam.clip_norm));
  kv.set("batch_size", std::to_string(c.batch_size));
  kv.set("patience", std::to_string(c.patience));
  kv.set("max_epochs", std::to_string(c.max_epochs));
  kv.set("seed", std::to_string(c.seed));
  kv.set("freeze_encoder", c.freeze_encoder ? "true" : "false");
  kv.set("speed_perturb", c.speed_perturb ? "true" : "false");
  kv.set("spec_augment", c.spec_augment ? "true" : "false");
  const auto& f = c.frontend;
  kv.set("n_mels", std::to_string(f.n_mels));
  kv.set("window_ms", format_double(f.window_ms));
  kv.set("hop_ms", format_double(f.hop_ms));
  std::string factors;
  for (std::size_t i = 0; i < f.speed_factors.size(); ++i) factors += (i ? "," : "") + format_double(f.speed_factors[i]);
  kv.set("speed_factors", factors);
  kv.set("mask_prob", format_double(f.mask_prob));
  kv.set("stack", std::to_string(f.stack));
  kv.set("skip", std::to_string(f.skip));
  kv.set("log_floor", format_double(f.log_floor));
  kv.set("max_time_mask", std::to_string(f.max_time_mask));
  kv.set("max_freq_mask", std::to_string(f.max_freq_mask));
  const auto& m = c.model;
  kv.set("encoder_layers", std::to_string(m.encoder.layers));
  kv.set("encoder_hidden", std::to_string(m.encoder.hidden));
  kv.set("summarizer_hidden", std::to_string(m.sentiment.summarizer_hidden));
  kv.set("conv_channels", std::to_string(m.regressor.conv_channels));
  kv.set("attn_heads", std::to_string(m.regressor.attn_heads));
  kv.set("attn_dim", std::to_string(m.regressor.attn_dim));
  kv.set("leaky_alpha", format_double(m.regressor.leaky_alpha));
  return kv;
}

/// Seed from SA2SR_SEED if set, else `fallback`.
inline std::uint64_t env_seed(std::uint64_t fallback) {
  const char* s = std::getenv("SA2SR_SEED");
  if (!s || !*s) return fallback;
  std::uint64_t v = 0;
  const std::string str(s);
  auto [p, ec] = std::from_chars(str.data(), str.data() + str.size(), v);
  if (ec != std::errc() || p != str.data() + str.size()) throw Error("SA2SR_SEED is not a non-negative integer: " + str);
  return v;
}

}  // namespace sa2sr
