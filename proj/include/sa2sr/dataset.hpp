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

// JSON-lines manifests. One object per line:
//
//   {"audio": "audio/0001.wav", "transcript": "hello", "sentiment": "positive",
//    "activation": 4.5, "valence": 5.0, "dominance": 3.0, "split": "train"}
//
// Relative audio paths resolve against the manifest's directory. AVD values
// are on the 1..7 Likert scale in the file and rescaled to [-1, 1] on load.

#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sa2sr/error.hpp"
#include "sa2sr/metrics.hpp"
#include "sa2sr/tokens.hpp"

namespace sa2sr {

struct UtteranceRecord {
  std::filesystem::path audio;
  std::optional<std::string> transcript;
  std::optional<int> sentiment;                 // 0 negative, 1 neutral, 2 positive
  std::optional<std::array<double, 3>> avd;     // activation, valence, dominance in [-1, 1]
  std::string split = "train";
  int line = 0;
};

struct ManifestSplit {
  std::vector<UtteranceRecord> train;
  std::vector<UtteranceRecord> validation;
  std::vector<UtteranceRecord> test;

  std::size_t size() const { return train.size() + validation.size() + test.size(); }
  const std::vector<UtteranceRecord>& get(const std::string& split) const {
    if (split == "train") return train;
    if (split == "validation") return validation;
    if (split == "test") return test;
    throw Error("unknown split '" + split + "' (expected train, validation or test)");
  }
};

enum class ManifestMode { kAny, kPretrain, kFinetune };

inline double likert_to_unit(double v) { return (v - 4.0) / 3.0; }
inline double unit_to_likert(double v) { return 4.0 + 3.0 * v; }

inline ManifestMode manifest_mode(const std::string& name) {
  if (name == "pretrain") return ManifestMode::kPretrain;
  if (name == "finetune") return ManifestMode::kFinetune;
  if (name == "any") return ManifestMode::kAny;
  throw Error("unknown manifest mode '" + name + "'");
}

namespace dataset_detail {

inline std::string canonical_split(const std::string& s) {
  if (s == "train") return "train";
  if (s == "validation" || s == "valid" || s == "dev") return "validation";
  if (s == "test") return "test";
  throw Error("unknown split '" + s + "'");
}

}  // namespace dataset_detail

/// Parses and validates every line, then reports all problems at once. A
/// record missing a field its mode needs is an error, never a silent drop.
inline ManifestSplit parse_manifest(std::istream& in, const std::filesystem::path& base_dir, ManifestMode mode,
                                    const std::string& name = "manifest") {
  ManifestSplit out;
  std::vector<std::string> problems;
  std::map<std::string, std::pair<std::string, int>> seen;  // path -> (split, line)
  std::string text;
  int line_no = 0;
  bool any = false;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    any = true;
    const auto fail = [&](const std::string& msg) { problems.push_back("line " + std::to_string(line_no) + ": " + msg); };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
      fail("not valid JSON");
      continue;
    }
    if (!j.is_object()) {
      fail("expected a JSON object");
      continue;
    }
    UtteranceRecord r;
    r.line = line_no;
    try {
      if (!j.contains("audio") || !j["audio"].is_string()) {
        fail("missing required field 'audio'");
        continue;
      }
      r.audio = j["audio"].get<std::string>();
      if (r.audio.is_relative()) r.audio = base_dir / r.audio;
      if (j.contains("split")) r.split = dataset_detail::canonical_split(j["split"].get<std::string>());
      if (j.contains("transcript") && !j["transcript"].is_null()) r.transcript = j["transcript"].get<std::string>();
      if (j.contains("sentiment") && !j["sentiment"].is_null()) {
        const auto& s = j["sentiment"];
        if (s.is_number_integer()) {
          const int v = s.get<int>();
          if (v < 0 || v > 2) throw Error("sentiment index out of range");
          r.sentiment = v;
        } else {
          r.sentiment = metrics::sentiment_index(s.get<std::string>());
        }
      }
      const bool has_a = j.contains("activation"), has_v = j.contains("valence"), has_d = j.contains("dominance");
      if (has_a || has_v || has_d) {
        if (!(has_a && has_v && has_d)) throw Error("activation, valence and dominance must appear together");
        std::array<double, 3> avd{};
        const char* keys[3] = {"activation", "valence", "dominance"};
        for (int k = 0; k < 3; ++k) {
          const double v = j[keys[k]].get<double>();
          if (!(v >= 1.0 && v <= 7.0)) throw Error(std::string(keys[k]) + " must lie in [1, 7]");
          avd[static_cast<std::size_t>(k)] = likert_to_unit(v);
        }
        r.avd = avd;
      }
    } catch (const std::exception& e) {
      fail(e.what());
      continue;
    }
    if (mode == ManifestMode::kPretrain) {
      if (!r.transcript) fail("pretrain record needs 'transcript'");
      if (!r.sentiment) fail("pretrain record needs 'sentiment'");
      if (r.transcript && r.split != "test" && tokens::encode(*r.transcript).empty())
        fail("transcript has no characters from the token inventory");
    }
    if (mode == ManifestMode::kFinetune && !r.avd) fail("finetune record needs activation, valence and dominance");

    const std::string key = r.audio.lexically_normal().string();
    auto [it, inserted] = seen.emplace(key, std::make_pair(r.split, line_no));
    if (!inserted) {
      if (it->second.first != r.split)
        fail("audio " + key + " also appears in split " + it->second.first + " (line " +
             std::to_string(it->second.second) + ")");
      else
        fail("duplicate audio " + key + " (first on line " + std::to_string(it->second.second) + ")");
      continue;
    }
    if (r.split == "train") out.train.push_back(std::move(r));
    else if (r.split == "validation") out.validation.push_back(std::move(r));
    else out.test.push_back(std::move(r));
  }
  if (!any) throw Error("empty manifest: " + name);
  if (!problems.empty()) {
    std::string msg = name + ": " + std::to_string(problems.size()) + " invalid record(s): ";
    for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
    throw Error(msg);
  }
  return out;
}

inline ManifestSplit load_manifest(const std::filesystem::path& path, ManifestMode mode = ManifestMode::kAny) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path(), mode, path.string());
}

inline nlohmann::json record_to_json(const UtteranceRecord& r, const std::filesystem::path& base_dir) {
  nlohmann::json j;
  j["audio"] = r.audio.lexically_relative(base_dir).generic_string();
  if (r.transcript) j["transcript"] = *r.transcript;
  if (r.sentiment) j["sentiment"] = metrics::sentiment_names()[static_cast<std::size_t>(*r.sentiment)];
  if (r.avd) {
    j["activation"] = unit_to_likert((*r.avd)[0]);
    j["valence"] = unit_to_likert((*r.avd)[1]);
    j["dominance"] = unit_to_likert((*r.avd)[2]);
  }
  j["split"] = r.split;
  return j;
}

}  // namespace sa2sr
