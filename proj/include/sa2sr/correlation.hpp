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

// Text-sentiment vs. speech-emotion analysis over labeled pairs.
//
// Pairs file: one pair per line, tab or whitespace separated,
//   <sentiment> <emotion> [count]
// with '#' comments. A count repeats the pair.

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sa2sr/error.hpp"
#include "sa2sr/metrics.hpp"

namespace sa2sr {

struct LabeledPairs {
  std::vector<int> sentiment;
  std::vector<std::string> emotion;
  std::vector<std::string> emotion_order;  // first-seen order
};

inline LabeledPairs parse_labeled_pairs(std::istream& in, const std::string& name = "pairs") {
  LabeledPairs out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::string s, e, extra;
    if (!(fields >> s)) continue;
    const auto where = [&] { return name + ":" + std::to_string(line_no) + ": "; };
    if (!(fields >> e)) throw FormatError(where() + "expected <sentiment> <emotion> [count]");
    long long count = 1;
    if (fields >> extra) {
      try {
        std::size_t used = 0;
        count = std::stoll(extra, &used);
        if (used != extra.size() || count < 0) throw std::invalid_argument("count");
      } catch (const std::exception&) {
        throw FormatError(where() + "count must be a non-negative integer, got '" + extra + "'");
      }
      if (fields >> extra) throw FormatError(where() + "too many fields");
    }
    int si = 0;
    try {
      si = metrics::sentiment_index(s);
    } catch (const Error& err) {
      throw FormatError(where() + err.what());
    }
    if (std::find(out.emotion_order.begin(), out.emotion_order.end(), e) == out.emotion_order.end())
      out.emotion_order.push_back(e);
    for (long long k = 0; k < count; ++k) {
      out.sentiment.push_back(si);
      out.emotion.push_back(e);
    }
  }
  return out;
}

inline LabeledPairs read_labeled_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open pairs file " + path.string());
  return parse_labeled_pairs(in, path.string());
}

/// Parses "a=b,c=d" into a map; used for both the class grouping and the
/// ordinal mapping on the command line.
inline std::map<std::string, std::string> parse_assignments(const std::string& text) {
  std::map<std::string, std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == item.size())
      throw Error("expected name=value in '" + item + "'");
    out[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return out;
}

struct CorrelationReport {
  metrics::ConfusionMatrix matrix;
  std::optional<double> spearman;  // present only when an ordinal mapping is given
};

/// Builds the confusion matrix after grouping; with an ordinal mapping over
/// the grouped emotion classes, also the Spearman correlation between the
/// sentiment index (negative 0, neutral 1, positive 2) and that ordinal.
inline CorrelationReport analyze_correlation(const LabeledPairs& pairs,
                                             const std::map<std::string, std::string>& grouping,
                                             const std::map<std::string, double>& ordinal) {
  CorrelationReport out;
  std::vector<std::string> order;
  for (const auto& e : pairs.emotion_order) {
    auto it = grouping.find(e);
    const std::string g = it == grouping.end() ? e : it->second;
    if (std::find(order.begin(), order.end(), g) == order.end()) order.push_back(g);
  }
  out.matrix = metrics::confusion(pairs.sentiment, pairs.emotion, grouping, order);
  if (!ordinal.empty()) {
    std::vector<double> x, y;
    for (std::size_t i = 0; i < pairs.sentiment.size(); ++i) {
      auto g = grouping.find(pairs.emotion[i]);
      const std::string cls = g == grouping.end() ? pairs.emotion[i] : g->second;
      auto it = ordinal.find(cls);
      if (it == ordinal.end()) throw Error("ordinal mapping has no value for emotion class " + cls);
      x.push_back(pairs.sentiment[i]);
      y.push_back(it->second);
    }
    out.spearman = metrics::spearman(x, y);
  }
  return out;
}

}  // namespace sa2sr
