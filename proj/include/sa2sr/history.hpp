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

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sa2sr/error.hpp"
#include "sa2sr/metrics.hpp"

namespace sa2sr {

struct EpochRecord {
  int epoch = 0;  // 1-based
  std::map<std::string, double> train_losses;
  metrics::EvalReport validation;
  double wall_seconds = 0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch}, {"train", train_losses}, {"validation", validation.to_json()}, {"wall_seconds", wall_seconds}};
  }
  static EpochRecord from_json(const nlohmann::json& j) {
    EpochRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.train_losses = j.at("train").get<std::map<std::string, double>>();
    r.validation = metrics::EvalReport::from_json(j.at("validation"));
    r.wall_seconds = j.value("wall_seconds", 0.0);
    return r;
  }
};

/// Which validation number early stopping minimizes.
enum class StopCriterion {
  kCerMinusAuc,  // M = CER - AUC, multi-task pre-training
  kCer,          // ASR-only baseline
  kNegMeanCcc,   // fine-tuning
};

inline double stop_value(const EpochRecord& r, StopCriterion c) {
  switch (c) {
    case StopCriterion::kCerMinusAuc:
      return r.validation.stopping_metric;
    case StopCriterion::kCer:
      return r.validation.cer;
    case StopCriterion::kNegMeanCcc:
      return -r.validation.mean_ccc();
  }
  return r.validation.stopping_metric;
}

struct StopDecision {
  bool stop = false;
  int best_epoch = 0;  // 1-based
};

/// `values[i]` is the monitored metric after epoch i + 1 (lower is better).
/// Stops once the earliest minimum is `patience` or more epochs old. Ties do
/// not count as improvement.
inline StopDecision early_stop(const std::vector<double>& values, int patience) {
  if (values.empty()) throw Error("early_stop: empty history");
  if (patience < 1) throw Error("early_stop: patience must be >= 1");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] < values[best]) best = i;
  StopDecision d;
  d.best_epoch = static_cast<int>(best) + 1;
  d.stop = static_cast<int>(values.size()) - d.best_epoch >= patience;
  return d;
}

inline StopDecision early_stop(const std::vector<EpochRecord>& history, int patience, StopCriterion criterion) {
  std::vector<double> values;
  for (const auto& r : history) values.push_back(stop_value(r, criterion));
  return early_stop(values, patience);
}

/// Appends one JSON object per line.
inline void append_history(const std::filesystem::path& path, const EpochRecord& record) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("cannot append to " + path.string());
  out << record.to_json().dump() << "\n";
}

inline std::vector<EpochRecord> read_history(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<EpochRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(EpochRecord::from_json(nlohmann::json::parse(line)));
  return out;
}

}  // namespace sa2sr
