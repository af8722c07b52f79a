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

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sa2sr/error.hpp"
#include "sa2sr/tensor.hpp"
#include "sa2sr/tokens.hpp"

namespace sa2sr::metrics {

// ---- ASR ----------------------------------------------------------------------

/// Unit-cost Levenshtein distance.
inline std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double cer(std::string_view reference, std::string_view hypothesis) {
  if (reference.empty()) throw Error("cer: empty reference");
  return static_cast<double>(edit_distance(reference, hypothesis)) / static_cast<double>(reference.size());
}

/// Per-frame argmax, collapse repeats, drop blanks. Only frames with a set
/// mask entry are read.
inline std::string greedy_decode(const Tensor& log_probs, const std::vector<std::uint8_t>& mask = {},
                                 int blank = tokens::kBlank) {
  std::vector<int> ids;
  int prev = -1;
  for (std::size_t t = 0; t < log_probs.rows(); ++t) {
    if (!mask.empty() && !mask[t]) continue;
    int best = 0;
    for (std::size_t k = 1; k < log_probs.cols(); ++k)
      if (log_probs(t, k) > log_probs(t, static_cast<std::size_t>(best))) best = static_cast<int>(k);
    if (best != prev && best != blank) ids.push_back(best);
    prev = best;
  }
  std::string out;
  for (int id : ids) out.push_back(tokens::to_char(id));
  return out;
}

// ---- ranking statistics ------------------------------------------------------

/// 1-based ranks with ties given their average rank.
inline std::vector<double> mid_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&x](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw Error("correlation: length mismatch");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw Error("correlation undefined: constant vector");
  return sxy / std::sqrt(sxx * syy);
}

/// Pearson correlation of mid-ranks.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw Error("spearman: length mismatch");
  if (x.size() < 3) throw Error("spearman: need at least 3 observations");
  return pearson(mid_ranks(x), mid_ranks(y));
}

/// Mann-Whitney estimate of P(score_pos > score_neg) + 0.5 P(tie).
inline double binary_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  const auto ranks = mid_ranks(scores);
  double n_pos = 0, n_neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (positive[i]) {
      n_pos += 1;
      rank_sum += ranks[i];
    } else {
      n_neg += 1;
    }
  }
  if (n_pos == 0 || n_neg == 0) throw Error("AUC undefined: need both positives and negatives");
  return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg);
}

/// Macro one-vs-rest ROC AUC. scores is N x K; classes absent from labels are
/// skipped.
inline double auc_ovr(const Tensor& scores, const std::vector<int>& labels) {
  if (scores.rows() != labels.size()) throw Error("auc: score rows and labels differ in length");
  const std::size_t K = scores.cols();
  std::vector<std::size_t> counts(K, 0);
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= K) throw Error("auc: label out of range");
    ++counts[static_cast<std::size_t>(l)];
  }
  const auto present = std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; });
  if (present < 2) throw Error("AUC undefined: fewer than two classes present");
  double total = 0;
  int used = 0;
  for (std::size_t k = 0; k < K; ++k) {
    if (counts[k] == 0) continue;
    std::vector<double> s(labels.size());
    std::vector<bool> pos(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s[i] = scores(i, k);
      pos[i] = static_cast<std::size_t>(labels[i]) == k;
    }
    total += binary_auc(s, pos);
    ++used;
  }
  return total / used;
}

/// Prevalence-weighted mean of per-class recall.
inline double weighted_average_recall(const std::vector<int>& predicted, const std::vector<int>& labels) {
  if (predicted.size() != labels.size()) throw Error("war: length mismatch");
  if (labels.empty()) throw Error("war: no observations");
  std::map<int, std::pair<double, double>> per_class;  // label -> (hits, count)
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& [hits, count] = per_class[labels[i]];
    count += 1;
    if (predicted[i] == labels[i]) hits += 1;
  }
  const double n = static_cast<double>(labels.size());
  double war = 0;
  for (const auto& [label, hc] : per_class) war += (hc.second / n) * (hc.first / hc.second);
  return war;
}

// ---- concordance --------------------------------------------------------------

struct CccStats {
  double mean_y = 0, mean_yhat = 0, var_y = 0, var_yhat = 0, cov = 0;
  std::size_t batch_size = 0;

  double value() const {
    double den = var_y + var_yhat + (mean_y - mean_yhat) * (mean_y - mean_yhat);
    if (den < 1e-8) den += 1e-8;
    return 2.0 * cov / den;
  }
};

inline CccStats ccc_stats(const std::vector<double>& y, const std::vector<double>& yhat) {
  if (y.size() != yhat.size()) throw Error("ccc: length mismatch");
  if (y.size() < 2) throw Error("CCC undefined: batch size < 2");
  CccStats s;
  s.batch_size = y.size();
  const double n = static_cast<double>(y.size());
  s.mean_y = std::accumulate(y.begin(), y.end(), 0.0) / n;
  s.mean_yhat = std::accumulate(yhat.begin(), yhat.end(), 0.0) / n;
  for (std::size_t i = 0; i < y.size(); ++i) {
    s.var_y += (y[i] - s.mean_y) * (y[i] - s.mean_y);
    s.var_yhat += (yhat[i] - s.mean_yhat) * (yhat[i] - s.mean_yhat);
    s.cov += (y[i] - s.mean_y) * (yhat[i] - s.mean_yhat);
  }
  s.var_y /= n;
  s.var_yhat /= n;
  s.cov /= n;
  return s;
}

inline double ccc(const std::vector<double>& y, const std::vector<double>& yhat) { return ccc_stats(y, yhat).value(); }

// ---- sentiment / emotion confusion ------------------------------------------

inline const std::array<std::string, 3>& sentiment_names() {
  static const std::array<std::string, 3> names = {"negative", "neutral", "positive"};
  return names;
}

inline int sentiment_index(std::string_view name) {
  std::string lower;
  for (char c : name) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  for (int i = 0; i < 3; ++i)
    if (sentiment_names()[static_cast<std::size_t>(i)] == lower) return i;
  throw Error("unknown sentiment label '" + std::string(name) + "' (expected negative, neutral or positive)");
}

/// counts[s][e]: sentiment rows in (negative, neutral, positive) order, emotion
/// columns in first-seen order (or the order supplied by the caller).
struct ConfusionMatrix {
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  std::vector<std::vector<long long>> counts;

  long long total() const {
    long long n = 0;
    for (const auto& r : counts) n = std::accumulate(r.begin(), r.end(), n);
    return n;
  }
  std::size_t col_index(const std::string& label) const {
    auto it = std::find(col_labels.begin(), col_labels.end(), label);
    if (it == col_labels.end()) throw Error("unknown emotion class " + label);
    return static_cast<std::size_t>(it - col_labels.begin());
  }
  /// Counts of one emotion class across the three sentiments.
  std::vector<long long> emotion_profile(const std::string& emotion) const {
    const std::size_t e = col_index(emotion);
    std::vector<long long> out;
    for (const auto& r : counts) out.push_back(r[e]);
    return out;
  }
  long long sentiment_total(int sentiment) const {
    const auto& r = counts.at(static_cast<std::size_t>(sentiment));
    return std::accumulate(r.begin(), r.end(), 0LL);
  }

  std::string to_text() const {
    std::ostringstream os;
    std::size_t w = 10;
    for (const auto& c : col_labels) w = std::max(w, c.size() + 2);
    os << std::left << std::setw(12) << "sentiment";
    for (const auto& c : col_labels) os << std::right << std::setw(static_cast<int>(w)) << c;
    os << std::right << std::setw(static_cast<int>(w)) << "total" << "\n";
    for (std::size_t s = 0; s < counts.size(); ++s) {
      os << std::left << std::setw(12) << row_labels[s];
      for (long long v : counts[s]) os << std::right << std::setw(static_cast<int>(w)) << v;
      os << std::right << std::setw(static_cast<int>(w)) << sentiment_total(static_cast<int>(s)) << "\n";
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    return {{"rows", row_labels}, {"columns", col_labels}, {"counts", counts}, {"total", total()}};
  }
};

/// Cross-tabulates aligned (sentiment, emotion) labels. `grouping` renames
/// emotion classes before counting (e.g. {sad, frustrated, anger} -> negative);
/// classes missing from the map keep their name.
inline ConfusionMatrix confusion(const std::vector<int>& sentiment, const std::vector<std::string>& emotion,
                                 const std::map<std::string, std::string>& grouping = {},
                                 std::vector<std::string> column_order = {}) {
  if (sentiment.size() != emotion.size()) throw Error("confusion: length mismatch between label vectors");
  auto group = [&grouping](const std::string& e) {
    auto it = grouping.find(e);
    return it == grouping.end() ? e : it->second;
  };
  ConfusionMatrix m;
  m.row_labels.assign(sentiment_names().begin(), sentiment_names().end());
  m.col_labels = std::move(column_order);
  for (const auto& e : emotion) {
    const std::string g = group(e);
    if (std::find(m.col_labels.begin(), m.col_labels.end(), g) == m.col_labels.end()) m.col_labels.push_back(g);
  }
  m.counts.assign(3, std::vector<long long>(m.col_labels.size(), 0));
  for (std::size_t i = 0; i < sentiment.size(); ++i) {
    if (sentiment[i] < 0 || sentiment[i] > 2) throw Error("confusion: sentiment index out of range");
    ++m.counts[static_cast<std::size_t>(sentiment[i])][m.col_index(group(emotion[i]))];
  }
  return m;
}

// ---- report --------------------------------------------------------------------

struct EvalReport {
  double cer = 0;
  double auc = 0;
  double war = 0;
  std::array<double, 3> ccc_avd = {0, 0, 0};
  double stopping_metric = 0;

  static EvalReport make(double cer, double auc, double war, std::array<double, 3> ccc_avd) {
    EvalReport r{cer, auc, war, ccc_avd, cer - auc};
    return r;
  }

  double mean_ccc() const { return (ccc_avd[0] + ccc_avd[1] + ccc_avd[2]) / 3.0; }

  nlohmann::json to_json() const {
    return {{"cer", cer},          {"auc", auc},          {"war", war},
            {"ccc_a", ccc_avd[0]}, {"ccc_v", ccc_avd[1]}, {"ccc_d", ccc_avd[2]},
            {"stopping_metric", stopping_metric}};
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    r.cer = j.at("cer").get<double>();
    r.auc = j.at("auc").get<double>();
    r.war = j.at("war").get<double>();
    r.ccc_avd = {j.at("ccc_a").get<double>(), j.at("ccc_v").get<double>(), j.at("ccc_d").get<double>()};
    r.stopping_metric = j.at("stopping_metric").get<double>();
    return r;
  }

  /// Flat "key=value" lines in a fixed key order.
  std::string to_key_value() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "cer=" << cer << "\nauc=" << auc << "\nwar=" << war << "\nccc_a=" << ccc_avd[0] << "\nccc_v=" << ccc_avd[1]
       << "\nccc_d=" << ccc_avd[2] << "\nstopping_metric=" << stopping_metric << "\n";
    return os.str();
  }
};

}  // namespace sa2sr::metrics
