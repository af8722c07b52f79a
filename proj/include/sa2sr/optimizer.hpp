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
#include <string>
#include <unordered_map>

#include "sa2sr/error.hpp"
#include "sa2sr/params.hpp"

namespace sa2sr {

struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip over trainable parameters; 0 disables it.
  double clip_norm = 0.0;

  void validate() const {
    if (!(lr > 0.0)) throw Error("adam: lr must be positive");
    if (!(beta1 > 0.0 && beta1 < beta2 && beta2 < 1.0)) throw Error("adam: need 0 < beta1 < beta2 < 1");
    if (!(eps > 0.0)) throw Error("adam: eps must be positive");
    if (clip_norm < 0.0) throw Error("adam: clip_norm must be >= 0");
  }
};

/// Adam with bias correction. Frozen parameters are skipped; every step clears
/// all gradients.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  long steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

  void step(ParameterStore& store) {
    for (const auto& [name, p] : store)
      if (!p.frozen && !p.has_grad) throw Error("adam: missing gradient for trainable parameter " + name);

    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& [name, p] : store)
        if (!p.frozen)
          for (double g : p.grad.values()) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }

    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto& [name, p] : store) {
      if (!p.frozen) {
        auto& [m, v] = moments_[name];
        if (m.size() != p.value.size()) {
          m = Tensor(p.value.rows(), p.value.cols());
          v = Tensor(p.value.rows(), p.value.cols());
        }
        for (std::size_t i = 0; i < p.value.size(); ++i) {
          const double g = p.grad[i] * scale;
          m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
          v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
          p.value[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
        }
      }
      p.grad.fill(0.0);
      p.has_grad = false;
    }
  }

 private:
  AdamConfig cfg_;
  long step_ = 0;
  std::unordered_map<std::string, std::pair<Tensor, Tensor>> moments_;
};

}  // namespace sa2sr
