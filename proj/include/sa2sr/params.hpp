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

#include <cstdint>
#include <cstring>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sa2sr/autodiff.hpp"
#include "sa2sr/error.hpp"
#include "sa2sr/tensor.hpp"

namespace sa2sr {

struct Parameter {
  Tensor value;
  Tensor grad;
  bool frozen = false;
  bool has_grad = false;
};

/// Named trainable arrays in insertion order. Names are hierarchical
/// ("encoder/l0/fw/W"); prefixes select whole blocks.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor value) {
    if (index_.contains(name)) throw Error("duplicate parameter name " + name);
    index_.emplace(name, entries_.size());
    Parameter p;
    p.grad = Tensor(value.rows(), value.cols());
    p.value = std::move(value);
    entries_.emplace_back(name, std::move(p));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }
  Parameter& at(const std::string& name) { return entries_[lookup(name)].second; }
  const Parameter& at(const std::string& name) const { return entries_[lookup(name)].second; }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [n, p] : entries_) out.push_back(n);
    return out;
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : entries_) n += p.value.size();
    return n;
  }

  /// Sets the frozen flag on every parameter whose name starts with prefix.
  /// Returns how many parameters matched.
  std::size_t set_frozen(const std::string& prefix, bool frozen) {
    std::size_t n = 0;
    for (auto& [name, p] : entries_)
      if (name.starts_with(prefix)) {
        p.frozen = frozen;
        ++n;
      }
    return n;
  }

  void zero_grad() {
    for (auto& [name, p] : entries_) {
      p.grad.fill(0.0);
      p.has_grad = false;
    }
  }

  /// FNV-1a over names and value bytes of the parameters under prefix.
  std::uint64_t checksum(const std::string& prefix = "") const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, std::size_t n) {
      const auto* p = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& [name, p] : entries_) {
      if (!name.starts_with(prefix)) continue;
      mix(name.data(), name.size());
      mix(p.value.storage().data(), p.value.size() * sizeof(double));
    }
    return h;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter " + name);
    return it->second;
  }

  std::vector<std::pair<std::string, Parameter>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Exposes store parameters as leaves of one tape. Leaves are created on first
/// use; frozen parameters become constants. After Tape::backward, call
/// accumulate_into to add the leaf gradients to the store. An inference
/// binding turns every parameter into a constant.
class Binding {
 public:
  Binding(ad::Tape& tape, const ParameterStore& store, bool inference = false)
      : tape_(tape), store_(store), inference_(inference) {}

  ad::DiffArray operator()(const std::string& name) {
    auto it = leaves_.find(name);
    if (it != leaves_.end()) return it->second;
    const Parameter& p = store_.at(name);
    auto leaf = tape_.leaf(p.value, !p.frozen && !inference_);
    leaves_.emplace(name, leaf);
    return leaf;
  }

  ad::Tape& tape() { return tape_; }
  const ParameterStore& store() const { return store_; }

  void accumulate_into(ParameterStore& store) const {
    for (const auto& [name, leaf] : leaves_) {
      if (!leaf.requires_grad()) continue;
      Parameter& p = store.at(name);
      if (leaf.has_grad()) {
        const Tensor g = leaf.grad();
        for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
      }
      p.has_grad = true;
    }
  }

 private:
  ad::Tape& tape_;
  const ParameterStore& store_;
  bool inference_;
  std::unordered_map<std::string, ad::DiffArray> leaves_;
};

}  // namespace sa2sr
