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

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

#include "sa2sr/error.hpp"

namespace sa2sr::tokens {

// 26 lowercase letters, space, apostrophe, then the CTC blank.
inline constexpr int kVocabSize = 29;
inline constexpr int kBlank = 28;
inline constexpr int kSpace = 26;
inline constexpr int kApostrophe = 27;

/// Lowercases and drops every character outside the inventory.
inline std::string normalize(std::string_view text) {
  std::string out;
  for (char ch : text) {
    const auto c = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if ((c >= 'a' && c <= 'z') || c == ' ' || c == '\'') out.push_back(c);
  }
  return out;
}

inline int to_id(char c) {
  if (c >= 'a' && c <= 'z') return c - 'a';
  if (c == ' ') return kSpace;
  if (c == '\'') return kApostrophe;
  throw Error(std::string("character outside token inventory: '") + c + "'");
}

inline char to_char(int id) {
  if (id >= 0 && id < 26) return static_cast<char>('a' + id);
  if (id == kSpace) return ' ';
  if (id == kApostrophe) return '\'';
  throw Error("token id " + std::to_string(id) + " has no character");
}

inline std::vector<int> encode(std::string_view text) {
  std::vector<int> ids;
  for (char c : normalize(text)) ids.push_back(to_id(c));
  return ids;
}

inline std::string decode(const std::vector<int>& ids) {
  std::string s;
  for (int id : ids)
    if (id != kBlank) s.push_back(to_char(id));
  return s;
}

}  // namespace sa2sr::tokens
