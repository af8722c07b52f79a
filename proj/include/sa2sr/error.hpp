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

#include <stdexcept>
#include <string>

namespace sa2sr {

/// Base class for every error raised by the toolkit. Messages are one line
/// and start with the failure kind (e.g. "utterance too short").
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown for operand shape disagreements inside the numerics layer.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Thrown by binary readers (wav, feature blobs, checkpoints) on malformed input.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace sa2sr
