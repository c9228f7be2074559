// Copyright 2026 The flab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace flab {

// Base class for every error raised by the library. The CLI maps each
// subclass onto a process exit code (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration, missing upstream checkpoints.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Caller handed in data that violates an operation's precondition.
class InputError : public Error {
 public:
  using Error::Error;
};

// Unknown key in a lookup table (labels, vocabulary, classes).
class LookupError : public InputError {
 public:
  using InputError::InputError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite losses, failed decompositions.
class NumericalError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

inline int exit_code(const std::exception& e) {
  if (dynamic_cast<const NumericalError*>(&e) != nullptr) return kExitNumerical;
  if (dynamic_cast<const ConfigError*>(&e) != nullptr ||
      dynamic_cast<const InputError*>(&e) != nullptr) {
    return kExitConfig;
  }
  return kExitFailure;
}

}  // namespace flab
