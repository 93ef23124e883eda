// Copyright 2026 The moeforge Authors
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

#ifndef MOEFORGE_ERROR_HPP_
#define MOEFORGE_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace moeforge {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible. The message names both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An argument is outside the domain of the operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed or schema-invalid configuration / file input.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite or exploding loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// The expanded MoE model does not reproduce the dense model at step 0.
class IdentityViolation : public Error {
 public:
  using Error::Error;
};

/// Binary or JSON payload could not be decoded.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace moeforge

#endif  // MOEFORGE_ERROR_HPP_
