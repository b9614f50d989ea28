// Copyright 2026 The TaCA Lab Authors.
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

namespace taca {

// Base of every error raised by the library. The subclasses map one-to-one
// onto the failure classes callers are expected to distinguish; the CLI turns
// them into exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not agree with an operation's contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A scalar parameter is outside its documented domain (temperature <= 0, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// A vector is too close to zero to be normalized.
class DegenerateVectorError : public Error {
 public:
  using Error::Error;
};

// Caller broke a precondition that is not about shapes (non-scalar loss,
// missing gradient, non-unit rows, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Input data does not match an image or encoder specification.
class SpecError : public Error {
 public:
  using Error::Error;
};

// An invalid configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A sequence or file whose length disagrees with its contract.
class LengthError : public Error {
 public:
  using Error::Error;
};

// Token id outside the vocabulary.
class VocabError : public Error {
 public:
  using Error::Error;
};

// Malformed or corrupt file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// File ends before all declared content was read. A length error: the data
// is shorter than its header promises.
class TruncatedError : public LengthError {
 public:
  using LengthError::LengthError;
};

// File written by an unsupported format version.
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Filesystem failure (open, write).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace taca
