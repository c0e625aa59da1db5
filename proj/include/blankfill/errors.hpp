// Copyright (c) 2026, The blankfill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace blankfill {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that cannot be combined.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced or consumed where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Input that is well-formed but leaves nothing to compute (empty masks, empty corpora).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A laid-out sequence exceeds the configured length budget.
class LengthError : public Error {
 public:
  using Error::Error;
};

/// Corpus or vocabulary input could not be ingested.
class IngestionError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures (missing paths, unwritable outputs).
class IoError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class CheckpointHeaderError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace blankfill
