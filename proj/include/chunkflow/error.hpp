// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace chunkflow {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// A coordinate (global position, chunk position, index) outside its valid range.
class InvalidCoordinate : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

class ShapeMismatch : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

class TypeMismatch : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

// A task requested chunks from a node that is not one of its operator's inputs.
class GraphDisciplineError : public Error {
 public:
  using Error::Error;
};

// A fixed-size pool (e.g. page-table pages) is full; the caller must free entries and retry.
class ReclamationNeeded : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

// Failure while resolving chunks. The message names the operator that failed.
class ResolveError : public Error {
 public:
  ResolveError(std::string node, const std::string& what)
      : Error(what), node_(std::move(node)) {}
  const std::string& node() const noexcept { return node_; }

 private:
  std::string node_;
};

// The engine cannot make progress: every task waits and garbage collection frees nothing.
class MemoryBudgetExhausted : public ResolveError {
 public:
  using ResolveError::ResolveError;
};

}  // namespace chunkflow
