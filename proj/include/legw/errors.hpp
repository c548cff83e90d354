// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace legw {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes disagree at a graph node; carries the node that failed.
class ShapeError : public Error {
 public:
  ShapeError(std::int64_t node, std::string node_label, const std::string& what)
      : Error("node " + std::to_string(node) + " (" + node_label + "): " + what),
        node_(node),
        label_(std::move(node_label)) {}

  std::int64_t node() const noexcept { return node_; }
  const std::string& label() const noexcept { return label_; }

 private:
  std::int64_t node_;
  std::string label_;
};

/// A value that must be finite was NaN or infinite. `name()` identifies the
/// tensor (usually a parameter name).
class NonFiniteError : public Error {
 public:
  NonFiniteError(std::string name, const std::string& what)
      : Error(name + ": " + what), name_(std::move(name)) {}

  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace legw
