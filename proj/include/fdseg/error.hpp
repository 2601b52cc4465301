#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fdseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatch between operands; `axis()` names the offending axis.
class DimensionError : public Error {
 public:
  DimensionError(const std::string& op, const std::string& axis, const std::string& detail)
      : Error(op + ": dimension mismatch on axis '" + axis + "': " + detail), axis_(axis) {}
  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

/// Violated precondition of an operation.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration, rejected before any work is done.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. `offset()` is a byte offset or a 1-based line number
/// depending on the format being parsed.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Data that parsed correctly but violates a domain invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A tape node produced NaN or Inf.
class NumericError : public Error {
 public:
  NumericError(const std::string& op, const std::string& scope, std::size_t node)
      : Error("non-finite value produced by op '" + op + "' (node " + std::to_string(node) +
              (scope.empty() ? std::string() : ", scope '" + scope + "'") + ")"),
        op_(op),
        scope_(scope),
        node_(node) {}
  const std::string& op() const noexcept { return op_; }
  const std::string& scope() const noexcept { return scope_; }
  std::size_t node() const noexcept { return node_; }

 private:
  std::string op_;
  std::string scope_;
  std::size_t node_;
};

}  // namespace fdseg
