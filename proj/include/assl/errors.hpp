// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace assl {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed dataset record. `line` is 1-based.
struct ParseError : Error {
  ParseError(std::size_t line, const std::string &what)
      : Error("line " + std::to_string(line) + ": " + what), line(line) {}
  std::size_t line;
};

struct SchemaError : Error {
  using Error::Error;
};

struct SplitError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

/// Non-finite activations or losses; the message names the offending stage.
struct NumericError : Error {
  using Error::Error;
};

/// Violated precondition on an operation's inputs.
struct ContractError : Error {
  using Error::Error;
};

struct CheckpointError : Error {
  using Error::Error;
};

}  // namespace assl
