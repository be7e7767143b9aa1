#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace rhosim {

// Error taxonomy shared by the library and the CLI. code() is the
// machine-greppable tag printed by the CLI as `error[<code>]: ...`.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& msg)
      : std::runtime_error(msg), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& m) : Error("dimension", m) {}
};

struct IndexError : Error {
  explicit IndexError(const std::string& m) : Error("index", m) {}
};

// Out-of-range option values and degenerate inputs (empty reductions, N=0).
struct ValueError : Error {
  explicit ValueError(const std::string& m) : Error("value", m) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

// API misuse: broken preconditions that are not shape- or value-related.
struct ContractError : Error {
  explicit ContractError(const std::string& m) : Error("contract", m) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& m) : Error("format", m) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};

}  // namespace rhosim
