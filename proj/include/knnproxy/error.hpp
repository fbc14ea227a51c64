#pragma once

#include <stdexcept>
#include <string>

namespace knnproxy {

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  ok = 0,
  config = 2,
  data = 3,
  degenerate = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

// Bad parameters, schema violations, missing experts.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ExitCode::config, what) {}
};

// Malformed files, corrupt headers, missing sequences, vocabulary mismatches.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ExitCode::data, what) {}
};

class FormatError : public DataError {
 public:
  explicit FormatError(const std::string& what) : DataError("format error: " + what) {}
};

class DimensionError : public DataError {
 public:
  explicit DimensionError(const std::string& what) : DataError("dimension error: " + what) {}
};

// A query that cannot be answered with the current index (e.g. k > N).
class RequestError : public ConfigError {
 public:
  explicit RequestError(const std::string& what) : ConfigError("request error: " + what) {}
};

// The score is mathematically undefined for this input (zero reference variance).
class DegenerateScoreError : public Error {
 public:
  explicit DegenerateScoreError(const std::string& what)
      : Error(ExitCode::degenerate, "degenerate score: " + what) {}
};

// Transport failures from remote providers; retried a bounded number of times.
class TransportError : public DataError {
 public:
  explicit TransportError(const std::string& what) : DataError("transport error: " + what) {}
};

}  // namespace knnproxy
