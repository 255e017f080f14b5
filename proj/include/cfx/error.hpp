#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cfx {

// Process exit codes used by the command-line front end.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kTransport = 2,
  kDataIntegrity = 3,
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

// Bad arguments, bad configuration, or a request the library cannot honour.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ExitCode::kUsage, what) {}
};

// Shape mismatches, non-finite values, missing or inconsistent files.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what)
      : Error(ExitCode::kDataIntegrity, what) {}
};

// Binary file parse failure; carries the byte offset where decoding stopped.
class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : DataError(what + " (at byte " + std::to_string(offset) + ")"),
        reason_(what),
        offset_(offset) {}

  const std::string& reason() const noexcept { return reason_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::string reason_;
  std::size_t offset_;
};

// Predictor child process died or violated the framing protocol.
class TransportError : public Error {
 public:
  explicit TransportError(const std::string& what)
      : Error(ExitCode::kTransport, what) {}
};

}  // namespace cfx
