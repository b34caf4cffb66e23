#pragma once

#include <stdexcept>
#include <string>

namespace certdg {

enum class ErrorKind {
  invalid_argument,
  unsupported_loss,
  infeasible_transport,
  degenerate_head,
  unbounded_surrogate,
  parse_error,
  nan_loss,
  io_error,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::unsupported_loss: return "unsupported-loss";
    case ErrorKind::infeasible_transport: return "infeasible-transport";
    case ErrorKind::degenerate_head: return "degenerate-head";
    case ErrorKind::unbounded_surrogate: return "unbounded-surrogate";
    case ErrorKind::parse_error: return "parse-error";
    case ErrorKind::nan_loss: return "nan-loss";
    case ErrorKind::io_error: return "io-error";
  }
  return "unknown";
}

// Single exception type for all library failures; kind() lets callers
// branch without a class per error.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(ErrorKind::invalid_argument, what);
}

}  // namespace certdg
