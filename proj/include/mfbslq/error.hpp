#pragma once

#include <stdexcept>
#include <string>

namespace mfbslq {

enum class ErrorKind {
  configuration,
  parse,
  validation,
  contract,
  step_size,
  riccati_failure,
  decoupling_breakdown,
  infeasible,
  convexity,
  size_limit,
  solver,
  io,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace mfbslq
