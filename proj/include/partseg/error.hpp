#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace partseg {

// Coarse failure categories. The CLI prints `code_name(code)` as the first
// token of its one-line error so scripts can branch on it.
enum class ErrorCode {
  invalid_argument,
  shape_mismatch,
  io,
  corrupt,
  version_mismatch,
  not_found,
  conflict,
  precondition,
  numerical,
};

std::string_view code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool ok, ErrorCode code, const std::string& what) {
  if (!ok) fail(code, what);
}

}  // namespace partseg
