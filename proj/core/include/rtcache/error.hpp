#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rtcache {

enum class ErrorCode {
  kValidation,
  kNotFound,
  kConflict,
  kDegenerateInput,
  kStaleCentroids,
  kTransport,
  kProtocol,
  kNoMatch,
  kNoActionableSnippet,
  kIo,
  kParse,
  kUsage,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  // Transport failures against the remote encoder may succeed on retry.
  bool retryable() const noexcept { return code_ == ErrorCode::kTransport; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace rtcache
