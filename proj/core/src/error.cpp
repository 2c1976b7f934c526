#include "rtcache/error.hpp"

namespace rtcache {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kValidation: return "validation";
    case ErrorCode::kNotFound: return "not_found";
    case ErrorCode::kConflict: return "conflict";
    case ErrorCode::kDegenerateInput: return "degenerate_input";
    case ErrorCode::kStaleCentroids: return "stale_centroids";
    case ErrorCode::kTransport: return "transport";
    case ErrorCode::kProtocol: return "protocol";
    case ErrorCode::kNoMatch: return "no_match";
    case ErrorCode::kNoActionableSnippet: return "no_actionable_snippet";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kUsage: return "usage";
  }
  return "unknown";
}

void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace rtcache
