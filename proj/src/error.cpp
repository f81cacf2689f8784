#include "partseg/error.hpp"

namespace partseg {

std::string_view code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::io: return "io";
    case ErrorCode::corrupt: return "corrupt";
    case ErrorCode::version_mismatch: return "version_mismatch";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::conflict: return "conflict";
    case ErrorCode::precondition: return "precondition";
    case ErrorCode::numerical: return "numerical";
  }
  return "unknown";
}

}  // namespace partseg
