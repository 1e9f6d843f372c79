#include "melodyflow/errors.hpp"

namespace melodyflow {

const char* category_name(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::kConfig: return "config";
    case ErrorCategory::kShape: return "shape";
    case ErrorCategory::kSpanOverflow: return "span-overflow";
    case ErrorCategory::kAlignment: return "alignment";
    case ErrorCategory::kDegenerateInput: return "degenerate-input";
    case ErrorCategory::kUndefinedWer: return "undefined-wer";
    case ErrorCategory::kUndefinedCorrelation: return "undefined-correlation";
    case ErrorCategory::kContract: return "contract";
    case ErrorCategory::kDomain: return "domain";
    case ErrorCategory::kIo: return "io";
    case ErrorCategory::kIntegrity: return "integrity";
    case ErrorCategory::kVersion: return "version";
    case ErrorCategory::kParse: return "parse";
    case ErrorCategory::kUsage: return "usage";
  }
  return "unknown";
}

}  // namespace melodyflow
