#pragma once

#include <stdexcept>
#include <string>

namespace melodyflow {

/// Machine-parsable failure categories. The CLI prints the category name
/// verbatim and maps it to an exit code.
enum class ErrorCategory {
  kConfig,
  kShape,
  kSpanOverflow,
  kAlignment,
  kDegenerateInput,
  kUndefinedWer,
  kUndefinedCorrelation,
  kContract,
  kDomain,
  kIo,
  kIntegrity,
  kVersion,
  kParse,
  kUsage,
};

const char* category_name(ErrorCategory category);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

#define MELODYFLOW_DEFINE_ERROR(Name, Category)            \
  class Name : public Error {                              \
   public:                                                 \
    explicit Name(const std::string& message)              \
        : Error(ErrorCategory::Category, message) {}       \
  };

MELODYFLOW_DEFINE_ERROR(ConfigError, kConfig)
MELODYFLOW_DEFINE_ERROR(ShapeError, kShape)
MELODYFLOW_DEFINE_ERROR(SpanOverflowError, kSpanOverflow)
MELODYFLOW_DEFINE_ERROR(AlignmentError, kAlignment)
MELODYFLOW_DEFINE_ERROR(DegenerateInputError, kDegenerateInput)
MELODYFLOW_DEFINE_ERROR(UndefinedWerError, kUndefinedWer)
MELODYFLOW_DEFINE_ERROR(UndefinedCorrelationError, kUndefinedCorrelation)
MELODYFLOW_DEFINE_ERROR(ContractError, kContract)
MELODYFLOW_DEFINE_ERROR(DomainError, kDomain)
MELODYFLOW_DEFINE_ERROR(IoError, kIo)
MELODYFLOW_DEFINE_ERROR(IntegrityError, kIntegrity)
MELODYFLOW_DEFINE_ERROR(VersionError, kVersion)
MELODYFLOW_DEFINE_ERROR(ParseError, kParse)
MELODYFLOW_DEFINE_ERROR(UsageError, kUsage)

#undef MELODYFLOW_DEFINE_ERROR

}  // namespace melodyflow
