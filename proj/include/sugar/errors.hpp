#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sugar {

/// Base for every error the library raises. Callers that do not care about
/// the category can catch this one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SUGAR_DEFINE_ERROR(Name)              \
  class Name : public Error {                 \
   public:                                    \
    using Error::Error;                       \
  }

SUGAR_DEFINE_ERROR(InvalidGraphError);
SUGAR_DEFINE_ERROR(ConfigError);
SUGAR_DEFINE_ERROR(DimensionError);
SUGAR_DEFINE_ERROR(LookupError);
SUGAR_DEFINE_ERROR(PreconditionError);
SUGAR_DEFINE_ERROR(EncodingError);
SUGAR_DEFINE_ERROR(BatchError);
SUGAR_DEFINE_ERROR(DatasetError);
SUGAR_DEFINE_ERROR(VocabError);
SUGAR_DEFINE_ERROR(ProtocolError);
SUGAR_DEFINE_ERROR(GeneratorError);

#undef SUGAR_DEFINE_ERROR

/// Binary file could not be decoded. Carries the byte offset where decoding
/// stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Knowledge generation finished for some actions but not all.
class PartialResultError : public Error {
 public:
  explicit PartialResultError(std::vector<std::string> missing)
      : Error(make_message(missing)), missing_(std::move(missing)) {}
  const std::vector<std::string>& missing_actions() const { return missing_; }

 private:
  static std::string make_message(const std::vector<std::string>& missing) {
    std::string msg = "knowledge generation failed for actions:";
    for (const auto& m : missing) msg += " " + m;
    return msg;
  }
  std::vector<std::string> missing_;
};

}  // namespace sugar
