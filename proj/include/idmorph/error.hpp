#pragma once

#include <stdexcept>
#include <string>

namespace idmorph {

// Base for every error raised by the library. Subclasses name the failure
// category so callers (and the CLI exit-code mapping) can tell them apart.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define IDMORPH_DEFINE_ERROR(Name)        \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  };

IDMORPH_DEFINE_ERROR(DimensionError)
IDMORPH_DEFINE_ERROR(IndexError)
IDMORPH_DEFINE_ERROR(LabelError)
IDMORPH_DEFINE_ERROR(NumericError)
IDMORPH_DEFINE_ERROR(BatchSizeError)
IDMORPH_DEFINE_ERROR(FormatError)
IDMORPH_DEFINE_ERROR(CorruptionError)
IDMORPH_DEFINE_ERROR(ConfigError)
IDMORPH_DEFINE_ERROR(DataError)
IDMORPH_DEFINE_ERROR(IoError)

#undef IDMORPH_DEFINE_ERROR

}  // namespace idmorph
