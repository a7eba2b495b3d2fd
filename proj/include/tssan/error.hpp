#pragma once

#include <stdexcept>
#include <string>

namespace tssan {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define TSSAN_DEFINE_ERROR(Name)              \
  class Name : public Error {                 \
   public:                                    \
    using Error::Error;                       \
  }

TSSAN_DEFINE_ERROR(DimensionError);
TSSAN_DEFINE_ERROR(IndexError);
TSSAN_DEFINE_ERROR(ContractError);
TSSAN_DEFINE_ERROR(InputError);
TSSAN_DEFINE_ERROR(ConfigError);
TSSAN_DEFINE_ERROR(ParseError);
TSSAN_DEFINE_ERROR(ValidationError);
TSSAN_DEFINE_ERROR(CheckpointError);
TSSAN_DEFINE_ERROR(NumericError);

#undef TSSAN_DEFINE_ERROR

}  // namespace tssan
