#pragma once

#include <stdexcept>
#include <string>

namespace patchtl {

// Every failure raised by the library derives from Error so callers can
// catch one type; the subclasses name the failure class.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define PATCHTL_ERROR(Name)                  \
  class Name : public Error {                \
   public:                                   \
    using Error::Error;                      \
  };

PATCHTL_ERROR(FormatError)
PATCHTL_ERROR(IoError)
PATCHTL_ERROR(ValidationError)
PATCHTL_ERROR(AlignmentError)
PATCHTL_ERROR(TilingError)
PATCHTL_ERROR(SizingError)
PATCHTL_ERROR(ConfigError)
PATCHTL_ERROR(SpecError)
PATCHTL_ERROR(InitializationError)
PATCHTL_ERROR(TransplantError)
PATCHTL_ERROR(ProtocolError)
PATCHTL_ERROR(LeakageError)
PATCHTL_ERROR(UndefinedAucError)

#undef PATCHTL_ERROR

class DivergenceError : public Error {
 public:
  DivergenceError(int epoch, const std::string& what)
      : Error("diverged at epoch " + std::to_string(epoch) + ": " + what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace patchtl
