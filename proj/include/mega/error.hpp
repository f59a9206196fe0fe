#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace mega {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a loss or activation becomes NaN/Inf during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace mega

#define MEGA_CHECK(cond, msg)                                   \
  do {                                                          \
    if (!(cond)) {                                              \
      std::ostringstream mega_check_os_;                        \
      mega_check_os_ << msg;                                    \
      throw ::mega::Error(mega_check_os_.str());                \
    }                                                           \
  } while (0)
