#pragma once

#include <stdexcept>
#include <string>

namespace morpheus {

// Exit-code classes used by the command line: usage 1, data/checkpoint 2,
// numerical 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace morpheus
