#ifndef SKEWSPLIT_ERRORS_H_
#define SKEWSPLIT_ERRORS_H_

#include <stdexcept>
#include <string>

namespace skewsplit {

// Root of all library errors. Subclasses map onto distinct CLI exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite training loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

class TransportError : public Error {
 public:
  using Error::Error;
};

// Malformed wire data or archive (bad magic, checksum, truncated payload).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace skewsplit

#endif  // SKEWSPLIT_ERRORS_H_
