#pragma once

#include <stdexcept>
#include <string>

namespace depthmer {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BoundsError : public Error {
  using Error::Error;
};
class EmptyInputError : public Error {
  using Error::Error;
};
class AlignmentError : public Error {
  using Error::Error;
};
class DegenerateInputError : public Error {
  using Error::Error;
};
class ShapeError : public Error {
  using Error::Error;
};
class LabelError : public Error {
  using Error::Error;
};
class ConfigError : public Error {
  using Error::Error;
};
class UndefinedClassError : public Error {
  using Error::Error;
};
class ValidationError : public Error {
  using Error::Error;
};
class StorageError : public Error {
  using Error::Error;
};

/// Malformed or truncated file content. `offset()` is the byte position at
/// which parsing stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class IntegrityError : public Error {
  using Error::Error;
};

}  // namespace depthmer
