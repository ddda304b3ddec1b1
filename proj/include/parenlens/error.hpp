#pragma once

#include <stdexcept>
#include <string>

namespace parenlens {

// Failure categories. The CLI maps them onto its exit codes and the C API onto
// pl_status values, so the numeric values are part of the external contract.
enum class ErrorKind {
  kInvalidArgument = 1,
  kConfig = 2,
  kTraining = 3,
  kMismatch = 4,
  kIo = 5,
  kShape = 6,
  kNotFound = 7,
  kOutOfRange = 8,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error(ErrorKind::kShape, what) {}
};
struct InvalidArgument : Error {
  explicit InvalidArgument(const std::string& what) : Error(ErrorKind::kInvalidArgument, what) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::kConfig, what) {}
};
struct TrainingError : Error {
  explicit TrainingError(const std::string& what) : Error(ErrorKind::kTraining, what) {}
};
struct MismatchError : Error {
  explicit MismatchError(const std::string& what) : Error(ErrorKind::kMismatch, what) {}
};
struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorKind::kIo, what) {}
};
struct NotFoundError : Error {
  explicit NotFoundError(const std::string& what) : Error(ErrorKind::kNotFound, what) {}
};
struct OutOfRangeError : Error {
  explicit OutOfRangeError(const std::string& what) : Error(ErrorKind::kOutOfRange, what) {}
};

}  // namespace parenlens
