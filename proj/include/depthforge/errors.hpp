#pragma once

#include <stdexcept>
#include <string>

namespace depthforge {

// Base of every error raised by the library. The CLI maps these to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InputShapeError : public Error {
 public:
  using Error::Error;
};

class BehindCameraError : public Error {
 public:
  using Error::Error;
};

class NonUniqueLogError : public Error {
 public:
  using Error::Error;
};

class EmptyFieldError : public Error {
 public:
  using Error::Error;
};

class InsufficientSourceError : public Error {
 public:
  using Error::Error;
};

class NoCorrespondenceError : public Error {
 public:
  using Error::Error;
};

class DegenerateConfigurationError : public Error {
 public:
  using Error::Error;
};

class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

class InvalidSpecError : public Error {
 public:
  using Error::Error;
};

class EmptyComparisonError : public Error {
 public:
  using Error::Error;
};

// Invalid pipeline configuration or command-line usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Raised while reading a stream; carries the offending frame id (-1 when the
// failure is not tied to a frame, e.g. a missing intrinsics file).
class LoadError : public Error {
 public:
  LoadError(long frame_id, const std::string& what)
      : Error(frame_id >= 0 ? "frame " + std::to_string(frame_id) + ": " + what
                            : what),
        frame_id_(frame_id) {}

  long frame_id() const noexcept { return frame_id_; }

 private:
  long frame_id_;
};

}  // namespace depthforge
