#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mslam {

/// Base class of every error raised by the engine.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidPointError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class PredictorUnavailableError : public Error {
 public:
  using Error::Error;
};

class UnderconstrainedError : public Error {
 public:
  using Error::Error;
};

class DegenerateGeometryError : public Error {
 public:
  using Error::Error;
};

class PartitionError : public Error {
 public:
  using Error::Error;
};

class AlignmentError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

class UnfusedAgentsError : public Error {
 public:
  using Error::Error;
};

class AgentFailureError : public Error {
 public:
  using Error::Error;
};

}  // namespace mslam
