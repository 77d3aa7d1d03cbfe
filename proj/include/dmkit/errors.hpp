#pragma once

#include <stdexcept>
#include <string>

namespace dmkit {

// Config/usage problems map to CLI exit code 2, runtime failures to 1.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IntegrityError : std::runtime_error {
  explicit IntegrityError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

struct SessionError : std::runtime_error {
  explicit SessionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct SizeError : std::runtime_error {
  explicit SizeError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dmkit
