#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hf {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shape or extent disagreement between operands.
struct DimensionError : Error {
  using Error::Error;
};

/// Caller broke an operation's precondition (non-scalar loss, bad eps, ...).
struct ContractError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

/// Ray never reaches the ground plane.
struct HorizonError : Error {
  using Error::Error;
};

struct HeightExceedsCameraError : Error {
  using Error::Error;
};

struct BehindCameraError : Error {
  using Error::Error;
};

struct DegenerateCameraError : Error {
  using Error::Error;
};

struct GradCheckError : Error {
  using Error::Error;
};

struct PlacementError : Error {
  using Error::Error;
};

/// Malformed input text; line is 1-based, 0 when not applicable.
struct ParseError : Error {
  ParseError(const std::string& what, std::size_t line)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line(line) {}
  std::size_t line;
};

}  // namespace hf
