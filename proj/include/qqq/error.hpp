#pragma once

#include <stdexcept>
#include <string>

namespace qqq {

// Base of every exception the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Input values are unusable (NaN/inf weights or activations).
class DataError : public Error {
 public:
  using Error::Error;
};

// Invalid quantization settings, group misalignment, engine/scheme mismatch.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Stored integer codes or packed nibbles are inconsistent.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

// A factorization broke down.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Calibration activations cannot support a Hessian.
class CalibrationError : public Error {
 public:
  using Error::Error;
};

// A fused scale is not representable.
class ScaleError : public Error {
 public:
  using Error::Error;
};

// The inner dimension is large enough to overflow an INT32 accumulator.
class OverflowRiskError : public Error {
 public:
  using Error::Error;
};

// Checkpoint parsing failure. `kind()` names the failing check.
class ParseError : public Error {
 public:
  enum class Kind { BadMagic, Truncated, Overlap, Misaligned, UnknownDtype, Malformed, Io };

  ParseError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  [[nodiscard]] Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace qqq
