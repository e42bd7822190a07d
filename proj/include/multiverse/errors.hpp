#pragma once

#include <stdexcept>
#include <string>

namespace mvt {

enum class ErrorKind {
  argument,
  range,
  shape,
  numeric,
  config,
  parse,
  version,
  format,
  crc,
  io,
  generation,
  training,
  check,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::argument: return "argument";
    case ErrorKind::range: return "range";
    case ErrorKind::shape: return "shape";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::config: return "config";
    case ErrorKind::parse: return "parse";
    case ErrorKind::version: return "version";
    case ErrorKind::format: return "format";
    case ErrorKind::crc: return "crc";
    case ErrorKind::io: return "io";
    case ErrorKind::generation: return "generation";
    case ErrorKind::training: return "training";
    case ErrorKind::check: return "check";
  }
  return "unknown";
}

// Base of every exception thrown by the library. kind() lets callers (the
// CLI in particular) map failures to exit codes without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define MVT_DEFINE_ERROR(Name, Kind)                                  \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

MVT_DEFINE_ERROR(ArgumentError, argument)
MVT_DEFINE_ERROR(RangeError, range)
MVT_DEFINE_ERROR(ShapeError, shape)
MVT_DEFINE_ERROR(NumericError, numeric)
MVT_DEFINE_ERROR(ConfigError, config)
MVT_DEFINE_ERROR(VersionError, version)
MVT_DEFINE_ERROR(FormatError, format)
MVT_DEFINE_ERROR(CrcError, crc)
MVT_DEFINE_ERROR(IoError, io)
MVT_DEFINE_ERROR(GenerationError, generation)
MVT_DEFINE_ERROR(CheckError, check)

#undef MVT_DEFINE_ERROR

// Parse failures carry the 1-based line of the offending record (0 when the
// failure is not tied to a line, e.g. a missing sidecar).
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error(ErrorKind::parse,
              line ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class TrainingError : public Error {
 public:
  TrainingError(int epoch, double last_finite_loss, const std::string& what)
      : Error(ErrorKind::training, what), epoch_(epoch), last_loss_(last_finite_loss) {}
  int epoch() const noexcept { return epoch_; }
  double last_finite_loss() const noexcept { return last_loss_; }

 private:
  int epoch_;
  double last_loss_;
};

}  // namespace mvt
