#pragma once

#include <stdexcept>
#include <string>

namespace fluxfit {

enum class ErrorKind {
  invalid_parameter,
  numeric,
  index,
  config,
  shape,
  schema,
  io,
  near_resonance,
  training_divergence,
  degenerate_background,
  pipeline,
};

/// Base of every error thrown by the library. The kind selects the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define FLUXFIT_DEFINE_ERROR(Name, Kind)                                      \
  class Name : public Error {                                                 \
   public:                                                                    \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {}  \
  };

FLUXFIT_DEFINE_ERROR(InvalidParameterError, invalid_parameter)
FLUXFIT_DEFINE_ERROR(NumericError, numeric)
FLUXFIT_DEFINE_ERROR(IndexError, index)
FLUXFIT_DEFINE_ERROR(ConfigError, config)
FLUXFIT_DEFINE_ERROR(ShapeError, shape)
FLUXFIT_DEFINE_ERROR(SchemaError, schema)
FLUXFIT_DEFINE_ERROR(IoError, io)
FLUXFIT_DEFINE_ERROR(NearResonanceError, near_resonance)
FLUXFIT_DEFINE_ERROR(DegenerateBackgroundError, degenerate_background)

#undef FLUXFIT_DEFINE_ERROR

class TrainingDivergenceError : public Error {
 public:
  TrainingDivergenceError(int epoch, const std::string& what)
      : Error(ErrorKind::training_divergence, what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

/// Raised by the end-to-end pipeline; carries the name of the failing stage
/// and the kind of the underlying error, if any.
class PipelineError : public Error {
 public:
  PipelineError(std::string stage, const std::string& what, ErrorKind cause = ErrorKind::pipeline)
      : Error(ErrorKind::pipeline, stage + ": " + what), stage_(std::move(stage)), cause_(cause) {}
  const std::string& stage() const noexcept { return stage_; }
  ErrorKind cause() const noexcept { return cause_; }

 private:
  std::string stage_;
  ErrorKind cause_;
};

/// Process exit code for each error class. 2 is reserved for usage errors.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return 3;
    case ErrorKind::io: return 4;
    case ErrorKind::schema: return 5;
    case ErrorKind::numeric: return 6;
    case ErrorKind::near_resonance: return 6;
    case ErrorKind::invalid_parameter: return 7;
    case ErrorKind::index: return 7;
    case ErrorKind::shape: return 8;
    case ErrorKind::pipeline: return 9;
    case ErrorKind::training_divergence: return 10;
    case ErrorKind::degenerate_background: return 11;
  }
  return 1;
}

}  // namespace fluxfit
