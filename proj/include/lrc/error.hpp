#pragma once

#include <stdexcept>
#include <string>

namespace lrc {

enum class ErrorKind {
  usage,
  data,
  numeric,
  dimension,
  rank,
  shape,
  empty_accumulator,
  undefined_metric,
};

// Base of every error raised by the library. kind() drives CLI exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define LRC_DEFINE_ERROR(Name, Kind)                                         \
  class Name : public Error {                                                \
   public:                                                                   \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

LRC_DEFINE_ERROR(UsageError, usage)
LRC_DEFINE_ERROR(DataError, data)
LRC_DEFINE_ERROR(NumericError, numeric)
LRC_DEFINE_ERROR(DimensionError, dimension)
LRC_DEFINE_ERROR(RankError, rank)
LRC_DEFINE_ERROR(ShapeError, shape)
LRC_DEFINE_ERROR(EmptyAccumulatorError, empty_accumulator)
LRC_DEFINE_ERROR(UndefinedMetricError, undefined_metric)

#undef LRC_DEFINE_ERROR

// Stable process exit codes: usage 2, data 3, numeric 4.
inline int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::usage:
    case ErrorKind::rank:
      return 2;
    case ErrorKind::data:
    case ErrorKind::dimension:
    case ErrorKind::shape:
    case ErrorKind::empty_accumulator:
      return 3;
    case ErrorKind::numeric:
    case ErrorKind::undefined_metric:
      return 4;
  }
  return 1;
}

}  // namespace lrc
