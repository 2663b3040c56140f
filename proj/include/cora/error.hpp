#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cora {

enum class ErrorCode {
    DimensionMismatch,
    DegenerateGeometry,
    UnknownClass,
    ConstructionError,
    InsufficientObjects,
    InsufficientAttributes,
    ParseError,
    EmptyQuery,
    ShapeError,
    TraceMismatch,
    NonFinite,
    EmptyStack,
    BadScale,
    MissingClassQueries,
    SourceViolation,
    ConfigError,
    EmptyDataset,
    DataError,
    EmptyEvalSet,
    CheckpointMismatch,
    IoError,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::DegenerateGeometry: return "DegenerateGeometry";
    case ErrorCode::UnknownClass: return "UnknownClass";
    case ErrorCode::ConstructionError: return "ConstructionError";
    case ErrorCode::InsufficientObjects: return "InsufficientObjects";
    case ErrorCode::InsufficientAttributes: return "InsufficientAttributes";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::EmptyQuery: return "EmptyQuery";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::TraceMismatch: return "TraceMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::EmptyStack: return "EmptyStack";
    case ErrorCode::BadScale: return "BadScale";
    case ErrorCode::MissingClassQueries: return "MissingClassQueries";
    case ErrorCode::SourceViolation: return "SourceViolation";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::DataError: return "DataError";
    case ErrorCode::EmptyEvalSet: return "EmptyEvalSet";
    case ErrorCode::CheckpointMismatch: return "CheckpointMismatch";
    case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

/// Every failure in the library surfaces as this exception; `code()` is the
/// machine-readable kind, `line()` is set only for parse errors.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message, long line = -1)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), line_(line) {}

    ErrorCode code() const noexcept { return code_; }
    long line() const noexcept { return line_; }

private:
    ErrorCode code_;
    long line_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

} // namespace cora
