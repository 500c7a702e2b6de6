#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mixmfl {

enum class ErrorKind {
    ShapeMismatch,
    NonFiniteValue,
    NoTape,
    NonScalarLoss,
    MissingGrad,
    UnknownModality,
    IncompleteRepList,
    BadDims,
    EmptyBatch,
    VectorTooShort,
    EmptyTripletSet,
    BundleMismatch,
    TooFewPoints,
    DimMismatch,
    EmptyBank,
    EmptyFederation,
    EmptyGroup,
    ConfigError,
    BadSpec,
    IoError,
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::NonFiniteValue: return "NonFiniteValue";
        case ErrorKind::NoTape: return "NoTape";
        case ErrorKind::NonScalarLoss: return "NonScalarLoss";
        case ErrorKind::MissingGrad: return "MissingGrad";
        case ErrorKind::UnknownModality: return "UnknownModality";
        case ErrorKind::IncompleteRepList: return "IncompleteRepList";
        case ErrorKind::BadDims: return "BadDims";
        case ErrorKind::EmptyBatch: return "EmptyBatch";
        case ErrorKind::VectorTooShort: return "VectorTooShort";
        case ErrorKind::EmptyTripletSet: return "EmptyTripletSet";
        case ErrorKind::BundleMismatch: return "BundleMismatch";
        case ErrorKind::TooFewPoints: return "TooFewPoints";
        case ErrorKind::DimMismatch: return "DimMismatch";
        case ErrorKind::EmptyBank: return "EmptyBank";
        case ErrorKind::EmptyFederation: return "EmptyFederation";
        case ErrorKind::EmptyGroup: return "EmptyGroup";
        case ErrorKind::ConfigError: return "ConfigError";
        case ErrorKind::BadSpec: return "BadSpec";
        case ErrorKind::IoError: return "IoError";
    }
    return "Unknown";
}

/// Every failure surfaced by the library. `kind()` is the stable part;
/// the message carries context for humans.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, what);
}

}  // namespace mixmfl
