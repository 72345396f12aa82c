#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dfe {

enum class ErrorCode {
    InvalidArgument,
    Io,
    UpscaleRequested,
    OutOfBounds,
    ImageTooSmall,
    ShapeMismatch,
    NonFiniteLoss,
    VersionMismatch,
    CorruptHeader,
    TruncatedBlob,
    EmptyField,
    NoNeighborhood,
    MissingGroundTruth,
    InsufficientSamples,
    DegenerateSigma,
};

std::string_view to_string(ErrorCode code);

/// Exception carrying a machine-readable error code. All library failures
/// are reported through this type.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

} // namespace dfe
