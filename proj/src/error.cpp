#include "dfe/error.hpp"

namespace dfe {

std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Io: return "Io";
    case ErrorCode::UpscaleRequested: return "UpscaleRequested";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::ImageTooSmall: return "ImageTooSmall";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::CorruptHeader: return "CorruptHeader";
    case ErrorCode::TruncatedBlob: return "TruncatedBlob";
    case ErrorCode::EmptyField: return "EmptyField";
    case ErrorCode::NoNeighborhood: return "NoNeighborhood";
    case ErrorCode::MissingGroundTruth: return "MissingGroundTruth";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::DegenerateSigma: return "DegenerateSigma";
    }
    return "Unknown";
}

} // namespace dfe
