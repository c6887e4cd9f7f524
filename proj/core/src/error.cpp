#include "doppel/error.hpp"

namespace doppel {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::UnknownFormat: return "UnknownFormat";
        case ErrorCode::UnsortedInput: return "UnsortedInput";
        case ErrorCode::UnknownTier: return "UnknownTier";
        case ErrorCode::GatewayError: return "GatewayError";
        case ErrorCode::MalformedGeneration: return "MalformedGeneration";
        case ErrorCode::MalformedSelection: return "MalformedSelection";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::StoreCorrupt: return "StoreCorrupt";
        case ErrorCode::EmptyReply: return "EmptyReply";
        case ErrorCode::InvalidProfile: return "InvalidProfile";
        case ErrorCode::PoolExhausted: return "PoolExhausted";
        case ErrorCode::SessionExpired: return "SessionExpired";
        case ErrorCode::NotYourTurn: return "NotYourTurn";
        case ErrorCode::NotAwaitingVerdict: return "NotAwaitingVerdict";
        case ErrorCode::InvalidRating: return "InvalidRating";
        case ErrorCode::InvalidReason: return "InvalidReason";
        case ErrorCode::AlreadyRevealed: return "AlreadyRevealed";
        case ErrorCode::ConfederateDisconnected: return "ConfederateDisconnected";
        case ErrorCode::UnknownSession: return "UnknownSession";
        case ErrorCode::UnknownParticipant: return "UnknownParticipant";
        case ErrorCode::InvalidQuestionnaire: return "InvalidQuestionnaire";
        case ErrorCode::Unauthorized: return "Unauthorized";
        case ErrorCode::EmptyInput: return "EmptyInput";
        case ErrorCode::LengthMismatch: return "LengthMismatch";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

}  // namespace doppel
