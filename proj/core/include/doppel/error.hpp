#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace doppel {

enum class ErrorCode {
    UnknownFormat,
    UnsortedInput,
    UnknownTier,
    GatewayError,
    MalformedGeneration,
    MalformedSelection,
    DimensionMismatch,
    StoreCorrupt,
    EmptyReply,
    InvalidProfile,
    PoolExhausted,
    SessionExpired,
    NotYourTurn,
    NotAwaitingVerdict,
    InvalidRating,
    InvalidReason,
    AlreadyRevealed,
    ConfederateDisconnected,
    UnknownSession,
    UnknownParticipant,
    InvalidQuestionnaire,
    Unauthorized,
    EmptyInput,
    LengthMismatch,
    InvalidArgument,
    IoError,
};

std::string_view to_string(ErrorCode code);

// Every recoverable failure in the library is reported as an Error whose
// code() names the contract violation.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

    bool retryable() const noexcept { return code_ == ErrorCode::GatewayError; }

private:
    ErrorCode code_;
};

}  // namespace doppel
