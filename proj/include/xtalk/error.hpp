#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xtalk {

enum class ErrorCode {
    UnknownSession,
    SessionClosed,
    DuplicateSubscriber,
    MalformedFrame,
    SequenceRegression,
    NotClientVisible,
    OverCapacity,
    InvalidConfig,
    BackendFailure,
    UntaggedAudio,
    EmptyText,
    UnknownVoice,
    UnknownEmotion,
    UnknownTool,
    ToolFailure,
    DuplicateMark,
    IncompleteTrace,
    ScenarioMissing,
    Cancelled,
    InvalidEvent,
    BindError,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::UnknownSession: return "UnknownSession";
        case ErrorCode::SessionClosed: return "SessionClosed";
        case ErrorCode::DuplicateSubscriber: return "DuplicateSubscriber";
        case ErrorCode::MalformedFrame: return "MalformedFrame";
        case ErrorCode::SequenceRegression: return "SequenceRegression";
        case ErrorCode::NotClientVisible: return "NotClientVisible";
        case ErrorCode::OverCapacity: return "OverCapacity";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::BackendFailure: return "BackendFailure";
        case ErrorCode::UntaggedAudio: return "UntaggedAudio";
        case ErrorCode::EmptyText: return "EmptyText";
        case ErrorCode::UnknownVoice: return "UnknownVoice";
        case ErrorCode::UnknownEmotion: return "UnknownEmotion";
        case ErrorCode::UnknownTool: return "UnknownTool";
        case ErrorCode::ToolFailure: return "ToolFailure";
        case ErrorCode::DuplicateMark: return "DuplicateMark";
        case ErrorCode::IncompleteTrace: return "IncompleteTrace";
        case ErrorCode::ScenarioMissing: return "ScenarioMissing";
        case ErrorCode::Cancelled: return "Cancelled";
        case ErrorCode::InvalidEvent: return "InvalidEvent";
        case ErrorCode::BindError: return "BindError";
    }
    return "Unknown";
}

// All failures surfaced by the library carry a code so callers can branch
// without string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace xtalk
