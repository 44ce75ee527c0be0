#pragma once

#include <array>
#include <bitset>
#include <chrono>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "xtalk/error.hpp"

namespace xtalk {

using SessionId = std::string;

enum class EventKind : std::uint8_t {
    SessionOpen,
    SessionClose,
    AudioIn,
    VadStart,
    VadEnd,
    AsrPartial,
    AsrFinal,
    LlmToken,
    LlmSentence,
    LlmDone,
    ToolCallStart,
    ToolCallEnd,
    PhaticUtterance,
    TtsChunk,
    TtsDone,
    InterruptCandidate,
    InterruptConfirmed,
    FalseInterrupt,
    Resume,
    PausePlayback,
    Flush,
    Stop,
    TimbreSwitch,
    EmotionSwitch,
    ThinkingStart,
    ThinkingEnd,
    CaptionUpdated,
    SpeakerIdentified,
    Metric,
};

inline constexpr std::size_t kEventKindCount = static_cast<std::size_t>(EventKind::Metric) + 1;

// Lower value is served first.
enum class Priority : std::uint8_t { Control = 0, Data = 1, Telemetry = 2 };

constexpr Priority priority_of(EventKind kind) {
    switch (kind) {
        case EventKind::Flush:
        case EventKind::Stop:
        case EventKind::PausePlayback:
        case EventKind::Resume:
        case EventKind::InterruptConfirmed:
        case EventKind::SessionClose:
            return Priority::Control;
        case EventKind::Metric:
            return Priority::Telemetry;
        default:
            return Priority::Data;
    }
}

inline std::string_view to_string(EventKind kind) {
    static constexpr std::array<std::string_view, kEventKindCount> names{
        "SessionOpen",   "SessionClose",      "AudioIn",        "VadStart",        "VadEnd",
        "AsrPartial",    "AsrFinal",          "LlmToken",       "LlmSentence",     "LlmDone",
        "ToolCallStart", "ToolCallEnd",       "PhaticUtterance", "TtsChunk",       "TtsDone",
        "InterruptCandidate", "InterruptConfirmed", "FalseInterrupt", "Resume",    "PausePlayback",
        "Flush",         "Stop",              "TimbreSwitch",   "EmotionSwitch",   "ThinkingStart",
        "ThinkingEnd",   "CaptionUpdated",    "SpeakerIdentified", "Metric",
    };
    return names[static_cast<std::size_t>(kind)];
}

class KindSet {
public:
    KindSet() = default;
    KindSet(std::initializer_list<EventKind> kinds) {
        for (auto k : kinds) insert(k);
    }

    void insert(EventKind k) { bits_.set(static_cast<std::size_t>(k)); }
    bool contains(EventKind k) const { return bits_.test(static_cast<std::size_t>(k)); }
    bool empty() const { return bits_.none(); }
    std::size_t size() const { return bits_.count(); }

    static KindSet all() {
        KindSet s;
        s.bits_.set();
        return s;
    }

private:
    std::bitset<kEventKindCount> bits_;
};

// Payloads. Each kind accepts exactly one of these alternatives.

struct Marker {
    bool operator==(const Marker&) const = default;
};

struct AudioPayload {
    std::vector<std::int16_t> pcm;
    bool operator==(const AudioPayload&) const = default;
};

struct TextPayload {
    std::string text;
    bool operator==(const TextPayload&) const = default;
};

struct AsrPayload {
    std::string finalized;
    std::string volatile_text;
    std::int64_t audio_ms = 0;  // utterance audio received so far
    std::int64_t tail_ms = 0;   // unflushed audio covered by the last backend call
    bool degraded = false;

    std::string text() const { return finalized + volatile_text; }
    bool operator==(const AsrPayload&) const = default;
};

struct TtsChunkPayload {
    std::uint32_t clause_index = 0;
    std::uint32_t chunk_index = 0;  // within the clause
    std::vector<std::int16_t> pcm;
    bool operator==(const TtsChunkPayload&) const = default;
};

struct ToolPayload {
    std::string tool;
    nlohmann::json args = nlohmann::json::object();
    std::string result;
    bool ok = true;
    bool operator==(const ToolPayload&) const = default;
};

struct SwitchPayload {
    std::string value;    // voice name or emotion
    std::string profile;  // resolved profile tag / backend mechanism
    bool operator==(const SwitchPayload&) const = default;
};

struct InterruptPayload {
    std::string reason;
    std::string transcript;
    std::int64_t audio_ms = 0;
    bool operator==(const InterruptPayload&) const = default;
};

struct CaptionPayload {
    std::string text;
    bool rewritten = false;
    bool operator==(const CaptionPayload&) const = default;
};

struct SpeakerPayload {
    std::string speaker_id;
    double similarity = 0.0;
    bool registered = false;  // true when the speaker was newly enrolled
    bool operator==(const SpeakerPayload&) const = default;
};

struct MetricPayload {
    std::string name;
    double value = 0.0;
    bool operator==(const MetricPayload&) const = default;
};

using Payload = std::variant<Marker, AudioPayload, TextPayload, AsrPayload, TtsChunkPayload, ToolPayload,
                             SwitchPayload, InterruptPayload, CaptionPayload, SpeakerPayload, MetricPayload>;

/// Index into Payload expected for each kind.
constexpr std::size_t payload_index_for(EventKind kind) {
    switch (kind) {
        case EventKind::AudioIn: return 1;
        case EventKind::LlmToken:
        case EventKind::LlmSentence:
        case EventKind::PhaticUtterance:
        case EventKind::ThinkingStart:
        case EventKind::ThinkingEnd:
            return 2;
        case EventKind::AsrPartial:
        case EventKind::AsrFinal:
            return 3;
        case EventKind::TtsChunk: return 4;
        case EventKind::ToolCallStart:
        case EventKind::ToolCallEnd:
            return 5;
        case EventKind::TimbreSwitch:
        case EventKind::EmotionSwitch:
            return 6;
        case EventKind::InterruptCandidate:
        case EventKind::InterruptConfirmed:
        case EventKind::FalseInterrupt:
            return 7;
        case EventKind::CaptionUpdated: return 8;
        case EventKind::SpeakerIdentified: return 9;
        case EventKind::Metric: return 10;
        default: return 0;
    }
}

inline std::int64_t monotonic_ns() {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

struct Event {
    std::uint64_t event_id = 0;  // assigned by the bus on publish
    SessionId session;
    EventKind kind = EventKind::SessionOpen;
    Priority priority = Priority::Data;
    std::uint32_t turn = 0;
    std::int64_t created_at = 0;  // monotonic ns
    Payload payload;

    /// Builds an event, rejecting payloads that do not belong to `kind`.
    static Event make(SessionId session, EventKind kind, Payload payload = Marker{}, std::uint32_t turn = 0) {
        if (payload.index() != payload_index_for(kind)) {
            throw Error(ErrorCode::InvalidEvent,
                        "payload does not match kind " + std::string(to_string(kind)));
        }
        Event e;
        e.session = std::move(session);
        e.kind = kind;
        e.priority = priority_of(kind);
        e.turn = turn;
        e.created_at = monotonic_ns();
        e.payload = std::move(payload);
        return e;
    }

    template <typename T>
    const T& as() const {
        return std::get<T>(payload);
    }
};

}  // namespace xtalk
