#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "xtalk/event_bus.hpp"
#include "xtalk/telemetry.hpp"
#include "xtalk/turn_taking.hpp"

namespace xtalk {

inline constexpr std::uint8_t kAudioTag = 0x01;
inline constexpr std::uint8_t kTtsTag = 0x02;
inline constexpr std::string_view kSubprotocol = "xtalk.v1";
inline constexpr std::string_view kSessionPath = "/session";

/// One complete WebSocket message.
struct WireFrame {
    bool binary = false;
    std::string data;

    static WireFrame text(std::string s) { return {false, std::move(s)}; }
    static WireFrame bytes(std::string s) { return {true, std::move(s)}; }
    bool operator==(const WireFrame&) const = default;
};

enum class ClientType { Hello, Audio, VadStart, VadEnd, BargeIn, TextInput, Config, Bye };

inline const char* to_string(ClientType t) {
    switch (t) {
        case ClientType::Hello: return "hello";
        case ClientType::Audio: return "audio";
        case ClientType::VadStart: return "vad_start";
        case ClientType::VadEnd: return "vad_end";
        case ClientType::BargeIn: return "barge_in";
        case ClientType::TextInput: return "text_input";
        case ClientType::Config: return "config";
        case ClientType::Bye: return "bye";
    }
    return "?";
}

inline std::optional<ClientType> parse_client_type(std::string_view s) {
    for (auto t : {ClientType::Hello, ClientType::Audio, ClientType::VadStart, ClientType::VadEnd,
                   ClientType::BargeIn, ClientType::TextInput, ClientType::Config, ClientType::Bye}) {
        if (s == to_string(t)) return t;
    }
    return std::nullopt;
}

struct ClientMessage {
    ClientType type = ClientType::Hello;
    std::uint32_t seq = 0;
    nlohmann::json payload = nlohmann::json::object();
    std::vector<std::int16_t> pcm;

    bool operator==(const ClientMessage&) const = default;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<char>((v >> shift) & 0xff));
}

inline std::uint32_t get_u32(std::string_view in, std::size_t at) {
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<std::uint8_t>(in[at + i]);
    return v;
}

inline void put_pcm(std::string& out, const std::vector<std::int16_t>& pcm) {
    out.reserve(out.size() + pcm.size() * 2);
    for (auto s : pcm) {
        const auto u = static_cast<std::uint16_t>(s);
        out.push_back(static_cast<char>(u & 0xff));
        out.push_back(static_cast<char>(u >> 8));
    }
}

inline std::vector<std::int16_t> get_pcm(std::string_view in) {
    std::vector<std::int16_t> pcm(in.size() / 2);
    for (std::size_t i = 0; i < pcm.size(); ++i) {
        const auto lo = static_cast<std::uint8_t>(in[2 * i]);
        const auto hi = static_cast<std::uint8_t>(in[2 * i + 1]);
        pcm[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8)));
    }
    return pcm;
}

}  // namespace detail

/// Parses one client frame. `last_seq` carries the per-connection sequence state.
inline ClientMessage decode_client_frame(const WireFrame& frame, std::optional<std::uint32_t>& last_seq) {
    ClientMessage msg;
    if (frame.binary) {
        if (frame.data.size() < 5) throw Error(ErrorCode::MalformedFrame, "binary frame shorter than header");
        if (static_cast<std::uint8_t>(frame.data[0]) != kAudioTag) {
            throw Error(ErrorCode::MalformedFrame, "unknown binary type tag");
        }
        const auto body = std::string_view(frame.data).substr(5);
        if (body.size() % 2 != 0) throw Error(ErrorCode::MalformedFrame, "odd PCM length");
        msg.type = ClientType::Audio;
        msg.seq = detail::get_u32(frame.data, 1);
        msg.pcm = detail::get_pcm(body);
    } else {
        auto j = nlohmann::json::parse(frame.data, nullptr, false);
        if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::MalformedFrame, "bad JSON");
        if (!j.contains("type") || !j["type"].is_string()) throw Error(ErrorCode::MalformedFrame, "missing type");
        if (!j.contains("seq") || !j["seq"].is_number_unsigned()) throw Error(ErrorCode::MalformedFrame, "missing seq");
        if (!j.contains("payload") || !j["payload"].is_object()) {
            throw Error(ErrorCode::MalformedFrame, "missing payload");
        }
        auto type = parse_client_type(j["type"].get<std::string>());
        if (!type || *type == ClientType::Audio) throw Error(ErrorCode::MalformedFrame, "unknown type");
        const auto seq = j["seq"].get<std::uint64_t>();
        if (seq > 0xffffffffULL) throw Error(ErrorCode::MalformedFrame, "seq out of range");
        msg.type = *type;
        msg.seq = static_cast<std::uint32_t>(seq);
        msg.payload = std::move(j["payload"]);
    }
    if (last_seq && msg.seq <= *last_seq) {
        throw Error(ErrorCode::SequenceRegression,
                    "seq " + std::to_string(msg.seq) + " after " + std::to_string(*last_seq));
    }
    last_seq = msg.seq;
    return msg;
}

inline WireFrame encode_client_message(const ClientMessage& m) {
    if (m.type == ClientType::Audio) {
        std::string out;
        out.push_back(static_cast<char>(kAudioTag));
        detail::put_u32(out, m.seq);
        detail::put_pcm(out, m.pcm);
        return WireFrame::bytes(std::move(out));
    }
    nlohmann::ordered_json j;
    j["type"] = to_string(m.type);
    j["seq"] = m.seq;
    j["payload"] = m.payload;
    return WireFrame::text(j.dump());
}

inline bool is_client_visible(EventKind k) {
    switch (k) {
        case EventKind::AsrPartial:
        case EventKind::AsrFinal:
        case EventKind::LlmToken:
        case EventKind::LlmSentence:
        case EventKind::TtsChunk:
        case EventKind::TtsDone:
        case EventKind::PausePlayback:
        case EventKind::Resume:
        case EventKind::ThinkingStart:
        case EventKind::ThinkingEnd:
        case EventKind::CaptionUpdated:
        case EventKind::SpeakerIdentified:
        case EventKind::Metric: return true;
        default: return false;
    }
}

inline std::uint32_t pack_chunk_index(std::uint32_t clause, std::uint32_t chunk) {
    if (clause > 0xffff || chunk > 0xffff) throw Error(ErrorCode::InvalidEvent, "chunk index overflow");
    return (clause << 16) | chunk;
}

inline WireFrame encode_server_event(const Event& ev) {
    if (!is_client_visible(ev.kind)) {
        throw Error(ErrorCode::NotClientVisible, std::string(to_string(ev.kind)) + " is internal");
    }
    if (ev.kind == EventKind::TtsChunk) {
        const auto& p = ev.as<TtsChunkPayload>();
        std::string out;
        out.push_back(static_cast<char>(kTtsTag));
        detail::put_u32(out, ev.turn);
        detail::put_u32(out, pack_chunk_index(p.clause_index, p.chunk_index));
        detail::put_pcm(out, p.pcm);
        return WireFrame::bytes(std::move(out));
    }
    nlohmann::ordered_json j;
    nlohmann::ordered_json payload = nlohmann::ordered_json::object();
    std::string type;
    switch (ev.kind) {
        case EventKind::AsrPartial:
        case EventKind::AsrFinal: {
            const auto& p = ev.as<AsrPayload>();
            type = ev.kind == EventKind::AsrPartial ? "asr_partial" : "asr_final";
            payload["text"] = p.text();
            payload["finalized"] = p.finalized;
            payload["volatile"] = p.volatile_text;
            payload["audio_ms"] = p.audio_ms;
            payload["tail_ms"] = p.tail_ms;
            payload["degraded"] = p.degraded;
            break;
        }
        case EventKind::LlmToken:
        case EventKind::LlmSentence:
            type = ev.kind == EventKind::LlmToken ? "llm_token" : "llm_sentence";
            payload["text"] = ev.as<TextPayload>().text;
            break;
        case EventKind::TtsDone: type = "tts_done"; break;
        case EventKind::PausePlayback: type = "pause_playback"; break;
        case EventKind::Resume: type = "resume"; break;
        case EventKind::ThinkingStart:
        case EventKind::ThinkingEnd:
            type = "thinking";
            payload["state"] = ev.kind == EventKind::ThinkingStart ? "start" : "end";
            payload["text"] = ev.as<TextPayload>().text;
            break;
        case EventKind::CaptionUpdated: {
            const auto& p = ev.as<CaptionPayload>();
            type = "caption";
            payload["text"] = p.text;
            payload["rewritten"] = p.rewritten;
            break;
        }
        case EventKind::SpeakerIdentified: {
            const auto& p = ev.as<SpeakerPayload>();
            type = "speaker";
            payload["speaker_id"] = p.speaker_id;
            payload["similarity"] = p.similarity;
            payload["registered"] = p.registered;
            break;
        }
        case EventKind::Metric: {
            const auto& p = ev.as<MetricPayload>();
            type = "metric";
            payload["name"] = p.name;
            payload["value"] = p.value;
            break;
        }
        default: break;
    }
    j["type"] = type;
    j["turn_id"] = ev.turn;
    j["payload"] = std::move(payload);
    return WireFrame::text(j.dump());
}

/// OverCapacity -> "over_capacity".
inline std::string wire_code(ErrorCode code) {
    std::string out;
    for (char c : std::string_view(to_string(code))) {
        if (c >= 'A' && c <= 'Z') {
            if (!out.empty()) out.push_back('_');
            out.push_back(static_cast<char>(c - 'A' + 'a'));
        } else {
            out.push_back(c);
        }
    }
    return out;
}

inline WireFrame encode_error(std::string_view code, std::string_view message = {}) {
    nlohmann::ordered_json j;
    j["type"] = "error";
    j["payload"]["code"] = code;
    if (!message.empty()) j["payload"]["message"] = message;
    return WireFrame::text(j.dump());
}

inline WireFrame encode_hello_ack(const SessionId& session) {
    nlohmann::ordered_json j;
    j["type"] = "hello_ack";
    j["payload"]["session_id"] = session;
    return WireFrame::text(j.dump());
}

/// Client-side view of any server frame.
struct ServerFrame {
    std::string type;
    std::optional<std::uint32_t> turn_id;
    nlohmann::json payload = nlohmann::json::object();
    std::uint32_t clause = 0;
    std::uint32_t chunk = 0;
    std::vector<std::int16_t> pcm;
};

inline ServerFrame parse_server_frame(const WireFrame& frame) {
    ServerFrame f;
    if (frame.binary) {
        if (frame.data.size() < 9 || static_cast<std::uint8_t>(frame.data[0]) != kTtsTag) {
            throw Error(ErrorCode::MalformedFrame, "bad server binary frame");
        }
        const auto body = std::string_view(frame.data).substr(9);
        if (body.size() % 2 != 0) throw Error(ErrorCode::MalformedFrame, "odd PCM length");
        f.type = "tts_chunk";
        f.turn_id = detail::get_u32(frame.data, 1);
        const auto idx = detail::get_u32(frame.data, 5);
        f.clause = idx >> 16;
        f.chunk = idx & 0xffff;
        f.pcm = detail::get_pcm(body);
        return f;
    }
    auto j = nlohmann::json::parse(frame.data, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("type")) {
        throw Error(ErrorCode::MalformedFrame, "bad server JSON");
    }
    f.type = j["type"].get<std::string>();
    if (j.contains("turn_id")) f.turn_id = j["turn_id"].get<std::uint32_t>();
    if (j.contains("payload")) f.payload = j["payload"];
    return f;
}

/// Inverse of encode_server_event. The session field is left empty.
inline Event decode_server_event(const WireFrame& frame) {
    const auto f = parse_server_frame(frame);
    const auto turn = f.turn_id.value_or(0);
    const auto& p = f.payload;
    auto make = [&](EventKind k, Payload payload) { return Event::make("", k, std::move(payload), turn); };
    try {
        if (f.type == "tts_chunk") return make(EventKind::TtsChunk, TtsChunkPayload{f.clause, f.chunk, f.pcm});
        if (f.type == "asr_partial" || f.type == "asr_final") {
            AsrPayload a;
            a.finalized = p.at("finalized").get<std::string>();
            a.volatile_text = p.at("volatile").get<std::string>();
            a.audio_ms = p.at("audio_ms").get<std::int64_t>();
            a.tail_ms = p.at("tail_ms").get<std::int64_t>();
            a.degraded = p.at("degraded").get<bool>();
            return make(f.type == "asr_partial" ? EventKind::AsrPartial : EventKind::AsrFinal, a);
        }
        if (f.type == "llm_token") return make(EventKind::LlmToken, TextPayload{p.at("text").get<std::string>()});
        if (f.type == "llm_sentence") {
            return make(EventKind::LlmSentence, TextPayload{p.at("text").get<std::string>()});
        }
        if (f.type == "tts_done") return make(EventKind::TtsDone, Marker{});
        if (f.type == "pause_playback") return make(EventKind::PausePlayback, Marker{});
        if (f.type == "resume") return make(EventKind::Resume, Marker{});
        if (f.type == "thinking") {
            const auto k = p.at("state").get<std::string>() == "start" ? EventKind::ThinkingStart
                                                                       : EventKind::ThinkingEnd;
            return make(k, TextPayload{p.at("text").get<std::string>()});
        }
        if (f.type == "caption") {
            return make(EventKind::CaptionUpdated,
                        CaptionPayload{p.at("text").get<std::string>(), p.at("rewritten").get<bool>()});
        }
        if (f.type == "speaker") {
            return make(EventKind::SpeakerIdentified,
                        SpeakerPayload{p.at("speaker_id").get<std::string>(), p.at("similarity").get<double>(),
                                       p.at("registered").get<bool>()});
        }
        if (f.type == "metric") {
            return make(EventKind::Metric, MetricPayload{p.at("name").get<std::string>(), p.at("value").get<double>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::MalformedFrame, e.what());
    }
    throw Error(ErrorCode::MalformedFrame, "not an event frame: " + f.type);
}

/// Receives encoded frames for one connection.
class FrameSink {
public:
    virtual ~FrameSink() = default;
    virtual void send(const WireFrame& frame) = 0;
    virtual void close() {}
};

/// Converts client messages into bus events for one session.
class InputGateway {
public:
    using ConfigHandler = std::function<std::vector<Event>(const nlohmann::json&)>;
    using CloseHandler = std::function<void()>;

    InputGateway(EventBus& bus, SessionId session, const std::atomic<Phase>& phase,
                 const std::atomic<std::uint32_t>& turn, LatencyTracer& tracer, ConfigHandler on_config,
                 CloseHandler on_close)
        : bus_(bus), session_(std::move(session)), phase_(phase), turn_(turn), tracer_(tracer),
          on_config_(std::move(on_config)), on_close_(std::move(on_close)) {}

    std::vector<Event> ingest(const ClientMessage& msg) {
        if (!bus_.is_open(session_)) throw Error(ErrorCode::UnknownSession, session_);
        std::vector<Event> out;
        const auto turn = turn_.load();
        auto emit = [&](EventKind k, Payload p = Marker{}) {
            auto ev = Event::make(session_, k, std::move(p), turn);
            bus_.publish(ev);
            out.push_back(std::move(ev));
        };
        switch (msg.type) {
            case ClientType::Hello: break;
            case ClientType::Audio: emit(EventKind::AudioIn, AudioPayload{msg.pcm}); break;
            case ClientType::VadStart:
                emit(EventKind::VadStart);
                if (const auto ph = phase_.load(); ph == Phase::AgentSpeaking || ph == Phase::Processing) {
                    emit(EventKind::InterruptCandidate, InterruptPayload{});
                }
                break;
            case ClientType::VadEnd:
                tracer_.begin_utterance(monotonic_ns());
                emit(EventKind::VadEnd);
                break;
            case ClientType::BargeIn: emit(EventKind::InterruptCandidate, InterruptPayload{}); break;
            case ClientType::TextInput: {
                const auto text = msg.payload.value("text", std::string{});
                if (text.empty()) throw Error(ErrorCode::MalformedFrame, "text_input needs text");
                tracer_.begin_utterance(monotonic_ns());
                AsrPayload a;
                a.finalized = text;
                emit(EventKind::AsrFinal, a);
                break;
            }
            case ClientType::Config:
                if (on_config_) {
                    for (auto& ev : on_config_(msg.payload)) {
                        bus_.publish(ev);
                        out.push_back(std::move(ev));
                    }
                }
                break;
            case ClientType::Bye:
                if (on_close_) on_close_();
                out.push_back(Event::make(session_, EventKind::SessionClose, Marker{}, turn));
                break;
        }
        return out;
    }

private:
    EventBus& bus_;
    SessionId session_;
    const std::atomic<Phase>& phase_;
    const std::atomic<std::uint32_t>& turn_;
    LatencyTracer& tracer_;
    ConfigHandler on_config_;
    CloseHandler on_close_;
};

inline bool is_agent_output(EventKind k) {
    switch (k) {
        case EventKind::LlmToken:
        case EventKind::LlmSentence:
        case EventKind::TtsChunk:
        case EventKind::TtsDone:
        case EventKind::ThinkingStart:
        case EventKind::ThinkingEnd: return true;
        default: return false;
    }
}

/// Serializes frames to one connection. Agent output of a turn under
/// interrupt verification is held; it is released on Resume and discarded
/// once the turn is interrupted or flushed.
class OutputGateway {
public:
    OutputGateway(std::shared_ptr<FrameSink> sink, LatencyTracer& tracer) : sink_(std::move(sink)), tracer_(tracer) {}

    static KindSet kinds() {
        KindSet k;
        for (std::size_t i = 0; i < kEventKindCount; ++i) {
            const auto kind = static_cast<EventKind>(i);
            if (is_client_visible(kind)) k.insert(kind);
        }
        for (auto kind : {EventKind::InterruptConfirmed, EventKind::Flush, EventKind::Stop}) k.insert(kind);
        return k;
    }

    void handle(const Event& ev) {
        std::lock_guard lock(mu_);
        switch (ev.kind) {
            case EventKind::PausePlayback:
                write(ev);
                held_turn_ = ev.turn;
                return;
            case EventKind::Resume: {
                write(ev);
                auto held = std::move(held_);
                held_.clear();
                held_turn_.reset();
                for (auto& h : held) write(h);
                return;
            }
            case EventKind::InterruptConfirmed:
            case EventKind::Flush:
            case EventKind::Stop:
                dead_.insert(ev.turn);
                if (held_turn_ == ev.turn) {
                    held_.clear();
                    held_turn_.reset();
                }
                return;
            default: break;
        }
        if (is_agent_output(ev.kind)) {
            if (dead_.count(ev.turn)) {
                ++dropped_;
                return;
            }
            if (held_turn_ == ev.turn) {
                held_.push_back(ev);
                return;
            }
        }
        write(ev);
    }

    std::size_t dropped() const {
        std::lock_guard lock(mu_);
        return dropped_;
    }

private:
    void write(const Event& ev) {
        sink_->send(encode_server_event(ev));
        if (ev.kind == EventKind::TtsChunk) tracer_.mark_once(ev.turn, TracePoint::TtsFirstChunk, monotonic_ns());
    }

    std::shared_ptr<FrameSink> sink_;
    LatencyTracer& tracer_;
    mutable std::mutex mu_;
    std::optional<std::uint32_t> held_turn_;
    std::vector<Event> held_;
    std::set<std::uint32_t> dead_;
    std::size_t dropped_ = 0;
};

}  // namespace xtalk
