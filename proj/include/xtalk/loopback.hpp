#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "xtalk/session_runtime.hpp"
#include "xtalk/wire_gateway.hpp"

namespace xtalk {

struct LogEntry {
    enum class Origin { Client, Server, Tap };
    Origin origin = Origin::Server;
    std::int64_t t_ns = 0;
    WireFrame frame;             // client/server frames
    std::optional<Event> event;  // tap entries
};

/// Shared, ordered record of everything crossing one connection.
class FrameLog {
public:
    void add(LogEntry e) {
        {
            std::lock_guard lock(mu_);
            if (e.origin == LogEntry::Origin::Server) server_.push_back(parse_server_frame(e.frame));
            entries_.push_back(std::move(e));
        }
        cv_.notify_all();
    }

    std::vector<LogEntry> entries() const {
        std::lock_guard lock(mu_);
        return entries_;
    }

    std::vector<ServerFrame> server_frames() const {
        std::lock_guard lock(mu_);
        return server_;
    }

    std::size_t server_count() const {
        std::lock_guard lock(mu_);
        return server_.size();
    }

    /// Waits until `pred` holds for the server frames received so far.
    bool wait(const std::function<bool(const std::vector<ServerFrame>&)>& pred, std::chrono::milliseconds timeout) {
        std::unique_lock lock(mu_);
        return cv_.wait_for(lock, timeout, [&] { return pred(server_); });
    }

    void mark_closed() {
        {
            std::lock_guard lock(mu_);
            closed_ = true;
        }
        cv_.notify_all();
    }

    bool closed() const {
        std::lock_guard lock(mu_);
        return closed_;
    }

private:
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::vector<LogEntry> entries_;
    std::vector<ServerFrame> server_;
    bool closed_ = false;
};

class RecordingSink final : public FrameSink {
public:
    explicit RecordingSink(std::shared_ptr<FrameLog> log) : log_(std::move(log)) {}
    void send(const WireFrame& frame) override {
        log_->add({LogEntry::Origin::Server, monotonic_ns(), frame, std::nullopt});
    }
    void close() override { log_->mark_closed(); }

private:
    std::shared_ptr<FrameLog> log_;
};

inline std::size_t count_frames(const std::vector<ServerFrame>& frames, std::string_view type,
                                std::optional<std::uint32_t> turn = std::nullopt) {
    std::size_t n = 0;
    for (const auto& f : frames) {
        if (f.type == type && (!turn || f.turn_id == turn)) ++n;
    }
    return n;
}

struct SpeakOptions {
    bool lockstep = true;       // wait for the partial covering each chunk
    std::int64_t chunk_ms = kDefaultChunkMs;
    double pace_ms = 0.0;       // extra delay between chunks
    std::chrono::milliseconds partial_timeout{5000};
};

/// In-process client driving a Connection exactly as the WebSocket
/// transport would, recording every frame in both directions.
class LoopbackClient {
public:
    explicit LoopbackClient(Server& server)
        : server_(server), log_(std::make_shared<FrameLog>()),
          conn_(std::make_unique<Connection>(server, std::make_shared<RecordingSink>(log_))) {}

    ~LoopbackClient() { disconnect(); }

    /// Sends hello; true when hello_ack arrived.
    bool hello() {
        send(ClientType::Hello);
        const bool ok = log_->wait([](const auto& f) { return count_frames(f, "hello_ack") > 0; },
                                   std::chrono::milliseconds(0));
        if (ok) {
            for (const auto& f : log_->server_frames()) {
                if (f.type == "hello_ack") session_id_ = f.payload.value("session_id", "");
            }
        }
        return ok;
    }

    void send(ClientType type, nlohmann::json payload = nlohmann::json::object()) {
        ClientMessage m;
        m.type = type;
        m.seq = ++seq_;
        m.payload = std::move(payload);
        deliver(encode_client_message(m));
    }

    void send_audio(std::vector<std::int16_t> pcm) {
        ClientMessage m;
        m.type = ClientType::Audio;
        m.seq = ++seq_;
        m.pcm = std::move(pcm);
        deliver(encode_client_message(m));
    }

    /// vad_start, the utterance audio in chunks, vad_end.
    void speak(const Utterance& u, const SpeakOptions& opt = {}) { speak_pcm(u.pcm(), opt); }

    void speak_pcm(const std::vector<std::int16_t>& pcm, const SpeakOptions& opt = {}) {
        send(ClientType::VadStart);
        const auto step = static_cast<std::size_t>(ms_to_samples(opt.chunk_ms));
        std::size_t sent = 0;
        while (sent < pcm.size()) {
            const auto n = std::min(step, pcm.size() - sent);
            const auto before = log_->server_count();
            send_audio({pcm.begin() + static_cast<std::ptrdiff_t>(sent),
                        pcm.begin() + static_cast<std::ptrdiff_t>(sent + n)});
            sent += n;
            if (opt.lockstep) {
                const auto sent_ms = samples_to_ms(sent);
                log_->wait(
                    [&](const std::vector<ServerFrame>& f) {
                        for (std::size_t i = before; i < f.size(); ++i) {
                            if (f[i].type == "asr_partial" && f[i].payload.value("audio_ms", 0) >= sent_ms) return true;
                        }
                        return false;
                    },
                    opt.partial_timeout);
            }
            if (opt.pace_ms > 0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(opt.pace_ms));
        }
        send(ClientType::VadEnd);
    }

    bool wait_for(std::string_view type, std::size_t count = 1, std::optional<std::uint32_t> turn = std::nullopt,
                  std::chrono::milliseconds timeout = std::chrono::milliseconds(10000)) {
        return log_->wait([&](const auto& f) { return count_frames(f, type, turn) >= count; }, timeout);
    }

    bool wait(const std::function<bool(const std::vector<ServerFrame>&)>& pred,
              std::chrono::milliseconds timeout = std::chrono::milliseconds(10000)) {
        return log_->wait(pred, timeout);
    }

    /// Records selected internal events of this session alongside the frames.
    void tap(KindSet kinds) {
        auto s = conn_->session();
        if (!s) return;
        auto sub = server_.bus().subscribe(s->id(), "loopback_tap", kinds);
        tap_ = std::make_unique<SubscriptionWorker>(server_.bus(), std::move(sub), [log = log_](const Event& e) {
            log->add({LogEntry::Origin::Tap, monotonic_ns(), {}, e});
        });
    }

    void bye() { send(ClientType::Bye); }

    void disconnect() {
        if (conn_) conn_->on_disconnect();
        if (tap_) tap_->stop();
    }

    std::vector<ServerFrame> frames() const { return log_->server_frames(); }
    std::vector<LogEntry> entries() const { return log_->entries(); }
    const std::string& session_id() const { return session_id_; }
    std::shared_ptr<Session> session() const { return conn_->session(); }
    std::shared_ptr<FrameLog> log() const { return log_; }

private:
    void deliver(const WireFrame& f) {
        log_->add({LogEntry::Origin::Client, monotonic_ns(), f, std::nullopt});
        conn_->on_frame(f);
    }

    Server& server_;
    std::shared_ptr<FrameLog> log_;
    std::unique_ptr<Connection> conn_;
    std::unique_ptr<SubscriptionWorker> tap_;
    std::uint32_t seq_ = 0;
    std::string session_id_;
};

inline KindSet default_tap_kinds() {
    KindSet k;
    for (auto kind : {EventKind::InterruptConfirmed, EventKind::FalseInterrupt, EventKind::ToolCallStart,
                      EventKind::ToolCallEnd, EventKind::PhaticUtterance, EventKind::TimbreSwitch,
                      EventKind::EmotionSwitch}) {
        k.insert(kind);
    }
    return k;
}

/// Executes a scenario's client steps. Steps:
///   {"op":"hello"} {"op":"speak","utterance":ID,"lockstep":bool}
///   {"op":"text","text":S} {"op":"config","payload":{...}}
///   {"op":"wait","for":TYPE,"count":N,"turn":T,"timeout_ms":MS}
///   {"op":"sleep","ms":MS} {"op":"bye"}
inline void run_client_steps(LoopbackClient& client, const nlohmann::json& steps, const UtteranceTable& utterances,
                             bool lockstep_default = true) {
    for (const auto& step : steps) {
        const auto op = step.at("op").get<std::string>();
        if (op == "hello") {
            if (!client.hello()) throw Error(ErrorCode::OverCapacity, "handshake rejected");
            client.tap(default_tap_kinds());
        } else if (op == "speak") {
            const auto* u = utterances.by_id(step.at("utterance").get<std::string>());
            if (!u) throw Error(ErrorCode::ScenarioMissing, "unknown utterance " + step.at("utterance").dump());
            SpeakOptions opt;
            opt.lockstep = step.value("lockstep", lockstep_default);
            client.speak(*u, opt);
        } else if (op == "text") {
            client.send(ClientType::TextInput, {{"text", step.at("text").get<std::string>()}});
        } else if (op == "config") {
            client.send(ClientType::Config, step.at("payload"));
        } else if (op == "wait") {
            std::optional<std::uint32_t> turn;
            if (step.contains("turn")) turn = step.at("turn").get<std::uint32_t>();
            const auto type = step.at("for").get<std::string>();
            const auto count = step.value("count", 1u);
            const std::chrono::milliseconds timeout(step.value("timeout_ms", 10000));
            if (!client.wait_for(type, count, turn, timeout)) {
                throw Error(ErrorCode::IncompleteTrace, "timed out waiting for " + type);
            }
        } else if (op == "sleep") {
            std::this_thread::sleep_for(std::chrono::milliseconds(step.at("ms").get<int>()));
        } else if (op == "bye") {
            client.bye();
        } else {
            throw Error(ErrorCode::ScenarioMissing, "unknown step op " + op);
        }
    }
}

namespace detail {

inline std::string stream_of(std::string_view type) {
    if (type == "asr_partial" || type == "asr_final") return "asr";
    if (type == "llm_token" || type == "llm_sentence") return "llm";
    if (type == "tts_chunk" || type == "tts_done") return "tts";
    if (type == "pause_playback" || type == "resume") return "playback";
    if (type == "thinking") return "thinking";
    if (type == "speaker") return "speaker";
    if (type == "caption") return "caption";
    return "other";
}

inline int stream_rank(const std::string& s) {
    static const std::vector<std::string> order{"asr", "speaker", "llm", "thinking", "tts", "playback",
                                                "caption", "events", "other"};
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (order[i] == s) return static_cast<int>(i);
    }
    return static_cast<int>(order.size());
}

inline std::string describe_client(const WireFrame& f) {
    std::optional<std::uint32_t> none;
    auto m = decode_client_frame(f, none);
    std::ostringstream s;
    s << "C> " << to_string(m.type) << " seq=" << m.seq;
    if (m.type == ClientType::Audio) {
        s << " samples=" << m.pcm.size();
    } else if (!m.payload.empty()) {
        s << " " << m.payload.dump();
    }
    return s.str();
}

inline std::string describe_server(const ServerFrame& f) {
    std::ostringstream s;
    s << "S< " << f.type;
    if (f.type == "tts_chunk") {
        s << " clause=" << f.clause << " chunk=" << f.chunk << " samples=" << f.pcm.size();
        return s.str();
    }
    auto payload = f.payload;
    if (f.type == "hello_ack") payload["session_id"] = "<session>";
    if (f.type == "error" && payload.contains("message")) payload.erase("message");
    if (!payload.empty()) s << " " << payload.dump();
    return s.str();
}

inline std::string describe_event(const Event& e) {
    std::ostringstream s;
    s << "E! " << to_string(e.kind);
    std::visit(
        [&](const auto& p) {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, InterruptPayload>) {
                s << " reason=" << p.reason << " transcript=" << nlohmann::json(p.transcript).dump();
            } else if constexpr (std::is_same_v<T, ToolPayload>) {
                s << " tool=" << p.tool << " ok=" << (p.ok ? "true" : "false");
                if (!p.result.empty()) s << " result=" << nlohmann::json(p.result).dump();
            } else if constexpr (std::is_same_v<T, TextPayload>) {
                s << " text=" << nlohmann::json(p.text).dump();
            } else if constexpr (std::is_same_v<T, SwitchPayload>) {
                s << " value=" << p.value << " profile=" << p.profile;
            }
        },
        e.payload);
    return s.str();
}

}  // namespace detail

/// Timestamp-free log grouped into sections: session-level frames, client
/// frames, then one section per (turn, stream). Order inside a section is
/// arrival order; metric frames are left out.
inline std::string normalize_log(const std::vector<LogEntry>& entries) {
    std::vector<std::string> session_lines, client_lines;
    std::map<std::pair<std::uint32_t, int>, std::pair<std::string, std::vector<std::string>>> sections;
    for (const auto& e : entries) {
        switch (e.origin) {
            case LogEntry::Origin::Client: client_lines.push_back(detail::describe_client(e.frame)); break;
            case LogEntry::Origin::Server: {
                const auto f = parse_server_frame(e.frame);
                if (f.type == "metric") break;
                if (!f.turn_id) {
                    session_lines.push_back(detail::describe_server(f));
                    break;
                }
                const auto stream = detail::stream_of(f.type);
                auto& sec = sections[{*f.turn_id, detail::stream_rank(stream)}];
                sec.first = stream;
                sec.second.push_back(detail::describe_server(f));
                break;
            }
            case LogEntry::Origin::Tap: {
                auto& sec = sections[{e.event->turn, detail::stream_rank("events")}];
                sec.first = "events";
                sec.second.push_back(detail::describe_event(*e.event));
                break;
            }
        }
    }
    std::ostringstream out;
    auto emit = [&](const std::string& header, const std::vector<std::string>& lines) {
        if (lines.empty()) return;
        out << "== " << header << "\n";
        for (const auto& l : lines) out << l << "\n";
    };
    emit("session", session_lines);
    emit("client", client_lines);
    for (const auto& [key, sec] : sections) emit("turn " + std::to_string(key.first) + " " + sec.first, sec.second);
    return out.str();
}

/// Runs a scenario directory against a fresh in-process server and returns
/// the normalized frame log.
inline std::string replay_scenario(const std::filesystem::path& dir, const AppConfig& base) {
    auto scenario = std::make_shared<Scenario>(load_scenario(dir));
    auto cfg_json = nlohmann::json(to_json(base));
    cfg_json.merge_patch(scenario->config_overrides);
    const auto cfg = parse_config(cfg_json);
    if (scenario->client_steps.empty()) return {};
    Server server(cfg, make_mock_models(cfg, scenario));
    std::vector<LogEntry> entries;
    {
        LoopbackClient client(server);
        run_client_steps(client, scenario->client_steps, *scenario->utterances, cfg.asr.mode != AsrMode::Offline);
        client.disconnect();
        entries = client.entries();
    }
    return normalize_log(entries);
}

}  // namespace xtalk
