#pragma once

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stop_token>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <spdlog/spdlog.h>

#include "xtalk/asr_stage.hpp"
#include "xtalk/config.hpp"
#include "xtalk/dialogue_agent.hpp"
#include "xtalk/event_bus.hpp"
#include "xtalk/mock_backends.hpp"
#include "xtalk/scenario.hpp"
#include "xtalk/side_channels.hpp"
#include "xtalk/telemetry.hpp"
#include "xtalk/tts_stage.hpp"
#include "xtalk/turn_taking.hpp"
#include "xtalk/wire_gateway.hpp"

namespace xtalk {

/// Process-wide, read-only model handles and lookup tables shared by every
/// session.
struct SharedModels {
    ModelHandles handles;
    std::shared_ptr<const Scenario> scenario;
    ToolRegistry tools;
};

inline std::shared_ptr<const SharedModels> make_mock_models(const AppConfig& cfg,
                                                            std::shared_ptr<const Scenario> scenario) {
    auto m = std::make_shared<SharedModels>();
    auto table = std::shared_ptr<const UtteranceTable>(scenario->utterances);
    auto script = std::make_shared<LlmScript>(scenario->llm);
    if (!cfg.llm.script.empty()) *script = parse_llm_script(detail::read_json(cfg.llm.script));
    m->handles.asr = std::make_shared<MockAsr>(table, cfg.asr.latency, cfg.asr.mode == AsrMode::Streaming);
    m->handles.llm = std::make_shared<MockLlm>(script, cfg.llm.latency);
    m->handles.tts = std::make_shared<MockTts>(cfg.tts.latency, cfg.tts.chars_per_second,
                                               TtsCapabilities{cfg.tts.native_emotion_control});
    m->handles.captioner =
        std::make_shared<MockCaptioner>(table, scenario->scenes, cfg.side_channels.caption_latency);
    m->handles.rewriter = std::make_shared<MockRewriter>(scenario->scenes, cfg.side_channels.rewrite_latency);
    m->handles.embedder =
        std::make_shared<MockEmbedder>(table, scenario->voices, cfg.side_channels.embed_latency, 64);
    m->handles.thinker = std::make_shared<MockThinker>(script->thinking, cfg.thinking.latency);
    m->tools = ToolRegistry(scenario->tools);
    m->scenario = std::move(scenario);
    return m;
}

/// Every mutable buffer and queue of one session.
struct PipelineState {
    explicit PipelineState(const AppConfig& cfg) : rolling_buffer(cfg.side_channels.window_ms) { ++live_; }
    ~PipelineState() { --live_; }
    PipelineState(const PipelineState&) = delete;
    PipelineState& operator=(const PipelineState&) = delete;

    TranscriptState transcript_state;
    TurnState turn_state;
    std::atomic<Phase> phase{Phase::Idle};
    std::atomic<std::uint32_t> turn{0};
    RollingAudioBuffer rolling_buffer;
    PlaybackRegistry playback_queue;
    LatencyTracer trace;
    TtsSelection tts_config;
    std::mutex context_mu;
    TurnContext context;

    static int live_instances() { return live_.load(); }

private:
    static inline std::atomic<int> live_{0};
};

inline void validate_config(const AppConfig& cfg) { (void)parse_config(to_json(cfg)); }

inline std::unique_ptr<PipelineState> fork_pipeline_state(const AppConfig& cfg) {
    validate_config(cfg);
    return std::make_unique<PipelineState>(cfg);
}

class SessionLimiter {
public:
    explicit SessionLimiter(std::size_t max_sessions = 16) : max_(max_sessions) {
        if (max_sessions == 0) throw Error(ErrorCode::InvalidConfig, "limiter.max_sessions must be positive");
    }

    bool try_acquire() {
        auto cur = active_.load();
        while (cur < max_) {
            if (active_.compare_exchange_weak(cur, cur + 1)) {
                auto peak = peak_.load();
                while (cur + 1 > peak && !peak_.compare_exchange_weak(peak, cur + 1)) {
                }
                return true;
            }
        }
        return false;
    }

    void release() { active_.fetch_sub(1); }

    std::size_t active() const { return active_.load(); }
    std::size_t peak() const { return peak_.load(); }
    std::size_t max_sessions() const { return max_; }

private:
    std::size_t max_;
    std::atomic<std::size_t> active_{0};
    std::atomic<std::size_t> peak_{0};
};

/// Drives the turn machine for one session and launches agent turns.
class ConversationManager {
public:
    ConversationManager(EventBus& bus, SessionId session, PipelineState& state, const SharedModels& models,
                        const AppConfig& cfg, std::stop_token session_stop)
        : bus_(bus), session_(std::move(session)), state_(state), machine_(cfg.rules),
          deadline_ms_(static_cast<double>(cfg.verify_deadline_ms)), session_stop_(std::move(session_stop)),
          env_{bus,
               session_,
               *models.handles.llm,
               models.handles.thinker.get(),
               models.tools,
               models.scenario->voices,
               models.handles.tts->capabilities(),
               state.tts_config,
               state.trace,
               cfg.phatic,
               cfg.segmenter.min_len,
               cfg.segmenter.max_len,
               {},
               4,
               {}} {
        env_.spawn_thinking = [this](std::string query, std::uint32_t turn) { spawn_thinking(std::move(query), turn); };
    }

    ~ConversationManager() { shutdown(); }

    static KindSet kinds() {
        KindSet k;
        for (auto kind : {EventKind::VadStart, EventKind::InterruptCandidate, EventKind::AsrFinal, EventKind::TtsChunk,
                          EventKind::TtsDone, EventKind::CaptionUpdated, EventKind::SpeakerIdentified,
                          EventKind::ThinkingEnd}) {
            k.insert(kind);
        }
        return k;
    }

    void handle(const Event& ev) {
        std::lock_guard lock(mu_);
        auto& s = state_.turn_state;
        switch (ev.kind) {
            case EventKind::VadStart: apply(machine_.on_vad_start(s)); break;
            case EventKind::InterruptCandidate: {
                const auto now = monotonic_ns();
                auto out = machine_.on_interrupt_candidate(s, now);
                const bool opened = s.phase == Phase::VerifyingInterrupt && s.interrupt_open &&
                                    s.interrupt_open->started_at == now;
                apply(std::move(out));
                if (opened) arm_deadline(now);
                break;
            }
            case EventKind::AsrFinal: {
                const auto before = s.phase;
                auto out = machine_.on_asr_final(s, ev.as<AsrPayload>());
                if (out.ignored && (before == Phase::Processing || before == Phase::AgentSpeaking)) {
                    publish(Event::make(session_, EventKind::Metric, MetricPayload{"speech_ignored", 1.0},
                                        s.current_turn_id));
                }
                apply(std::move(out));
                break;
            }
            case EventKind::TtsChunk: apply(machine_.on_tts_chunk(s, ev.turn)); break;
            case EventKind::TtsDone: apply(machine_.on_tts_done(s, ev.turn)); break;
            case EventKind::CaptionUpdated: {
                std::lock_guard c(state_.context_mu);
                state_.context.caption = ev.as<CaptionPayload>().text;
                break;
            }
            case EventKind::SpeakerIdentified: {
                std::lock_guard c(state_.context_mu);
                state_.context.speaker_id = ev.as<SpeakerPayload>().speaker_id;
                break;
            }
            case EventKind::ThinkingEnd: {
                std::lock_guard c(state_.context_mu);
                state_.context.deliberation = ev.as<TextPayload>().text;
                break;
            }
            default: break;
        }
    }

    void shutdown() {
        std::vector<std::jthread> timers, thinkers;
        std::jthread agent;
        {
            std::lock_guard lock(mu_);
            if (agent_stop_) agent_stop_->request_stop();
            agent = std::move(agent_);
            timers = std::move(timers_);
        }
        {
            std::lock_guard lock(thinking_mu_);
            thinkers = std::move(thinkers_);
        }
        for (auto& t : timers) t.request_stop();
        for (auto& t : thinkers) t.request_stop();
    }

private:
    void publish(Event ev) {
        try {
            bus_.publish(std::move(ev));
        } catch (const Error& e) {
            if (e.code() != ErrorCode::UnknownSession) throw;
        }
    }

    void apply(TurnOutput out) {
        auto& s = state_.turn_state;
        state_.phase.store(s.phase);
        state_.turn.store(s.current_turn_id);
        for (auto& e : out.emits) publish(Event::make(session_, e.kind, std::move(e.payload), e.turn));
        if (out.cancel_turn && agent_stop_ && agent_turn_ == *out.cancel_turn) agent_stop_->request_stop();
        if (out.start_turn) start_agent(s.current_turn_id, std::move(*out.start_turn));
    }

    void arm_deadline(std::int64_t started_at) {
        timers_.emplace_back([this, started_at](std::stop_token st) {
            if (!sleep_for_cancellable(deadline_ms_, st)) return;
            std::lock_guard lock(mu_);
            if (st.stop_requested()) return;
            apply(machine_.on_deadline(state_.turn_state, started_at));
        });
    }

    void start_agent(std::uint32_t turn, std::string text) {
        state_.trace.bind(turn);
        if (agent_stop_) agent_stop_->request_stop();
        if (agent_.joinable()) agent_.join();
        agent_stop_ = std::make_unique<LinkedStopSource>(session_stop_);
        agent_turn_ = turn;
        agent_ = std::jthread([this, turn, text = std::move(text), stop = agent_stop_->token()] {
            TurnContext ctx;
            {
                std::lock_guard c(state_.context_mu);
                ctx = state_.context;
            }
            std::string reply;
            try {
                reply = AgentTurn(env_, turn, stop).run(ctx, text);
            } catch (const Error& e) {
                spdlog::warn("session {} turn {} failed: {}", session_, turn, e.what());
            }
            std::lock_guard c(state_.context_mu);
            state_.context.history.emplace_back("user", text);
            if (!reply.empty()) state_.context.history.emplace_back("assistant", reply);
        });
    }

    void spawn_thinking(std::string query, std::uint32_t turn) {
        auto* thinker = env_.thinker;
        if (!thinker) return;
        std::lock_guard lock(thinking_mu_);
        thinkers_.emplace_back([this, thinker, query = std::move(query), turn](std::stop_token st) {
            LinkedStopSource stop(session_stop_);
            std::stop_callback link(st, [&] { stop.request_stop(); });
            try {
                auto summary = thinker->think(query, stop.token());
                publish(Event::make(session_, EventKind::ThinkingEnd, TextPayload{std::move(summary)}, turn));
            } catch (const Error&) {
            }
        });
    }

    EventBus& bus_;
    SessionId session_;
    PipelineState& state_;
    TurnMachine machine_;
    double deadline_ms_;
    std::stop_token session_stop_;
    AgentEnv env_;

    std::mutex mu_;
    std::unique_ptr<LinkedStopSource> agent_stop_;
    std::uint32_t agent_turn_ = 0;
    std::jthread agent_;
    std::vector<std::jthread> timers_;
    std::mutex thinking_mu_;
    std::vector<std::jthread> thinkers_;
};

/// One client session: fresh pipeline state plus the managers bound to it.
class Session {
public:
    Session(SessionId id, EventBus& bus, const AppConfig& cfg, std::shared_ptr<const SharedModels> models,
            std::shared_ptr<FrameSink> sink)
        : id_(std::move(id)), bus_(bus), cfg_(cfg), models_(std::move(models)), sink_(std::move(sink)),
          state_(fork_pipeline_state(cfg)), opened_at_(std::chrono::system_clock::now()) {
        state_->trace.configure(
            id_,
            [this](Event ev) {
                try {
                    bus_.publish(std::move(ev));
                } catch (const Error&) {
                }
            },
            cfg_.telemetry);
    }

    ~Session() { close(); }

    Session(const Session&) = delete;
    Session& operator=(const Session&) = delete;

    const SessionId& id() const { return id_; }
    std::chrono::system_clock::time_point opened_at() const { return opened_at_; }
    const AppConfig& config() const { return cfg_; }
    PipelineState& state() { return *state_; }
    const PlaybackRegistry& playback() const { return state_->playback_queue; }
    LatencyTracer& tracer() { return state_->trace; }
    Phase phase() const { return state_->phase.load(); }
    bool closed() const { return closed_.load(); }

    /// Subscribes all managers, then publishes SessionOpen.
    void open() {
        const auto stop = stop_.get_token();
        const auto& h = models_->handles;

        output_ = std::make_unique<OutputGateway>(sink_, state_->trace);
        attach("output_gateway", OutputGateway::kinds(), [this](const Event& e, const Subscription&) {
            output_->handle(e);
        });

        asr_ = std::make_unique<AsrManager>(bus_, id_,
                                            StreamingRecognizer(*h.asr, cfg_.asr.mode, StabilityWindow(cfg_.asr.window_W)),
                                            state_->transcript_state, state_->trace, state_->turn, stop);
        attach("asr", AsrManager::kinds(), [this](const Event& e, const Subscription& s) { asr_->handle(e, s); });

        conversation_ = std::make_unique<ConversationManager>(bus_, id_, *state_, *models_, cfg_, stop);
        attach("conversation", ConversationManager::kinds(),
               [this](const Event& e, const Subscription&) { conversation_->handle(e); });

        tts_ = std::make_unique<TtsManager>(bus_, id_, *h.tts, state_->playback_queue, state_->tts_config.get(),
                                            cfg_.tts.concurrency, stop);
        attach("tts", TtsManager::kinds(), [this](const Event& e, const Subscription&) { tts_->handle(e); });

        if (cfg_.side_channels.captioner_enabled && h.captioner) {
            caption_ = std::make_unique<CaptionChannel>(
                bus_, id_, *h.captioner, cfg_.side_channels.rewriter_enabled ? h.rewriter.get() : nullptr,
                cfg_.side_channels.caption_period_ms, state_->rolling_buffer, stop);
            attach("captioner", CaptionChannel::kinds(),
                   [this](const Event& e, const Subscription&) { caption_->handle(e); });
        }
        if (cfg_.side_channels.speaker_enabled && h.embedder) {
            speaker_ = std::make_unique<SpeakerChannel>(
                bus_, id_, *h.embedder,
                SpeakerRegistry(cfg_.side_channels.similarity_threshold, cfg_.side_channels.ema_alpha), stop);
            attach("speaker", SpeakerChannel::kinds(),
                   [this](const Event& e, const Subscription&) { speaker_->handle(e); });
        }

        input_ = std::make_unique<InputGateway>(
            bus_, id_, state_->phase, state_->turn, state_->trace,
            [this](const nlohmann::json& p) { return on_config(p); }, [this] { close(); });

        bus_.publish(Event::make(id_, EventKind::SessionOpen));
    }

    InputGateway& input() {
        if (!input_) throw Error(ErrorCode::UnknownSession, id_);
        return *input_;
    }

    /// Publishes Stop then SessionClose, cancels in-flight work and joins all
    /// session contexts. Safe to call more than once.
    void close() {
        if (closed_.exchange(true)) return;
        const auto turn = state_->turn.load();
        try {
            bus_.publish(Event::make(id_, EventKind::Stop, Marker{}, turn));
        } catch (const Error&) {
        }
        stop_.request_stop();
        try {
            bus_.publish(Event::make(id_, EventKind::SessionClose, Marker{}, turn));
        } catch (const Error&) {
        }
        if (conversation_) conversation_->shutdown();
        if (tts_) tts_->shutdown();
        if (caption_) caption_->shutdown();
        for (auto& w : workers_) w->stop();
        workers_.clear();
        conversation_.reset();
        tts_.reset();
        caption_.reset();
        if (on_closed_) on_closed_(*this);
    }

    void set_on_closed(std::function<void(Session&)> f) { on_closed_ = std::move(f); }

private:
    using Handler = std::function<void(const Event&, const Subscription&)>;

    void attach(const std::string& name, KindSet kinds, Handler handler) {
        auto sub = bus_.subscribe(id_, name, kinds);
        auto* raw = sub.get();
        workers_.push_back(std::make_unique<SubscriptionWorker>(
            bus_, std::move(sub), [handler = std::move(handler), raw](const Event& e) { handler(e, *raw); }));
    }

    std::vector<Event> on_config(const nlohmann::json& p) {
        std::vector<Event> out;
        const auto& voices = models_->scenario->voices;
        const auto turn = state_->turn.load();
        if (p.contains("timbre")) {
            out.push_back(handle_timbre_switch(p.at("timbre").get<std::string>(), id_, state_->tts_config, voices, turn));
        }
        if (p.contains("emotion")) {
            out.push_back(handle_emotion_switch(p.at("emotion").get<std::string>(), id_, state_->tts_config, voices,
                                                models_->handles.tts->capabilities(), turn));
        }
        return out;
    }

    SessionId id_;
    EventBus& bus_;
    AppConfig cfg_;
    std::shared_ptr<const SharedModels> models_;
    std::shared_ptr<FrameSink> sink_;
    std::unique_ptr<PipelineState> state_;
    std::chrono::system_clock::time_point opened_at_;
    std::stop_source stop_;
    std::atomic<bool> closed_{false};
    std::function<void(Session&)> on_closed_;

    std::unique_ptr<OutputGateway> output_;
    std::unique_ptr<AsrManager> asr_;
    std::unique_ptr<ConversationManager> conversation_;
    std::unique_ptr<TtsManager> tts_;
    std::unique_ptr<CaptionChannel> caption_;
    std::unique_ptr<SpeakerChannel> speaker_;
    std::unique_ptr<InputGateway> input_;
    std::vector<std::unique_ptr<SubscriptionWorker>> workers_;
};

/// Owns the bus, the limiter and the shared models; hands out sessions.
class Server {
public:
    Server(AppConfig cfg, std::shared_ptr<const SharedModels> models)
        : cfg_(std::move(cfg)), models_(std::move(models)), limiter_(cfg_.max_sessions) {
        validate_config(cfg_);
    }

    ~Server() { shutdown(); }

    std::shared_ptr<Session> open_session(std::shared_ptr<FrameSink> sink) {
        if (!limiter_.try_acquire()) throw Error(ErrorCode::OverCapacity, "session limit reached");
        char buf[32];
        std::snprintf(buf, sizeof buf, "sess-%06llu", static_cast<unsigned long long>(++next_id_));
        std::shared_ptr<Session> session;
        try {
            session = std::make_shared<Session>(buf, bus_, cfg_, models_, std::move(sink));
        } catch (...) {
            limiter_.release();
            throw;
        }
        session->set_on_closed([this](Session& s) {
            limiter_.release();
            ++closed_count_;
            spdlog::info("session {} closed", s.id());
            std::lock_guard lock(mu_);
            live_.erase(s.id());
        });
        {
            std::lock_guard lock(mu_);
            live_[session->id()] = session;
        }
        session->open();
        spdlog::info("session {} opened", session->id());
        return session;
    }

    /// Closes every live session.
    void shutdown() {
        std::vector<std::shared_ptr<Session>> live;
        {
            std::lock_guard lock(mu_);
            for (auto& [id, w] : live_) {
                if (auto s = w.lock()) live.push_back(std::move(s));
            }
        }
        for (auto& s : live) s->close();
    }

    EventBus& bus() { return bus_; }
    SessionLimiter& limiter() { return limiter_; }
    const AppConfig& config() const { return cfg_; }
    const SharedModels& models() const { return *models_; }
    std::size_t closed_sessions() const { return closed_count_.load(); }

    std::size_t live_sessions() const {
        std::lock_guard lock(mu_);
        return live_.size();
    }

private:
    AppConfig cfg_;
    std::shared_ptr<const SharedModels> models_;
    EventBus bus_;
    SessionLimiter limiter_;
    std::atomic<std::uint64_t> next_id_{0};
    std::atomic<std::size_t> closed_count_{0};
    mutable std::mutex mu_;
    std::map<SessionId, std::weak_ptr<Session>> live_;
};

/// Per-connection protocol driver: handshake, decoding, session lifecycle.
class Connection {
public:
    Connection(Server& server, std::shared_ptr<FrameSink> sink) : server_(server), sink_(std::move(sink)) {}
    ~Connection() { on_disconnect(); }

    void on_frame(const WireFrame& frame) {
        ClientMessage msg;
        try {
            msg = decode_client_frame(frame, last_seq_);
        } catch (const Error& e) {
            sink_->send(encode_error(wire_code(e.code()), e.what()));
            return;
        }
        if (state_ == State::AwaitHello) {
            if (msg.type != ClientType::Hello) {
                sink_->send(encode_error("expected_hello"));
                return;
            }
            try {
                session_ = server_.open_session(sink_);
            } catch (const Error& e) {
                sink_->send(encode_error(wire_code(e.code()), e.what()));
                state_ = State::Closed;
                sink_->close();
                return;
            }
            sink_->send(encode_hello_ack(session_->id()));
            state_ = State::Active;
            return;
        }
        if (state_ == State::Closed || !session_ || session_->closed()) {
            sink_->send(encode_error(wire_code(ErrorCode::UnknownSession)));
            return;
        }
        try {
            session_->input().ingest(msg);
        } catch (const Error& e) {
            sink_->send(encode_error(wire_code(e.code()), e.what()));
        } catch (const nlohmann::json::exception& e) {
            sink_->send(encode_error(wire_code(ErrorCode::MalformedFrame), e.what()));
        }
        if (msg.type == ClientType::Bye) state_ = State::Closed;
    }

    void on_disconnect() {
        state_ = State::Closed;
        if (session_) session_->close();
    }

    std::shared_ptr<Session> session() const { return session_; }

private:
    enum class State { AwaitHello, Active, Closed };

    Server& server_;
    std::shared_ptr<FrameSink> sink_;
    std::optional<std::uint32_t> last_seq_;
    State state_ = State::AwaitHello;
    std::shared_ptr<Session> session_;
};

}  // namespace xtalk
