#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <stop_token>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "xtalk/backends.hpp"
#include "xtalk/cancel.hpp"
#include "xtalk/event_bus.hpp"
#include "xtalk/scenario.hpp"
#include "xtalk/telemetry.hpp"
#include "xtalk/text.hpp"

namespace xtalk {

/// Groups streamed tokens into clauses for synthesis.
class SentenceSegmenter {
public:
    explicit SentenceSegmenter(std::size_t min_len = 4, std::size_t max_len = 80) : min_len_(min_len), max_len_(max_len) {
        if (min_len_ == 0 || max_len_ < min_len_) throw Error(ErrorCode::InvalidConfig, "segmenter bounds");
    }

    std::vector<std::string> on_token(std::string_view token) {
        std::vector<std::string> out;
        for (auto c : text::decode(token)) {
            pending_.push_back(c);
            const bool boundary = text::is_sentence_final(c) && pending_.size() >= min_len_;
            if (boundary || pending_.size() >= max_len_) {
                out.push_back(text::encode(pending_));
                pending_.clear();
            }
        }
        return out;
    }

    /// End of stream: any non-empty remainder becomes the last sentence.
    std::optional<std::string> finish() {
        if (pending_.empty()) return std::nullopt;
        auto s = text::encode(pending_);
        pending_.clear();
        return s;
    }

    std::string pending() const { return text::encode(pending_); }
    std::size_t min_len() const { return min_len_; }
    std::size_t max_len() const { return max_len_; }

private:
    std::size_t min_len_;
    std::size_t max_len_;
    std::vector<char32_t> pending_;
};

struct TtsConfig {
    std::string timbre = "default";
    std::string timbre_profile = "tim_default";
    std::string emotion = "neutral";
    bool operator==(const TtsConfig&) const = default;
};

struct TurnContext {
    std::vector<std::pair<std::string, std::string>> history;  // (role, text)
    std::optional<std::string> caption;
    std::optional<std::string> speaker_id;
    std::optional<std::string> deliberation;
    TtsConfig tts_config_view;
};

struct PhaticPolicy {
    double threshold_ms = 300.0;
    std::vector<std::string> phrases{"Let me check this for you…", "让我查一下…"};
    bool operator==(const PhaticPolicy&) const = default;

    /// First phrase in the user's script, else the first phrase.
    const std::string& phrase_for(std::string_view user_text) const {
        if (phrases.empty()) throw Error(ErrorCode::InvalidConfig, "phatic.phrases must not be empty");
        const bool cjk = text::contains_cjk(user_text);
        for (const auto& p : phrases) {
            if (text::contains_cjk(p) == cjk) return p;
        }
        return phrases.front();
    }
};

struct ToolCall {
    std::string tool_name;
    nlohmann::json args = nlohmann::json::object();
    double expected_latency_ms = 0.0;
};

struct ToolResult {
    bool ok = true;
    std::string text;
};

class ToolRegistry {
public:
    ToolRegistry() : specs_(default_tools()) {}
    explicit ToolRegistry(std::map<std::string, ToolSpec> specs) : specs_(std::move(specs)) {}

    /// Unknown tool names are rejected here, before any dispatch.
    ToolCall make_call(const std::string& name, nlohmann::json args = nlohmann::json::object()) const {
        auto it = specs_.find(name);
        if (it == specs_.end()) throw Error(ErrorCode::UnknownTool, name);
        return {name, std::move(args), it->second.expected_latency_ms};
    }

    const ToolSpec& spec(const std::string& name) const {
        auto it = specs_.find(name);
        if (it == specs_.end()) throw Error(ErrorCode::UnknownTool, name);
        return it->second;
    }

    const std::map<std::string, ToolSpec>& all() const { return specs_; }

private:
    std::map<std::string, ToolSpec> specs_;
};

// Retrieved documents are kept by coverage tier: high coverage keeps the
// snippet, middle coverage keeps the full page, low coverage is dropped.
struct CoverageTiers {
    double high = 0.7;
    double middle = 0.4;
};

inline std::vector<std::string> filter_search_results(const std::vector<SearchDocument>& docs,
                                                      CoverageTiers tiers = {}) {
    std::vector<std::string> kept;
    for (const auto& d : docs) {
        if (d.coverage >= tiers.high) {
            kept.push_back(d.snippet);
        } else if (d.coverage >= tiers.middle) {
            kept.push_back(d.page);
        }
    }
    return kept;
}

inline std::string one_line(std::string_view s) {
    std::string out(s);
    for (auto& c : out) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    return out;
}

/// Deterministic prompt: system block, history, then the user turn.
inline std::string build_prompt(const TurnContext& ctx, const std::string& user_text, const ToolRegistry& tools) {
    if (user_text.empty()) throw Error(ErrorCode::InvalidEvent, "build_prompt needs user text");
    std::ostringstream p;
    p << "system: You are a voice assistant in a live spoken conversation. Answer in short spoken sentences.\n";
    if (ctx.caption) p << "system: environment: " << one_line(*ctx.caption) << "\n";
    if (ctx.speaker_id) p << "system: speaker: " << *ctx.speaker_id << "\n";
    if (ctx.deliberation) p << "system: deliberation: " << one_line(*ctx.deliberation) << "\n";
    p << "system: voice: " << ctx.tts_config_view.timbre << ", emotion: " << ctx.tts_config_view.emotion << "\n";
    p << "system: tools:";
    for (const auto& [name, spec] : tools.all()) p << " " << name << " (" << spec.description << ");";
    p << "\n";
    for (const auto& [role, line] : ctx.history) p << role << ": " << one_line(line) << "\n";
    p << "user: " << one_line(user_text) << "\n";
    return p.str();
}

/// Current voice selection shared between the agent and the session.
class TtsSelection {
public:
    TtsConfig get() const {
        std::lock_guard lock(mu_);
        return cfg_;
    }
    void set(TtsConfig c) {
        std::lock_guard lock(mu_);
        cfg_ = std::move(c);
    }

private:
    mutable std::mutex mu_;
    TtsConfig cfg_;
};

/// Applies a timbre change and returns the event announcing it. The TTS
/// stage picks it up at the next clause boundary.
inline Event handle_timbre_switch(const std::string& voice_name, const SessionId& session, TtsSelection& selection,
                                  const VoiceTables& voices, std::uint32_t turn = 0) {
    auto it = voices.timbres.find(voice_name);
    if (it == voices.timbres.end()) throw Error(ErrorCode::UnknownVoice, voice_name);
    auto cfg = selection.get();
    cfg.timbre = voice_name;
    cfg.timbre_profile = it->second;
    selection.set(cfg);
    return Event::make(session, EventKind::TimbreSwitch, SwitchPayload{voice_name, it->second}, turn);
}

/// Emotion switch; the payload records how the backend will realise it.
inline Event handle_emotion_switch(const std::string& emotion, const SessionId& session, TtsSelection& selection,
                                   const VoiceTables& voices, TtsCapabilities caps, std::uint32_t turn = 0) {
    if (std::find(voices.emotions.begin(), voices.emotions.end(), emotion) == voices.emotions.end()) {
        throw Error(ErrorCode::UnknownEmotion, emotion);
    }
    auto cfg = selection.get();
    cfg.emotion = emotion;
    selection.set(cfg);
    return Event::make(session, EventKind::EmotionSwitch,
                       SwitchPayload{emotion, caps.native_emotion_control ? "native_vector" : "reference_audio"}, turn);
}

/// Everything one agent turn needs. References point into the owning session.
struct AgentEnv {
    EventBus& bus;
    SessionId session;
    LlmBackend& llm;
    ThinkingBackend* thinker = nullptr;
    const ToolRegistry& tools;
    const VoiceTables& voices;
    TtsCapabilities tts_caps;
    TtsSelection& tts_selection;
    LatencyTracer& tracer;
    PhaticPolicy phatic;
    std::size_t seg_min_len = 4;
    std::size_t seg_max_len = 80;
    CoverageTiers tiers;
    std::size_t max_tool_rounds = 4;
    // Runs deliberation off the critical path; receives the summary.
    std::function<void(std::string query, std::uint32_t turn)> spawn_thinking;
};

inline constexpr std::string_view kThinkMarker = "[THINK]";

class AgentTurn {
public:
    AgentTurn(AgentEnv& env, std::uint32_t turn, std::stop_token stop) : env_(env), turn_(turn), stop_(std::move(stop)) {}

    /// Streams the response for `user_text`. Returns the text produced (also
    /// when cancelled part-way).
    std::string run(const TurnContext& ctx, const std::string& user_text) {
        try {
            run_inner(ctx, user_text);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::Cancelled && e.code() != ErrorCode::UnknownSession) throw;
        }
        return response_;
    }

    /// Publishes Phatic (when the tool is slow), ToolCallStart, runs the tool
    /// and publishes ToolCallEnd.
    ToolResult dispatch_tool(const ToolCall& call, const std::string& user_text) {
        if (call.expected_latency_ms > env_.phatic.threshold_ms) {
            publish(EventKind::PhaticUtterance, TextPayload{env_.phatic.phrase_for(user_text)});
        }
        publish(EventKind::ToolCallStart, ToolPayload{call.tool_name, call.args, "", true});
        ToolResult result = execute(call);
        publish(EventKind::ToolCallEnd, ToolPayload{call.tool_name, call.args, result.text, result.ok});
        return result;
    }

private:
    void run_inner(const TurnContext& ctx, const std::string& user_text) {
        auto view = ctx;
        view.tts_config_view = env_.tts_selection.get();
        std::string prompt = build_prompt(view, user_text, env_.tools);
        if (const auto at = user_text.find(kThinkMarker); at != std::string::npos) {
            auto query = user_text;
            query.erase(at, kThinkMarker.size());
            request_thinking(std::string(text::trim(query)));
        }

        SentenceSegmenter seg(env_.seg_min_len, env_.seg_max_len);
        for (std::size_t round = 0; round <= env_.max_tool_rounds; ++round) {
            auto stream = env_.llm.stream(prompt);
            std::optional<LlmItem> tool_item;
            while (auto item = stream->next(stop_)) {
                if (item->type == LlmItem::Type::Token) {
                    env_.tracer.mark_once(turn_, TracePoint::LlmFirstToken, monotonic_ns());
                    publish(EventKind::LlmToken, TextPayload{item->text});
                    response_ += item->text;
                    for (auto& s : seg.on_token(item->text)) sentence(std::move(s));
                } else if (item->type == LlmItem::Type::Think) {
                    request_thinking(item->text);
                } else {
                    if (auto rest = seg.finish()) sentence(std::move(*rest));
                    tool_item = std::move(item);
                    break;
                }
            }
            if (!tool_item || round == env_.max_tool_rounds) break;
            ToolResult result;
            try {
                result = dispatch_tool(env_.tools.make_call(tool_item->tool, tool_item->args), user_text);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::UnknownTool) throw;
                result = {false, std::string("error: ") + e.what()};
            }
            prompt += "tool[" + tool_item->tool + "]: " + one_line(result.text) + "\n";
        }
        if (auto rest = seg.finish()) sentence(std::move(*rest));
        publish(EventKind::LlmDone, Marker{});
    }

    void request_thinking(const std::string& query) {
        publish(EventKind::ThinkingStart, TextPayload{query});
        if (env_.spawn_thinking) env_.spawn_thinking(query, turn_);
    }

    void sentence(std::string s) {
        env_.tracer.mark_once(turn_, TracePoint::LlmFirstSentence, monotonic_ns());
        publish(EventKind::LlmSentence, TextPayload{std::move(s)});
    }

    ToolResult execute(const ToolCall& call) {
        const auto& spec = env_.tools.spec(call.tool_name);
        if (call.tool_name == "timbre_switch" || call.tool_name == "emotion_switch") {
            const auto value = call.args.value(call.tool_name == "timbre_switch" ? "voice" : "emotion", std::string{});
            sleep_or_throw(spec.expected_latency_ms, stop_);
            try {
                auto ev = call.tool_name == "timbre_switch"
                              ? handle_timbre_switch(value, env_.session, env_.tts_selection, env_.voices, turn_)
                              : handle_emotion_switch(value, env_.session, env_.tts_selection, env_.voices,
                                                      env_.tts_caps, turn_);
                check_stop();
                env_.bus.publish(std::move(ev));
                return {true, "ok: " + call.tool_name + "=" + value};
            } catch (const Error& e) {
                if (e.code() != ErrorCode::UnknownVoice && e.code() != ErrorCode::UnknownEmotion) throw;
                return {false, std::string("error: ") + e.what()};
            }
        }
        sleep_or_throw(spec.expected_latency_ms, stop_);
        if (spec.fail) return {false, "error: ToolFailure: " + call.tool_name + " unavailable"};
        const auto kept = filter_search_results(spec.documents, env_.tiers);
        if (kept.empty()) return {true, "no relevant results"};
        std::string joined;
        for (const auto& k : kept) {
            if (!joined.empty()) joined += " | ";
            joined += k;
        }
        return {true, joined};
    }

    void check_stop() const {
        if (stop_.stop_requested()) throw Error(ErrorCode::Cancelled, "turn cancelled");
    }

    void publish(EventKind kind, Payload payload) {
        check_stop();
        env_.bus.publish(Event::make(env_.session, kind, std::move(payload), turn_));
    }

    AgentEnv& env_;
    std::uint32_t turn_;
    std::stop_token stop_;
    std::string response_;
};

}  // namespace xtalk
