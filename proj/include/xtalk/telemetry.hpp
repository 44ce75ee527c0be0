#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

#include "xtalk/error.hpp"
#include "xtalk/event.hpp"

namespace xtalk {

enum class TracePoint : std::uint8_t { VadEnd, AsrFinal, LlmFirstToken, LlmFirstSentence, TtsFirstChunk, TurnDone };

inline constexpr std::size_t kTracePointCount = 6;

inline std::string_view to_string(TracePoint p) {
    static constexpr std::array<std::string_view, kTracePointCount> names{
        "vad_end_at", "asr_final_at", "llm_first_token_at", "llm_first_sentence_at", "tts_first_chunk_at",
        "turn_done_at"};
    return names[static_cast<std::size_t>(p)];
}

/// Per-turn monotonic timestamps (nanoseconds).
struct LatencyTrace {
    std::array<std::optional<std::int64_t>, kTracePointCount> at{};

    const std::optional<std::int64_t>& operator[](TracePoint p) const { return at[static_cast<std::size_t>(p)]; }
    bool has(TracePoint p) const { return (*this)[p].has_value(); }

    /// Points that are present appear in non-decreasing order.
    bool ordered() const {
        std::optional<std::int64_t> prev;
        for (const auto& t : at) {
            if (!t) continue;
            if (prev && *t < *prev) return false;
            prev = t;
        }
        return true;
    }

    double span_ms(TracePoint from, TracePoint to) const {
        if (!has(from) || !has(to)) throw Error(ErrorCode::IncompleteTrace, "missing trace point");
        return static_cast<double>(*(*this)[to] - *(*this)[from]) / 1e6;
    }
};

inline LatencyTrace mark(LatencyTrace trace, TracePoint point, std::int64_t t_ns) {
    auto& slot = trace.at[static_cast<std::size_t>(point)];
    if (slot) throw Error(ErrorCode::DuplicateMark, std::string(to_string(point)));
    slot = t_ns;
    return trace;
}

/// First audio minus end of user speech. The VAD silence threshold is not
/// part of this because vad_end_at is stamped when the threshold fires.
inline double compute_e2e(const LatencyTrace& trace) {
    if (!trace.has(TracePoint::VadEnd) || !trace.has(TracePoint::TtsFirstChunk)) {
        throw Error(ErrorCode::IncompleteTrace, "e2e needs vad_end_at and tts_first_chunk_at");
    }
    return trace.span_ms(TracePoint::VadEnd, TracePoint::TtsFirstChunk);
}

/// Session-level trace store. Marks made before a turn id exists (VAD end,
/// ASR final) go to the pending trace, which is bound to a turn when the
/// agent starts.
class LatencyTracer {
public:
    using Publisher = std::function<void(Event)>;

    LatencyTracer() = default;
    LatencyTracer(SessionId session, Publisher publish, bool enabled = true)
        : session_(std::move(session)), publish_(std::move(publish)), enabled_(enabled) {}

    void configure(SessionId session, Publisher publish, bool enabled) {
        std::lock_guard lock(mu_);
        session_ = std::move(session);
        publish_ = std::move(publish);
        enabled_ = enabled;
    }

    void begin_utterance(std::int64_t vad_end_ns) {
        std::lock_guard lock(mu_);
        pending_ = mark(LatencyTrace{}, TracePoint::VadEnd, vad_end_ns);
        emit_locked(pending_, TracePoint::VadEnd, 0);
    }

    void mark_pending(TracePoint p, std::int64_t t_ns) {
        std::lock_guard lock(mu_);
        if (pending_.has(p)) return;
        pending_ = mark(pending_, p, t_ns);
        emit_locked(pending_, p, 0);
    }

    void bind(std::uint32_t turn) {
        std::lock_guard lock(mu_);
        traces_[turn] = pending_;
        pending_ = {};
    }

    /// Marks `p` on `turn` unless already present. Returns true if marked.
    bool mark_once(std::uint32_t turn, TracePoint p, std::int64_t t_ns) {
        std::lock_guard lock(mu_);
        auto& tr = traces_[turn];
        if (tr.has(p)) return false;
        tr = mark(tr, p, t_ns);
        emit_locked(tr, p, turn);
        if (p == TracePoint::TtsFirstChunk && tr.has(TracePoint::VadEnd) && enabled_ && publish_) {
            try {
                publish_(Event::make(session_, EventKind::Metric, MetricPayload{"e2e_ms", compute_e2e(tr)}, turn));
            } catch (const Error&) {
            }
        }
        return true;
    }

    std::optional<LatencyTrace> get(std::uint32_t turn) const {
        std::lock_guard lock(mu_);
        auto it = traces_.find(turn);
        if (it == traces_.end()) return std::nullopt;
        return it->second;
    }

    std::map<std::uint32_t, LatencyTrace> all() const {
        std::lock_guard lock(mu_);
        return traces_;
    }

private:
    void emit_locked(const LatencyTrace& tr, TracePoint p, std::uint32_t turn) {
        if (!enabled_ || !publish_) return;
        double since_vad_end = 0.0;
        if (tr.has(TracePoint::VadEnd)) since_vad_end = tr.span_ms(TracePoint::VadEnd, p);
        try {
            publish_(Event::make(session_, EventKind::Metric, MetricPayload{std::string(to_string(p)), since_vad_end},
                                 turn));
        } catch (const Error&) {
            // session already closed
        }
    }

    mutable std::mutex mu_;
    SessionId session_;
    Publisher publish_;
    bool enabled_ = true;
    LatencyTrace pending_;
    std::map<std::uint32_t, LatencyTrace> traces_;
};

}  // namespace xtalk
