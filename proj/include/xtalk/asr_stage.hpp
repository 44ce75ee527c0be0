#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <stop_token>
#include <string>
#include <vector>

#include "xtalk/backends.hpp"
#include "xtalk/event_bus.hpp"
#include "xtalk/telemetry.hpp"
#include "xtalk/text.hpp"

namespace xtalk {

enum class AsrMode { Streaming, PseudoStreaming, Offline };

inline std::string_view to_string(AsrMode m) {
    switch (m) {
        case AsrMode::Streaming: return "streaming";
        case AsrMode::PseudoStreaming: return "pseudo_streaming";
        case AsrMode::Offline: return "offline";
    }
    return "pseudo_streaming";
}

inline AsrMode parse_asr_mode(std::string_view s) {
    if (s == "streaming") return AsrMode::Streaming;
    if (s == "pseudo_streaming") return AsrMode::PseudoStreaming;
    if (s == "offline") return AsrMode::Offline;
    throw Error(ErrorCode::InvalidConfig, "asr.mode: unknown mode " + std::string(s));
}

/// Number of consecutive hypotheses a prefix must survive to be finalized.
class StabilityWindow {
public:
    explicit StabilityWindow(std::size_t w = 3) : w_(w) {
        if (w < 2) throw Error(ErrorCode::InvalidConfig, "asr.window_W must be >= 2");
    }
    std::size_t size() const { return w_; }

private:
    std::size_t w_;
};

/// Longest common prefix of the most recent W hypotheses; empty while fewer
/// than W are available.
inline std::string stable_prefix(std::span<const std::string> hypotheses, StabilityWindow window) {
    const auto w = window.size();
    if (hypotheses.size() < w) return {};
    std::string lcp = hypotheses[hypotheses.size() - w];
    for (std::size_t i = hypotheses.size() - w + 1; i < hypotheses.size(); ++i) {
        lcp = text::common_prefix(lcp, hypotheses[i]);
    }
    return lcp;
}

struct Hypothesis {
    std::string text;            // whole-utterance text (flushed part + span result)
    std::size_t span_end = 0;    // absolute sample position the call covered up to
    std::size_t span_start = 0;  // absolute sample position the call started at
};

/// Per-utterance recognition state.
struct TranscriptState {
    std::vector<std::int16_t> cumulative_audio;  // unflushed audio only
    std::size_t staged_samples = 0;              // arrived since the last backend call
    std::size_t received_samples = 0;
    std::size_t flushed_samples = 0;
    std::deque<Hypothesis> hypothesis_cache;
    std::string finalized_text;
    std::string volatile_text;
    std::string flushed_text;  // finalized text whose audio has been flushed
    bool open = false;
    std::unique_ptr<AsrStream> stream;

    std::int64_t flushed_ms() const { return samples_to_ms(flushed_samples); }
    std::int64_t received_ms() const { return samples_to_ms(received_samples); }

    void reset() {
        cumulative_audio.clear();
        staged_samples = received_samples = flushed_samples = 0;
        hypothesis_cache.clear();
        finalized_text.clear();
        volatile_text.clear();
        flushed_text.clear();
        open = false;
        stream.reset();
    }

    std::vector<std::string> cache_texts() const {
        std::vector<std::string> out;
        for (const auto& h : hypothesis_cache) out.push_back(h.text);
        return out;
    }
};

/// Audio duration proportional to the share of characters being flushed.
inline std::size_t proportional_flush_samples(std::size_t span_samples, std::size_t flush_chars,
                                              std::size_t span_chars) {
    if (span_chars == 0) return 0;
    return span_samples * flush_chars / span_chars;
}

/// Streaming adapter over an ASR backend. In pseudo-streaming mode the
/// whole unflushed buffer is re-recognized on every call; a prefix that
/// stays unchanged across the stability window is finalized, and once it
/// ends a sentence the matching audio leaves the buffer.
class StreamingRecognizer {
public:
    StreamingRecognizer(AsrBackend& backend, AsrMode mode, StabilityWindow window)
        : backend_(backend), mode_(mode), window_(window) {
        if (mode_ == AsrMode::Streaming && !backend_.supports_streaming()) {
            throw Error(ErrorCode::InvalidConfig, "asr.mode streaming needs a streaming-capable backend");
        }
    }

    AsrMode mode() const { return mode_; }
    StabilityWindow window() const { return window_; }

    void begin(TranscriptState& st) const {
        st.reset();
        st.open = true;
        if (mode_ == AsrMode::Streaming) st.stream = backend_.open_stream();
    }

    /// Stages a chunk without calling the backend.
    void stage(TranscriptState& st, PcmSpan chunk) const {
        st.cumulative_audio.insert(st.cumulative_audio.end(), chunk.begin(), chunk.end());
        st.staged_samples += chunk.size();
        st.received_samples += chunk.size();
    }

    /// Runs one backend call over the staged audio. Returns the partial, or
    /// nullopt in offline mode. On BackendFailure the transcript is left as
    /// it was and the staged audio is retried on the next call.
    std::optional<AsrPayload> recognize(TranscriptState& st, const std::stop_token& stop) const {
        if (mode_ == AsrMode::Offline) return std::nullopt;
        std::string full;
        std::size_t span_start = st.flushed_samples;
        if (mode_ == AsrMode::Streaming) {
            PcmSpan staged(st.cumulative_audio.data() + (st.cumulative_audio.size() - st.staged_samples),
                           st.staged_samples);
            full = st.stream->feed(staged, stop);
            span_start = st.received_samples - st.staged_samples;
        } else {
            full = st.flushed_text + backend_.recognize(PcmSpan(st.cumulative_audio), stop);
        }
        st.staged_samples = 0;
        update(st, Hypothesis{full, st.received_samples, span_start});
        return partial(st);
    }

    /// Stage + recognize.
    std::optional<AsrPayload> on_audio_chunk(TranscriptState& st, PcmSpan chunk, const std::stop_token& stop) const {
        stage(st, chunk);
        return recognize(st, stop);
    }

    /// Last recognition at end of speech; resets the state.
    AsrPayload finalize(TranscriptState& st, const std::stop_token& stop) const {
        AsrPayload out;
        out.audio_ms = st.received_ms();
        out.tail_ms = samples_to_ms(st.cumulative_audio.size());
        try {
            std::string full;
            if (mode_ == AsrMode::Streaming) {
                if (st.staged_samples > 0) {
                    PcmSpan staged(st.cumulative_audio.data() + (st.cumulative_audio.size() - st.staged_samples),
                                   st.staged_samples);
                    st.stream->feed(staged, stop);
                }
                full = st.stream ? st.stream->finish(stop) : std::string{};
                out.tail_ms = samples_to_ms(st.staged_samples);
            } else {
                full = st.flushed_text + backend_.recognize(PcmSpan(st.cumulative_audio), stop);
            }
            const auto fin_len = text::length(st.finalized_text);
            out.finalized = st.finalized_text + text::drop(full, fin_len);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::BackendFailure) throw;
            out.finalized = st.finalized_text;
            out.degraded = true;
        }
        st.reset();
        return out;
    }

private:
    void update(TranscriptState& st, Hypothesis h) const {
        st.hypothesis_cache.push_back(std::move(h));
        while (st.hypothesis_cache.size() > window_.size()) st.hypothesis_cache.pop_front();

        const auto texts = st.cache_texts();
        const auto stable = stable_prefix(texts, window_);
        if (text::length(stable) > text::length(st.finalized_text) && text::starts_with(stable, st.finalized_text)) {
            st.finalized_text = stable;
        }
        const auto& current = st.hypothesis_cache.back().text;
        st.volatile_text = text::drop(current, text::length(st.finalized_text));

        if (mode_ == AsrMode::PseudoStreaming) maybe_flush(st);
    }

    void maybe_flush(TranscriptState& st) const {
        const auto fin_chars = text::length(st.finalized_text);
        const auto flushed_chars = text::length(st.flushed_text);
        if (fin_chars <= flushed_chars || !text::ends_sentence(st.finalized_text)) return;
        // Map against the newest hypothesis that ends exactly at the
        // finalized text; without one the flush waits for a later call.
        for (auto it = st.hypothesis_cache.rbegin(); it != st.hypothesis_cache.rend(); ++it) {
            if (it->text != st.finalized_text || it->span_end <= st.flushed_samples) continue;
            const auto span_samples = it->span_end - st.flushed_samples;
            const auto span_chars = text::length(it->text) - flushed_chars;
            const auto n = proportional_flush_samples(span_samples, fin_chars - flushed_chars, span_chars);
            st.cumulative_audio.erase(st.cumulative_audio.begin(),
                                      st.cumulative_audio.begin() + static_cast<std::ptrdiff_t>(n));
            st.flushed_samples += n;
            st.flushed_text = st.finalized_text;
            return;
        }
    }

    AsrPayload partial(const TranscriptState& st) const {
        AsrPayload p;
        p.finalized = st.finalized_text;
        p.volatile_text = st.volatile_text;
        p.audio_ms = st.received_ms();
        p.tail_ms = samples_to_ms(st.cumulative_audio.size());
        return p;
    }

    AsrBackend& backend_;
    AsrMode mode_;
    StabilityWindow window_;
};

/// Session ASR manager: opens utterances on VadStart, recognizes AudioIn
/// (coalescing chunks that queue up behind an in-flight call) and emits
/// AsrFinal on VadEnd.
class AsrManager {
public:
    AsrManager(EventBus& bus, SessionId session, StreamingRecognizer recognizer, TranscriptState& state,
               LatencyTracer& tracer, const std::atomic<std::uint32_t>& turn, std::stop_token stop)
        : bus_(bus),
          session_(std::move(session)),
          recognizer_(std::move(recognizer)),
          state_(state),
          tracer_(tracer),
          turn_(turn),
          stop_(std::move(stop)) {}

    static KindSet kinds() { return {EventKind::AudioIn, EventKind::VadStart, EventKind::VadEnd}; }

    void handle(const Event& ev, const Subscription& sub) {
        switch (ev.kind) {
            case EventKind::VadStart:
                recognizer_.begin(state_);
                break;
            case EventKind::AudioIn: {
                if (!state_.open) return;
                recognizer_.stage(state_, ev.as<AudioPayload>().pcm);
                if (sub.pending(EventKind::AudioIn) > 0) return;  // coalesce into the next call
                try {
                    if (auto p = recognizer_.recognize(state_, stop_)) {
                        bus_.publish(Event::make(session_, EventKind::AsrPartial, *p, turn_.load()));
                    }
                } catch (const Error& e) {
                    if (e.code() != ErrorCode::BackendFailure) throw;
                    bus_.publish(Event::make(session_, EventKind::Metric, MetricPayload{"asr_backend_failure", 1.0},
                                             turn_.load()));
                }
                break;
            }
            case EventKind::VadEnd: {
                if (!state_.open) return;
                auto fin = recognizer_.finalize(state_, stop_);
                tracer_.mark_pending(TracePoint::AsrFinal, monotonic_ns());
                bus_.publish(Event::make(session_, EventKind::AsrFinal, std::move(fin), turn_.load()));
                break;
            }
            default:
                break;
        }
    }

private:
    EventBus& bus_;
    SessionId session_;
    StreamingRecognizer recognizer_;
    TranscriptState& state_;
    LatencyTracer& tracer_;
    const std::atomic<std::uint32_t>& turn_;
    std::stop_token stop_;
};

}  // namespace xtalk
