#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <stop_token>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "xtalk/audio.hpp"
#include "xtalk/backends.hpp"
#include "xtalk/cancel.hpp"
#include "xtalk/dialogue_agent.hpp"
#include "xtalk/event_bus.hpp"
#include "xtalk/text.hpp"

namespace xtalk {

inline constexpr std::size_t kTtsChunkSamples = 1600;  // 100 ms at 16 kHz

struct SynthesisJob {
    enum class Status { Queued, Synthesizing, Done, Cancelled, Failed };
    std::uint32_t turn_id = 0;
    std::uint32_t clause_index = 0;
    std::string text;
    std::string timbre;
    std::string emotion;
    Status status = Status::Queued;
    std::string mechanism;
};

inline const char* to_string(SynthesisJob::Status s) {
    switch (s) {
        case SynthesisJob::Status::Queued: return "queued";
        case SynthesisJob::Status::Synthesizing: return "synthesizing";
        case SynthesisJob::Status::Done: return "done";
        case SynthesisJob::Status::Cancelled: return "cancelled";
        case SynthesisJob::Status::Failed: return "failed";
    }
    return "?";
}

/// Reorder buffer: clauses finish in any order but leave in index order.
class PlaybackQueue {
public:
    /// Stores a finished clause and returns every clause now releasable.
    std::vector<std::pair<std::uint32_t, std::vector<std::int16_t>>> complete(std::uint32_t clause,
                                                                              std::vector<std::int16_t> pcm) {
        if (clause < next_emit_index_ || completed_.count(clause)) {
            throw Error(ErrorCode::InvalidEvent, "clause completed twice");
        }
        completed_.emplace(clause, std::move(pcm));
        std::vector<std::pair<std::uint32_t, std::vector<std::int16_t>>> ready;
        for (auto it = completed_.find(next_emit_index_); it != completed_.end();
             it = completed_.find(next_emit_index_)) {
            ready.emplace_back(it->first, std::move(it->second));
            completed_.erase(it);
            ++next_emit_index_;
        }
        return ready;
    }

    std::uint32_t next_emit_index() const { return next_emit_index_; }
    std::size_t buffered() const { return completed_.size(); }

private:
    std::uint32_t next_emit_index_ = 0;
    std::map<std::uint32_t, std::vector<std::int16_t>> completed_;
};

/// Splits one clause of PCM into 100 ms TtsChunk events.
inline std::vector<Event> chunk_clause(const SessionId& session, std::uint32_t turn, std::uint32_t clause,
                                       const std::vector<std::int16_t>& pcm) {
    std::vector<Event> out;
    std::uint32_t idx = 0;
    for (std::size_t off = 0; off < pcm.size(); off += kTtsChunkSamples, ++idx) {
        const auto end = std::min(pcm.size(), off + kTtsChunkSamples);
        out.push_back(Event::make(session, EventKind::TtsChunk,
                                  TtsChunkPayload{clause, idx, {pcm.begin() + static_cast<std::ptrdiff_t>(off),
                                                                pcm.begin() + static_cast<std::ptrdiff_t>(end)}},
                                  turn));
    }
    return out;
}

/// Per-turn playback bookkeeping owned by the session.
struct TurnPlayback {
    PlaybackQueue queue;
    std::uint32_t next_clause = 0;
    std::uint32_t emitted = 0;
    bool llm_done = false;
    bool tts_done_sent = false;
};

class PlaybackRegistry {
public:
    std::mutex mu;
    std::map<std::uint32_t, TurnPlayback> turns;
    std::set<std::uint32_t> cancelled;
    std::vector<SynthesisJob> job_log;
};

/// Subscribes to sentences and voice switches; synthesizes clauses on a
/// small worker pool and emits their audio strictly in clause order.
class TtsManager {
public:
    TtsManager(EventBus& bus, SessionId session, TtsBackend& backend, PlaybackRegistry& reg, TtsConfig initial,
               std::size_t concurrency, std::stop_token session_stop)
        : bus_(bus), session_(std::move(session)), backend_(backend), reg_(reg), current_(std::move(initial)),
          session_stop_(std::move(session_stop)) {
        if (concurrency == 0) throw Error(ErrorCode::InvalidConfig, "tts.concurrency must be positive");
        for (std::size_t i = 0; i < concurrency; ++i) {
            workers_.emplace_back([this](std::stop_token st) { work(st); });
        }
    }

    ~TtsManager() { shutdown(); }

    void shutdown() {
        {
            std::lock_guard lock(qmu_);
            stopping_ = true;
            for (auto& [turn, src] : turn_stops_) src->request_stop();
        }
        qcv_.notify_all();
        for (auto& w : workers_) {
            w.request_stop();
            if (w.joinable()) w.join();
        }
        workers_.clear();
    }

    static KindSet kinds() {
        KindSet k;
        for (auto kind : {EventKind::LlmSentence, EventKind::PhaticUtterance, EventKind::LlmDone,
                          EventKind::TimbreSwitch, EventKind::EmotionSwitch, EventKind::Flush, EventKind::Stop}) {
            k.insert(kind);
        }
        return k;
    }

    void handle(const Event& ev) {
        switch (ev.kind) {
            case EventKind::LlmSentence:
            case EventKind::PhaticUtterance: schedule(ev.as<TextPayload>().text, ev.turn); break;
            case EventKind::LlmDone: {
                std::lock_guard lock(reg_.mu);
                if (reg_.cancelled.count(ev.turn)) return;
                reg_.turns[ev.turn].llm_done = true;
                maybe_done_locked(ev.turn);
                break;
            }
            case EventKind::TimbreSwitch: {
                std::lock_guard lock(qmu_);
                const auto& p = ev.as<SwitchPayload>();
                current_.timbre = p.value;
                current_.timbre_profile = p.profile;
                break;
            }
            case EventKind::EmotionSwitch: {
                std::lock_guard lock(qmu_);
                current_.emotion = ev.as<SwitchPayload>().value;
                break;
            }
            case EventKind::Flush:
            case EventKind::Stop: cancel_turn(ev.turn); break;
            default: break;
        }
    }

    /// Queues a clause for synthesis. Returns false if the turn was cancelled
    /// or the text is blank.
    bool schedule(const std::string& text, std::uint32_t turn) {
        if (text::trim(text).empty()) return false;
        SynthesisJob job;
        {
            std::lock_guard lock(reg_.mu);
            if (reg_.cancelled.count(turn)) return false;
            auto& tp = reg_.turns[turn];
            job.turn_id = turn;
            job.clause_index = tp.next_clause++;
        }
        job.text = text;
        {
            std::lock_guard lock(qmu_);
            job.timbre = current_.timbre_profile;
            job.emotion = current_.emotion;
            if (!turn_stops_.count(turn)) turn_stops_[turn] = std::make_unique<LinkedStopSource>(session_stop_);
            queue_.push_back(job);
        }
        qcv_.notify_one();
        return true;
    }

    /// Drops queued work for `turn`, interrupts in-flight synthesis and
    /// discards anything not yet emitted.
    void cancel_turn(std::uint32_t turn) {
        {
            std::lock_guard lock(reg_.mu);
            reg_.cancelled.insert(turn);
            reg_.turns.erase(turn);
        }
        std::lock_guard lock(qmu_);
        for (auto it = queue_.begin(); it != queue_.end();) {
            if (it->turn_id == turn) {
                it->status = SynthesisJob::Status::Cancelled;
                log(*it);
                it = queue_.erase(it);
            } else {
                ++it;
            }
        }
        auto st = turn_stops_.find(turn);
        if (st != turn_stops_.end()) st->second->request_stop();
    }

    std::size_t queued() const {
        std::lock_guard lock(qmu_);
        return queue_.size();
    }

private:
    void log(const SynthesisJob& job) {
        std::lock_guard lock(log_mu_);
        reg_.job_log.push_back(job);
    }

    void work(std::stop_token st) {
        while (true) {
            SynthesisJob job;
            std::stop_token turn_stop;
            {
                std::unique_lock lock(qmu_);
                qcv_.wait(lock, [&] { return stopping_ || st.stop_requested() || !queue_.empty(); });
                if (stopping_ || st.stop_requested()) return;
                job = std::move(queue_.front());
                queue_.pop_front();
                turn_stop = turn_stops_.at(job.turn_id)->token();
            }
            job.status = SynthesisJob::Status::Synthesizing;
            std::vector<std::int16_t> pcm;
            try {
                auto syn = backend_.synthesize(job.text, job.timbre, job.emotion, turn_stop);
                pcm = std::move(syn.pcm);
                job.mechanism = syn.mechanism;
                job.status = SynthesisJob::Status::Done;
            } catch (const Error& e) {
                job.status = e.code() == ErrorCode::Cancelled ? SynthesisJob::Status::Cancelled
                                                              : SynthesisJob::Status::Failed;
            }
            log(job);
            if (job.status == SynthesisJob::Status::Cancelled) continue;
            complete(job, std::move(pcm));
        }
    }

    void complete(const SynthesisJob& job, std::vector<std::int16_t> pcm) {
        std::lock_guard lock(reg_.mu);
        if (reg_.cancelled.count(job.turn_id)) return;
        auto& tp = reg_.turns[job.turn_id];
        for (auto& [clause, clause_pcm] : tp.queue.complete(job.clause_index, std::move(pcm))) {
            for (auto& ev : chunk_clause(session_, job.turn_id, clause, clause_pcm)) publish(std::move(ev));
            ++tp.emitted;
        }
        maybe_done_locked(job.turn_id);
    }

    void maybe_done_locked(std::uint32_t turn) {
        auto& tp = reg_.turns[turn];
        if (tp.llm_done && !tp.tts_done_sent && tp.emitted == tp.next_clause) {
            tp.tts_done_sent = true;
            publish(Event::make(session_, EventKind::TtsDone, Marker{}, turn));
        }
    }

    void publish(Event ev) {
        try {
            bus_.publish(std::move(ev));
        } catch (const Error& e) {
            if (e.code() != ErrorCode::UnknownSession) throw;
        }
    }

    EventBus& bus_;
    SessionId session_;
    TtsBackend& backend_;
    PlaybackRegistry& reg_;
    TtsConfig current_;
    std::stop_token session_stop_;

    mutable std::mutex qmu_;
    std::condition_variable qcv_;
    std::deque<SynthesisJob> queue_;
    std::map<std::uint32_t, std::unique_ptr<LinkedStopSource>> turn_stops_;
    bool stopping_ = false;
    std::mutex log_mu_;
    std::vector<std::jthread> workers_;
};

}  // namespace xtalk
