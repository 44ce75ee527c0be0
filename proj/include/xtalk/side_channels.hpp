#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <stop_token>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "xtalk/audio.hpp"
#include "xtalk/backends.hpp"
#include "xtalk/cancel.hpp"
#include "xtalk/event_bus.hpp"

namespace xtalk {

class RollingAudioBuffer {
public:
    explicit RollingAudioBuffer(std::int64_t window_ms = 15000) : window_samples_(ms_to_samples(window_ms)) {
        if (window_ms <= 0) throw Error(ErrorCode::InvalidConfig, "rolling window must be positive");
    }

    /// Appends a frame and evicts from the front until the window fits.
    void push(AudioFrame frame) {
        total_ += frame.pcm.size();
        frames_.push_back(std::move(frame));
        while (total_ > window_samples_) {
            auto& front = frames_.front();
            const auto excess = total_ - window_samples_;
            if (front.pcm.size() <= excess) {
                total_ -= front.pcm.size();
                frames_.pop_front();
            } else {
                front.pcm.erase(front.pcm.begin(), front.pcm.begin() + static_cast<std::ptrdiff_t>(excess));
                total_ -= excess;
            }
        }
    }

    std::vector<std::int16_t> snapshot() const {
        std::vector<std::int16_t> out;
        out.reserve(total_);
        for (const auto& f : frames_) out.insert(out.end(), f.pcm.begin(), f.pcm.end());
        return out;
    }

    bool empty() const { return total_ == 0; }
    std::size_t total_samples() const { return total_; }
    double duration_ms() const { return static_cast<double>(total_) / kSamplesPerMs; }
    std::size_t frame_count() const { return frames_.size(); }
    std::int64_t window_ms() const { return samples_to_ms(window_samples_); }
    void clear() {
        frames_.clear();
        total_ = 0;
    }

private:
    std::size_t window_samples_;
    std::size_t total_ = 0;
    std::deque<AudioFrame> frames_;
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw Error(ErrorCode::InvalidEvent, "embedding dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const std::vector<double>& v) { return std::sqrt(dot(v, v)); }

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = norm(a) * norm(b);
    return n == 0.0 ? 0.0 : std::clamp(dot(a, b) / n, -1.0, 1.0);
}

/// normalize(alpha * observed + (1 - alpha) * old); a numerically zero blend
/// leaves `old` unchanged.
inline std::vector<double> ema_update(const std::vector<double>& old, const std::vector<double>& observed,
                                      double alpha) {
    if (old.size() != observed.size()) throw Error(ErrorCode::InvalidEvent, "embedding dimension mismatch");
    std::vector<double> blend(old.size());
    for (std::size_t i = 0; i < old.size(); ++i) blend[i] = alpha * observed[i] + (1.0 - alpha) * old[i];
    const double n = norm(blend);
    if (n < 1e-12) return old;
    for (auto& x : blend) x /= n;
    return blend;
}

struct SpeakerMatch {
    std::string speaker_id;
    double similarity = 0.0;
    bool registered = false;
};

class SpeakerRegistry {
public:
    explicit SpeakerRegistry(double threshold = 0.6, double alpha = 0.1) : threshold_(threshold), alpha_(alpha) {
        if (!(alpha > 0.0 && alpha <= 1.0)) throw Error(ErrorCode::InvalidConfig, "alpha must be in (0, 1]");
    }

    SpeakerMatch identify(std::vector<double> observed) {
        const double n = norm(observed);
        if (n == 0.0) throw Error(ErrorCode::InvalidEvent, "zero embedding");
        for (auto& x : observed) x /= n;
        std::size_t best = entries_.size();
        double best_sim = -2.0;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            const double s = dot(entries_[i].second, observed);
            if (s > best_sim) {
                best_sim = s;
                best = i;
            }
        }
        if (best < entries_.size() && best_sim >= threshold_) {
            entries_[best].second = ema_update(entries_[best].second, observed, alpha_);
            return {entries_[best].first, std::min(best_sim, 1.0), false};
        }
        auto id = fmt::format("spk_{:02}", entries_.size() + 1);
        entries_.emplace_back(id, std::move(observed));
        return {id, 1.0, true};
    }

    const std::vector<double>* embedding(const std::string& id) const {
        for (const auto& [k, v] : entries_) {
            if (k == id) return &v;
        }
        return nullptr;
    }

    std::size_t size() const { return entries_.size(); }
    double threshold() const { return threshold_; }
    double alpha() const { return alpha_; }

private:
    double threshold_;
    double alpha_;
    std::vector<std::pair<std::string, std::vector<double>>> entries_;
};

/// One captioner tick. Returns nothing for an empty buffer; a backend
/// failure yields a Metric event instead of a caption.
inline std::optional<Event> tick_captioner(const RollingAudioBuffer& buffer, const SessionId& session,
                                           CaptionBackend& captioner, RewriteBackend* rewriter,
                                           const std::stop_token& stop) {
    if (buffer.empty()) return std::nullopt;
    const auto pcm = buffer.snapshot();
    try {
        auto text = captioner.caption(pcm, stop);
        bool rewritten = false;
        if (rewriter) {
            text = rewriter->rewrite(text, stop);
            rewritten = true;
        }
        if (text.empty()) return std::nullopt;
        return Event::make(session, EventKind::CaptionUpdated, CaptionPayload{std::move(text), rewritten});
    } catch (const Error& e) {
        if (e.code() == ErrorCode::Cancelled) throw;
        return Event::make(session, EventKind::Metric, MetricPayload{"captioner_failure", 1.0});
    }
}

/// Feeds the rolling buffer from AudioIn and captions it on a timer thread.
class CaptionChannel {
public:
    CaptionChannel(EventBus& bus, SessionId session, CaptionBackend& captioner, RewriteBackend* rewriter,
                   std::int64_t period_ms, RollingAudioBuffer& buffer, std::stop_token session_stop)
        : bus_(bus), session_(std::move(session)), captioner_(captioner), rewriter_(rewriter), buffer_(buffer),
          period_ms_(period_ms), stop_(session_stop) {
        if (period_ms <= 0) throw Error(ErrorCode::InvalidConfig, "side_channels.caption_period_ms must be positive");
        timer_ = std::jthread([this](std::stop_token st) { loop(st); });
    }

    ~CaptionChannel() { shutdown(); }

    void shutdown() {
        timer_.request_stop();
        if (timer_.joinable()) timer_.join();
    }

    static KindSet kinds() {
        KindSet k;
        k.insert(EventKind::AudioIn);
        return k;
    }

    void handle(const Event& ev) {
        if (ev.kind != EventKind::AudioIn) return;
        std::lock_guard lock(mu_);
        buffer_.push(AudioFrame{ev.as<AudioPayload>().pcm});
    }

    std::optional<std::string> caption() const {
        std::lock_guard lock(mu_);
        return last_caption_;
    }

private:
    void loop(std::stop_token st) {
        std::stop_callback link(stop_, [&] { timer_.request_stop(); });
        while (sleep_for_cancellable(static_cast<double>(period_ms_), st)) {
            RollingAudioBuffer copy(1);
            {
                std::lock_guard lock(mu_);
                copy = buffer_;
            }
            try {
                auto ev = tick_captioner(copy, session_, captioner_, rewriter_, st);
                if (!ev) continue;
                if (ev->kind == EventKind::CaptionUpdated) {
                    std::lock_guard lock(mu_);
                    last_caption_ = ev->as<CaptionPayload>().text;
                }
                bus_.publish(std::move(*ev));
            } catch (const Error&) {
                return;
            }
        }
    }

    EventBus& bus_;
    SessionId session_;
    CaptionBackend& captioner_;
    RewriteBackend* rewriter_;
    mutable std::mutex mu_;
    RollingAudioBuffer& buffer_;
    std::optional<std::string> last_caption_;
    std::int64_t period_ms_;
    std::stop_token stop_;
    std::jthread timer_;
};

/// Collects each utterance's audio and identifies the speaker after AsrFinal.
class SpeakerChannel {
public:
    SpeakerChannel(EventBus& bus, SessionId session, EmbedBackend& embedder, SpeakerRegistry registry,
                   std::stop_token session_stop)
        : bus_(bus), session_(std::move(session)), embedder_(embedder), registry_(std::move(registry)),
          stop_(std::move(session_stop)) {}

    static KindSet kinds() {
        KindSet k;
        for (auto kind : {EventKind::AudioIn, EventKind::VadStart, EventKind::AsrFinal}) k.insert(kind);
        return k;
    }

    void handle(const Event& ev) {
        switch (ev.kind) {
            case EventKind::VadStart: utterance_.clear(); break;
            case EventKind::AudioIn: {
                const auto& pcm = ev.as<AudioPayload>().pcm;
                utterance_.insert(utterance_.end(), pcm.begin(), pcm.end());
                break;
            }
            case EventKind::AsrFinal: {
                if (utterance_.empty()) return;
                std::vector<std::int16_t> audio;
                audio.swap(utterance_);
                std::vector<double> emb;
                try {
                    emb = embedder_.embed(audio, stop_);
                } catch (const Error& e) {
                    if (e.code() == ErrorCode::Cancelled) return;
                    bus_.publish(Event::make(session_, EventKind::Metric, MetricPayload{"embedder_failure", 1.0}));
                    return;
                }
                const auto m = registry_.identify(std::move(emb));
                bus_.publish(Event::make(session_, EventKind::SpeakerIdentified,
                                         SpeakerPayload{m.speaker_id, m.similarity, m.registered}, ev.turn));
                break;
            }
            default: break;
        }
    }

    const SpeakerRegistry& registry() const { return registry_; }

private:
    EventBus& bus_;
    SessionId session_;
    EmbedBackend& embedder_;
    SpeakerRegistry registry_;
    std::stop_token stop_;
    std::vector<std::int16_t> utterance_;
};

}  // namespace xtalk
