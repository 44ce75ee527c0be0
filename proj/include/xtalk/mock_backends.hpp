#pragma once

// Deterministic, latency-configurable stand-ins for every model category.
// All mocks are shareable across sessions: per-call state lives in the
// caller-held stream objects, the rest is read-only tables plus test
// instrumentation (call logs, fault injection) behind a mutex.

#include <atomic>
#include <cmath>
#include <functional>
#include <mutex>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xtalk/backends.hpp"
#include "xtalk/cancel.hpp"

namespace xtalk {

struct LatencyProfile {
    double fixed_ms = 0.0;
    double per_unit_ms = 0.0;  // per audio second (ASR), per item (LLM), per char (TTS)
    double jitter_ms = 0.0;

    double cost(double units) const { return fixed_ms + per_unit_ms * units; }

    bool operator==(const LatencyProfile&) const = default;
};

inline void to_json(nlohmann::json& j, const LatencyProfile& p) {
    j = nlohmann::json{{"fixed_ms", p.fixed_ms}, {"per_unit_ms", p.per_unit_ms}, {"jitter_ms", p.jitter_ms}};
}

inline void from_json(const nlohmann::json& j, LatencyProfile& p) {
    p.fixed_ms = j.value("fixed_ms", 0.0);
    p.per_unit_ms = j.value("per_unit_ms", 0.0);
    p.jitter_ms = j.value("jitter_ms", 0.0);
}

namespace detail {

class Jitter {
public:
    double draw(double bound) {
        if (bound <= 0.0) return 0.0;
        std::lock_guard lock(mu_);
        return std::uniform_real_distribution<double>(0.0, bound)(rng_);
    }

private:
    std::mutex mu_;
    std::mt19937_64 rng_{0x5eed};
};

}  // namespace detail

class MockAsr final : public AsrBackend {
public:
    struct Call {
        int tag = 0;
        std::int64_t start_ms = 0;
        std::int64_t end_ms = 0;
        bool streaming = false;
    };

    MockAsr(std::shared_ptr<const UtteranceTable> table, LatencyProfile profile, bool streaming = false)
        : table_(std::move(table)), profile_(profile), streaming_(streaming) {}

    std::string recognize(PcmSpan audio, const std::stop_token& stop) override {
        if (audio.empty()) {
            sleep_or_throw(profile_.fixed_ms, stop);
            return {};
        }
        const auto [utt, start_ms, end_ms] = resolve(audio);
        sleep_or_throw(profile_.cost(static_cast<double>(audio.size()) / kSampleRate) + jitter_.draw(profile_.jitter_ms),
                       stop);
        maybe_fail();
        log({utt->tag, start_ms, end_ms, false});
        return utt->text_between(start_ms, end_ms);
    }

    bool supports_streaming() const override { return streaming_; }

    std::unique_ptr<AsrStream> open_stream() override {
        if (!streaming_) return nullptr;
        return std::make_unique<Stream>(*this);
    }

    /// The next `n` calls throw BackendFailure after paying their latency.
    void fail_next(int n) { fail_next_.store(n); }

    std::vector<Call> calls() const {
        std::lock_guard lock(mu_);
        return calls_;
    }

    void clear_calls() {
        std::lock_guard lock(mu_);
        calls_.clear();
    }

    const LatencyProfile& profile() const { return profile_; }

private:
    struct Resolved {
        const Utterance* utt;
        std::int64_t start_ms;
        std::int64_t end_ms;
    };

    class Stream final : public AsrStream {
    public:
        explicit Stream(MockAsr& owner) : owner_(owner) {}

        std::string feed(PcmSpan chunk, const std::stop_token& stop) override {
            if (chunk.empty()) return current();
            const auto r = owner_.resolve(chunk);
            utt_ = r.utt;
            end_ms_ = r.end_ms;
            sleep_or_throw(owner_.profile_.cost(static_cast<double>(chunk.size()) / kSampleRate) +
                               owner_.jitter_.draw(owner_.profile_.jitter_ms),
                           stop);
            owner_.maybe_fail();
            owner_.log({utt_->tag, r.start_ms, r.end_ms, true});
            return current();
        }

        std::string finish(const std::stop_token& stop) override {
            sleep_or_throw(owner_.profile_.fixed_ms, stop);
            owner_.maybe_fail();
            return current();
        }

    private:
        std::string current() const { return utt_ ? utt_->text_between(0, end_ms_) : std::string{}; }

        MockAsr& owner_;
        const Utterance* utt_ = nullptr;
        std::int64_t end_ms_ = 0;
    };

    Resolved resolve(PcmSpan audio) const {
        const auto pos = sidecar::locate(audio);
        if (!pos) throw Error(ErrorCode::UntaggedAudio, "no sidecar marker in span");
        const auto* utt = table_->by_tag(pos->tag);
        if (!utt) throw Error(ErrorCode::UntaggedAudio, "unknown utterance tag " + std::to_string(pos->tag));
        return {utt, samples_to_ms(pos->start_sample), samples_to_ms(pos->start_sample + audio.size())};
    }

    void maybe_fail() {
        int n = fail_next_.load();
        while (n > 0) {
            if (fail_next_.compare_exchange_weak(n, n - 1)) throw Error(ErrorCode::BackendFailure, "injected ASR fault");
        }
    }

    void log(Call c) {
        std::lock_guard lock(mu_);
        calls_.push_back(c);
    }

    std::shared_ptr<const UtteranceTable> table_;
    LatencyProfile profile_;
    bool streaming_;
    detail::Jitter jitter_;
    std::atomic<int> fail_next_{0};
    mutable std::mutex mu_;
    std::vector<Call> calls_;
};

/// Splits a prompt into its final block: ("user", text) or ("tool:<name>", result).
inline std::pair<std::string, std::string> last_prompt_block(const std::string& prompt) {
    auto end = prompt.find_last_not_of('\n');
    if (end == std::string::npos) return {"", ""};
    auto start = prompt.rfind('\n', end);
    start = start == std::string::npos ? 0 : start + 1;
    const std::string line = prompt.substr(start, end - start + 1);
    if (text::starts_with(line, "user: ")) return {"user", line.substr(6)};
    if (text::starts_with(line, "tool[")) {
        const auto close = line.find("]: ");
        if (close != std::string::npos) return {"tool:" + line.substr(5, close - 5), line.substr(close + 3)};
    }
    return {"", line};
}

class MockLlm final : public LlmBackend {
public:
    MockLlm(std::shared_ptr<const LlmScript> script, LatencyProfile profile)
        : script_(std::move(script)), profile_(profile) {}

    std::unique_ptr<LlmStream> stream(const std::string& prompt) override {
        return std::make_unique<Stream>(select(prompt), profile_, jitter_);
    }

    /// Script items the prompt resolves to.
    std::vector<LlmItem> select(const std::string& prompt) const {
        const auto [role, body] = last_prompt_block(prompt);
        if (text::starts_with(role, "tool:")) {
            const auto tool = role.substr(5);
            for (const auto& r : script_->tool_rules) {
                if ((r.tool.empty() || r.tool == tool) && body.find(r.match) != std::string::npos) return r.items;
            }
            return script_->fallback;
        }
        for (const auto& r : script_->rules) {
            if (body.find(r.match) != std::string::npos) return r.items;
        }
        return script_->fallback;
    }

    const LatencyProfile& profile() const { return profile_; }

private:
    class Stream final : public LlmStream {
    public:
        Stream(std::vector<LlmItem> items, LatencyProfile profile, detail::Jitter& jitter)
            : items_(std::move(items)), profile_(profile), jitter_(jitter) {}

        // Item i (1-based) is released at fixed_ms + i * per_unit_ms.
        std::optional<LlmItem> next(const std::stop_token& stop) override {
            if (idx_ >= items_.size()) return std::nullopt;
            double wait = profile_.per_unit_ms + jitter_.draw(profile_.jitter_ms);
            if (idx_ == 0) wait += profile_.fixed_ms;
            sleep_or_throw(wait, stop);
            return items_[idx_++];
        }

    private:
        std::vector<LlmItem> items_;
        LatencyProfile profile_;
        detail::Jitter& jitter_;
        std::size_t idx_ = 0;
    };

    std::shared_ptr<const LlmScript> script_;
    LatencyProfile profile_;
    detail::Jitter jitter_;
};

class MockTts final : public TtsBackend {
public:
    MockTts(LatencyProfile profile, double chars_per_second = 5.0, TtsCapabilities caps = {})
        : profile_(profile), chars_per_second_(chars_per_second), caps_(caps) {}

    Synthesis synthesize(const std::string& text, const std::string& timbre, const std::string& emotion,
                         const std::stop_token& stop) override {
        const auto chars = text::length(text);
        if (chars == 0) throw Error(ErrorCode::EmptyText, "nothing to synthesize");
        double wait = profile_.cost(static_cast<double>(chars)) + jitter_.draw(profile_.jitter_ms);
        if (latency_override_) wait = latency_override_(text);
        sleep_or_throw(wait, stop);
        Synthesis s;
        s.pcm.resize(static_cast<std::size_t>(duration_seconds(chars)) * kSampleRate);
        std::uint32_t seed = 2166136261u;
        for (unsigned char c : text) seed = (seed ^ c) * 16777619u;
        for (std::size_t i = 0; i < s.pcm.size(); ++i) {
            s.pcm[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>((seed + i * 7919u) & 0xffffu));
        }
        s.timbre = timbre;
        s.emotion = emotion;
        s.mechanism = caps_.native_emotion_control ? "native_vector" : "reference_audio:" + timbre + "/" + emotion;
        return s;
    }

    TtsCapabilities capabilities() const override { return caps_; }

    /// Output length rule: ceil(chars / chars_per_second) seconds.
    long duration_seconds(std::size_t chars) const {
        return static_cast<long>(std::ceil(static_cast<double>(chars) / chars_per_second_));
    }

    /// Replaces the profile-derived latency (used to force completion orders).
    void set_latency_override(std::function<double(const std::string&)> f) { latency_override_ = std::move(f); }

    const LatencyProfile& profile() const { return profile_; }
    double chars_per_second() const { return chars_per_second_; }

private:
    LatencyProfile profile_;
    double chars_per_second_;
    TtsCapabilities caps_;
    detail::Jitter jitter_;
    std::function<double(const std::string&)> latency_override_;
};

class MockCaptioner final : public CaptionBackend {
public:
    MockCaptioner(std::shared_ptr<const UtteranceTable> table, SceneTables scenes, LatencyProfile profile)
        : table_(std::move(table)), scenes_(std::move(scenes)), profile_(profile) {}

    std::string caption(PcmSpan window, const std::stop_token& stop) override {
        sleep_or_throw(profile_.cost(static_cast<double>(window.size()) / kSampleRate), stop);
        if (fail_next_.exchange(false)) throw Error(ErrorCode::BackendFailure, "injected captioner fault");
        const auto tag = sidecar::last_tag(window);
        const auto* utt = tag ? table_->by_tag(*tag) : nullptr;
        if (!utt) throw Error(ErrorCode::BackendFailure, "captioner could not resolve scene");
        auto it = scenes_.captions.find(utt->scene);
        if (it != scenes_.captions.end()) return it->second;
        return utt->scene.empty() ? "quiet room" : "ambient sound: " + utt->scene;
    }

    void fail_next() { fail_next_.store(true); }

private:
    std::shared_ptr<const UtteranceTable> table_;
    SceneTables scenes_;
    LatencyProfile profile_;
    std::atomic<bool> fail_next_{false};
};

class MockRewriter final : public RewriteBackend {
public:
    MockRewriter(SceneTables scenes, LatencyProfile profile) : scenes_(std::move(scenes)), profile_(profile) {}

    // Table lookup, otherwise keep only the first clause.
    std::string rewrite(const std::string& caption, const std::stop_token& stop) override {
        sleep_or_throw(profile_.fixed_ms, stop);
        if (auto it = scenes_.rewrites.find(caption); it != scenes_.rewrites.end()) return it->second;
        const auto cps = text::decode(caption);
        std::size_t cut = cps.size();
        for (std::size_t i = 0; i < cps.size(); ++i) {
            if (cps[i] == U',' || cps[i] == U'，' || cps[i] == U';' || cps[i] == U'；') {
                cut = i;
                break;
            }
        }
        return text::trim(text::encode(cps, 0, cut));
    }

private:
    SceneTables scenes_;
    LatencyProfile profile_;
};

/// Deterministic unit vector for a voice tag.
inline std::vector<double> voice_embedding(const std::string& voice, std::size_t dim = 64) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : voice) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    std::mt19937_64 rng(h);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(dim);
    double norm = 0.0;
    for (auto& x : v) {
        x = n(rng);
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    return v;
}

class MockEmbedder final : public EmbedBackend {
public:
    MockEmbedder(std::shared_ptr<const UtteranceTable> table, VoiceTables voices, LatencyProfile profile,
                 std::size_t dim = 64)
        : table_(std::move(table)), voices_(std::move(voices)), profile_(profile), dim_(dim) {}

    std::vector<double> embed(PcmSpan audio, const std::stop_token& stop) override {
        sleep_or_throw(profile_.cost(static_cast<double>(audio.size()) / kSampleRate), stop);
        const auto tag = sidecar::last_tag(audio);
        const auto* utt = tag ? table_->by_tag(*tag) : nullptr;
        if (!utt) throw Error(ErrorCode::BackendFailure, "embedder could not resolve voice");
        return embedding_for(utt->voice);
    }

    std::vector<double> embedding_for(const std::string& voice) const {
        auto it = voices_.speaker_embeddings.find(voice);
        if (it == voices_.speaker_embeddings.end()) return voice_embedding(voice, dim_);
        auto v = it->second;
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        for (auto& x : v) x /= norm;
        return v;
    }

private:
    std::shared_ptr<const UtteranceTable> table_;
    VoiceTables voices_;
    LatencyProfile profile_;
    std::size_t dim_;
};

class MockThinker final : public ThinkingBackend {
public:
    MockThinker(std::vector<std::pair<std::string, std::string>> table, LatencyProfile profile)
        : table_(std::move(table)), profile_(profile) {}

    std::string think(const std::string& query, const std::stop_token& stop) override {
        sleep_or_throw(profile_.fixed_ms, stop);
        for (const auto& [pattern, summary] : table_) {
            if (query.find(pattern) != std::string::npos) return summary;
        }
        return "considered: " + query;
    }

private:
    std::vector<std::pair<std::string, std::string>> table_;
    LatencyProfile profile_;
};

}  // namespace xtalk
