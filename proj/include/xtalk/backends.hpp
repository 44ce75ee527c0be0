#pragma once

// Model-agnostic contracts between the managers and the model layer. Real
// backends implement these; the pipeline never depends on a concrete one.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stop_token>
#include <string>
#include <vector>

#include "xtalk/scenario.hpp"

namespace xtalk {

using PcmSpan = std::span<const std::int16_t>;

class AsrStream {
public:
    virtual ~AsrStream() = default;
    /// Feeds one chunk; returns the running partial transcript.
    virtual std::string feed(PcmSpan chunk, const std::stop_token& stop) = 0;
    /// Ends the stream and returns the final transcript.
    virtual std::string finish(const std::stop_token& stop) = 0;
};

class AsrBackend {
public:
    virtual ~AsrBackend() = default;
    virtual std::string recognize(PcmSpan audio, const std::stop_token& stop) = 0;
    virtual bool supports_streaming() const { return false; }
    virtual std::unique_ptr<AsrStream> open_stream() { return nullptr; }
};

class LlmStream {
public:
    virtual ~LlmStream() = default;
    /// Next item, or nullopt at end of stream.
    virtual std::optional<LlmItem> next(const std::stop_token& stop) = 0;
};

class LlmBackend {
public:
    virtual ~LlmBackend() = default;
    virtual std::unique_ptr<LlmStream> stream(const std::string& prompt) = 0;
};

struct TtsCapabilities {
    bool native_emotion_control = false;
};

struct Synthesis {
    std::vector<std::int16_t> pcm;
    std::string timbre;
    std::string emotion;
    std::string mechanism;  // how the emotion was realised by the backend
};

class TtsBackend {
public:
    virtual ~TtsBackend() = default;
    virtual Synthesis synthesize(const std::string& text, const std::string& timbre, const std::string& emotion,
                                 const std::stop_token& stop) = 0;
    virtual TtsCapabilities capabilities() const { return {}; }
};

class CaptionBackend {
public:
    virtual ~CaptionBackend() = default;
    virtual std::string caption(PcmSpan window, const std::stop_token& stop) = 0;
};

class RewriteBackend {
public:
    virtual ~RewriteBackend() = default;
    virtual std::string rewrite(const std::string& caption, const std::stop_token& stop) = 0;
};

class EmbedBackend {
public:
    virtual ~EmbedBackend() = default;
    virtual std::vector<double> embed(PcmSpan audio, const std::stop_token& stop) = 0;
};

class ThinkingBackend {
public:
    virtual ~ThinkingBackend() = default;
    virtual std::string think(const std::string& query, const std::stop_token& stop) = 0;
};

/// Shared, read-only model handles referenced by every session.
struct ModelHandles {
    std::shared_ptr<AsrBackend> asr;
    std::shared_ptr<LlmBackend> llm;
    std::shared_ptr<TtsBackend> tts;
    std::shared_ptr<CaptionBackend> captioner;
    std::shared_ptr<RewriteBackend> rewriter;
    std::shared_ptr<EmbedBackend> embedder;
    std::shared_ptr<ThinkingBackend> thinker;
};

}  // namespace xtalk
