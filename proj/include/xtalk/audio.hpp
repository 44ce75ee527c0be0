#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace xtalk {

inline constexpr int kSampleRate = 16000;
inline constexpr int kSamplesPerMs = kSampleRate / 1000;
inline constexpr int kDefaultChunkMs = 100;

/// Mono signed 16-bit PCM at 16 kHz.
struct AudioFrame {
    std::vector<std::int16_t> pcm;

    std::size_t sample_count() const { return pcm.size(); }
    double duration_ms() const { return static_cast<double>(pcm.size()) / kSamplesPerMs; }
};

inline constexpr std::int64_t samples_to_ms(std::size_t samples) {
    return static_cast<std::int64_t>(samples) / kSamplesPerMs;
}

inline constexpr std::size_t ms_to_samples(std::int64_t ms) {
    return static_cast<std::size_t>(ms) * kSamplesPerMs;
}

// Scripted audio carries an in-band sidecar so that the mock models can
// identify the utterance and the absolute position of any span handed to
// them. Every 10 ms block starts with [magic, tag, block index]; the other
// samples are silence.
namespace sidecar {

inline constexpr std::int16_t kMagic = 30001;
inline constexpr std::size_t kBlockSamples = 160;

struct Position {
    int tag = 0;
    std::size_t start_sample = 0;  // absolute position of span[0] in the utterance
};

inline std::vector<std::int16_t> make_pcm(int tag, std::int64_t duration_ms) {
    std::vector<std::int16_t> pcm(ms_to_samples(duration_ms), 0);
    for (std::size_t b = 0; b * kBlockSamples < pcm.size(); ++b) {
        const std::size_t at = b * kBlockSamples;
        pcm[at] = kMagic;
        if (at + 1 < pcm.size()) pcm[at + 1] = static_cast<std::int16_t>(tag);
        if (at + 2 < pcm.size()) pcm[at + 2] = static_cast<std::int16_t>(b);
    }
    return pcm;
}

/// Locates the first complete block marker in `span`.
inline std::optional<Position> locate(std::span<const std::int16_t> span) {
    for (std::size_t i = 0; i + 2 < span.size(); ++i) {
        if (span[i] != kMagic) continue;
        const auto block = static_cast<std::size_t>(static_cast<std::uint16_t>(span[i + 2]));
        if (block * kBlockSamples < i) continue;
        return Position{span[i + 1], block * kBlockSamples - i};
    }
    return std::nullopt;
}

/// Tag of the most recent marker in `span`.
inline std::optional<int> last_tag(std::span<const std::int16_t> span) {
    for (std::size_t i = span.size(); i >= 3; --i) {
        if (span[i - 3] == kMagic) return span[i - 2];
    }
    return std::nullopt;
}

}  // namespace sidecar
}  // namespace xtalk
