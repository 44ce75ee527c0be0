#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "xtalk/mock_backends.hpp"
#include "xtalk/side_channels.hpp"
#include "xtalk/tts_stage.hpp"

using namespace xtalk;

namespace {

std::vector<std::int16_t> clause_pcm(std::uint32_t clause, std::size_t samples) {
    std::vector<std::int16_t> pcm(samples);
    for (std::size_t i = 0; i < samples; ++i) pcm[i] = static_cast<std::int16_t>(clause * 1000 + i % 997);
    return pcm;
}

class FixedCaption : public CaptionBackend {
public:
    std::string text;
    bool fail = false;
    std::size_t last_window = 0;
    std::string caption(PcmSpan window, const std::stop_token&) override {
        last_window = window.size();
        if (fail) throw Error(ErrorCode::BackendFailure, "captioner down");
        return text;
    }
};

class Upper : public RewriteBackend {
public:
    std::string rewrite(const std::string& c, const std::stop_token&) override { return "[" + c + "]"; }
};

}  // namespace

TEST(PlaybackQueue, ReleasesInClauseOrderForEveryPermutation) {
    std::mt19937 rng(99);
    std::vector<std::uint32_t> order(6);
    for (int trial = 0; trial < 200; ++trial) {
        std::iota(order.begin(), order.end(), 0u);
        std::shuffle(order.begin(), order.end(), rng);
        PlaybackQueue q;
        std::vector<std::uint32_t> released;
        std::vector<std::int16_t> played;
        for (auto c : order) {
            for (auto& [idx, pcm] : q.complete(c, clause_pcm(c, 1000 + c * 333))) {
                released.push_back(idx);
                played.insert(played.end(), pcm.begin(), pcm.end());
            }
        }
        std::vector<std::int16_t> expected;
        for (std::uint32_t c = 0; c < 6; ++c) {
            const auto p = clause_pcm(c, 1000 + c * 333);
            expected.insert(expected.end(), p.begin(), p.end());
        }
        EXPECT_EQ(released, (std::vector<std::uint32_t>{0, 1, 2, 3, 4, 5}));
        EXPECT_EQ(played, expected);
        EXPECT_EQ(q.buffered(), 0u);
        EXPECT_EQ(q.next_emit_index(), 6u);
    }
}

TEST(PlaybackQueue, DuplicateCompletionRejected) {
    PlaybackQueue q;
    q.complete(1, {1});
    EXPECT_THROW(q.complete(1, {1}), Error);
    q.complete(0, {0});
    EXPECT_THROW(q.complete(0, {0}), Error);
}

TEST(ChunkClause, SplitsInto100msChunks) {
    const auto pcm = clause_pcm(3, 1600 * 2 + 17);
    const auto events = chunk_clause("s", 7, 3, pcm);
    ASSERT_EQ(events.size(), 3u);
    std::vector<std::int16_t> joined;
    for (std::uint32_t i = 0; i < events.size(); ++i) {
        const auto& p = events[i].as<TtsChunkPayload>();
        EXPECT_EQ(events[i].turn, 7u);
        EXPECT_EQ(p.clause_index, 3u);
        EXPECT_EQ(p.chunk_index, i);
        EXPECT_EQ(p.pcm.size(), i < 2 ? kTtsChunkSamples : 17u);
        joined.insert(joined.end(), p.pcm.begin(), p.pcm.end());
    }
    EXPECT_EQ(joined, pcm);
    EXPECT_TRUE(chunk_clause("s", 1, 0, {}).empty());
}

TEST(MockTts, DurationRuleAndEmptyText) {
    MockTts tts(LatencyProfile{}, 5.0);
    std::stop_source stop;
    EXPECT_EQ(tts.duration_seconds(1), 1);
    EXPECT_EQ(tts.duration_seconds(5), 1);
    EXPECT_EQ(tts.duration_seconds(6), 2);
    EXPECT_EQ(tts.synthesize("你好世界啊呀", "tim_default", "neutral", stop.get_token()).pcm.size(),
              2u * kSampleRate);
    EXPECT_THROW(tts.synthesize("", "tim_default", "neutral", stop.get_token()), Error);
}

TEST(RollingAudioBuffer, NeverExceedsWindowAndKeepsNewestAudio) {
    RollingAudioBuffer buf(15000);
    std::mt19937 rng(1);
    std::vector<std::int16_t> all;
    for (int i = 0; i < 400; ++i) {
        const std::size_t n = 1 + rng() % 4000;
        std::vector<std::int16_t> frame(n);
        for (auto& s : frame) s = static_cast<std::int16_t>(rng());
        all.insert(all.end(), frame.begin(), frame.end());
        buf.push(AudioFrame{frame});
        ASSERT_LE(buf.duration_ms(), 15000.0);
        const auto snap = buf.snapshot();
        const auto keep = std::min(all.size(), ms_to_samples(15000));
        ASSERT_EQ(snap.size(), keep);
        ASSERT_TRUE(std::equal(snap.begin(), snap.end(), all.end() - static_cast<std::ptrdiff_t>(keep)));
    }
    EXPECT_THROW(RollingAudioBuffer(0), Error);
}

TEST(Embedding, CosineOracle) {
    EXPECT_DOUBLE_EQ(cosine({1, 0}, {0, 1}), 0.0);
    EXPECT_DOUBLE_EQ(cosine({1, 1}, {2, 2}), 1.0);
    EXPECT_NEAR(cosine({1, 0}, {1, 1}), 1.0 / std::sqrt(2.0), 1e-12);
    EXPECT_DOUBLE_EQ(cosine({0, 0}, {1, 1}), 0.0);
    EXPECT_THROW(cosine({1}, {1, 2}), Error);
}

TEST(Embedding, EmaOracle) {
    const auto half = ema_update({1, 0}, {0, 1}, 0.5);
    EXPECT_NEAR(half[0], 1.0 / std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(half[1], 1.0 / std::sqrt(2.0), 1e-12);
    const auto full = ema_update({1, 0}, {0, 1}, 1.0);
    EXPECT_NEAR(full[0], 0.0, 1e-12);
    EXPECT_NEAR(full[1], 1.0, 1e-12);
    // Opposite vectors cancel: the stored embedding is kept.
    EXPECT_EQ(ema_update({1, 0}, {-1, 0}, 0.5), (std::vector<double>{1, 0}));
    std::mt19937 rng(8);
    std::normal_distribution<double> g;
    for (int i = 0; i < 100; ++i) {
        std::vector<double> a(8), b(8);
        for (auto& x : a) x = g(rng);
        for (auto& x : b) x = g(rng);
        EXPECT_NEAR(norm(ema_update(a, b, 0.1 + 0.8 * (i % 10) / 10.0)), 1.0, 1e-9);
    }
}

TEST(SpeakerRegistry, RegistersThenMatches) {
    SpeakerRegistry reg(0.6, 0.1);
    auto m = reg.identify({1, 0, 0});
    EXPECT_EQ(m.speaker_id, "spk_01");
    EXPECT_TRUE(m.registered);
    m = reg.identify({0.9, 0.1, 0});
    EXPECT_EQ(m.speaker_id, "spk_01");
    EXPECT_FALSE(m.registered);
    EXPECT_NEAR(m.similarity, cosine({1, 0, 0}, {0.9, 0.1, 0}), 1e-12);
    m = reg.identify({0, 0, 5});
    EXPECT_EQ(m.speaker_id, "spk_02");
    EXPECT_TRUE(m.registered);
    EXPECT_EQ(reg.size(), 2u);
    EXPECT_THROW(reg.identify({0, 0, 0}), Error);
    EXPECT_THROW(SpeakerRegistry(0.6, 0.0), Error);
}

TEST(SpeakerRegistry, StoredEmbeddingConvergesToSpeaker) {
    SpeakerRegistry reg(0.3, 0.2);
    reg.identify({1, 0.5, 0});
    const std::vector<double> target{0.8, 0.6, 0.0};
    double prev = cosine(*reg.embedding("spk_01"), target);
    for (int i = 0; i < 30; ++i) {
        const auto m = reg.identify(target);
        EXPECT_EQ(m.speaker_id, "spk_01");
        EXPECT_LE(m.similarity, 1.0);
        const double now = cosine(*reg.embedding("spk_01"), target);
        EXPECT_GE(now, prev - 1e-12);
        prev = now;
    }
    EXPECT_GT(prev, 0.9999);
}

TEST(Captioner, TickUsesWholeWindowAndRewriter) {
    RollingAudioBuffer buf(1000);
    FixedCaption cap;
    Upper up;
    std::stop_source stop;
    EXPECT_FALSE(tick_captioner(buf, "s", cap, nullptr, stop.get_token()).has_value());
    buf.push(AudioFrame{std::vector<std::int16_t>(ms_to_samples(3000))});
    cap.text = "quiet office";
    auto ev = tick_captioner(buf, "s", cap, nullptr, stop.get_token());
    ASSERT_TRUE(ev.has_value());
    EXPECT_EQ(cap.last_window, ms_to_samples(1000));
    EXPECT_EQ(ev->as<CaptionPayload>(), (CaptionPayload{"quiet office", false}));
    ev = tick_captioner(buf, "s", cap, &up, stop.get_token());
    EXPECT_EQ(ev->as<CaptionPayload>(), (CaptionPayload{"[quiet office]", true}));
    cap.fail = true;
    ev = tick_captioner(buf, "s", cap, nullptr, stop.get_token());
    ASSERT_TRUE(ev.has_value());
    EXPECT_EQ(ev->kind, EventKind::Metric);
    EXPECT_EQ(ev->as<MetricPayload>().name, "captioner_failure");
}
