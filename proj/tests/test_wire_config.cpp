#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "xtalk/config.hpp"
#include "xtalk/session_runtime.hpp"
#include "xtalk/wire_gateway.hpp"
#include "xtalk/ws_server.hpp"

using namespace xtalk;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error thrown";
    return ErrorCode::InvalidEvent;
}

std::string config_error(const std::string& json) {
    try {
        parse_config_text(json);
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidConfig);
        return e.what();
    }
    ADD_FAILURE() << "accepted: " << json;
    return {};
}

std::string bytes(std::initializer_list<int> b) {
    std::string s;
    for (int x : b) s.push_back(static_cast<char>(x));
    return s;
}

}  // namespace

TEST(Wire, AudioFrameLayout) {
    ClientMessage m;
    m.type = ClientType::Audio;
    m.seq = 0x01020304;
    m.pcm = {1, -2, 0x1234};
    const auto f = encode_client_message(m);
    EXPECT_TRUE(f.binary);
    EXPECT_EQ(f.data, bytes({0x01, 0x01, 0x02, 0x03, 0x04, 0x01, 0x00, 0xfe, 0xff, 0x34, 0x12}));
    std::optional<std::uint32_t> last;
    EXPECT_EQ(decode_client_frame(f, last), m);
    EXPECT_EQ(last, 0x01020304u);
}

TEST(Wire, ClientMessagesRoundTrip) {
    std::optional<std::uint32_t> last;
    std::uint32_t seq = 0;
    for (auto t : {ClientType::Hello, ClientType::VadStart, ClientType::VadEnd, ClientType::BargeIn,
                   ClientType::TextInput, ClientType::Config, ClientType::Bye}) {
        ClientMessage m;
        m.type = t;
        m.seq = ++seq;
        m.payload = {{"text", "你好"}, {"n", seq}};
        const auto f = encode_client_message(m);
        EXPECT_FALSE(f.binary);
        EXPECT_EQ(decode_client_frame(f, last), m) << to_string(t);
    }
}

TEST(Wire, SequenceMustIncrease) {
    std::optional<std::uint32_t> last;
    ClientMessage m;
    m.seq = 5;
    decode_client_frame(encode_client_message(m), last);
    EXPECT_EQ(code_of([&] { decode_client_frame(encode_client_message(m), last); }), ErrorCode::SequenceRegression);
    m.seq = 4;
    EXPECT_EQ(code_of([&] { decode_client_frame(encode_client_message(m), last); }), ErrorCode::SequenceRegression);
    m.seq = 6;
    EXPECT_NO_THROW(decode_client_frame(encode_client_message(m), last));
}

TEST(Wire, MalformedClientFrames) {
    const std::vector<WireFrame> bad{
        WireFrame::text("not json"),
        WireFrame::text("[1,2]"),
        WireFrame::text(R"({"seq":1,"payload":{}})"),
        WireFrame::text(R"({"type":"hello","payload":{}})"),
        WireFrame::text(R"({"type":"hello","seq":-1,"payload":{}})"),
        WireFrame::text(R"({"type":"hello","seq":1})"),
        WireFrame::text(R"({"type":"dance","seq":1,"payload":{}})"),
        WireFrame::text(R"({"type":"audio","seq":1,"payload":{}})"),
        WireFrame::bytes(bytes({0x01, 0, 0})),
        WireFrame::bytes(bytes({0x07, 0, 0, 0, 1})),
        WireFrame::bytes(bytes({0x01, 0, 0, 0, 1, 5})),
    };
    for (const auto& f : bad) {
        std::optional<std::uint32_t> last;
        EXPECT_EQ(code_of([&] { decode_client_frame(f, last); }), ErrorCode::MalformedFrame) << f.data;
        EXPECT_FALSE(last.has_value());
    }
}

TEST(Wire, TtsChunkLayout) {
    const auto ev = Event::make("s", EventKind::TtsChunk, TtsChunkPayload{2, 3, {7, -1}}, 9);
    const auto f = encode_server_event(ev);
    EXPECT_TRUE(f.binary);
    EXPECT_EQ(f.data, bytes({0x02, 0, 0, 0, 9, 0, 2, 0, 3, 0x07, 0x00, 0xff, 0xff}));
    const auto back = decode_server_event(f);
    EXPECT_EQ(back.turn, 9u);
    EXPECT_EQ(back.as<TtsChunkPayload>(), (TtsChunkPayload{2, 3, {7, -1}}));
}

TEST(Wire, PackChunkIndex) {
    EXPECT_EQ(pack_chunk_index(0, 0), 0u);
    EXPECT_EQ(pack_chunk_index(1, 2), 0x00010002u);
    EXPECT_EQ(pack_chunk_index(0xffff, 0xffff), 0xffffffffu);
    EXPECT_THROW(pack_chunk_index(0x10000, 0), Error);
    EXPECT_THROW(pack_chunk_index(0, 0x10000), Error);
}

TEST(Wire, ServerEventsRoundTrip) {
    AsrPayload asr;
    asr.finalized = "今天";
    asr.volatile_text = "天气";
    asr.audio_ms = 1200;
    asr.tail_ms = 300;
    const std::vector<Event> events{
        Event::make("", EventKind::AsrPartial, asr, 1),
        Event::make("", EventKind::AsrFinal, asr, 1),
        Event::make("", EventKind::LlmToken, TextPayload{"好"}, 2),
        Event::make("", EventKind::LlmSentence, TextPayload{"好的。"}, 2),
        Event::make("", EventKind::TtsDone, Marker{}, 2),
        Event::make("", EventKind::PausePlayback, Marker{}, 2),
        Event::make("", EventKind::Resume, Marker{}, 2),
        Event::make("", EventKind::ThinkingStart, TextPayload{"q"}, 3),
        Event::make("", EventKind::ThinkingEnd, TextPayload{"summary"}, 3),
        Event::make("", EventKind::CaptionUpdated, CaptionPayload{"office", true}, 0),
        Event::make("", EventKind::SpeakerIdentified, SpeakerPayload{"spk_01", 0.875, false}, 1),
        Event::make("", EventKind::Metric, MetricPayload{"e2e_ms", 123.5}, 4),
    };
    for (const auto& ev : events) {
        const auto back = decode_server_event(encode_server_event(ev));
        EXPECT_EQ(back.kind, ev.kind) << to_string(ev.kind);
        EXPECT_EQ(back.turn, ev.turn);
        EXPECT_EQ(back.payload, ev.payload) << to_string(ev.kind);
    }
}

TEST(Wire, InternalEventsNotEncoded) {
    for (auto k : {EventKind::Flush, EventKind::Stop, EventKind::InterruptConfirmed, EventKind::AudioIn,
                   EventKind::VadEnd}) {
        Payload p = Marker{};
        if (k == EventKind::InterruptConfirmed) p = InterruptPayload{};
        if (k == EventKind::AudioIn) p = AudioPayload{};
        EXPECT_EQ(code_of([&] { encode_server_event(Event::make("s", k, p)); }), ErrorCode::NotClientVisible);
    }
}

TEST(Wire, ErrorCodesAndControlFrames) {
    EXPECT_EQ(wire_code(ErrorCode::OverCapacity), "over_capacity");
    EXPECT_EQ(wire_code(ErrorCode::MalformedFrame), "malformed_frame");
    const auto err = parse_server_frame(encode_error("over_capacity", "full"));
    EXPECT_EQ(err.type, "error");
    EXPECT_EQ(err.payload["code"], "over_capacity");
    const auto ack = parse_server_frame(encode_hello_ack("abc"));
    EXPECT_EQ(ack.type, "hello_ack");
    EXPECT_EQ(ack.payload["session_id"], "abc");
}

TEST(Listen, ParseAddress) {
    const auto a = parse_listen("127.0.0.1:8765");
    EXPECT_EQ(a.host, "127.0.0.1");
    EXPECT_EQ(a.port, 8765);
    EXPECT_EQ(parse_listen("[::1]:0").host, "::1");
    for (const auto* bad : {"8765", ":80", "host:", "host:99999", "host:8x"}) {
        EXPECT_EQ(code_of([&] { parse_listen(bad); }), ErrorCode::InvalidConfig) << bad;
    }
    EXPECT_TRUE(offers_subprotocol("chat, xtalk.v1", "xtalk.v1"));
    EXPECT_TRUE(offers_subprotocol("xtalk.v1", "xtalk.v1"));
    EXPECT_FALSE(offers_subprotocol("xtalk.v2", "xtalk.v1"));
    EXPECT_FALSE(offers_subprotocol("", "xtalk.v1"));
}

TEST(Config, DefaultsRoundTrip) {
    const AppConfig def;
    EXPECT_EQ(parse_config(to_json(def)), def);
    EXPECT_EQ(parse_config_text("{}"), def);
}

TEST(Config, ModifiedRoundTrip) {
    AppConfig c;
    c.max_sessions = 4;
    c.asr.mode = AsrMode::Offline;
    c.asr.window_W = 5;
    c.tts.latency = {100, 4, 2};
    c.rules.filler_words = {"嗯", "er"};
    c.rules.min_audio_ms = 650;
    c.side_channels.caption_period_ms = 2000;
    c.phatic.phrases = {"稍等。"};
    c.bench.lengths = {5, 60};
    c.bench.combos.pop_back();
    EXPECT_EQ(parse_config(to_json(c)), c);
}

TEST(Config, ErrorsNameTheKey) {
    EXPECT_NE(config_error(R"({"rules":{"filler_words":"嗯"}})").find("rules.filler_words"), std::string::npos);
    EXPECT_NE(config_error(R"({"rules":{"filler_words":[1]}})").find("rules.filler_words"), std::string::npos);
    EXPECT_NE(config_error(R"({"asr":{"window_W":1}})").find("asr.window_W"), std::string::npos);
    EXPECT_NE(config_error(R"({"asr":{"mode":"fast"}})").find("asr.mode"), std::string::npos);
    EXPECT_NE(config_error(R"({"limiter":{"max_sessions":"4"}})").find("limiter.max_sessions"), std::string::npos);
    EXPECT_NE(config_error(R"({"tts":{"latency":{"fixed_ms":-1}}})").find("tts.latency.fixed_ms"), std::string::npos);
    EXPECT_NE(config_error(R"({"side_channels":{"ema_alpha":0}})").find("side_channels.ema_alpha"),
              std::string::npos);
    EXPECT_NE(config_error(R"({"bogus":1})").find("bogus"), std::string::npos);
    EXPECT_NE(config_error(R"({"asr":{"windowW":3}})").find("asr.windowW"), std::string::npos);
    config_error("not json");
}

TEST(Config, LoadResolvesPathsAgainstFile) {
    const auto dir = std::filesystem::temp_directory_path() / "xtalk_cfg_test";
    std::filesystem::create_directories(dir);
    const auto file = dir / "c.json";
    {
        std::ofstream(file) << R"({"corpus": ")" << std::filesystem::absolute("scenarios/corpus").string() << R"("})";
    }
    EXPECT_EQ(load_config(file).corpus, std::filesystem::absolute("scenarios/corpus").lexically_normal().string());
    {
        std::ofstream(file) << R"({"corpus": "missing_dir"})";
    }
    try {
        load_config(file);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidConfig);
        EXPECT_NE(std::string(e.what()).find("corpus"), std::string::npos);
    }
    EXPECT_THROW(load_config(dir / "nope.json"), Error);
    std::filesystem::remove_all(dir);
}

TEST(Config, ShippedConfigLoads) {
    const auto c = load_config("config/xtalk.json");
    EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(c.corpus) / "utterances.json"));
    EXPECT_NO_THROW(validate_config(c));
}
