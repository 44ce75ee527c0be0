// Acceptance checks. Each criterion prints one "criterion N: PASS|FAIL ..." line.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <latch>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "xtalk/bench.hpp"
#include "xtalk/loopback.hpp"
#include "xtalk/session_runtime.hpp"

using namespace xtalk;
using namespace std::chrono_literals;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Ms = std::chrono::duration<double, std::milli>;

const std::vector<std::string> kSixClauses{"第一句话。", "第二句话。", "第三句话。",
                                           "第四句话。", "第五句话。", "第六句话。"};

nlohmann::json utterance_json(const std::string& id, int tag, std::int64_t ms, const std::string& transcript) {
    const auto chars = text::length(transcript);
    const auto chunks = static_cast<std::size_t>(ms / kDefaultChunkMs);
    std::vector<std::size_t> align(chunks);
    for (std::size_t k = 0; k < chunks; ++k) align[k] = chars * (k + 1) / chunks;
    return {{"id", id}, {"tag", tag}, {"lang", "cn"}, {"duration_ms", ms}, {"transcript", transcript},
            {"chunk_chars", align}};
}

/// The corpus plus interrupt utterances and scripted replies.
std::shared_ptr<const Scenario> interrupt_scenario() {
    auto s = std::make_shared<Scenario>(load_scenario("scenarios/corpus"));
    s->utterances->add(parse_utterance(utterance_json("int_short", 9001, 300, "请停一下"), kDefaultChunkMs));
    s->utterances->add(parse_utterance(utterance_json("int_empty", 9002, 800, ""), kDefaultChunkMs));
    s->utterances->add(parse_utterance(utterance_json("int_letter", 9003, 800, "a"), kDefaultChunkMs));
    s->utterances->add(parse_utterance(utterance_json("int_filler", 9004, 800, "嗯"), kDefaultChunkMs));
    s->utterances->add(parse_utterance(utterance_json("int_command", 9005, 1200, "请换一个话题"), kDefaultChunkMs));
    nlohmann::json six = nlohmann::json::array();
    for (const auto& c : kSixClauses) six.push_back(c);
    s->llm = parse_llm_script({
        {"rules",
         nlohmann::json::array({
             {{"match", "换一个话题"}, {"tokens", {"好的，", "我们", "聊点", "别的。"}}},
             {{"match", "六句"}, {"tokens", six}},
         })},
        {"fallback",
         {"好的，", "我来", "说明", "一下。", "第一点", "很重要。", "第二点", "也不错。", "第三点", "请注意。",
          "最后", "谢谢你。"}},
    });
    return s;
}

std::unique_ptr<Server> make_server(const AppConfig& cfg, std::shared_ptr<const Scenario> scenario) {
    return std::make_unique<Server>(cfg, make_mock_models(cfg, std::move(scenario)));
}

AppConfig quiet_config() {
    AppConfig cfg;
    cfg.side_channels.captioner_enabled = false;
    return cfg;
}

const Utterance& utterance(const Server& server, const std::string& id) {
    const auto* u = server.models().scenario->utterances->by_id(id);
    if (!u) throw Error(ErrorCode::ScenarioMissing, id);
    return *u;
}

std::string asr_final_text(const std::vector<ServerFrame>& frames) {
    for (const auto& f : frames) {
        if (f.type == "asr_final") return f.payload.value("text", std::string{});
    }
    return {};
}

std::optional<std::string> tap_reason(const LoopbackClient& client, EventKind kind) {
    for (const auto& e : client.entries()) {
        if (e.origin == LogEntry::Origin::Tap && e.event && e.event->kind == kind) {
            return e.event->as<InterruptPayload>().reason;
        }
    }
    return std::nullopt;
}

std::optional<std::size_t> index_of(const std::vector<ServerFrame>& frames, std::string_view type) {
    for (std::size_t i = 0; i < frames.size(); ++i) {
        if (frames[i].type == type) return i;
    }
    return std::nullopt;
}

/// Chunks of `turn` form (0,0),(0,1)..,(1,0).. without gaps and tts_done follows.
std::string continuity_error(const std::vector<ServerFrame>& frames, std::uint32_t turn) {
    std::optional<std::pair<std::uint32_t, std::uint32_t>> prev;
    bool done = false;
    for (const auto& f : frames) {
        if (f.turn_id != turn) continue;
        if (f.type == "tts_done") done = true;
        if (f.type != "tts_chunk") continue;
        if (done) return "chunk after tts_done";
        const std::pair<std::uint32_t, std::uint32_t> cur{f.clause, f.chunk};
        const bool ok = prev ? (cur == std::pair{prev->first, prev->second + 1} || cur == std::pair{prev->first + 1, 0u})
                             : cur == std::pair{0u, 0u};
        if (!ok) {
            return fmt::format("gap at clause {} chunk {} after {}", cur.first, cur.second,
                               prev ? fmt::format("{}:{}", prev->first, prev->second) : "start");
        }
        prev = cur;
    }
    if (!prev) return "no chunks";
    if (!done) return "no tts_done";
    return {};
}

std::size_t chunks_after(const std::vector<ServerFrame>& frames, std::size_t from, std::uint32_t turn) {
    std::size_t n = 0;
    for (std::size_t i = from; i < frames.size(); ++i) n += frames[i].type == "tts_chunk" && frames[i].turn_id == turn;
    return n;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

// 1. Pseudo-streaming final transcript equals offline over the corpus.
Outcome criterion_1() {
    auto corpus = std::make_shared<Scenario>(load_scenario("scenarios/corpus"));
    auto run = [&](AsrMode mode) {
        AppConfig cfg = quiet_config();
        cfg.asr.mode = mode;
        auto server = make_server(cfg, corpus);
        std::map<std::string, std::string> finals;
        for (const auto& u : corpus->utterances->all()) {
            LoopbackClient client(*server);
            client.hello();
            SpeakOptions opt;
            opt.lockstep = false;
            client.speak(u, opt);
            client.wait_for("asr_final", 1, std::nullopt, 30s);
            finals[u.id] = asr_final_text(client.frames());
            client.bye();
        }
        return finals;
    };
    const auto t0 = Clock::now();
    const auto pseudo = run(AsrMode::PseudoStreaming);
    const double pseudo_s = elapsed_ms(t0, Clock::now()) / 1000.0;
    const auto offline = run(AsrMode::Offline);
    std::size_t equal = 0;
    std::string first_diff;
    for (const auto& u : corpus->utterances->all()) {
        const bool same = pseudo.at(u.id) == offline.at(u.id) && !pseudo.at(u.id).empty();
        equal += same;
        if (!same && first_diff.empty()) first_diff = u.id;
    }
    const auto n = corpus->utterances->size();
    Outcome o;
    o.pass = n >= 50 && equal == n && pseudo_s < 60.0;
    o.detail = fmt::format("{}/{} utterances identical, pseudo-streaming pass {:.1f} s{}", equal, n, pseudo_s,
                           first_diff.empty() ? "" : ", first mismatch " + first_diff);
    return o;
}

BenchReport bench(std::vector<int> lengths, std::vector<std::string> combos, std::size_t runs) {
    AppConfig cfg;
    cfg.side_channels.captioner_enabled = false;
    cfg.bench.lengths = std::move(lengths);
    cfg.bench.langs = {"cn", "en"};
    cfg.bench.runs = runs;
    std::vector<BenchCombo> picked;
    for (const auto& c : cfg.bench.combos) {
        if (std::find(combos.begin(), combos.end(), c.name) != combos.end()) picked.push_back(c);
    }
    cfg.bench.combos = picked;
    return run_bench(cfg, std::make_shared<Scenario>(load_scenario("scenarios/corpus")));
}

// 2. Streaming e2e flat across lengths; offline e2e strictly increasing.
Outcome criterion_2() {
    const std::vector<int> lengths{5, 10, 30, 60};
    const auto report = bench(lengths, {"pseudo_streaming", "native_streaming", "offline"}, 2);
    Outcome o{true, ""};
    std::vector<std::string> parts;
    for (const std::string lang : {"cn", "en"}) {
        for (const std::string combo : {"pseudo_streaming", "native_streaming"}) {
            std::vector<double> e2e;
            for (int len : lengths) e2e.push_back(mean(report.find(combo, len, lang)->runs_ms));
            const double spread = *std::max_element(e2e.begin(), e2e.end()) - *std::min_element(e2e.begin(), e2e.end());
            o.pass = o.pass && spread < 100.0;
            parts.push_back(fmt::format("{} {} spread {:.0f} ms", combo, lang, spread));
        }
        std::vector<double> off;
        for (int len : lengths) off.push_back(mean(report.find("offline", len, lang)->runs_ms));
        bool increasing = true;
        for (std::size_t i = 1; i < off.size(); ++i) increasing = increasing && off[i] > off[i - 1];
        o.pass = o.pass && increasing;
        parts.push_back(fmt::format("offline {} {:.0f}/{:.0f}/{:.0f}/{:.0f} ms", lang, off[0], off[1], off[2], off[3]));
    }
    o.detail = fmt::format("{}", fmt::join(parts, "; "));
    return o;
}

// 3. e2e within [A+L+T, A+L+T+50 ms], 20 runs per combo.
Outcome criterion_3() {
    const auto report =
        bench({5, 10}, {"pseudo_streaming", "native_streaming", "offline", "pseudo_slow_backends"}, 5);
    std::map<std::string, std::size_t> runs;
    std::size_t inside = 0;
    std::size_t total = 0;
    double worst_low = 1e9;
    double worst_high = -1e9;
    for (const auto& row : report.rows) {
        for (double v : row.runs_ms) {
            ++total;
            ++runs[row.combo];
            const double d = v - row.bound_ms;
            worst_low = std::min(worst_low, d);
            worst_high = std::max(worst_high, d);
            inside += d >= 0.0 && d <= 50.0;
        }
    }
    bool enough = runs.size() == 4;
    for (const auto& [combo, n] : runs) enough = enough && n >= 20;
    return {enough && inside == total,
            fmt::format("{}/{} runs inside the bound over {} combos, e2e - (A+L+T) in [{:.1f}, {:.1f}] ms", inside,
                        total, runs.size(), worst_low, worst_high)};
}

// 4. Captioner (2 s latency) and speaker ID leave e2e unchanged.
Outcome criterion_4() {
    auto corpus = std::make_shared<Scenario>(load_scenario("scenarios/corpus"));
    AppConfig off;
    off.side_channels.captioner_enabled = false;
    off.side_channels.speaker_enabled = false;
    AppConfig on;
    on.side_channels.captioner_enabled = true;
    on.side_channels.speaker_enabled = true;
    on.side_channels.caption_latency = {2000, 0, 0};
    on.side_channels.caption_period_ms = 100;
    auto base = make_server(off, corpus);
    auto side = make_server(on, corpus);
    const auto& u = utterance(*base, "cn_05s_01");
    std::vector<double> a;
    std::vector<double> b;
    std::size_t speaker_frames = 0;
    for (int pair = 0; pair < 20; ++pair) {
        auto measure_side = [&] {
            const auto m = measure_turn(*side, u);
            speaker_frames += count_frames(m.frames, "speaker");
            if (m.complete) b.push_back(m.e2e_ms);
        };
        auto measure_base = [&] {
            const auto m = measure_turn(*base, u);
            if (m.complete) a.push_back(m.e2e_ms);
        };
        if (pair % 2) {
            measure_side();
            measure_base();
        } else {
            measure_base();
            measure_side();
        }
    }
    if (a.size() != 20 || b.size() != 20) return {false, fmt::format("incomplete turns: {} / {}", a.size(), b.size())};
    const double diff = mean(b) - mean(a);
    return {std::abs(diff) < 10.0 && speaker_frames >= 20,
            fmt::format("mean e2e {:.1f} ms without, {:.1f} ms with side channels (delta {:+.1f} ms), {} speaker frames",
                        mean(a), mean(b), diff, speaker_frames)};
}

AppConfig interrupt_config() {
    AppConfig cfg = quiet_config();
    cfg.llm.latency = {20, 2, 0};
    cfg.tts.latency = {150, 3, 0};
    return cfg;
}

struct InterruptRun {
    std::vector<ServerFrame> frames;
    std::optional<std::string> false_reason;
    std::optional<std::string> confirmed;
    bool finished = false;
};

InterruptRun barge_in(Server& server, const std::string& interrupt_id, std::uint32_t finish_turn) {
    InterruptRun r;
    LoopbackClient client(server);
    client.hello();
    client.tap(default_tap_kinds());
    client.speak(utterance(server, "cn_05s_01"));
    client.wait_for("tts_chunk", 1, 1u);
    SpeakOptions opt;
    opt.lockstep = false;
    client.speak(utterance(server, interrupt_id), opt);
    r.finished = client.wait_for("tts_done", 1, finish_turn);
    client.bye();
    r.frames = client.frames();
    r.false_reason = tap_reason(client, EventKind::FalseInterrupt);
    r.confirmed = tap_reason(client, EventKind::InterruptConfirmed);
    return r;
}

// 5. False-interrupt rule matrix end to end.
Outcome criterion_5() {
    auto server = make_server(interrupt_config(), interrupt_scenario());
    const std::vector<std::pair<std::string, std::string>> cases{
        {"int_short", "too_short"},
        {"int_empty", "empty_asr"},
        {"int_letter", "single_char"},
        {"int_filler", "filler_only"},
    };
    std::vector<std::string> parts;
    bool pass = true;
    for (const auto& [id, want] : cases) {
        const auto r = barge_in(*server, id, 1);
        std::string err;
        const auto pause = index_of(r.frames, "pause_playback");
        const auto resume = index_of(r.frames, "resume");
        if (r.false_reason != want) err = "reason " + r.false_reason.value_or("none");
        if (err.empty() && (!pause || !resume || *resume < *pause)) err = "missing pause/resume";
        if (err.empty() && r.confirmed) err = "confirmed";
        if (err.empty()) {
            for (std::size_t i = *pause; i < *resume; ++i) {
                if (r.frames[i].type == "tts_chunk") err = "chunk while paused";
            }
        }
        if (err.empty()) err = continuity_error(r.frames, 1);
        if (err.empty() && count_frames(r.frames, "llm_token", 2u) > 0) err = "new turn started";
        pass = pass && err.empty();
        parts.push_back(fmt::format("{}->{}", id, err.empty() ? want : err));
    }
    const auto r = barge_in(*server, "int_command", 2);
    std::string err;
    const auto pause = index_of(r.frames, "pause_playback");
    if (r.confirmed != "confirmed") err = "not confirmed";
    if (err.empty() && !pause) err = "no pause";
    if (err.empty() && chunks_after(r.frames, *pause, 1) > 0) err = "old chunks after pause";
    if (err.empty() && !r.finished) err = "no reply";
    if (err.empty() && count_frames(r.frames, "resume") > 0) err = "resumed";
    pass = pass && err.empty();
    parts.push_back(fmt::format("int_command->{}", err.empty() ? "Confirmed" : err));
    return {pass, fmt::format("{}", fmt::join(parts, ", "))};
}

// 6. No old-turn audio after a confirmed interrupt, randomized timing.
Outcome criterion_6() {
    auto cfg = interrupt_config();
    cfg.max_sessions = 16;
    auto server = make_server(cfg, interrupt_scenario());
    constexpr int kTrials = 200;
    constexpr int kThreads = 8;
    std::atomic<int> next{0};
    std::atomic<int> confirmed{0};
    std::atomic<int> leaks{0};
    std::atomic<int> unfinished{0};
    auto worker = [&] {
        for (int t = next++; t < kTrials; t = next++) {
            std::mt19937 rng(static_cast<std::uint32_t>(t) * 7919u + 1);
            LoopbackClient client(*server);
            client.hello();
            client.tap(default_tap_kinds());
            client.send(ClientType::TextInput, {{"text", "介绍一下"}});
            client.wait_for("llm_token", 1, 1u);
            std::this_thread::sleep_for(std::chrono::milliseconds(rng() % 350));
            SpeakOptions opt;
            opt.lockstep = false;
            client.speak(utterance(*server, "int_command"), opt);
            if (!client.wait_for("tts_done", 1, 2u)) ++unfinished;
            client.bye();
            const auto frames = client.frames();
            if (tap_reason(client, EventKind::InterruptConfirmed)) ++confirmed;
            const auto pause = index_of(frames, "pause_playback");
            if (!pause || chunks_after(frames, *pause, 1) > 0) ++leaks;
        }
    };
    std::vector<std::jthread> pool;
    for (int i = 0; i < kThreads; ++i) pool.emplace_back(worker);
    pool.clear();
    return {confirmed == kTrials && leaks == 0 && unfinished == 0,
            fmt::format("{} trials, {} confirmed, {} with old-turn chunks after the interrupt, {} unfinished", kTrials,
                        confirmed.load(), leaks.load(), unfinished.load())};
}

// 7. Ordered, loss-free playback for any clause completion order.
Outcome criterion_7() {
    auto cfg = quiet_config();
    cfg.llm.latency = {};
    cfg.tts.concurrency = 6;
    auto server = make_server(cfg, interrupt_scenario());
    auto* tts = dynamic_cast<MockTts*>(server->models().handles.tts.get());
    MockTts reference(LatencyProfile{}, cfg.tts.chars_per_second);
    std::vector<std::int16_t> expected;
    std::stop_source never;
    for (const auto& c : kSixClauses) {
        const auto pcm = reference.synthesize(c, "tim_default", "neutral", never.get_token()).pcm;
        expected.insert(expected.end(), pcm.begin(), pcm.end());
    }
    std::mt19937 rng(77);
    std::vector<int> rank(6);
    std::set<std::vector<int>> distinct;
    int ok = 0;
    std::string first_err;
    for (int trial = 0; trial < 200; ++trial) {
        std::iota(rank.begin(), rank.end(), 0);
        std::shuffle(rank.begin(), rank.end(), rng);
        distinct.insert(rank);
        tts->set_latency_override([&](const std::string& t) {
            const auto it = std::find(kSixClauses.begin(), kSixClauses.end(), t);
            return it == kSixClauses.end() ? 0.0 : 5.0 + 12.0 * rank[static_cast<std::size_t>(it - kSixClauses.begin())];
        });
        LoopbackClient client(*server);
        client.hello();
        client.send(ClientType::TextInput, {{"text", "请说六句"}});
        const bool done = client.wait_for("tts_done", 1, 1u);
        client.bye();
        const auto frames = client.frames();
        std::vector<std::int16_t> played;
        std::uint32_t last_clause = 0;
        for (const auto& f : frames) {
            if (f.type != "tts_chunk" || f.turn_id != 1u) continue;
            played.insert(played.end(), f.pcm.begin(), f.pcm.end());
            last_clause = f.clause;
        }
        std::string err = done ? continuity_error(frames, 1) : "no tts_done";
        if (err.empty() && last_clause != 5) err = "missing clauses";
        if (err.empty() && played != expected) err = "PCM differs";
        if (err.empty()) {
            ++ok;
        } else if (first_err.empty()) {
            first_err = fmt::format("trial {}: {}", trial, err);
        }
    }
    tts->set_latency_override(nullptr);
    return {ok == 200, fmt::format("{}/200 turns played in clause order with identical PCM, {} distinct orders{}", ok,
                                   distinct.size(), first_err.empty() ? "" : ", " + first_err)};
}

struct Signature {
    std::string asr_final;
    std::vector<std::string> sentences;
    std::vector<std::int16_t> pcm;
    bool partials_prefix = true;
    bool operator==(const Signature& o) const {
        return asr_final == o.asr_final && sentences == o.sentences && pcm == o.pcm && partials_prefix == o.partials_prefix;
    }
};

Signature run_signature(Server& server, const Utterance& u, std::mt19937& rng, bool randomize) {
    LoopbackClient client(server);
    client.hello();
    if (randomize) std::this_thread::sleep_for(std::chrono::microseconds(rng() % 20000));
    SpeakOptions opt;
    opt.lockstep = !randomize || rng() % 2;
    opt.pace_ms = randomize ? static_cast<double>(rng() % 3) * 0.5 : 0.0;
    client.speak(u, opt);
    client.wait_for("tts_done", 1, 1u, 30s);
    client.bye();
    Signature s;
    for (const auto& f : client.frames()) {
        if (f.type == "asr_final") s.asr_final = f.payload.value("text", std::string{});
        if (f.type == "asr_partial") {
            s.partials_prefix = s.partials_prefix && text::starts_with(u.transcript, f.payload.value("text", std::string{}));
        }
        if (f.type == "llm_sentence") s.sentences.push_back(f.payload.value("text", std::string{}));
        if (f.type == "tts_chunk") s.pcm.insert(s.pcm.end(), f.pcm.begin(), f.pcm.end());
    }
    return s;
}

// 8. Session isolation and admission control.
Outcome criterion_8() {
    auto corpus = std::make_shared<Scenario>(load_scenario("scenarios/corpus"));
    auto cfg = quiet_config();
    cfg.asr.latency = {};
    cfg.llm.latency = {};
    cfg.tts.latency = {5, 0, 0};
    auto server = make_server(cfg, corpus);
    std::vector<const Utterance*> utts;
    for (const auto& u : corpus->utterances->all()) {
        if (u.duration_ms <= 10000 && utts.size() < 8) utts.push_back(&u);
    }
    std::mt19937 seed_rng(8);
    std::vector<Signature> reference;
    for (const auto* u : utts) reference.push_back(run_signature(*server, *u, seed_rng, false));

    int leaked = 0;
    for (int round = 0; round < 100; ++round) {
        std::vector<Signature> got(utts.size());
        {
            std::vector<std::jthread> threads;
            for (std::size_t i = 0; i < utts.size(); ++i) {
                threads.emplace_back([&, i] {
                    std::mt19937 rng(static_cast<std::uint32_t>(round * 100 + i));
                    got[i] = run_signature(*server, *utts[i], rng, true);
                });
            }
        }
        for (std::size_t i = 0; i < utts.size(); ++i) leaked += !(got[i] == reference[i]) || !got[i].partials_prefix;
    }
    const bool clean = server->live_sessions() == 0 && PipelineState::live_instances() == 0 &&
                       server->bus().scope_count() == 0;

    auto limited_cfg = quiet_config();
    limited_cfg.max_sessions = 4;
    auto limited = make_server(limited_cfg, corpus);
    constexpr int kRacers = 64;
    std::latch start(kRacers);
    std::latch attempted(kRacers);
    std::atomic<int> accepted{0};
    {
        std::vector<std::jthread> racers;
        for (int i = 0; i < kRacers; ++i) {
            racers.emplace_back([&] {
                LoopbackClient client(*limited);
                start.arrive_and_wait();
                accepted += client.hello();
                attempted.arrive_and_wait();
                client.bye();
            });
        }
    }
    const auto peak = limited->limiter().peak();
    const auto active_after = limited->limiter().active();
    const bool pass = utts.size() == 8 && leaked == 0 && clean && accepted == 4 && peak <= 4 && active_after == 0;
    return {pass, fmt::format("{} sessions x 100 interleavings, {} mismatches, state released: {}; "
                              "64 racing opens: {} accepted, peak active {}",
                              utts.size(), leaked, clean ? "yes" : "no", accepted.load(), peak)};
}

// 9. A Flush overtakes 100 queued DATA events.
Outcome criterion_9() {
    int first = 0;
    for (int trial = 0; trial < 100; ++trial) {
        EventBus bus;
        const SessionId s = "s" + std::to_string(trial);
        auto sub = bus.subscribe(s, "consumer", {EventKind::LlmToken, EventKind::Flush});
        std::mutex mu;
        std::condition_variable cv;
        bool gate_open = false;
        bool blocked = false;
        std::vector<EventKind> handled;
        {
            SubscriptionWorker worker(bus, sub, [&](const Event& e) {
                std::unique_lock lock(mu);
                if (handled.empty() && !blocked) {
                    blocked = true;
                    cv.notify_all();
                    cv.wait(lock, [&] { return gate_open; });
                }
                handled.push_back(e.kind);
                cv.notify_all();
            });
            bus.publish(Event::make(s, EventKind::SessionOpen));
            bus.publish(Event::make(s, EventKind::LlmToken, TextPayload{"busy"}));
            {
                std::unique_lock lock(mu);
                cv.wait(lock, [&] { return blocked; });
            }
            for (int i = 0; i < 100; ++i) bus.publish(Event::make(s, EventKind::LlmToken, TextPayload{std::to_string(i)}));
            bus.publish(Event::make(s, EventKind::Flush));
            {
                std::unique_lock lock(mu);
                gate_open = true;
                cv.notify_all();
                cv.wait_for(lock, 5s, [&] { return handled.size() == 102; });
            }
        }
        first += handled.size() == 102 && handled[1] == EventKind::Flush;
    }
    return {first == 100, fmt::format("{}/100 trials delivered the Flush before the queued DATA", first)};
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// 10. Golden replays are byte-identical.
Outcome criterion_10() {
    std::vector<std::filesystem::path> dirs;
    for (const auto& e : std::filesystem::directory_iterator("scenarios/golden")) {
        if (e.is_directory()) dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    std::size_t same = 0;
    std::vector<std::string> bad;
    for (const auto& d : dirs) {
        const auto golden = read_file(d / "golden.log");
        bool ok = std::filesystem::exists(d / "golden.log");
        for (int rep = 0; rep < 2 && ok; ++rep) ok = replay_scenario(d, AppConfig{}) == golden;
        same += ok;
        if (!ok) bad.push_back(d.filename().string());
    }
    return {!dirs.empty() && same == dirs.size(),
            fmt::format("{}/{} scenarios replayed identically twice{}", same, dirs.size(),
                        bad.empty() ? "" : fmt::format(", differing: {}", fmt::join(bad, " ")))};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::vector<int> which;
    app.add_option("--criterion", which, "Criterion numbers (default: all)")->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::warn);
    if (which.empty()) {
        which.resize(10);
        std::iota(which.begin(), which.end(), 1);
    }
    const std::vector<std::function<Outcome()>> checks{criterion_1, criterion_2, criterion_3, criterion_4,
                                                       criterion_5, criterion_6, criterion_7, criterion_8,
                                                       criterion_9, criterion_10};
    int failed = 0;
    for (int n : which) {
        Outcome o;
        const auto t0 = Clock::now();
        try {
            o = checks[static_cast<std::size_t>(n - 1)]();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        std::cout << fmt::format("criterion {}: {} {} ({:.1f} s)", n, o.pass ? "PASS" : "FAIL", o.detail,
                                 elapsed_ms(t0, Clock::now()) / 1000.0)
                  << std::endl;
        failed += !o.pass;
    }
    return failed == 0 ? 0 : 1;
}
