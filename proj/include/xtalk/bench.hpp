#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <future>
#include <iomanip>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "xtalk/loopback.hpp"

namespace xtalk {

/// Analytic critical path of one turn under mock latencies (jitter excluded).
struct CriticalPath {
    double asr_ms = 0.0;   // A: ASR work left at VadEnd
    double llm_ms = 0.0;   // L: time to the first complete sentence
    double tts_ms = 0.0;   // T: synthesis of the first clause
    double total() const { return asr_ms + llm_ms + tts_ms; }
};

/// A: the recognizer's call at VadEnd over `tail_ms` of unflushed audio.
inline double asr_tail_cost(AsrMode mode, const LatencyProfile& p, std::int64_t tail_ms) {
    const double tail_s = static_cast<double>(tail_ms) / 1000.0;
    if (mode == AsrMode::Streaming) return (tail_ms > 0 ? p.cost(tail_s) : 0.0) + p.fixed_ms;
    return p.cost(tail_s);
}

/// L and the first clause for the scripted reply to `user_text`.
inline std::pair<double, std::string> first_sentence(const AppConfig& cfg, const MockLlm& llm,
                                                     const std::string& user_text) {
    SentenceSegmenter seg(cfg.segmenter.min_len, cfg.segmenter.max_len);
    const auto items = llm.select("user: " + user_text + "\n");
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].type != LlmItem::Type::Token) break;
        auto done = seg.on_token(items[i].text);
        if (!done.empty()) return {llm.profile().cost(static_cast<double>(i + 1)), done.front()};
    }
    auto rest = seg.finish();
    return {llm.profile().cost(static_cast<double>(items.size())), rest.value_or("")};
}

inline CriticalPath critical_path(const AppConfig& cfg, const MockLlm& llm, const std::string& transcript,
                                  std::int64_t asr_tail_ms) {
    CriticalPath cp;
    cp.asr_ms = asr_tail_cost(cfg.asr.mode, cfg.asr.latency, asr_tail_ms);
    const auto [l, clause] = first_sentence(cfg, llm, transcript);
    cp.llm_ms = l;
    cp.tts_ms = cfg.tts.latency.cost(static_cast<double>(text::length(clause)));
    return cp;
}

struct TurnMeasurement {
    bool complete = false;
    double e2e_ms = 0.0;
    std::int64_t asr_tail_ms = 0;
    CriticalPath bound;
    std::string transcript;
    LatencyTrace trace;
    std::vector<ServerFrame> frames;
};

/// One scripted session: hello, speak `u`, wait for the first turn's audio
/// to finish, bye.
inline TurnMeasurement measure_turn(Server& server, const Utterance& u,
                                    std::chrono::milliseconds timeout = std::chrono::milliseconds(30000)) {
    TurnMeasurement m;
    LoopbackClient client(server);
    if (!client.hello()) throw Error(ErrorCode::OverCapacity, "bench session rejected");
    auto session = client.session();
    SpeakOptions opt;
    opt.lockstep = server.config().asr.mode != AsrMode::Offline;
    client.speak(u, opt);
    const bool done = client.wait_for("tts_done", 1, 1u, timeout);
    const auto trace = session->tracer().get(1);
    client.bye();
    m.frames = client.frames();
    for (const auto& f : m.frames) {
        if (f.type == "asr_final") {
            m.asr_tail_ms = f.payload.value("tail_ms", std::int64_t{0});
            m.transcript = f.payload.value("text", std::string{});
        }
    }
    if (done && trace && trace->has(TracePoint::VadEnd) && trace->has(TracePoint::TtsFirstChunk)) {
        m.complete = true;
        m.trace = *trace;
        m.e2e_ms = compute_e2e(*trace);
    }
    const auto* llm = dynamic_cast<const MockLlm*>(server.models().handles.llm.get());
    if (llm && !m.transcript.empty()) m.bound = critical_path(server.config(), *llm, m.transcript, m.asr_tail_ms);
    return m;
}

struct BenchRow {
    std::string combo;
    std::string asr_mode;
    int length_s = 0;
    std::string lang;
    std::string utterance;
    std::vector<double> runs_ms;
    double bound_ms = 0.0;
    long e2e_ms = 0;  // rounded mean

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["config"] = combo;
        j["asr_mode"] = asr_mode;
        j["length_s"] = length_s;
        j["lang"] = lang;
        j["utterance"] = utterance;
        j["runs"] = runs_ms.size();
        j["e2e_ms"] = e2e_ms;
        j["bound_ms"] = std::lround(bound_ms);
        return j;
    }
};

struct BenchReport {
    std::vector<BenchRow> rows;

    std::string table() const {
        std::ostringstream out;
        out << fmt::format("{:<22} {:<17} {:>6} {:>4} {:>8} {:>9}\n", "config", "asr_mode", "len_s", "lang", "e2e_ms",
                           "bound_ms");
        for (const auto& r : rows) {
            out << fmt::format("{:<22} {:<17} {:>6} {:>4} {:>8} {:>9}\n", r.combo, r.asr_mode, r.length_s, r.lang,
                               r.e2e_ms, std::lround(r.bound_ms));
        }
        return out.str();
    }

    std::string jsonl() const {
        std::string out;
        for (const auto& r : rows) out += r.to_json().dump() + "\n";
        return out;
    }

    const BenchRow* find(const std::string& combo, int length_s, const std::string& lang) const {
        for (const auto& r : rows) {
            if (r.combo == combo && r.length_s == length_s && r.lang == lang) return &r;
        }
        return nullptr;
    }
};

inline AppConfig apply_combo(AppConfig cfg, const BenchCombo& combo) {
    cfg.asr.mode = combo.asr_mode;
    cfg.asr.latency = combo.asr;
    cfg.llm.latency = combo.llm;
    cfg.tts.latency = combo.tts;
    return cfg;
}

/// First corpus utterance of the given length and language.
inline const Utterance* pick_utterance(const UtteranceTable& table, int length_s, const std::string& lang) {
    for (const auto& u : table.all()) {
        if (u.duration_ms == static_cast<std::int64_t>(length_s) * 1000 && u.lang == lang) return &u;
    }
    return nullptr;
}

/// Runs every (combo, length, language) cell `cfg.bench.runs` times. Cells
/// run concurrently up to `cfg.bench.parallel`; runs inside a cell are
/// sequential.
inline BenchReport run_bench(const AppConfig& cfg, std::shared_ptr<const Scenario> corpus) {
    if (!corpus || corpus->utterances->size() == 0) throw Error(ErrorCode::ScenarioMissing, "empty corpus");
    struct Cell {
        const BenchCombo* combo;
        int length_s;
        std::string lang;
        const Utterance* utt;
    };
    std::vector<Cell> cells;
    for (const auto& combo : cfg.bench.combos) {
        for (int len : cfg.bench.lengths) {
            for (const auto& lang : cfg.bench.langs) {
                const auto* u = pick_utterance(*corpus->utterances, len, lang);
                if (!u) {
                    throw Error(ErrorCode::ScenarioMissing,
                                "no corpus utterance for " + std::to_string(len) + " s " + lang);
                }
                cells.push_back({&combo, len, lang, u});
            }
        }
    }

    std::vector<std::unique_ptr<Server>> servers;
    std::vector<std::size_t> server_of(cells.size());
    for (std::size_t i = 0; i < cfg.bench.combos.size(); ++i) {
        auto c = apply_combo(cfg, cfg.bench.combos[i]);
        c.max_sessions = std::max<std::size_t>(c.max_sessions, cfg.bench.parallel);
        servers.push_back(std::make_unique<Server>(c, make_mock_models(c, corpus)));
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
        server_of[i] = static_cast<std::size_t>(cells[i].combo - cfg.bench.combos.data());
    }

    std::vector<BenchRow> rows(cells.size());
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::optional<Error> failure;
    auto worker = [&] {
        for (auto i = next++; i < cells.size(); i = next++) {
            const auto& cell = cells[i];
            auto& row = rows[i];
            row.combo = cell.combo->name;
            row.asr_mode = std::string(to_string(cell.combo->asr_mode));
            row.length_s = cell.length_s;
            row.lang = cell.lang;
            row.utterance = cell.utt->id;
            try {
                for (std::size_t r = 0; r < cfg.bench.runs; ++r) {
                    auto m = measure_turn(*servers[server_of[i]], *cell.utt);
                    if (!m.complete) throw Error(ErrorCode::IncompleteTrace, "bench turn did not finish: " + row.utterance);
                    row.runs_ms.push_back(m.e2e_ms);
                    row.bound_ms = m.bound.total();
                }
            } catch (const Error& e) {
                std::lock_guard lock(err_mu);
                if (!failure) failure = e;
                return;
            }
            double sum = 0.0;
            for (double v : row.runs_ms) sum += v;
            row.e2e_ms = std::lround(sum / static_cast<double>(row.runs_ms.size()));
        }
    };
    std::vector<std::jthread> pool;
    const auto n = std::min<std::size_t>(std::max<std::size_t>(cfg.bench.parallel, 1), cells.size());
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    pool.clear();
    if (failure) throw *failure;
    return {std::move(rows)};
}

}  // namespace xtalk
