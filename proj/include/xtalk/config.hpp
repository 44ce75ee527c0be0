#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xtalk/asr_stage.hpp"
#include "xtalk/dialogue_agent.hpp"
#include "xtalk/mock_backends.hpp"
#include "xtalk/turn_taking.hpp"

namespace xtalk {

struct BenchCombo {
    std::string name;
    AsrMode asr_mode = AsrMode::PseudoStreaming;
    LatencyProfile asr;
    LatencyProfile llm;
    LatencyProfile tts;
    bool operator==(const BenchCombo&) const = default;
};

inline std::vector<BenchCombo> default_bench_combos() {
    return {
        {"pseudo_streaming", AsrMode::PseudoStreaming, {2, 2, 0}, {40, 8, 0}, {60, 3, 0}},
        {"native_streaming", AsrMode::Streaming, {2, 0, 0}, {40, 8, 0}, {60, 3, 0}},
        {"offline", AsrMode::Offline, {20, 20, 0}, {40, 8, 0}, {60, 3, 0}},
        {"pseudo_slow_backends", AsrMode::PseudoStreaming, {3, 4, 0}, {80, 15, 0}, {120, 5, 0}},
    };
}

struct AppConfig {
    std::string listen = "127.0.0.1:8765";
    std::size_t max_sessions = 16;
    std::int64_t chunk_ms = 100;
    std::string corpus = "scenarios/corpus";
    bool telemetry = true;

    struct Asr {
        AsrMode mode = AsrMode::PseudoStreaming;
        std::size_t window_W = 3;
        LatencyProfile latency{2, 2, 0};
        bool operator==(const Asr&) const = default;
    } asr;

    struct Llm {
        LatencyProfile latency{40, 8, 0};
        std::string script;  // empty: the corpus llm_script.json
        bool operator==(const Llm&) const = default;
    } llm;

    struct Tts {
        LatencyProfile latency{60, 3, 0};
        double chars_per_second = 5.0;
        std::size_t concurrency = 2;
        bool native_emotion_control = false;
        bool operator==(const Tts&) const = default;
    } tts;

    FalseInterruptRules rules;
    std::int64_t verify_deadline_ms = 10000;

    struct SideChannels {
        std::int64_t caption_period_ms = 10000;
        std::int64_t window_ms = 15000;
        double ema_alpha = 0.1;
        double similarity_threshold = 0.6;
        bool captioner_enabled = true;
        bool speaker_enabled = true;
        bool rewriter_enabled = false;
        bool emotion_enabled = false;  // reserved slot, folded into captions
        LatencyProfile caption_latency{50, 0, 0};
        LatencyProfile rewrite_latency{20, 0, 0};
        LatencyProfile embed_latency{10, 0, 0};
        bool operator==(const SideChannels&) const = default;
    } side_channels;

    PhaticPolicy phatic;

    struct Segmenter {
        std::size_t min_len = 4;
        std::size_t max_len = 80;
        bool operator==(const Segmenter&) const = default;
    } segmenter;

    struct Thinking {
        LatencyProfile latency{300, 0, 0};
        bool operator==(const Thinking&) const = default;
    } thinking;

    struct Bench {
        std::size_t runs = 3;
        std::vector<int> lengths{5, 10, 30, 60};
        std::vector<std::string> langs{"cn", "en"};
        std::size_t parallel = 4;
        std::vector<BenchCombo> combos = default_bench_combos();
        bool operator==(const Bench&) const = default;
    } bench;

    bool operator==(const AppConfig&) const = default;
};

namespace detail {

class ConfigReader {
public:
    ConfigReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) fail(path_.empty() ? "<root>" : path_, "expected object");
    }

    ~ConfigReader() noexcept(false) {
        if (std::uncaught_exceptions() > 0) return;
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) fail(key(it.key()), "unknown key");
        }
    }

    [[noreturn]] static void fail(const std::string& key, const std::string& what) {
        throw Error(ErrorCode::InvalidConfig, "config key '" + key + "': " + what);
    }

    std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

    const nlohmann::json* find(const std::string& k) {
        seen_.insert(k);
        auto it = j_.find(k);
        return it == j_.end() ? nullptr : &*it;
    }

    void read(const std::string& k, bool& out) {
        if (auto v = find(k)) {
            if (!v->is_boolean()) fail(key(k), "expected boolean");
            out = v->get<bool>();
        }
    }

    void read(const std::string& k, std::string& out) {
        if (auto v = find(k)) {
            if (!v->is_string()) fail(key(k), "expected string");
            out = v->get<std::string>();
        }
    }

    void read(const std::string& k, double& out, double lo, double hi) {
        if (auto v = find(k)) {
            if (!v->is_number()) fail(key(k), "expected number");
            out = v->get<double>();
        }
        if (!(out >= lo && out <= hi)) fail(key(k), "out of range [" + num(lo) + ", " + num(hi) + "]");
    }

    template <typename Int>
    void read_int(const std::string& k, Int& out, std::int64_t lo, std::int64_t hi) {
        if (auto v = find(k)) {
            if (!v->is_number_integer()) fail(key(k), "expected integer");
            const auto x = v->get<std::int64_t>();
            if (x < lo || x > hi) fail(key(k), "out of range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
            out = static_cast<Int>(x);
        }
    }

    void read(const std::string& k, std::vector<std::string>& out, bool non_empty) {
        if (auto v = find(k)) {
            if (!v->is_array()) fail(key(k), "expected array of strings");
            std::vector<std::string> r;
            for (const auto& e : *v) {
                if (!e.is_string()) fail(key(k), "expected array of strings");
                r.push_back(e.get<std::string>());
            }
            out = std::move(r);
        }
        if (non_empty && out.empty()) fail(key(k), "must not be empty");
    }

    void read(const std::string& k, LatencyProfile& out) {
        if (auto v = find(k)) {
            ConfigReader r(*v, key(k));
            r.read("fixed_ms", out.fixed_ms, 0.0, 600000.0);
            r.read("per_unit_ms", out.per_unit_ms, 0.0, 600000.0);
            r.read("jitter_ms", out.jitter_ms, 0.0, 600000.0);
        }
    }

    template <typename F>
    void section(const std::string& k, F&& f) {
        if (auto v = find(k)) {
            ConfigReader r(*v, key(k));
            f(r);
        }
    }

private:
    static std::string num(double d) {
        std::ostringstream s;
        s << d;
        return s.str();
    }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace detail

/// Parses and range-checks a config document. Missing keys keep defaults;
/// unknown keys and wrong types are rejected with the offending key named.
inline AppConfig parse_config(const nlohmann::json& j) {
    AppConfig c;
    detail::ConfigReader r(j, "");
    r.read("listen", c.listen);
    r.section("limiter", [&](detail::ConfigReader& s) { s.read_int("max_sessions", c.max_sessions, 1, 100000); });
    r.read_int("chunk_ms", c.chunk_ms, 10, 1000);
    r.read("corpus", c.corpus);
    r.read("telemetry", c.telemetry);
    r.section("asr", [&](detail::ConfigReader& s) {
        std::string mode(to_string(c.asr.mode));
        s.read("mode", mode);
        try {
            c.asr.mode = parse_asr_mode(mode);
        } catch (const Error&) {
            detail::ConfigReader::fail("asr.mode", "expected streaming|pseudo_streaming|offline");
        }
        s.read_int("window_W", c.asr.window_W, 2, 64);
        s.read("latency", c.asr.latency);
    });
    r.section("llm", [&](detail::ConfigReader& s) {
        s.read("latency", c.llm.latency);
        s.read("script", c.llm.script);
    });
    r.section("tts", [&](detail::ConfigReader& s) {
        s.read("latency", c.tts.latency);
        s.read("chars_per_second", c.tts.chars_per_second, 0.1, 1000.0);
        s.read_int("concurrency", c.tts.concurrency, 1, 64);
        s.read("native_emotion_control", c.tts.native_emotion_control);
    });
    r.section("rules", [&](detail::ConfigReader& s) {
        s.read_int("min_audio_ms", c.rules.min_audio_ms, 0, 60000);
        s.read("filler_words", c.rules.filler_words, false);
        s.read("single_char_reject", c.rules.single_char_reject);
        s.read_int("verify_deadline_ms", c.verify_deadline_ms, 1, 600000);
    });
    r.section("side_channels", [&](detail::ConfigReader& s) {
        auto& sc = c.side_channels;
        s.read_int("caption_period_ms", sc.caption_period_ms, 1, 3600000);
        s.read_int("window_ms", sc.window_ms, 100, 600000);
        s.read("ema_alpha", sc.ema_alpha, 1e-9, 1.0);
        s.read("similarity_threshold", sc.similarity_threshold, -1.0, 1.0);
        s.read("captioner_enabled", sc.captioner_enabled);
        s.read("speaker_enabled", sc.speaker_enabled);
        s.read("rewriter_enabled", sc.rewriter_enabled);
        s.read("emotion_enabled", sc.emotion_enabled);
        s.read("caption_latency", sc.caption_latency);
        s.read("rewrite_latency", sc.rewrite_latency);
        s.read("embed_latency", sc.embed_latency);
    });
    r.section("phatic", [&](detail::ConfigReader& s) {
        s.read("threshold_ms", c.phatic.threshold_ms, 0.0, 600000.0);
        s.read("phrases", c.phatic.phrases, true);
    });
    r.section("segmenter", [&](detail::ConfigReader& s) {
        s.read_int("min_len", c.segmenter.min_len, 1, 10000);
        s.read_int("max_len", c.segmenter.max_len, 1, 10000);
        if (c.segmenter.max_len < c.segmenter.min_len) {
            detail::ConfigReader::fail("segmenter.max_len", "must be >= segmenter.min_len");
        }
    });
    r.section("thinking", [&](detail::ConfigReader& s) { s.read("latency", c.thinking.latency); });
    r.section("bench", [&](detail::ConfigReader& s) {
        auto& b = c.bench;
        s.read_int("runs", b.runs, 1, 1000);
        s.read_int("parallel", b.parallel, 1, 256);
        s.read("langs", b.langs, true);
        if (auto v = s.find("lengths")) {
            if (!v->is_array()) detail::ConfigReader::fail("bench.lengths", "expected array of integers");
            b.lengths.clear();
            for (const auto& e : *v) {
                if (!e.is_number_integer() || e.get<int>() <= 0) {
                    detail::ConfigReader::fail("bench.lengths", "expected array of positive integers");
                }
                b.lengths.push_back(e.get<int>());
            }
        }
        if (auto v = s.find("combos")) {
            if (!v->is_array()) detail::ConfigReader::fail("bench.combos", "expected array");
            b.combos.clear();
            for (std::size_t i = 0; i < v->size(); ++i) {
                BenchCombo combo;
                detail::ConfigReader cr((*v)[i], "bench.combos[" + std::to_string(i) + "]");
                cr.read("name", combo.name);
                std::string mode(to_string(combo.asr_mode));
                cr.read("asr_mode", mode);
                try {
                    combo.asr_mode = parse_asr_mode(mode);
                } catch (const Error&) {
                    detail::ConfigReader::fail(cr.key("asr_mode"), "expected streaming|pseudo_streaming|offline");
                }
                cr.read("asr", combo.asr);
                cr.read("llm", combo.llm);
                cr.read("tts", combo.tts);
                if (combo.name.empty()) detail::ConfigReader::fail(cr.key("name"), "must not be empty");
                b.combos.push_back(std::move(combo));
            }
        }
    });
    return c;
}

inline nlohmann::ordered_json to_json(const AppConfig& c) {
    auto lat = [](const LatencyProfile& p) {
        nlohmann::ordered_json j;
        j["fixed_ms"] = p.fixed_ms;
        j["per_unit_ms"] = p.per_unit_ms;
        j["jitter_ms"] = p.jitter_ms;
        return j;
    };
    nlohmann::ordered_json j;
    j["listen"] = c.listen;
    j["limiter"]["max_sessions"] = c.max_sessions;
    j["chunk_ms"] = c.chunk_ms;
    j["corpus"] = c.corpus;
    j["telemetry"] = c.telemetry;
    j["asr"]["mode"] = to_string(c.asr.mode);
    j["asr"]["window_W"] = c.asr.window_W;
    j["asr"]["latency"] = lat(c.asr.latency);
    j["llm"]["latency"] = lat(c.llm.latency);
    j["llm"]["script"] = c.llm.script;
    j["tts"]["latency"] = lat(c.tts.latency);
    j["tts"]["chars_per_second"] = c.tts.chars_per_second;
    j["tts"]["concurrency"] = c.tts.concurrency;
    j["tts"]["native_emotion_control"] = c.tts.native_emotion_control;
    j["rules"]["min_audio_ms"] = c.rules.min_audio_ms;
    j["rules"]["filler_words"] = c.rules.filler_words;
    j["rules"]["single_char_reject"] = c.rules.single_char_reject;
    j["rules"]["verify_deadline_ms"] = c.verify_deadline_ms;
    const auto& sc = c.side_channels;
    j["side_channels"]["caption_period_ms"] = sc.caption_period_ms;
    j["side_channels"]["window_ms"] = sc.window_ms;
    j["side_channels"]["ema_alpha"] = sc.ema_alpha;
    j["side_channels"]["similarity_threshold"] = sc.similarity_threshold;
    j["side_channels"]["captioner_enabled"] = sc.captioner_enabled;
    j["side_channels"]["speaker_enabled"] = sc.speaker_enabled;
    j["side_channels"]["rewriter_enabled"] = sc.rewriter_enabled;
    j["side_channels"]["emotion_enabled"] = sc.emotion_enabled;
    j["side_channels"]["caption_latency"] = lat(sc.caption_latency);
    j["side_channels"]["rewrite_latency"] = lat(sc.rewrite_latency);
    j["side_channels"]["embed_latency"] = lat(sc.embed_latency);
    j["phatic"]["threshold_ms"] = c.phatic.threshold_ms;
    j["phatic"]["phrases"] = c.phatic.phrases;
    j["segmenter"]["min_len"] = c.segmenter.min_len;
    j["segmenter"]["max_len"] = c.segmenter.max_len;
    j["thinking"]["latency"] = lat(c.thinking.latency);
    j["bench"]["runs"] = c.bench.runs;
    j["bench"]["lengths"] = c.bench.lengths;
    j["bench"]["langs"] = c.bench.langs;
    j["bench"]["parallel"] = c.bench.parallel;
    j["bench"]["combos"] = nlohmann::ordered_json::array();
    for (const auto& combo : c.bench.combos) {
        nlohmann::ordered_json cj;
        cj["name"] = combo.name;
        cj["asr_mode"] = to_string(combo.asr_mode);
        cj["asr"] = lat(combo.asr);
        cj["llm"] = lat(combo.llm);
        cj["tts"] = lat(combo.tts);
        j["bench"]["combos"].push_back(std::move(cj));
    }
    return j;
}

inline AppConfig parse_config_text(const std::string& text) {
    auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw Error(ErrorCode::InvalidConfig, "config is not valid JSON");
    return parse_config(j);
}

/// Loads a config file. Relative corpus and script paths resolve against
/// the file's directory and must exist.
inline AppConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::InvalidConfig, "cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    auto c = parse_config_text(ss.str());
    const auto base = path.parent_path();
    auto resolve = [&](std::string& p, const char* key) {
        if (p.empty()) return;
        std::filesystem::path fp(p);
        if (fp.is_relative()) fp = base / fp;
        if (!std::filesystem::exists(fp)) {
            detail::ConfigReader::fail(key, "path does not exist: " + fp.string());
        }
        p = fp.lexically_normal().string();
    };
    resolve(c.corpus, "corpus");
    resolve(c.llm.script, "llm.script");
    return c;
}

}  // namespace xtalk
