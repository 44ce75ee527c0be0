#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "xtalk/audio.hpp"
#include "xtalk/error.hpp"
#include "xtalk/text.hpp"

namespace xtalk {

/// One scripted utterance with its sidecar transcript and per-chunk alignment.
struct Utterance {
    std::string id;
    int tag = 0;
    std::string lang;
    std::int64_t duration_ms = 0;
    std::string transcript;
    std::string voice;
    std::string scene;
    std::int64_t align_chunk_ms = kDefaultChunkMs;
    // chunk_chars[k] = transcript code points spoken by the end of chunk k.
    std::vector<std::size_t> chunk_chars;

    std::size_t chars_at(std::int64_t ms) const {
        if (ms <= 0 || chunk_chars.empty()) return 0;
        auto k = static_cast<std::size_t>(ms / align_chunk_ms);
        if (k == 0) return 0;
        k = std::min(k, chunk_chars.size());
        return chunk_chars[k - 1];
    }

    /// Transcript text aligned to the audio span [start_ms, end_ms).
    std::string text_between(std::int64_t start_ms, std::int64_t end_ms) const {
        const auto cps = text::decode(transcript);
        const auto a = std::min(chars_at(start_ms), cps.size());
        const auto b = std::min(chars_at(end_ms), cps.size());
        return b > a ? text::encode(cps, a, b) : std::string{};
    }

    std::vector<std::int16_t> pcm() const { return sidecar::make_pcm(tag, duration_ms); }
};

class UtteranceTable {
public:
    void add(Utterance u) {
        if (by_tag_.count(u.tag)) throw Error(ErrorCode::InvalidConfig, "duplicate utterance tag");
        by_tag_[u.tag] = items_.size();
        by_id_[u.id] = items_.size();
        items_.push_back(std::move(u));
    }

    const Utterance* by_tag(int tag) const {
        auto it = by_tag_.find(tag);
        return it == by_tag_.end() ? nullptr : &items_[it->second];
    }

    const Utterance* by_id(const std::string& id) const {
        auto it = by_id_.find(id);
        return it == by_id_.end() ? nullptr : &items_[it->second];
    }

    const std::vector<Utterance>& all() const { return items_; }
    std::size_t size() const { return items_.size(); }

private:
    std::vector<Utterance> items_;
    std::unordered_map<int, std::size_t> by_tag_;
    std::unordered_map<std::string, std::size_t> by_id_;
};

struct LlmItem {
    enum class Type { Token, ToolCall, Think };
    Type type = Type::Token;
    std::string text;  // token text or thinking query
    std::string tool;
    nlohmann::json args = nlohmann::json::object();

    static LlmItem token(std::string t) { return {Type::Token, std::move(t), {}, nlohmann::json::object()}; }
};

struct LlmRule {
    std::string match;  // substring of the user text (or tool result)
    std::string tool;   // tool rules only: the tool whose result this continues
    std::vector<LlmItem> items;
};

/// Pattern -> item list script for the mock language model.
struct LlmScript {
    std::vector<LlmRule> rules;
    std::vector<LlmRule> tool_rules;
    std::vector<LlmItem> fallback{LlmItem::token("我"), LlmItem::token("不"), LlmItem::token("确"),
                                  LlmItem::token("定"), LlmItem::token("。")};
    std::vector<std::pair<std::string, std::string>> thinking;  // query pattern -> summary
};

struct SearchDocument {
    std::string title;
    std::string snippet;
    std::string page;
    double coverage = 0.0;
};

struct ToolSpec {
    std::string name;
    double expected_latency_ms = 0.0;
    std::vector<SearchDocument> documents;
    bool fail = false;
    std::string description;
};

struct VoiceTables {
    std::map<std::string, std::string> timbres{{"default", "tim_default"}};
    std::vector<std::string> emotions{"neutral", "happy", "sad", "angry", "surprised"};
    std::map<std::string, std::vector<double>> speaker_embeddings;  // explicit overrides
};

struct SceneTables {
    std::map<std::string, std::string> captions;
    std::map<std::string, std::string> rewrites;
};

/// Everything a scenario directory provides. Files other than
/// utterances.json are optional and fall back to defaults.
struct Scenario {
    std::filesystem::path dir;
    std::shared_ptr<UtteranceTable> utterances = std::make_shared<UtteranceTable>();
    LlmScript llm;
    std::map<std::string, ToolSpec> tools;
    VoiceTables voices;
    SceneTables scenes;
    nlohmann::json client_steps = nlohmann::json::array();
    nlohmann::json config_overrides = nlohmann::json::object();
};

namespace detail {

inline nlohmann::json read_json(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw Error(ErrorCode::ScenarioMissing, p.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, p.string() + ": " + e.what());
    }
}

inline LlmItem parse_item(const nlohmann::json& j) {
    if (j.is_string()) return LlmItem::token(j.get<std::string>());
    LlmItem it;
    if (j.contains("tool")) {
        it.type = LlmItem::Type::ToolCall;
        it.tool = j.at("tool").get<std::string>();
        it.args = j.value("args", nlohmann::json::object());
    } else if (j.contains("think")) {
        it.type = LlmItem::Type::Think;
        it.text = j.at("think").get<std::string>();
    } else {
        it.text = j.at("token").get<std::string>();
    }
    return it;
}

inline std::vector<LlmItem> parse_items(const nlohmann::json& rule) {
    std::vector<LlmItem> items;
    const auto& arr = rule.contains("items") ? rule.at("items") : rule.at("tokens");
    for (const auto& j : arr) items.push_back(parse_item(j));
    return items;
}

}  // namespace detail

inline Utterance parse_utterance(const nlohmann::json& j, std::int64_t chunk_ms) {
    Utterance u;
    u.id = j.at("id").get<std::string>();
    u.tag = j.at("tag").get<int>();
    u.lang = j.value("lang", "cn");
    u.duration_ms = j.at("duration_ms").get<std::int64_t>();
    u.transcript = j.at("transcript").get<std::string>();
    u.voice = j.value("voice", "voice_default");
    u.scene = j.value("scene", "");
    u.align_chunk_ms = chunk_ms;
    u.chunk_chars = j.at("chunk_chars").get<std::vector<std::size_t>>();
    const auto total = text::length(u.transcript);
    for (std::size_t k = 0; k < u.chunk_chars.size(); ++k) {
        if (u.chunk_chars[k] > total || (k > 0 && u.chunk_chars[k] < u.chunk_chars[k - 1])) {
            throw Error(ErrorCode::InvalidConfig, "utterance " + u.id + ": alignment not monotone");
        }
    }
    if (u.tag <= 0 || u.tag > 32767) throw Error(ErrorCode::InvalidConfig, "utterance " + u.id + ": bad tag");
    return u;
}

inline std::shared_ptr<UtteranceTable> parse_utterances(const nlohmann::json& j) {
    auto table = std::make_shared<UtteranceTable>();
    const auto chunk_ms = j.value("chunk_ms", static_cast<std::int64_t>(kDefaultChunkMs));
    for (const auto& u : j.at("utterances")) table->add(parse_utterance(u, chunk_ms));
    return table;
}

inline LlmScript parse_llm_script(const nlohmann::json& j) {
    LlmScript s;
    for (const auto& r : j.value("rules", nlohmann::json::array())) {
        s.rules.push_back({r.at("match").get<std::string>(), "", detail::parse_items(r)});
    }
    for (const auto& r : j.value("tool_rules", nlohmann::json::array())) {
        s.tool_rules.push_back({r.value("match", ""), r.value("tool", ""), detail::parse_items(r)});
    }
    if (j.contains("fallback")) {
        s.fallback.clear();
        for (const auto& t : j.at("fallback")) s.fallback.push_back(detail::parse_item(t));
    }
    const auto thinking = j.value("thinking", nlohmann::json::object());
    for (const auto& [k, v] : thinking.items()) {
        s.thinking.emplace_back(k, v.get<std::string>());
    }
    return s;
}

inline std::map<std::string, ToolSpec> default_tools() {
    std::map<std::string, ToolSpec> tools;
    tools["web_search"] = {"web_search", 800.0, {}, false, "search the web for fresh information"};
    tools["local_search"] = {"local_search", 400.0, {}, false, "search the local knowledge base"};
    tools["timbre_switch"] = {"timbre_switch", 5.0, {}, false, "switch the speaking voice"};
    tools["emotion_switch"] = {"emotion_switch", 5.0, {}, false, "switch the speaking emotion"};
    return tools;
}

inline std::map<std::string, ToolSpec> parse_tools(const nlohmann::json& j) {
    auto tools = default_tools();
    for (const auto& [name, spec] : j.items()) {
        auto it = tools.find(name);
        if (it == tools.end()) throw Error(ErrorCode::UnknownTool, name);
        auto& t = it->second;
        t.expected_latency_ms = spec.value("expected_latency_ms", t.expected_latency_ms);
        t.fail = spec.value("fail", false);
        t.description = spec.value("description", t.description);
        for (const auto& d : spec.value("documents", nlohmann::json::array())) {
            t.documents.push_back({d.value("title", ""), d.value("snippet", ""), d.value("page", ""),
                                   d.value("coverage", 0.0)});
        }
    }
    return tools;
}

inline VoiceTables parse_voices(const nlohmann::json& j) {
    VoiceTables v;
    if (j.contains("timbres")) v.timbres = j.at("timbres").get<std::map<std::string, std::string>>();
    if (j.contains("emotions")) v.emotions = j.at("emotions").get<std::vector<std::string>>();
    if (j.contains("speakers")) {
        v.speaker_embeddings = j.at("speakers").get<std::map<std::string, std::vector<double>>>();
    }
    return v;
}

inline SceneTables parse_scenes(const nlohmann::json& j) {
    SceneTables s;
    if (j.contains("captions")) s.captions = j.at("captions").get<std::map<std::string, std::string>>();
    if (j.contains("rewrites")) s.rewrites = j.at("rewrites").get<std::map<std::string, std::string>>();
    return s;
}

/// Loads a scenario directory. Throws ScenarioMissing when the directory or
/// its utterances.json does not exist.
inline Scenario load_scenario(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir) || !fs::exists(dir / "utterances.json")) {
        throw Error(ErrorCode::ScenarioMissing, dir.string());
    }
    Scenario s;
    s.dir = dir;
    s.utterances = parse_utterances(detail::read_json(dir / "utterances.json"));
    s.tools = default_tools();
    if (fs::exists(dir / "llm_script.json")) s.llm = parse_llm_script(detail::read_json(dir / "llm_script.json"));
    if (fs::exists(dir / "tools.json")) s.tools = parse_tools(detail::read_json(dir / "tools.json"));
    if (fs::exists(dir / "voices.json")) s.voices = parse_voices(detail::read_json(dir / "voices.json"));
    if (fs::exists(dir / "scene_tags.json")) s.scenes = parse_scenes(detail::read_json(dir / "scene_tags.json"));
    if (fs::exists(dir / "client.json")) s.client_steps = detail::read_json(dir / "client.json").at("steps");
    if (fs::exists(dir / "config.json")) s.config_overrides = detail::read_json(dir / "config.json");
    return s;
}

}  // namespace xtalk
