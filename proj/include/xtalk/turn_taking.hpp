#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "xtalk/event.hpp"
#include "xtalk/text.hpp"

namespace xtalk {

enum class Phase : std::uint8_t { Idle, UserSpeaking, Processing, AgentSpeaking, VerifyingInterrupt };

inline std::string_view to_string(Phase p) {
    switch (p) {
        case Phase::Idle: return "Idle";
        case Phase::UserSpeaking: return "UserSpeaking";
        case Phase::Processing: return "Processing";
        case Phase::AgentSpeaking: return "AgentSpeaking";
        case Phase::VerifyingInterrupt: return "VerifyingInterrupt";
    }
    return "?";
}

/// Declared transition relation (self-loops are always allowed).
inline bool is_allowed_transition(Phase from, Phase to) {
    if (from == to) return true;
    static const std::set<std::pair<Phase, Phase>> allowed{
        {Phase::Idle, Phase::UserSpeaking},
        {Phase::Idle, Phase::Processing},
        {Phase::UserSpeaking, Phase::Processing},
        {Phase::UserSpeaking, Phase::Idle},
        {Phase::Processing, Phase::AgentSpeaking},
        {Phase::Processing, Phase::Idle},
        {Phase::AgentSpeaking, Phase::Idle},
        {Phase::AgentSpeaking, Phase::VerifyingInterrupt},
        {Phase::Processing, Phase::VerifyingInterrupt},
        {Phase::VerifyingInterrupt, Phase::AgentSpeaking},
        {Phase::VerifyingInterrupt, Phase::Idle},
        {Phase::VerifyingInterrupt, Phase::Processing},
        {Phase::VerifyingInterrupt, Phase::UserSpeaking},
    };
    return allowed.count({from, to}) > 0;
}

struct InterruptCandidate {
    std::int64_t started_at = 0;  // monotonic ns
    std::int64_t audio_ms = 0;
    std::string transcript;
};

struct FalseInterruptRules {
    std::int64_t min_audio_ms = 500;
    std::vector<std::string> filler_words{"嗯", "啊", "呃", "哦", "uh", "um", "hmm", "呵呵"};
    bool single_char_reject = true;
    bool operator==(const FalseInterruptRules&) const = default;
};

enum class FalseReason { TooShort, EmptyAsr, SingleChar, FillerOnly };

inline std::string_view to_string(FalseReason r) {
    switch (r) {
        case FalseReason::TooShort: return "too_short";
        case FalseReason::EmptyAsr: return "empty_asr";
        case FalseReason::SingleChar: return "single_char";
        case FalseReason::FillerOnly: return "filler_only";
    }
    return "?";
}

struct Verdict {
    bool confirmed = false;
    std::optional<FalseReason> reason;

    static Verdict confirm() { return {true, std::nullopt}; }
    static Verdict reject(FalseReason r) { return {false, r}; }
    bool operator==(const Verdict&) const = default;
};

namespace detail {

inline std::vector<char32_t> strip_for_rules(std::string_view transcript) {
    std::vector<char32_t> out;
    for (auto c : text::decode(transcript)) {
        if (!text::is_space(c) && !text::is_punct(c)) out.push_back(c);
    }
    return out;
}

// A letter of an alphabetic script or a digit. CJK ideographs, kana and
// hangul syllables are whole words or syllables, not letters.
inline bool is_letter_or_digit(char32_t c) { return text::is_alnum(c) && !text::is_cjk(c); }

inline char32_t ascii_lower(char32_t c) { return (c >= 'A' && c <= 'Z') ? c + 32 : c; }

// True when a CJK run can be covered completely by filler words.
inline bool covered_by_fillers(const std::vector<char32_t>& run, const std::vector<std::vector<char32_t>>& fillers) {
    std::vector<bool> ok(run.size() + 1, false);
    ok[0] = true;
    for (std::size_t i = 0; i < run.size(); ++i) {
        if (!ok[i]) continue;
        for (const auto& f : fillers) {
            if (f.empty() || i + f.size() > run.size()) continue;
            if (std::equal(f.begin(), f.end(), run.begin() + static_cast<std::ptrdiff_t>(i))) ok[i + f.size()] = true;
        }
    }
    return ok[run.size()];
}

}  // namespace detail

/// True when every token of the transcript is a filler word. Whitespace
/// separates tokens in spaced scripts; CJK runs are matched character-wise.
inline bool is_filler_only(std::string_view transcript, const std::vector<std::string>& filler_words) {
    std::vector<std::vector<char32_t>> fillers;
    for (const auto& f : filler_words) {
        auto cps = text::decode(f);
        for (auto& c : cps) c = detail::ascii_lower(c);
        fillers.push_back(std::move(cps));
    }
    std::vector<char32_t> word;
    bool any = false;
    auto flush_word = [&]() -> bool {
        if (word.empty()) return true;
        any = true;
        bool cjk = false;
        for (auto c : word) cjk = cjk || text::is_cjk(c);
        bool ok = cjk ? detail::covered_by_fillers(word, fillers)
                      : std::find(fillers.begin(), fillers.end(), word) != fillers.end();
        word.clear();
        return ok;
    };
    for (auto c : text::decode(transcript)) {
        if (text::is_space(c) || text::is_punct(c)) {
            if (!flush_word()) return false;
            continue;
        }
        word.push_back(detail::ascii_lower(c));
    }
    if (!flush_word()) return false;
    return any;
}

/// Rule order: duration, empty transcript, single letter/digit, filler-only.
inline Verdict validate_interrupt(const InterruptCandidate& c, const FalseInterruptRules& rules) {
    if (c.audio_ms < rules.min_audio_ms) return Verdict::reject(FalseReason::TooShort);
    const auto stripped = detail::strip_for_rules(c.transcript);
    if (stripped.empty()) return Verdict::reject(FalseReason::EmptyAsr);
    if (rules.single_char_reject && stripped.size() == 1 && detail::is_letter_or_digit(stripped[0])) {
        return Verdict::reject(FalseReason::SingleChar);
    }
    if (is_filler_only(c.transcript, rules.filler_words)) return Verdict::reject(FalseReason::FillerOnly);
    return Verdict::confirm();
}

struct TurnState {
    Phase phase = Phase::Idle;
    std::uint32_t current_turn_id = 0;
    std::optional<InterruptCandidate> interrupt_open;
    bool agent_finished = false;  // old turn completed while verifying
};

/// What a transition asks the session to do.
struct TurnOutput {
    struct Emit {
        EventKind kind;
        Payload payload;
        std::uint32_t turn;
    };
    std::vector<Emit> emits;
    std::optional<std::uint32_t> cancel_turn;
    std::optional<std::string> start_turn;  // user text for the new turn
    bool ignored = false;                   // input was a no-op in this phase
};

/// Barge-in / turn-taking state machine. Pure: all effects are returned.
class TurnMachine {
public:
    explicit TurnMachine(FalseInterruptRules rules = {}) : rules_(std::move(rules)) {}

    const FalseInterruptRules& rules() const { return rules_; }

    TurnOutput on_vad_start(TurnState& s) const {
        TurnOutput out;
        if (s.phase == Phase::Idle) {
            s.phase = Phase::UserSpeaking;
        } else {
            out.ignored = true;
        }
        return out;
    }

    TurnOutput on_interrupt_candidate(TurnState& s, std::int64_t now_ns) const {
        TurnOutput out;
        switch (s.phase) {
            case Phase::Processing:
            case Phase::AgentSpeaking:
                s.phase = Phase::VerifyingInterrupt;
                s.interrupt_open = InterruptCandidate{now_ns, 0, {}};
                s.agent_finished = false;
                out.emits.push_back({EventKind::PausePlayback, Marker{}, s.current_turn_id});
                break;
            case Phase::Idle:
                s.phase = Phase::UserSpeaking;
                out.ignored = true;
                break;
            default:
                out.ignored = true;
                break;
        }
        return out;
    }

    TurnOutput on_asr_final(TurnState& s, const AsrPayload& asr) const {
        const auto transcript = asr.text();
        switch (s.phase) {
            case Phase::VerifyingInterrupt: {
                auto c = *s.interrupt_open;
                c.audio_ms = asr.audio_ms;
                c.transcript = transcript;
                s.interrupt_open = c;
                return on_validation_result(s, validate_interrupt(c, rules_));
            }
            case Phase::UserSpeaking:
            case Phase::Idle: {
                TurnOutput out;
                if (text::trim(transcript).empty()) {
                    s.phase = Phase::Idle;
                    out.ignored = true;
                    return out;
                }
                s.current_turn_id += 1;
                s.phase = Phase::Processing;
                out.start_turn = transcript;
                return out;
            }
            default: {
                TurnOutput out;
                out.ignored = true;
                return out;
            }
        }
    }

    TurnOutput on_validation_result(TurnState& s, const Verdict& v) const {
        TurnOutput out;
        if (s.phase != Phase::VerifyingInterrupt) {
            out.ignored = true;
            return out;
        }
        const auto old_turn = s.current_turn_id;
        const auto candidate = s.interrupt_open.value_or(InterruptCandidate{});
        s.interrupt_open.reset();
        if (!v.confirmed) {
            out.emits.push_back({EventKind::FalseInterrupt,
                                 InterruptPayload{std::string(to_string(*v.reason)), candidate.transcript,
                                                  candidate.audio_ms},
                                 old_turn});
            out.emits.push_back({EventKind::Resume, Marker{}, old_turn});
            s.phase = s.agent_finished ? Phase::Idle : Phase::AgentSpeaking;
            s.agent_finished = false;
            return out;
        }
        out.emits.push_back(
            {EventKind::InterruptConfirmed, InterruptPayload{"confirmed", candidate.transcript, candidate.audio_ms},
             old_turn});
        out.emits.push_back({EventKind::Flush, Marker{}, old_turn});
        out.emits.push_back({EventKind::Stop, Marker{}, old_turn});
        if (!s.agent_finished) out.cancel_turn = old_turn;
        s.agent_finished = false;
        s.current_turn_id += 1;
        if (text::trim(candidate.transcript).empty()) {
            // confirmed by deadline: the user is still talking
            s.phase = Phase::UserSpeaking;
        } else {
            s.phase = Phase::Processing;
            out.start_turn = candidate.transcript;
        }
        return out;
    }

    /// Verification deadline expired for the candidate opened at `started_at`.
    TurnOutput on_deadline(TurnState& s, std::int64_t started_at) const {
        if (s.phase != Phase::VerifyingInterrupt || !s.interrupt_open || s.interrupt_open->started_at != started_at) {
            TurnOutput out;
            out.ignored = true;
            return out;
        }
        return on_validation_result(s, Verdict::confirm());
    }

    TurnOutput on_tts_chunk(TurnState& s, std::uint32_t turn) const {
        TurnOutput out;
        if (turn == s.current_turn_id && s.phase == Phase::Processing) s.phase = Phase::AgentSpeaking;
        return out;
    }

    TurnOutput on_tts_done(TurnState& s, std::uint32_t turn) const {
        TurnOutput out;
        if (turn != s.current_turn_id) {
            out.ignored = true;
            return out;
        }
        if (s.phase == Phase::Processing || s.phase == Phase::AgentSpeaking) {
            s.phase = Phase::Idle;
        } else if (s.phase == Phase::VerifyingInterrupt) {
            s.agent_finished = true;
        }
        return out;
    }

private:
    FalseInterruptRules rules_;
};

}  // namespace xtalk
