#!/usr/bin/env python3
"""Generate the scripted utterance corpus and the golden replay scenarios.

Output is deterministic: running it twice produces identical files.
"""
import argparse
import json
import math
import random
from pathlib import Path

CHUNK_MS = 100
LEAD_MS = 300
TAIL_MS = 600
RATE = {"cn": 4.0, "en": 14.0}  # characters per second of speech
VOICES = ["v_alice", "v_bob", "v_chen", "v_dana"]
SCENES = ["cafe", "office", "street", "home"]

CN_SUBJECTS = ["我", "我们", "他", "她", "朋友", "老师", "同事", "妈妈"]
CN_TIMES = ["今天", "明天", "昨天", "周末", "晚上", "早上", "下午"]
CN_PLACES = ["在公园", "在家里", "在学校", "在公司", "在商场", "在图书馆", "在车站"]
CN_VERBS = ["看书", "散步", "开会", "做饭", "买菜", "跑步", "学习", "聊天", "写字", "喝茶"]
CN_TAILS = ["很开心", "有点累", "非常忙", "觉得不错", "想休息", "很顺利"]

EN_SUBJECTS = ["I", "We", "My friend", "The teacher", "Our team", "My sister", "The manager"]
EN_VERBS = ["walked to", "talked about", "looked at", "planned", "cleaned", "visited", "painted"]
EN_OBJECTS = ["the old park", "a small garden", "the morning news", "our new kitchen", "the city library",
              "a quiet museum", "the river path", "the busy market"]
EN_TAILS = ["after lunch", "before dinner", "on the weekend", "with great care", "for an hour", "in the rain"]


def cn_sentence(rng):
    s = rng.choice(CN_SUBJECTS) + rng.choice(CN_TIMES) + rng.choice(CN_PLACES) + rng.choice(CN_VERBS)
    if rng.random() < 0.6:
        s += "，" + rng.choice(CN_TAILS)
    return s + ("。" if rng.random() < 0.85 else "？")


def en_sentence(rng):
    s = f"{rng.choice(EN_SUBJECTS)} {rng.choice(EN_VERBS)} {rng.choice(EN_OBJECTS)} {rng.choice(EN_TAILS)}"
    if rng.random() < 0.4:
        s += f" and {rng.choice(EN_VERBS)} {rng.choice(EN_OBJECTS)}"
    return s + ("." if rng.random() < 0.85 else "?")


def build_utterance(rng, uid, tag, lang, duration_ms, voice, scene):
    """Lay sentences on a timeline and derive per-chunk character counts."""
    make = cn_sentence if lang == "cn" else en_sentence
    rate = RATE[lang]
    t = LEAD_MS
    segments = []  # (start_ms, end_ms, text)
    while True:
        text = make(rng)
        if lang == "en" and segments:
            text = " " + text
        speak_ms = int(math.ceil(len(text) / rate * 1000 / CHUNK_MS) * CHUNK_MS)
        if t + speak_ms + TAIL_MS > duration_ms:
            if segments:
                break
            continue
        segments.append((t, t + speak_ms, text))
        t += speak_ms + rng.choice([400, 500, 600, 700])
    transcript = "".join(s[2] for s in segments)
    chunk_chars = []
    for k in range(duration_ms // CHUNK_MS):
        end = (k + 1) * CHUNK_MS
        count = 0
        for start, stop, text in segments:
            if end >= stop:
                count += len(text)
            elif end > start:
                count += int(len(text) * (end - start) / (stop - start))
        chunk_chars.append(count)
    assert chunk_chars[-1] == len(transcript)
    return {
        "id": uid,
        "tag": tag,
        "lang": lang,
        "duration_ms": duration_ms,
        "transcript": transcript,
        "voice": voice,
        "scene": scene,
        "chunk_chars": chunk_chars,
    }


def spoken(uid, tag, lang, text, duration_ms, voice="v_alice", scene="home", lead_ms=LEAD_MS):
    """Single-phrase utterance spoken at the language rate after `lead_ms`."""
    speak_ms = max(CHUNK_MS, int(math.ceil(len(text) / RATE[lang] * 1000 / CHUNK_MS) * CHUNK_MS))
    if lead_ms + speak_ms > duration_ms:
        speak_ms = duration_ms - lead_ms
    chunk_chars = []
    for k in range(duration_ms // CHUNK_MS):
        end = (k + 1) * CHUNK_MS
        if end >= lead_ms + speak_ms:
            chunk_chars.append(len(text))
        elif end > lead_ms:
            chunk_chars.append(int(len(text) * (end - lead_ms) / speak_ms))
        else:
            chunk_chars.append(0)
    return {"id": uid, "tag": tag, "lang": lang, "duration_ms": duration_ms, "transcript": text,
            "voice": voice, "scene": scene, "chunk_chars": chunk_chars}


EN_REPLY = ["Sure", ",", " here", " is", " what", " I", " found", ".", " It", " should", " help", " you", "."]
CN_REPLY = ["好的", "，", "我", "明白", "了", "。", "我们", "继续", "吧", "。"]

CAPTIONS = {
    "cafe": "busy cafe with background chatter",
    "office": "quiet office with keyboard typing",
    "street": "street traffic with passing cars",
    "home": "calm living room with a ticking clock",
}
REWRITES = {
    "busy cafe with background chatter": "cafe, chatter",
    "quiet office with keyboard typing": "office, typing",
    "street traffic with passing cars": "street, traffic",
    "calm living room with a ticking clock": "home, quiet",
}
VOICE_TABLE = {
    "timbres": {"default": "tim_default", "warm": "tim_warm", "bright": "tim_bright"},
    "emotions": ["neutral", "happy", "sad", "angry", "surprised"],
}


def write(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


def gen_corpus(out):
    rng = random.Random(20240607)
    utts = []
    tag = 1
    plan = [(L, lang) for L in (5, 10, 30, 60) for lang in ("cn", "en") for _ in range(6)]
    plan += [(20, "cn"), (20, "en")]
    counters = {}
    for L, lang in plan:
        counters[(L, lang)] = counters.get((L, lang), 0) + 1
        uid = f"{lang}_{L:02d}s_{counters[(L, lang)]:02d}"
        utts.append(build_utterance(rng, uid, tag, lang, L * 1000, VOICES[tag % 4], SCENES[tag % 4]))
        tag += 1
    write(out / "utterances.json", {"chunk_ms": CHUNK_MS, "utterances": utts})
    write(out / "llm_script.json", {"rules": [{"match": " ", "tokens": EN_REPLY}], "fallback": CN_REPLY})
    write(out / "scene_tags.json", {"captions": CAPTIONS, "rewrites": REWRITES})
    write(out / "voices.json", VOICE_TABLE)


GOLDEN_CONFIG = {
    "side_channels": {"captioner_enabled": False},
    "llm": {"latency": {"fixed_ms": 20, "per_unit_ms": 1, "jitter_ms": 0}},
    "tts": {"latency": {"fixed_ms": 400, "per_unit_ms": 3, "jitter_ms": 0}},
}

WEATHER_REPLY = ["Okay", "."] + [" The", " forecast", " says", " a", " mild", " and", " sunny", " afternoon",
                                 " with", " a", " light", " breeze", " from", " the", " west", "."]
JOKE_REPLY = ["Why", " did", " the", " bike", " fall", " over", "?", " It", " was", " two", " tired", "."]


def gen_golden(out):
    weather = spoken("ask_weather", 101, "en", "What is the weather like this afternoon?", 4000, "v_alice", "home")
    joke = spoken("barge_joke", 102, "en", "Stop, tell me a joke instead.", 3000, "v_alice", "home")
    filler = spoken("filler_hm", 103, "cn", "嗯", 800, "v_alice", "home", lead_ms=200)
    base_utts = {"chunk_ms": CHUNK_MS, "utterances": [weather, joke, filler]}
    script = {
        "rules": [
            {"match": "weather", "tokens": WEATHER_REPLY},
            {"match": "joke", "tokens": JOKE_REPLY},
            {"match": "news", "items": [{"tool": "web_search", "args": {"query": "latest news"}}]},
            {"match": "piano", "items": ["Both", " are", " great", " choices", "."]},
            {"match": "suggest", "tokens": ["Start", " with", " piano", " lessons", "."]},
            {"match": "voice", "items": [{"tool": "timbre_switch", "args": {"voice": "warm"}},
                                         {"tool": "emotion_switch", "args": {"emotion": "happy"}}]},
        ],
        "tool_rules": [
            {"tool": "web_search", "match": "", "tokens": ["Here", " is", " the", " news", "."]},
            {"tool": "timbre_switch", "match": "", "items": [{"tool": "emotion_switch",
                                                               "args": {"emotion": "happy"}}]},
            {"tool": "emotion_switch", "match": "", "tokens": ["Is", " this", " better", "?"]},
        ],
        "thinking": {"piano": "piano builds theory faster; guitar is more portable"},
    }
    tools = {
        "web_search": {
            "expected_latency_ms": 400,
            "documents": [
                {"title": "a", "snippet": "rain expected tonight", "page": "long page a", "coverage": 0.9},
                {"title": "b", "snippet": "short b", "page": "markets closed higher", "coverage": 0.5},
                {"title": "c", "snippet": "noise", "page": "unrelated", "coverage": 0.2},
            ],
        }
    }
    scenarios = {
        "basic_turn": [
            {"op": "hello"},
            {"op": "speak", "utterance": "ask_weather"},
            {"op": "wait", "for": "tts_done", "turn": 1},
            {"op": "bye"},
        ],
        "barge_in": [
            {"op": "hello"},
            {"op": "speak", "utterance": "ask_weather"},
            {"op": "wait", "for": "llm_sentence", "count": 2, "turn": 1},
            {"op": "speak", "utterance": "barge_joke"},
            {"op": "wait", "for": "tts_done", "turn": 2},
            {"op": "bye"},
        ],
        "false_interrupt": [
            {"op": "hello"},
            {"op": "speak", "utterance": "ask_weather"},
            {"op": "wait", "for": "llm_sentence", "count": 2, "turn": 1},
            {"op": "speak", "utterance": "filler_hm"},
            {"op": "wait", "for": "resume"},
            {"op": "wait", "for": "tts_done", "turn": 1},
            {"op": "bye"},
        ],
        "tool_call": [
            {"op": "hello"},
            {"op": "text", "text": "What is in the news today?"},
            {"op": "wait", "for": "tts_done", "turn": 1},
            {"op": "bye"},
        ],
        "thinking": [
            {"op": "hello"},
            {"op": "text", "text": "[THINK] Should I learn piano or guitar?"},
            {"op": "wait", "for": "tts_done", "turn": 1},
            {"op": "wait", "for": "thinking", "count": 2},
            {"op": "text", "text": "So what do you suggest?"},
            {"op": "wait", "for": "tts_done", "turn": 2},
            {"op": "bye"},
        ],
        "voice_switch": [
            {"op": "hello"},
            {"op": "text", "text": "Please use a warmer voice."},
            {"op": "wait", "for": "tts_done", "turn": 1},
            {"op": "bye"},
        ],
    }
    for name, steps in scenarios.items():
        d = out / name
        write(d / "utterances.json", base_utts)
        write(d / "llm_script.json", script)
        write(d / "tools.json", tools)
        write(d / "voices.json", VOICE_TABLE)
        write(d / "scene_tags.json", {"captions": CAPTIONS})
        write(d / "config.json", GOLDEN_CONFIG)
        write(d / "client.json", {"steps": steps})
    d = out / "empty"
    write(d / "utterances.json", {"chunk_ms": CHUNK_MS, "utterances": []})
    write(d / "client.json", {"steps": []})


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "scenarios"))
    args = ap.parse_args()
    out = Path(args.out)
    gen_corpus(out / "corpus")
    gen_golden(out / "golden")


if __name__ == "__main__":
    main()
