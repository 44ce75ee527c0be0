#pragma once

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "xtalk/bench.hpp"
#include "xtalk/config.hpp"
#include "xtalk/error.hpp"
#include "xtalk/loopback.hpp"
#include "xtalk/scenario.hpp"
#include "xtalk/session_runtime.hpp"
#include "xtalk/ws_server.hpp"

namespace xtalk::cli {

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kConfigError = 2,
    kBindError = 3,
    kScenarioMissing = 4,
};

inline int exit_code_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidConfig: return kConfigError;
        case ErrorCode::BindError: return kBindError;
        case ErrorCode::ScenarioMissing: return kScenarioMissing;
        default: return kFailure;
    }
}

/// Applies XTALK_LOG_LEVEL (trace, debug, info, warn, error, critical, off).
inline void apply_log_level(const char* value) {
    if (!spdlog::get("xtalk")) spdlog::set_default_logger(spdlog::stderr_color_mt("xtalk"));
    if (!value || !*value) {
        spdlog::set_level(spdlog::level::info);
        return;
    }
    const std::string v(value);
    const auto level = spdlog::level::from_str(v);
    if (level == spdlog::level::off && v != "off") {
        spdlog::set_level(spdlog::level::info);
        spdlog::warn("ignoring XTALK_LOG_LEVEL='{}'", v);
        return;
    }
    spdlog::set_level(level);
}

inline std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = text::trim(item);
        if (item.empty()) continue;
        std::size_t used = 0;
        int v = 0;
        try {
            v = std::stoi(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size() || v <= 0) throw Error(ErrorCode::InvalidConfig, "bad length '" + item + "'");
        out.push_back(v);
    }
    return out;
}

inline std::vector<std::string> parse_word_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = text::trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline AppConfig config_or_default(const std::string& path) { return path.empty() ? AppConfig{} : load_config(path); }

inline std::shared_ptr<const Scenario> load_corpus(const AppConfig& cfg) {
    return std::make_shared<Scenario>(load_scenario(cfg.corpus));
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::InvalidConfig, "cannot write " + path.string());
    out << content;
}

struct ServeOptions {
    std::string config;
    std::string listen;
};

/// Serves until SIGINT or SIGTERM, then closes every session.
inline int serve(const ServeOptions& opt, std::ostream& out) {
    auto cfg = config_or_default(opt.config);
    if (!opt.listen.empty()) cfg.listen = opt.listen;
    Server server(cfg, make_mock_models(cfg, load_corpus(cfg)));
    WsServer ws(server, cfg.listen);
    boost::asio::signal_set signals(ws.context(), SIGINT, SIGTERM);
    signals.async_wait([&](const boost::system::error_code& ec, int sig) {
        if (ec) return;
        spdlog::info("signal {} received, shutting down", sig);
        ws.stop();
    });
    const auto addr = parse_listen(cfg.listen);
    out << "listening ws://" << addr.host << ":" << ws.port() << kSessionPath << std::endl;
    ws.run();
    out << "sessions closed: " << server.closed_sessions() << std::endl;
    return kOk;
}

struct BenchOptions {
    std::string config;
    std::string lengths;
    std::string langs;
    std::string combos;
    std::string out;
    std::optional<std::size_t> runs;
    std::optional<std::size_t> parallel;
};

inline std::filesystem::path table_path(const std::filesystem::path& out) {
    auto p = out;
    p.replace_extension(".txt");
    return p == out ? std::filesystem::path(out.string() + ".txt") : p;
}

/// Runs the latency grid; writes JSON lines to `out` and the table next to it.
inline int bench(const BenchOptions& opt, std::ostream& out) {
    auto cfg = config_or_default(opt.config);
    if (!opt.lengths.empty()) cfg.bench.lengths = parse_int_list(opt.lengths);
    if (!opt.langs.empty()) cfg.bench.langs = parse_word_list(opt.langs);
    if (opt.runs) cfg.bench.runs = *opt.runs;
    if (opt.parallel) cfg.bench.parallel = *opt.parallel;
    if (!opt.combos.empty()) {
        std::vector<BenchCombo> picked;
        for (const auto& name : parse_word_list(opt.combos)) {
            auto it = std::find_if(cfg.bench.combos.begin(), cfg.bench.combos.end(),
                                   [&](const BenchCombo& c) { return c.name == name; });
            if (it == cfg.bench.combos.end()) throw Error(ErrorCode::InvalidConfig, "unknown combo '" + name + "'");
            picked.push_back(*it);
        }
        cfg.bench.combos = std::move(picked);
    }
    validate_config(cfg);
    const auto report = run_bench(cfg, load_corpus(cfg));
    out << report.table();
    if (!opt.out.empty()) {
        write_file(opt.out, report.jsonl());
        write_file(table_path(opt.out), report.table());
    }
    return kOk;
}

struct ReplayOptions {
    std::string config;
    std::string scenario;
    std::string out;
};

inline int replay(const ReplayOptions& opt, std::ostream& out) {
    const auto log = replay_scenario(opt.scenario, config_or_default(opt.config));
    if (opt.out.empty()) {
        out << log;
    } else {
        write_file(opt.out, log);
    }
    return kOk;
}

inline int validate(const std::string& path, bool dump, std::ostream& out) {
    const auto cfg = config_or_default(path);
    validate_config(cfg);
    if (dump) {
        out << to_json(cfg).dump(2) << "\n";
    } else {
        out << "config ok\n";
    }
    return kOk;
}

/// Entry point shared by the binary and the tests.
inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    apply_log_level(std::getenv("XTALK_LOG_LEVEL"));
    CLI::App app{"xtalk: full-duplex voice dialogue server"};
    app.require_subcommand(1);

    ServeOptions serve_opt;
    auto* serve_cmd = app.add_subcommand("serve", "Run the WebSocket server");
    serve_cmd->add_option("--config", serve_opt.config, "Config file")->check(CLI::ExistingFile);
    serve_cmd->add_option("--listen", serve_opt.listen, "host:port, overrides the config");

    BenchOptions bench_opt;
    auto* bench_cmd = app.add_subcommand("bench", "Run the latency benchmark grid");
    bench_cmd->add_option("--config", bench_opt.config, "Config file")->check(CLI::ExistingFile);
    bench_cmd->add_option("--lengths", bench_opt.lengths, "Utterance lengths in seconds, e.g. 5,10,30,60");
    bench_cmd->add_option("--langs", bench_opt.langs, "Languages, e.g. cn,en");
    bench_cmd->add_option("--combos", bench_opt.combos, "Profile combos to run (default: all)");
    bench_cmd->add_option("--runs", bench_opt.runs, "Runs per cell");
    bench_cmd->add_option("--parallel", bench_opt.parallel, "Cells measured concurrently");
    bench_cmd->add_option("--out", bench_opt.out, "JSON-lines output; the table goes next to it as .txt");

    ReplayOptions replay_opt;
    auto* replay_cmd = app.add_subcommand("replay", "Replay a scripted session and write the normalized log");
    replay_cmd->add_option("--scenario", replay_opt.scenario, "Scenario directory")->required();
    replay_cmd->add_option("--config", replay_opt.config, "Base config file")->check(CLI::ExistingFile);
    replay_cmd->add_option("--out", replay_opt.out, "Log file (default: stdout)");

    std::string validate_path;
    bool dump = false;
    auto* validate_cmd = app.add_subcommand("validate-config", "Check a config file");
    validate_cmd->add_option("--config", validate_path, "Config file")->check(CLI::ExistingFile);
    validate_cmd->add_flag("--dump", dump, "Print the effective config");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        if (*serve_cmd) return serve(serve_opt, out);
        if (*bench_cmd) return bench(bench_opt, out);
        if (*replay_cmd) return replay(replay_opt, out);
        if (*validate_cmd) return validate(validate_path, dump, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kFailure;
}

}  // namespace xtalk::cli
