#include <gtest/gtest.h>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>

#include <sys/wait.h>
#include <unistd.h>

#include "xtalk/cli.hpp"

using namespace xtalk;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

namespace {

AppConfig fast_config() {
    AppConfig cfg;
    cfg.listen = "127.0.0.1:0";
    cfg.side_channels.captioner_enabled = false;
    cfg.llm.latency = {};
    cfg.tts.latency = {5, 0, 0};
    return cfg;
}

struct RunningServer {
    explicit RunningServer(const AppConfig& cfg)
        : server(cfg, make_mock_models(cfg, std::make_shared<Scenario>(load_scenario("scenarios/corpus")))),
          ws(server, cfg.listen),
          thread([this] { ws.run(); }) {}
    ~RunningServer() {
        ws.stop();
        thread.join();
    }
    Server server;
    WsServer ws;
    std::thread thread;
};

struct Client {
    net::io_context ioc;
    websocket::stream<tcp::socket> ws{ioc};
    std::uint32_t seq = 0;

    beast::error_code connect(std::uint16_t port, const std::string& path, const std::string& proto,
                              websocket::response_type* res = nullptr) {
        beast::error_code ec;
        ws.next_layer().connect(tcp::endpoint(net::ip::make_address("127.0.0.1"), port), ec);
        if (ec) return ec;
        if (!proto.empty()) {
            ws.set_option(websocket::stream_base::decorator(
                [proto](websocket::request_type& req) { req.set(http::field::sec_websocket_protocol, proto); }));
        }
        websocket::response_type local;
        ws.handshake(res ? *res : local, "127.0.0.1", path, ec);
        return ec;
    }

    void send(ClientType type, nlohmann::json payload = nlohmann::json::object()) {
        ClientMessage m;
        m.type = type;
        m.seq = ++seq;
        m.payload = std::move(payload);
        const auto f = encode_client_message(m);
        ws.binary(f.binary);
        ws.write(net::buffer(f.data));
    }

    ServerFrame read() {
        beast::flat_buffer buf;
        ws.read(buf);
        return parse_server_frame(WireFrame{ws.got_binary(), beast::buffers_to_string(buf.data())});
    }
};

http::status upgrade_status(std::uint16_t port, const std::string& path, const std::string& proto) {
    net::io_context ioc;
    tcp::socket sock(ioc);
    sock.connect(tcp::endpoint(net::ip::make_address("127.0.0.1"), port));
    http::request<http::empty_body> req{http::verb::get, path, 11};
    req.set(http::field::host, "127.0.0.1");
    req.set(http::field::upgrade, "websocket");
    req.set(http::field::connection, "upgrade");
    req.set(http::field::sec_websocket_key, "dGhlIHNhbXBsZSBub25jZQ==");
    req.set(http::field::sec_websocket_version, "13");
    if (!proto.empty()) req.set(http::field::sec_websocket_protocol, proto);
    http::write(sock, req);
    beast::flat_buffer buf;
    http::response<http::string_body> res;
    http::read(sock, buf, res);
    return res.result();
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run_cli(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
    args.insert(args.begin(), "xtalk");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream out;
    std::ostringstream err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    if (out_text) *out_text = out.str();
    if (err_text) *err_text = err.str();
    return code;
}

}  // namespace

TEST(WebSocket, TextTurnOverTheWire) {
    RunningServer s(fast_config());
    Client c;
    websocket::response_type res;
    ASSERT_FALSE(c.connect(s.ws.port(), "/session", "xtalk.v1", &res));
    EXPECT_EQ(res[http::field::sec_websocket_protocol], "xtalk.v1");
    c.send(ClientType::Hello);
    const auto ack = c.read();
    EXPECT_EQ(ack.type, "hello_ack");
    EXPECT_FALSE(ack.payload.value("session_id", std::string{}).empty());
    c.send(ClientType::TextInput, {{"text", "hello there"}});
    std::size_t chunks = 0;
    std::vector<std::string> seen;
    while (true) {
        const auto f = c.read();
        seen.push_back(f.type);
        if (f.type == "tts_chunk") {
            ++chunks;
            EXPECT_EQ(f.turn_id, 1u);
        }
        if (f.type == "tts_done") break;
    }
    EXPECT_GT(chunks, 0u);
    EXPECT_NE(std::find(seen.begin(), seen.end(), "asr_final"), seen.end());
    EXPECT_NE(std::find(seen.begin(), seen.end(), "llm_sentence"), seen.end());
    c.send(ClientType::Bye);
    c.ws.close(websocket::close_code::normal);
}

TEST(WebSocket, WrongPathIsNotFound) {
    RunningServer s(fast_config());
    EXPECT_EQ(upgrade_status(s.ws.port(), "/chat", "xtalk.v1"), http::status::not_found);
    EXPECT_EQ(upgrade_status(s.ws.port(), "/session", "xtalk.v1"), http::status::switching_protocols);
}

TEST(WebSocket, MissingSubprotocolIsRejected) {
    RunningServer s(fast_config());
    EXPECT_EQ(upgrade_status(s.ws.port(), "/session", ""), http::status::bad_request);
    EXPECT_EQ(upgrade_status(s.ws.port(), "/session", "xtalk.v2"), http::status::bad_request);
    Client c;
    EXPECT_TRUE(c.connect(s.ws.port(), "/session", ""));
}

TEST(WebSocket, OverCapacityGetsErrorFrame) {
    auto cfg = fast_config();
    cfg.max_sessions = 1;
    RunningServer s(cfg);
    Client a;
    ASSERT_FALSE(a.connect(s.ws.port(), "/session", "xtalk.v1"));
    a.send(ClientType::Hello);
    EXPECT_EQ(a.read().type, "hello_ack");
    Client b;
    ASSERT_FALSE(b.connect(s.ws.port(), "/session", "xtalk.v1"));
    b.send(ClientType::Hello);
    const auto f = b.read();
    EXPECT_EQ(f.type, "error");
    EXPECT_EQ(f.payload["code"], "over_capacity");
}

TEST(WebSocket, DisconnectClosesSession) {
    RunningServer s(fast_config());
    {
        Client c;
        ASSERT_FALSE(c.connect(s.ws.port(), "/session", "xtalk.v1"));
        c.send(ClientType::Hello);
        c.read();
        c.ws.next_layer().close();
    }
    for (int i = 0; i < 200 && s.server.closed_sessions() == 0; ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));
    EXPECT_EQ(s.server.closed_sessions(), 1u);
    EXPECT_EQ(s.server.live_sessions(), 0u);
}

TEST(WebSocket, PortInUseIsBindError) {
    RunningServer s(fast_config());
    try {
        WsServer again(s.server, "127.0.0.1:" + std::to_string(s.ws.port()));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::BindError);
    }
}

TEST(Cli, ReplayMatchesGolden) {
    std::string out;
    EXPECT_EQ(run_cli({"replay", "--scenario", "scenarios/golden/basic_turn"}, &out), 0);
    EXPECT_EQ(out, read_file("scenarios/golden/basic_turn/golden.log"));
    EXPECT_EQ(run_cli({"replay", "--scenario", "scenarios/golden/empty"}, &out), 0);
    EXPECT_EQ(out, read_file("scenarios/golden/empty/golden.log"));
}

TEST(Cli, ExitCodes) {
    std::string err;
    EXPECT_EQ(run_cli({"replay", "--scenario", "scenarios/nope"}, nullptr, &err), 4);
    EXPECT_NE(err.find("error:"), std::string::npos);
    const auto bad = std::filesystem::temp_directory_path() / "xtalk_bad.json";
    std::ofstream(bad) << R"({"asr":{"window_W":1}})";
    EXPECT_EQ(run_cli({"validate-config", "--config", bad.string()}, nullptr, &err), 2);
    EXPECT_NE(err.find("asr.window_W"), std::string::npos);
    std::filesystem::remove(bad);
    EXPECT_EQ(run_cli({"validate-config", "--config", "config/xtalk.json"}), 0);
    EXPECT_NE(run_cli({}), 0);
}

TEST(Cli, BenchWritesRowsAndTable) {
    const auto out = std::filesystem::temp_directory_path() / "xtalk_bench.jsonl";
    std::string text;
    ASSERT_EQ(run_cli({"bench", "--lengths", "5", "--langs", "cn,en", "--combos", "native_streaming", "--runs", "1",
                       "--out", out.string()},
                      &text),
              0);
    std::ifstream in(out);
    std::string line;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j["config"], "native_streaming");
        EXPECT_EQ(j["length_s"], 5);
        ++rows;
    }
    EXPECT_EQ(rows, 2u);
    EXPECT_TRUE(std::filesystem::exists(cli::table_path(out)));
    std::filesystem::remove(out);
    std::filesystem::remove(cli::table_path(out));
}

TEST(Cli, LogLevelFromEnvironment) {
    cli::apply_log_level("debug");
    EXPECT_EQ(spdlog::get_level(), spdlog::level::debug);
    cli::apply_log_level("off");
    EXPECT_EQ(spdlog::get_level(), spdlog::level::off);
    cli::apply_log_level("loud");
    EXPECT_EQ(spdlog::get_level(), spdlog::level::info);
    cli::apply_log_level(nullptr);
    EXPECT_EQ(spdlog::get_level(), spdlog::level::info);
}

TEST(Cli, ServeStopsOnSigint) {
    int pipe_fd[2];
    ASSERT_EQ(pipe(pipe_fd), 0);
    const pid_t pid = fork();
    ASSERT_GE(pid, 0);
    if (pid == 0) {
        dup2(pipe_fd[1], STDOUT_FILENO);
        close(pipe_fd[0]);
        setenv("XTALK_LOG_LEVEL", "off", 1);
        execl(XTALK_BIN, XTALK_BIN, "serve", "--config", "config/xtalk.json", "--listen", "127.0.0.1:0",
              static_cast<char*>(nullptr));
        _exit(127);
    }
    close(pipe_fd[1]);
    FILE* out = fdopen(pipe_fd[0], "r");
    char line[256] = {};
    ASSERT_NE(fgets(line, sizeof line, out), nullptr);
    const std::string first(line);
    EXPECT_EQ(first.rfind("listening ws://127.0.0.1:", 0), 0u) << first;
    const auto port = static_cast<std::uint16_t>(std::stoi(first.substr(first.rfind(':') + 1)));
    {
        Client c;
        ASSERT_FALSE(c.connect(port, "/session", "xtalk.v1"));
        c.send(ClientType::Hello);
        EXPECT_EQ(c.read().type, "hello_ack");
        kill(pid, SIGINT);
        beast::flat_buffer buf;
        beast::error_code ec;
        c.ws.read(buf, ec);
        EXPECT_TRUE(ec);
    }
    std::string rest;
    while (fgets(line, sizeof line, out)) rest += line;
    fclose(out);
    int status = 0;
    waitpid(pid, &status, 0);
    ASSERT_TRUE(WIFEXITED(status));
    EXPECT_EQ(WEXITSTATUS(status), 0);
    EXPECT_EQ(rest, "sessions closed: 1\n");
}
