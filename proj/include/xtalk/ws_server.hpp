#pragma once

#include <sys/socket.h>

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <spdlog/spdlog.h>

#include "xtalk/error.hpp"
#include "xtalk/session_runtime.hpp"
#include "xtalk/text.hpp"
#include "xtalk/wire_gateway.hpp"

namespace xtalk {

struct ListenAddress {
    std::string host;
    std::uint16_t port = 0;
};

/// Parses "host:port". Port 0 asks the OS for an ephemeral port.
inline ListenAddress parse_listen(std::string_view addr) {
    const auto colon = addr.rfind(':');
    if (colon == std::string_view::npos || colon == 0) {
        throw Error(ErrorCode::InvalidConfig, "listen address must be host:port, got '" + std::string(addr) + "'");
    }
    ListenAddress out;
    out.host = std::string(addr.substr(0, colon));
    if (out.host.size() > 2 && out.host.front() == '[' && out.host.back() == ']') {
        out.host = out.host.substr(1, out.host.size() - 2);
    }
    const auto port = addr.substr(colon + 1);
    unsigned long v = 0;
    for (char c : port) {
        if (c < '0' || c > '9') throw Error(ErrorCode::InvalidConfig, "bad port '" + std::string(port) + "'");
        v = v * 10 + static_cast<unsigned long>(c - '0');
        if (v > 65535) throw Error(ErrorCode::InvalidConfig, "port out of range '" + std::string(port) + "'");
    }
    if (port.empty()) throw Error(ErrorCode::InvalidConfig, "missing port in '" + std::string(addr) + "'");
    out.port = static_cast<std::uint16_t>(v);
    return out;
}

/// True if a Sec-WebSocket-Protocol header value lists `proto`.
inline bool offers_subprotocol(std::string_view header, std::string_view proto) {
    while (!header.empty()) {
        const auto comma = header.find(',');
        const auto item = text::trim(header.substr(0, comma));
        if (item == proto) return true;
        if (comma == std::string_view::npos) break;
        header.remove_prefix(comma + 1);
    }
    return false;
}

namespace ws_detail {
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;
}  // namespace ws_detail

/// One accepted WebSocket. Writes from pipeline threads are serialized; the
/// connection thread is the only reader.
class WsPeer : public FrameSink {
public:
    explicit WsPeer(ws_detail::tcp::socket socket) : ws_(std::move(socket)) {}

    void send(const WireFrame& frame) override {
        std::lock_guard lock(mu_);
        if (closed_) return;
        ws_detail::beast::error_code ec;
        ws_.binary(frame.binary);
        ws_.write(ws_detail::net::buffer(frame.data), ec);
        if (ec) closed_ = true;
    }

    void close() override {
        std::lock_guard lock(mu_);
        if (closed_) return;
        closed_ = true;
        ws_detail::beast::error_code ec;
        ws_.close(ws_detail::websocket::close_code::normal, ec);
    }

    /// Aborts a blocked read from any thread.
    void abort() { ::shutdown(native_, SHUT_RDWR); }

    ws_detail::websocket::stream<ws_detail::tcp::socket>& stream() { return ws_; }
    void set_native(int fd) { native_ = fd; }

private:
    ws_detail::websocket::stream<ws_detail::tcp::socket> ws_;
    std::mutex mu_;
    bool closed_ = false;
    int native_ = -1;
};

/// Accepts WebSocket connections on `/session` (subprotocol `xtalk.v1`) and
/// gives each its own thread and Connection.
class WsServer {
public:
    WsServer(Server& server, const std::string& listen) : server_(server), acceptor_(ioc_) {
        using namespace ws_detail;
        const auto addr = parse_listen(listen);
        beast::error_code ec;
        const auto ip = net::ip::make_address(addr.host == "localhost" ? "127.0.0.1" : addr.host, ec);
        if (ec) throw Error(ErrorCode::BindError, "cannot resolve '" + addr.host + "': " + ec.message());
        const tcp::endpoint ep(ip, addr.port);
        acceptor_.open(ep.protocol(), ec);
        if (!ec) acceptor_.set_option(net::socket_base::reuse_address(true), ec);
        if (!ec) acceptor_.bind(ep, ec);
        if (!ec) acceptor_.listen(net::socket_base::max_listen_connections, ec);
        if (ec) throw Error(ErrorCode::BindError, "cannot listen on " + listen + ": " + ec.message());
        port_ = acceptor_.local_endpoint().port();
    }

    ~WsServer() {
        stop();
        join_all();
    }

    std::uint16_t port() const { return port_; }
    ws_detail::net::io_context& context() { return ioc_; }

    /// Serves until stop(); on return every connection has ended and its
    /// session is closed.
    void run() {
        do_accept();
        ioc_.run();
        join_all();
        server_.shutdown();
    }

    /// Thread-safe; also usable from a signal handler running on context().
    void stop() {
        if (stopping_.exchange(true)) return;
        ws_detail::net::post(ioc_, [this] {
            ws_detail::beast::error_code ec;
            acceptor_.close(ec);
            std::lock_guard lock(mu_);
            for (auto& [id, peer] : peers_) peer->abort();
        });
        ws_detail::net::post(ioc_, [this] { ioc_.stop(); });
    }

    std::size_t connections() const {
        std::lock_guard lock(mu_);
        return peers_.size();
    }

private:
    void do_accept() {
        acceptor_.async_accept([this](ws_detail::beast::error_code ec, ws_detail::tcp::socket socket) {
            if (ec || stopping_) return;
            auto peer = std::make_shared<WsPeer>(std::move(socket));
            peer->set_native(peer->stream().next_layer().native_handle());
            std::uint64_t id = 0;
            {
                std::lock_guard lock(mu_);
                id = ++next_id_;
                peers_[id] = peer;
                threads_.emplace_back([this, id, peer] { serve(id, peer); });
            }
            do_accept();
        });
    }

    void serve(std::uint64_t id, std::shared_ptr<WsPeer> peer) {
        using namespace ws_detail;
        auto& ws = peer->stream();
        beast::flat_buffer buffer;
        beast::error_code ec;
        http::request<http::string_body> req;
        http::read(ws.next_layer(), buffer, req, ec);
        if (!ec) {
            if (!websocket::is_upgrade(req) || std::string_view(req.target().data(), req.target().size()) != kSessionPath) {
                reject(ws.next_layer(), req, http::status::not_found, "no such endpoint");
                ec = http::error::end_of_stream;
            } else if (!offers_subprotocol(std::string(req[http::field::sec_websocket_protocol]), kSubprotocol)) {
                reject(ws.next_layer(), req, http::status::bad_request, "subprotocol xtalk.v1 required");
                ec = http::error::end_of_stream;
            }
        }
        if (!ec) {
            ws.set_option(websocket::stream_base::decorator([](websocket::response_type& res) {
                res.set(http::field::sec_websocket_protocol, std::string(kSubprotocol));
                res.set(http::field::server, "xtalk");
            }));
            ws.accept(req, ec);
        }
        if (!ec) {
            Connection conn(server_, peer);
            beast::flat_buffer msg;
            while (true) {
                ws.read(msg, ec);
                if (ec) break;
                conn.on_frame(WireFrame{ws.got_binary(), beast::buffers_to_string(msg.data())});
                msg.consume(msg.size());
            }
            conn.on_disconnect();
            peer->close();
        }
        std::lock_guard lock(mu_);
        peers_.erase(id);
    }

    static void reject(ws_detail::tcp::socket& sock, const ws_detail::http::request<ws_detail::http::string_body>& req,
                       ws_detail::http::status status, const std::string& body) {
        using namespace ws_detail;
        http::response<http::string_body> res{status, req.version()};
        res.set(http::field::server, "xtalk");
        res.set(http::field::content_type, "text/plain");
        res.keep_alive(false);
        res.body() = body;
        res.prepare_payload();
        beast::error_code ec;
        http::write(sock, res, ec);
        sock.shutdown(tcp::socket::shutdown_both, ec);
    }

    void join_all() {
        std::vector<std::thread> threads;
        {
            std::lock_guard lock(mu_);
            threads.swap(threads_);
        }
        for (auto& t : threads) {
            if (t.joinable()) t.join();
        }
    }

    Server& server_;
    ws_detail::net::io_context ioc_;
    ws_detail::tcp::acceptor acceptor_;
    std::uint16_t port_ = 0;
    std::atomic<bool> stopping_{false};
    mutable std::mutex mu_;
    std::uint64_t next_id_ = 0;
    std::map<std::uint64_t, std::shared_ptr<WsPeer>> peers_;
    std::vector<std::thread> threads_;
};

}  // namespace xtalk
