#pragma once

#include <chrono>
#include <functional>
#include <condition_variable>
#include <mutex>
#include <stop_token>

#include "xtalk/error.hpp"

namespace xtalk {

using Clock = std::chrono::steady_clock;
using Millis = std::chrono::duration<double, std::milli>;

/// Sleeps for `ms`, waking early when `token` is stopped.
/// Returns false if the wait was cut short by cancellation.
inline bool sleep_for_cancellable(double ms, const std::stop_token& token) {
    if (token.stop_requested()) return false;
    if (ms <= 0.0) return true;
    std::mutex m;
    std::condition_variable_any cv;
    std::unique_lock lock(m);
    const auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(Millis(ms));
    cv.wait_until(lock, token, deadline, [] { return false; });
    return !token.stop_requested();
}

/// Same as sleep_for_cancellable but throws Error(Cancelled) on stop.
inline void sleep_or_throw(double ms, const std::stop_token& token) {
    if (!sleep_for_cancellable(ms, token)) throw Error(ErrorCode::Cancelled, "call cancelled");
}

/// A stop source that is also stopped whenever its parent token stops.
class LinkedStopSource {
public:
    explicit LinkedStopSource(const std::stop_token& parent)
        : link_(parent, [this] { source_.request_stop(); }) {}

    LinkedStopSource(const LinkedStopSource&) = delete;
    LinkedStopSource& operator=(const LinkedStopSource&) = delete;

    std::stop_token token() const { return source_.get_token(); }
    void request_stop() { source_.request_stop(); }
    bool stop_requested() const { return source_.stop_requested(); }

private:
    std::stop_source source_;
    std::stop_callback<std::function<void()>> link_;
};

inline double elapsed_ms(Clock::time_point from, Clock::time_point to) {
    return std::chrono::duration_cast<Millis>(to - from).count();
}

}  // namespace xtalk
