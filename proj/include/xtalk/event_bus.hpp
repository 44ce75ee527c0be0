#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xtalk/cancel.hpp"
#include "xtalk/event.hpp"

namespace xtalk {

inline constexpr std::size_t kDefaultQueueCapacity = 1024;

class EventBus;

/// One subscriber's queue within a session scope. Events are served in
/// (priority, event_id) order.
class Subscription {
public:
    Subscription(SessionId session, std::string id, KindSet kinds, std::size_t capacity)
        : session_(std::move(session)), id_(std::move(id)), kinds_(kinds), capacity_(capacity) {}

    const SessionId& session() const { return session_; }
    const std::string& id() const { return id_; }
    const KindSet& kinds() const { return kinds_; }

    std::size_t pending() const {
        std::lock_guard lock(mu_);
        return queue_.size();
    }

    /// Number of pending events of `kind`.
    std::size_t pending(EventKind kind) const {
        std::lock_guard lock(mu_);
        std::size_t n = 0;
        for (const auto& [key, ev] : queue_) n += ev.kind == kind;
        return n;
    }

    std::uint64_t delivered() const { return delivered_.load(); }
    std::uint64_t dropped() const { return dropped_.load(); }

private:
    friend class EventBus;
    using Key = std::pair<std::uint8_t, std::uint64_t>;

    // Returns false if the event was discarded.
    bool push(Event ev) {
        std::unique_lock lock(mu_);
        if (closed_) return false;
        if (ev.priority == Priority::Data) {
            space_cv_.wait(lock, [&] { return closed_ || non_control_ < capacity_; });
            if (closed_) return false;
        } else if (ev.priority == Priority::Telemetry && non_control_ >= capacity_) {
            dropped_.fetch_add(1);
            return false;
        }
        if (ev.priority != Priority::Control) ++non_control_;
        Key key{static_cast<std::uint8_t>(ev.priority), ev.event_id};
        queue_.emplace(key, std::move(ev));
        items_cv_.notify_one();
        return true;
    }

    std::optional<Event> pop_locked() {
        if (queue_.empty()) return std::nullopt;
        auto it = queue_.begin();
        Event ev = std::move(it->second);
        queue_.erase(it);
        if (ev.priority != Priority::Control) {
            --non_control_;
            space_cv_.notify_one();
        }
        delivered_.fetch_add(1);
        return ev;
    }

    // After close only CONTROL events are still served.
    void close() {
        std::lock_guard lock(mu_);
        if (closed_) return;
        closed_ = true;
        for (auto it = queue_.begin(); it != queue_.end();) {
            if (it->second.priority != Priority::Control) {
                it = queue_.erase(it);
            } else {
                ++it;
            }
        }
        non_control_ = 0;
        items_cv_.notify_all();
        space_cv_.notify_all();
    }

    SessionId session_;
    std::string id_;
    KindSet kinds_;
    std::size_t capacity_;

    mutable std::mutex mu_;
    std::condition_variable items_cv_;
    std::condition_variable space_cv_;
    std::map<Key, Event> queue_;
    std::size_t non_control_ = 0;
    bool closed_ = false;
    std::atomic<std::uint64_t> delivered_{0};
    std::atomic<std::uint64_t> dropped_{0};
};

/// In-process publish/subscribe bus partitioned into per-session scopes.
class EventBus {
public:
    EventBus() = default;
    EventBus(const EventBus&) = delete;
    EventBus& operator=(const EventBus&) = delete;

    std::shared_ptr<Subscription> subscribe(const SessionId& session, const std::string& subscriber_id,
                                            KindSet kinds, std::size_t capacity = kDefaultQueueCapacity) {
        auto scope = find_or_create(session);
        std::lock_guard lock(scope->mu);
        if (scope->state == Scope::State::Closed) {
            throw Error(ErrorCode::UnknownSession, "session " + session + " is closed");
        }
        for (const auto& s : scope->subs) {
            if (s->id() == subscriber_id) {
                throw Error(ErrorCode::DuplicateSubscriber, subscriber_id + " in session " + session);
            }
        }
        auto sub = std::make_shared<Subscription>(session, subscriber_id, kinds, capacity);
        scope->subs.push_back(sub);
        return sub;
    }

    void unsubscribe(const std::shared_ptr<Subscription>& sub) {
        if (!sub) return;
        if (auto scope = find(sub->session())) {
            std::lock_guard lock(scope->mu);
            std::erase(scope->subs, sub);
        }
        sub->close();
    }

    /// Enqueues `ev` for every matching subscription of its session and
    /// returns how many matched. Assigns event_id. Never waits on handlers;
    /// DATA events wait only when a subscriber queue is at capacity.
    std::size_t publish(Event ev) {
        auto scope = ev.kind == EventKind::SessionOpen ? find_or_create(ev.session) : find(ev.session);
        if (!scope) throw Error(ErrorCode::UnknownSession, ev.session);

        std::vector<std::shared_ptr<Subscription>> targets;
        bool closing = false;
        {
            std::lock_guard lock(scope->mu);
            if (scope->state == Scope::State::Closed ||
                (scope->state == Scope::State::Pending && ev.kind != EventKind::SessionOpen)) {
                throw Error(ErrorCode::UnknownSession, ev.session);
            }
            if (ev.kind == EventKind::SessionOpen) scope->state = Scope::State::Open;
            if (ev.kind == EventKind::SessionClose) {
                scope->state = Scope::State::Closed;
                closing = true;
            }
            ev.event_id = scope->next_id++;
            ev.priority = priority_of(ev.kind);
            for (const auto& s : scope->subs) {
                if (s->kinds().contains(ev.kind)) targets.push_back(s);
            }
        }

        std::size_t matched = targets.size();
        for (std::size_t i = 0; i < targets.size(); ++i) {
            if (i + 1 == targets.size()) {
                targets[i]->push(std::move(ev));
            } else {
                targets[i]->push(ev);
            }
        }
        if (closing) close_scope(scope);
        return matched;
    }

    /// Blocks until the subscription has an event. Throws SessionClosed once
    /// the session (or subscription) is closed and no CONTROL event remains.
    Event next_for(Subscription& sub) {
        std::unique_lock lock(sub.mu_);
        sub.items_cv_.wait(lock, [&] { return sub.closed_ || !sub.queue_.empty(); });
        if (auto ev = sub.pop_locked()) return std::move(*ev);
        throw Error(ErrorCode::SessionClosed, sub.session());
    }

    /// Like next_for but gives up after `timeout`.
    std::optional<Event> try_next_for(Subscription& sub, std::chrono::milliseconds timeout) {
        std::unique_lock lock(sub.mu_);
        if (!sub.items_cv_.wait_for(lock, timeout, [&] { return sub.closed_ || !sub.queue_.empty(); })) {
            return std::nullopt;
        }
        if (auto ev = sub.pop_locked()) return ev;
        throw Error(ErrorCode::SessionClosed, sub.session());
    }

    bool is_open(const SessionId& session) const {
        auto scope = find(session);
        if (!scope) return false;
        std::lock_guard lock(scope->mu);
        return scope->state == Scope::State::Open;
    }

    std::size_t subscriber_count(const SessionId& session) const {
        auto scope = find(session);
        if (!scope) return 0;
        std::lock_guard lock(scope->mu);
        return scope->subs.size();
    }

    std::size_t scope_count() const {
        std::shared_lock lock(mu_);
        return scopes_.size();
    }

private:
    struct Scope {
        enum class State { Pending, Open, Closed };
        std::mutex mu;
        State state = State::Pending;
        std::uint64_t next_id = 1;
        std::vector<std::shared_ptr<Subscription>> subs;
    };

    std::shared_ptr<Scope> find(const SessionId& session) const {
        std::shared_lock lock(mu_);
        auto it = scopes_.find(session);
        return it == scopes_.end() ? nullptr : it->second;
    }

    std::shared_ptr<Scope> find_or_create(const SessionId& session) {
        if (auto s = find(session)) return s;
        std::unique_lock lock(mu_);
        auto& slot = scopes_[session];
        if (!slot) slot = std::make_shared<Scope>();
        return slot;
    }

    void close_scope(const std::shared_ptr<Scope>& scope) {
        std::vector<std::shared_ptr<Subscription>> subs;
        {
            std::lock_guard lock(scope->mu);
            subs = scope->subs;
        }
        for (auto& s : subs) s->close();
        std::unique_lock lock(mu_);
        for (auto it = scopes_.begin(); it != scopes_.end(); ++it) {
            if (it->second == scope) {
                scopes_.erase(it);
                break;
            }
        }
    }

    mutable std::shared_mutex mu_;
    std::unordered_map<SessionId, std::shared_ptr<Scope>> scopes_;
};

/// Runs `handler` for every event of one subscription on a dedicated thread,
/// one invocation at a time, until the session closes.
class SubscriptionWorker {
public:
    using Handler = std::function<void(const Event&)>;

    SubscriptionWorker(EventBus& bus, std::shared_ptr<Subscription> sub, Handler handler)
        : bus_(bus), sub_(std::move(sub)), handler_(std::move(handler)) {
        thread_ = std::jthread([this] { run(); });
    }

    SubscriptionWorker(const SubscriptionWorker&) = delete;
    SubscriptionWorker& operator=(const SubscriptionWorker&) = delete;

    ~SubscriptionWorker() { stop(); }

    void stop() {
        bus_.unsubscribe(sub_);
        if (thread_.joinable() && thread_.get_id() != std::this_thread::get_id()) thread_.join();
    }

    const Subscription& subscription() const { return *sub_; }

private:
    void run() {
        for (;;) {
            Event ev;
            try {
                ev = bus_.next_for(*sub_);
            } catch (const Error&) {
                return;
            }
            try {
                handler_(ev);
            } catch (const Error& e) {
                if (e.code() == ErrorCode::UnknownSession || e.code() == ErrorCode::SessionClosed) continue;
                last_error_ = e.what();
            } catch (const std::exception& e) {
                last_error_ = e.what();
            }
        }
    }

    EventBus& bus_;
    std::shared_ptr<Subscription> sub_;
    Handler handler_;
    std::string last_error_;
    std::jthread thread_;
};

}  // namespace xtalk
