#include "doppel/arena_http.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "doppel/error.hpp"

namespace doppel {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

int status_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::UnknownSession:
        case ErrorCode::UnknownParticipant: return 404;
        case ErrorCode::Unauthorized: return 401;
        case ErrorCode::SessionExpired:
        case ErrorCode::NotYourTurn:
        case ErrorCode::NotAwaitingVerdict:
        case ErrorCode::AlreadyRevealed:
        case ErrorCode::ConfederateDisconnected:
        case ErrorCode::PoolExhausted: return 409;
        case ErrorCode::InvalidRating:
        case ErrorCode::InvalidReason:
        case ErrorCode::InvalidQuestionnaire:
        case ErrorCode::InvalidArgument: return 422;
        default: return 500;
    }
}

void send_json(httplib::Response& res, int status, const ordered_json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view code, std::string_view message) {
    ordered_json body;
    body["error"] = code;
    body["message"] = message;
    send_json(res, status, body);
}

json body_of(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    return json::parse(req.body);
}

// Wraps a handler with the error-to-status mapping.
template <typename F>
httplib::Server::Handler guarded(F f) {
    return [f = std::move(f)](const httplib::Request& req, httplib::Response& res) {
        try {
            f(req, res);
        } catch (const Error& e) {
            send_error(res, status_for(e.code()), to_string(e.code()), e.what());
        } catch (const json::exception& e) {
            send_error(res, 400, "BadRequest", e.what());
        } catch (const std::exception& e) {
            send_error(res, 500, "InternalError", e.what());
        }
    };
}

}  // namespace

struct ArenaServer::Impl {
    Arena& arena;
    Options options;
    httplib::Server server;
    std::thread listener;
    std::thread ticker;
    std::mutex tick_mu;
    std::condition_variable tick_cv;
    bool stopping = false;

    Impl(Arena& a, Options o) : arena(a), options(std::move(o)) { routes(); }

    void require_participant(const httplib::Request& req, const std::string& session_id) {
        const auto token = req.get_header_value("X-Participant-Token");
        if (token.empty() || !arena.check_session_token(session_id, token))
            throw Error(ErrorCode::Unauthorized, "missing or wrong participant token");
    }

    void require_confederate(const httplib::Request& req, const std::string& session_id) {
        const auto token = req.get_header_value("X-Confederate-Token");
        if (token.empty() || !arena.check_confederate_token(session_id, token))
            throw Error(ErrorCode::Unauthorized, "missing or wrong confederate token");
    }

    void events(const httplib::Request& req, httplib::Response& res, Party viewer) {
        const auto& id = req.path_params.at("id");
        std::size_t since = 0;
        if (req.has_param("since")) since = std::stoull(req.get_param_value("since"));
        double wait = 0.0;
        if (req.has_param("wait")) wait = std::stod(req.get_param_value("wait"));
        const auto timeout = std::min<std::chrono::milliseconds>(
            std::chrono::milliseconds(static_cast<std::int64_t>(std::max(0.0, wait) * 1000.0)),
            std::chrono::duration_cast<std::chrono::milliseconds>(options.max_wait));
        send_json(res, 200, to_json(arena.wait_events(id, viewer, since, timeout)));
    }

    void routes() {
        server.set_default_headers({{"Access-Control-Allow-Origin", options.cors_origin},
                                    {"Access-Control-Allow-Headers",
                                     "Content-Type, X-Participant-Token, X-Confederate-Token"},
                                    {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
        server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

        server.Post("/participants", guarded([this](const httplib::Request& req, httplib::Response& res) {
                        json body;
                        try {
                            body = body_of(req);
                        } catch (const json::exception& e) {
                            throw Error(ErrorCode::InvalidQuestionnaire, e.what());
                        }
                        const auto reg = arena.register_participant(questionnaire_from_json(body));
                        ordered_json out;
                        out["participant_id"] = reg.participant_id;
                        out["token"] = reg.token;
                        send_json(res, 201, out);
                    }));

        server.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
                        const auto body = body_of(req);
                        const auto pid = body.at("participant_id").get<std::string>();
                        const auto token = req.get_header_value("X-Participant-Token");
                        if (!arena.participant(pid))
                            throw Error(ErrorCode::UnknownParticipant, "unknown participant " + pid);
                        if (token.empty() || !arena.check_participant_token(pid, token))
                            throw Error(ErrorCode::Unauthorized, "missing or wrong participant token");
                        const auto handle = arena.create_session(pid);
                        ordered_json out;
                        out["session_id"] = handle.session_id;
                        out["topic"] = handle.topic;
                        out["prompt"] = handle.prompt;
                        send_json(res, 201, out);
                    }));

        server.Post("/sessions/:id/messages", guarded([this](const httplib::Request& req, httplib::Response& res) {
                        const auto& id = req.path_params.at("id");
                        require_participant(req, id);
                        arena.post_message(id, Party::Participant, body_of(req).at("text").get<std::string>());
                        send_json(res, 202, ordered_json{{"accepted", true}});
                    }));

        server.Post("/sessions/:id/end-turn", guarded([this](const httplib::Request& req, httplib::Response& res) {
                        const auto& id = req.path_params.at("id");
                        require_participant(req, id);
                        arena.end_turn(id, Party::Participant);
                        send_json(res, 202, ordered_json{{"accepted", true}});
                    }));

        server.Get("/sessions/:id/events", guarded([this](const httplib::Request& req, httplib::Response& res) {
                       require_participant(req, req.path_params.at("id"));
                       events(req, res, Party::Participant);
                   }));

        server.Post("/sessions/:id/verdict", guarded([this](const httplib::Request& req, httplib::Response& res) {
                        const auto& id = req.path_params.at("id");
                        require_participant(req, id);
                        const auto body = body_of(req);
                        const auto& rating = body.at("rating");
                        if (!rating.is_number_integer())
                            throw Error(ErrorCode::InvalidRating, "rating must be an integer");
                        const auto reveal = arena.submit_verdict(
                            id, rating.get<int>(), body.value("reasons", std::vector<std::string>{}),
                            body.value("free_text", std::string{}));
                        send_json(res, 200, to_json(reveal));
                    }));

        server.Get("/confederate/sessions", guarded([this](const httplib::Request&, httplib::Response& res) {
                       ordered_json out = ordered_json::array();
                       for (const auto& h : arena.open_relay_sessions()) {
                           ordered_json e;
                           e["session_id"] = h.session_id;
                           e["topic"] = h.topic;
                           e["prompt"] = h.prompt;
                           out.push_back(std::move(e));
                       }
                       send_json(res, 200, out);
                   }));

        server.Post("/confederate/sessions/:id/join",
                    guarded([this](const httplib::Request& req, httplib::Response& res) {
                        ordered_json out;
                        out["token"] = arena.confederate_join(req.path_params.at("id"));
                        send_json(res, 201, out);
                    }));

        server.Post("/confederate/sessions/:id/messages",
                    guarded([this](const httplib::Request& req, httplib::Response& res) {
                        const auto& id = req.path_params.at("id");
                        require_confederate(req, id);
                        arena.post_message(id, Party::Interlocutor, body_of(req).at("text").get<std::string>());
                        send_json(res, 202, ordered_json{{"accepted", true}});
                    }));

        server.Post("/confederate/sessions/:id/end-turn",
                    guarded([this](const httplib::Request& req, httplib::Response& res) {
                        const auto& id = req.path_params.at("id");
                        require_confederate(req, id);
                        arena.end_turn(id, Party::Interlocutor);
                        send_json(res, 202, ordered_json{{"accepted", true}});
                    }));

        server.Get("/confederate/sessions/:id/events",
                   guarded([this](const httplib::Request& req, httplib::Response& res) {
                       require_confederate(req, req.path_params.at("id"));
                       events(req, res, Party::Interlocutor);
                   }));

        server.Post("/confederate/sessions/:id/leave",
                    guarded([this](const httplib::Request& req, httplib::Response& res) {
                        const auto& id = req.path_params.at("id");
                        require_confederate(req, id);
                        arena.confederate_leave(id);
                        send_json(res, 202, ordered_json{{"accepted", true}});
                    }));
    }

    void start_ticker() {
        ticker = std::thread([this] {
            std::unique_lock lock(tick_mu);
            while (!stopping) {
                tick_cv.wait_for(lock, options.tick_interval);
                if (stopping) break;
                lock.unlock();
                try {
                    arena.tick();
                } catch (...) {
                    // A failing tick must not take the server down; the next tick retries.
                }
                lock.lock();
            }
        });
    }

    void stop_all() {
        {
            std::lock_guard lock(tick_mu);
            stopping = true;
        }
        tick_cv.notify_all();
        server.stop();
        if (listener.joinable()) listener.join();
        if (ticker.joinable()) ticker.join();
    }
};

ArenaServer::ArenaServer(Arena& arena) : ArenaServer(arena, Options{}) {}

ArenaServer::ArenaServer(Arena& arena, Options options) : impl_(std::make_unique<Impl>(arena, std::move(options))) {}

ArenaServer::~ArenaServer() { impl_->stop_all(); }

int ArenaServer::start(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
        bound = impl_->server.bind_to_any_port(host);
        if (bound < 0) throw Error(ErrorCode::IoError, "cannot bind " + host);
    } else if (!impl_->server.bind_to_port(host, port)) {
        throw Error(ErrorCode::IoError, "cannot bind " + host + ":" + std::to_string(port));
    }
    impl_->start_ticker();
    impl_->listener = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    return bound;
}

void ArenaServer::serve(const std::string& host, int port) {
    if (!impl_->server.bind_to_port(host, port))
        throw Error(ErrorCode::IoError, "cannot bind " + host + ":" + std::to_string(port));
    impl_->start_ticker();
    impl_->server.listen_after_bind();
}

void ArenaServer::stop() { impl_->stop_all(); }

}  // namespace doppel
