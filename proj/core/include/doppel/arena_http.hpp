#pragma once

#include <chrono>
#include <memory>
#include <string>

#include "doppel/arena.hpp"

namespace doppel {

// HTTP front end for an Arena.
//
//   POST /participants                      questionnaire -> {participant_id, token}
//   POST /sessions                          {participant_id} -> {session_id, topic, prompt}
//   POST /sessions/{id}/messages            {text}
//   POST /sessions/{id}/end-turn
//   GET  /sessions/{id}/events?since=&wait= long-poll, wait in seconds
//   POST /sessions/{id}/verdict             {rating, reasons[], free_text} -> reveal
//
// Participant routes need the X-Participant-Token header. The relay routes
// under /confederate/sessions mirror the session routes and use
// X-Confederate-Token after a join.
class ArenaServer {
public:
    struct Options {
        std::chrono::milliseconds tick_interval{200};
        std::chrono::seconds max_wait{25};
        std::string cors_origin = "*";
    };

    explicit ArenaServer(Arena& arena);
    ArenaServer(Arena& arena, Options options);
    ~ArenaServer();

    ArenaServer(const ArenaServer&) = delete;
    ArenaServer& operator=(const ArenaServer&) = delete;

    // Binds and serves on a background thread. Port 0 picks a free port.
    // Returns the bound port. Throws Error(IoError) when binding fails.
    int start(const std::string& host, int port);
    // Serves on the calling thread until stop().
    void serve(const std::string& host, int port);
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace doppel
