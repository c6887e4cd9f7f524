#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace doppel {

// All timestamps are UTC with second resolution.
using Timestamp = std::chrono::sys_seconds;
using Seconds = std::chrono::seconds;

inline Timestamp from_unix(std::int64_t secs) { return Timestamp{Seconds{secs}}; }
inline std::int64_t to_unix(Timestamp t) { return t.time_since_epoch().count(); }

// Accepts "YYYY-MM-DDTHH:MM:SS" followed by an optional fraction and a "Z" or
// "+HH:MM"/"-HH:MM" offset. Lowercase 't'/'z' and a space separator are tolerated.
std::optional<Timestamp> parse_rfc3339(std::string_view text);

// "YYYY-MM-DDTHH:MM:SSZ"
std::string format_rfc3339(Timestamp t);

// "YYYY-MM-DD HH:MM:SS", the rendering used in transcripts and memory lines.
std::string format_datetime(Timestamp t);
std::optional<Timestamp> parse_datetime(std::string_view text);

// "YYYY-MM-DD"
std::string format_date(Timestamp t);

}  // namespace doppel
