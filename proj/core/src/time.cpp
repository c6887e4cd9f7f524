#include "doppel/time.hpp"

#include <cctype>
#include <cstdio>

namespace doppel {
namespace {

bool read_digits(std::string_view s, std::size_t pos, std::size_t count, int& out) {
    if (pos + count > s.size()) return false;
    int value = 0;
    for (std::size_t i = 0; i < count; ++i) {
        const char c = s[pos + i];
        if (!std::isdigit(static_cast<unsigned char>(c))) return false;
        value = value * 10 + (c - '0');
    }
    out = value;
    return true;
}

// Parses "YYYY-MM-DD?HH:MM:SS" where ? is one of `separators`.
std::optional<Timestamp> parse_core(std::string_view s, std::string_view separators,
                                    std::size_t& consumed) {
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
    if (s.size() < 19) return std::nullopt;
    if (!read_digits(s, 0, 4, y) || s[4] != '-' || !read_digits(s, 5, 2, mo) || s[7] != '-' ||
        !read_digits(s, 8, 2, d))
        return std::nullopt;
    if (separators.find(s[10]) == std::string_view::npos) return std::nullopt;
    if (!read_digits(s, 11, 2, h) || s[13] != ':' || !read_digits(s, 14, 2, mi) ||
        s[16] != ':' || !read_digits(s, 17, 2, sec))
        return std::nullopt;
    if (h > 23 || mi > 59 || sec > 60) return std::nullopt;

    const std::chrono::year_month_day ymd{std::chrono::year{y},
                                          std::chrono::month{static_cast<unsigned>(mo)},
                                          std::chrono::day{static_cast<unsigned>(d)}};
    if (!ymd.ok()) return std::nullopt;
    consumed = 19;
    return Timestamp{std::chrono::sys_days{ymd}} + std::chrono::hours{h} +
           std::chrono::minutes{mi} + Seconds{sec};
}

}  // namespace

std::optional<Timestamp> parse_rfc3339(std::string_view text) {
    std::size_t pos = 0;
    auto base = parse_core(text, "Tt ", pos);
    if (!base) return std::nullopt;

    if (pos < text.size() && text[pos] == '.') {
        ++pos;
        const std::size_t start = pos;
        while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) ++pos;
        if (pos == start) return std::nullopt;
    }
    if (pos == text.size()) return std::nullopt;  // offset is mandatory

    const char zone = text[pos];
    if (zone == 'Z' || zone == 'z') {
        return pos + 1 == text.size() ? base : std::nullopt;
    }
    if (zone != '+' && zone != '-') return std::nullopt;
    int oh = 0, om = 0;
    if (!read_digits(text, pos + 1, 2, oh) || pos + 3 >= text.size() || text[pos + 3] != ':' ||
        !read_digits(text, pos + 4, 2, om) || pos + 6 != text.size())
        return std::nullopt;
    const Seconds offset = std::chrono::hours{oh} + std::chrono::minutes{om};
    return zone == '+' ? *base - offset : *base + offset;
}

std::string format_rfc3339(Timestamp t) {
    std::string s = format_datetime(t);
    s[10] = 'T';
    s += 'Z';
    return s;
}

std::string format_datetime(Timestamp t) {
    const auto days = std::chrono::floor<std::chrono::days>(t);
    const std::chrono::year_month_day ymd{days};
    const std::chrono::hh_mm_ss hms{t - days};
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u %02lld:%02lld:%02lld", int(ymd.year()),
                  unsigned(ymd.month()), unsigned(ymd.day()),
                  static_cast<long long>(hms.hours().count()),
                  static_cast<long long>(hms.minutes().count()),
                  static_cast<long long>(hms.seconds().count()));
    return buf;
}

std::optional<Timestamp> parse_datetime(std::string_view text) {
    std::size_t pos = 0;
    auto t = parse_core(text, " ", pos);
    if (!t || pos != text.size()) return std::nullopt;
    return t;
}

std::string format_date(Timestamp t) { return format_datetime(t).substr(0, 10); }

}  // namespace doppel
