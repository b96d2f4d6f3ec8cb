#pragma once

// Raw event ingestion and per-user sessionization.
//
// Times are hours throughout. A session is a maximal run of one user's events
// whose consecutive spacing is strictly below the threshold.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace rtpp::eventlog {

struct Event {
  std::string user_id;
  double timestamp = 0.0;  // hours
};

struct Session {
  double start = 0.0;         // hours
  double gap = 0.0;           // hours; 0 for a user's first session
  std::int64_t duration = 1;  // events in the session

  bool operator==(const Session&) const = default;
};

struct SessionSequence {
  std::string user_id;
  std::vector<Session> sessions;

  std::size_t size() const { return sessions.size(); }
  /// Latest session start, the horizon over which the sequence was observed.
  double horizon() const { return sessions.empty() ? 0.0 : sessions.back().start; }
  bool operator==(const SessionSequence&) const = default;
};

/// Per-user sorted, deduplicated timestamps, keyed (and so ordered) by user id.
using EventsByUser = std::map<std::string, std::vector<double>>;

enum class EventFormat { Csv, Jsonl };
/// Unit of numeric timestamps; ISO-8601 strings are always converted from UTC.
enum class TimeUnit { Hours, Seconds };
enum class GapMode { StartToStart, EndToStart };

EventFormat format_from_path(const std::filesystem::path& path);
const char* to_string(GapMode mode);
GapMode parse_gap_mode(const std::string& s);

/// Hours since the Unix epoch for an ISO-8601 date or date-time string.
double parse_iso8601_hours(const std::string& text);

EventsByUser ingest_events(std::istream& in, EventFormat format, TimeUnit unit = TimeUnit::Hours);
EventsByUser ingest_events(const std::filesystem::path& path, EventFormat format, TimeUnit unit = TimeUnit::Hours);

SessionSequence sessionize(const std::string& user_id, std::span<const double> timestamps, double threshold_hours,
                           GapMode mode = GapMode::StartToStart);
std::vector<SessionSequence> sessionize_all(const EventsByUser& events, double threshold_hours,
                                            GapMode mode = GapMode::StartToStart);

/// Deterministic user-level partition; both halves are returned sorted by user id.
std::pair<std::vector<SessionSequence>, std::vector<SessionSequence>> split_users(
    std::vector<SessionSequence> sequences, double train_fraction, std::uint64_t seed);

/// Checks the structural invariants of a loaded sequence; throws DataError.
void validate(const SessionSequence& seq);

void write_sessions(std::ostream& out, std::span<const SessionSequence> sequences);
void write_sessions(const std::filesystem::path& path, std::span<const SessionSequence> sequences);
std::vector<SessionSequence> read_sessions(std::istream& in);
std::vector<SessionSequence> read_sessions(const std::filesystem::path& path);
/// True when the first non-empty line of the file is a sessions record.
bool looks_like_sessions_file(const std::filesystem::path& path);

}  // namespace rtpp::eventlog
