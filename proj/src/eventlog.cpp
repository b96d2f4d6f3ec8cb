#include "rtpp/eventlog.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "rtpp/errors.hpp"
#include "rtpp/rng.hpp"

namespace rtpp::eventlog {
namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::string line_prefix(std::size_t line) { return "line " + std::to_string(line) + ": "; }

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Splits one CSV record; supports double-quoted fields with "" escapes.
std::vector<std::string> split_csv(const std::string& line, std::size_t lineno) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (quoted) throw DataError(line_prefix(lineno) + "unterminated quoted field");
  out.push_back(trim(cur));
  return out;
}

bool parse_number(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

int parse_fixed_int(const std::string& s, std::size_t pos, std::size_t len, const std::string& text) {
  if (pos + len > s.size()) throw DataError("unparseable timestamp '" + text + "'");
  int v = 0;
  for (std::size_t i = pos; i < pos + len; ++i) {
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) throw DataError("unparseable timestamp '" + text + "'");
    v = v * 10 + (s[i] - '0');
  }
  return v;
}

// Days from 1970-01-01 to y-m-d in the proleptic Gregorian calendar.
std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const auto yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m > 2 ? m - 3 : m + 9) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

double timestamp_hours(const std::string& text, TimeUnit unit) {
  double v = 0.0;
  if (parse_number(text, v)) {
    if (!std::isfinite(v)) throw DataError("non-finite timestamp '" + text + "'");
    return unit == TimeUnit::Seconds ? v / 3600.0 : v;
  }
  return parse_iso8601_hours(text);
}

void add_event(EventsByUser& out, const std::string& user, double t, std::size_t lineno) {
  if (user.empty()) throw DataError(line_prefix(lineno) + "empty user_id");
  if (!std::isfinite(t)) throw DataError(line_prefix(lineno) + "non-finite timestamp");
  out[user].push_back(t);
}

void finalize(EventsByUser& events) {
  for (auto& [user, ts] : events) {
    std::sort(ts.begin(), ts.end());
    ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  }
}

}  // namespace

EventFormat format_from_path(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".jsonl" || ext == ".json" || ext == ".ndjson") return EventFormat::Jsonl;
  return EventFormat::Csv;
}

const char* to_string(GapMode mode) { return mode == GapMode::StartToStart ? "start-to-start" : "end-to-start"; }

GapMode parse_gap_mode(const std::string& s) {
  if (s == "start-to-start") return GapMode::StartToStart;
  if (s == "end-to-start") return GapMode::EndToStart;
  throw DataError("unknown gap mode '" + s + "'");
}

double parse_iso8601_hours(const std::string& raw) {
  const std::string s = trim(raw);
  // YYYY-MM-DD[(T| )hh:mm[:ss[.fff]]][Z|(+|-)hh[:]mm]
  if (s.size() < 10 || s[4] != '-' || s[7] != '-') throw DataError("unparseable timestamp '" + raw + "'");
  const int year = parse_fixed_int(s, 0, 4, raw);
  const int month = parse_fixed_int(s, 5, 2, raw);
  const int day = parse_fixed_int(s, 8, 2, raw);
  if (month < 1 || month > 12 || day < 1 || day > 31) throw DataError("unparseable timestamp '" + raw + "'");
  double seconds = 0.0;
  std::size_t pos = 10;
  if (pos < s.size() && (s[pos] == 'T' || s[pos] == 't' || s[pos] == ' ')) {
    ++pos;
    const int hh = parse_fixed_int(s, pos, 2, raw);
    if (pos + 2 >= s.size() || s[pos + 2] != ':') throw DataError("unparseable timestamp '" + raw + "'");
    const int mm = parse_fixed_int(s, pos + 3, 2, raw);
    pos += 5;
    double ss = 0.0;
    if (pos < s.size() && s[pos] == ':') {
      ss = parse_fixed_int(s, pos + 1, 2, raw);
      pos += 3;
      if (pos < s.size() && (s[pos] == '.' || s[pos] == ',')) {
        std::size_t end = pos + 1;
        while (end < s.size() && std::isdigit(static_cast<unsigned char>(s[end]))) ++end;
        if (end == pos + 1) throw DataError("unparseable timestamp '" + raw + "'");
        double frac = 0.0;
        double scale = 0.1;
        for (std::size_t i = pos + 1; i < end; ++i, scale *= 0.1) frac += (s[i] - '0') * scale;
        ss += frac;
        pos = end;
      }
    }
    if (hh > 24 || mm > 59 || ss >= 61.0) throw DataError("unparseable timestamp '" + raw + "'");
    seconds = hh * 3600.0 + mm * 60.0 + ss;
    if (pos < s.size()) {
      if (s[pos] == 'Z' || s[pos] == 'z') {
        ++pos;
      } else if (s[pos] == '+' || s[pos] == '-') {
        const int sign = s[pos] == '+' ? 1 : -1;
        const int oh = parse_fixed_int(s, pos + 1, 2, raw);
        std::size_t mpos = pos + 3;
        if (mpos < s.size() && s[mpos] == ':') ++mpos;
        const int om = parse_fixed_int(s, mpos, 2, raw);
        seconds -= sign * (oh * 3600.0 + om * 60.0);
        pos = mpos + 2;
      }
    }
  }
  if (pos != s.size()) throw DataError("unparseable timestamp '" + raw + "'");
  const auto days = days_from_civil(year, static_cast<unsigned>(month), static_cast<unsigned>(day));
  return static_cast<double>(days) * 24.0 + seconds / 3600.0;
}

EventsByUser ingest_events(std::istream& in, EventFormat format, TimeUnit unit) {
  EventsByUser out;
  std::string line;
  std::size_t lineno = 0;
  if (format == EventFormat::Csv) {
    std::size_t user_col = 0, time_col = 0, ncols = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (trim(line).empty()) continue;
      auto fields = split_csv(line, lineno);
      if (!have_header) {
        auto u = std::find(fields.begin(), fields.end(), "user_id");
        auto t = std::find(fields.begin(), fields.end(), "timestamp");
        if (u == fields.end() || t == fields.end())
          throw DataError(line_prefix(lineno) + "header must name columns user_id and timestamp");
        user_col = static_cast<std::size_t>(u - fields.begin());
        time_col = static_cast<std::size_t>(t - fields.begin());
        ncols = fields.size();
        have_header = true;
        continue;
      }
      if (fields.size() != ncols)
        throw DataError(line_prefix(lineno) + "expected " + std::to_string(ncols) + " fields, found " +
                        std::to_string(fields.size()));
      double t = 0.0;
      try {
        t = timestamp_hours(fields[time_col], unit);
      } catch (const DataError& e) {
        throw DataError(line_prefix(lineno) + e.what());
      }
      add_event(out, fields[user_col], t, lineno);
    }
    if (!have_header) throw DataError("empty CSV input: header user_id,timestamp required");
  } else {
    while (std::getline(in, line)) {
      ++lineno;
      if (trim(line).empty()) continue;
      json rec;
      try {
        rec = json::parse(line);
      } catch (const json::parse_error& e) {
        throw DataError(line_prefix(lineno) + "invalid JSON: " + e.what());
      }
      if (!rec.is_object() || !rec.contains("user_id") || !rec.contains("timestamp") || !rec["user_id"].is_string())
        throw DataError(line_prefix(lineno) + "record needs string user_id and timestamp");
      const auto& ts = rec["timestamp"];
      double t = 0.0;
      try {
        if (ts.is_number()) {
          t = ts.get<double>();
          if (unit == TimeUnit::Seconds) t /= 3600.0;
        } else if (ts.is_string()) {
          t = timestamp_hours(ts.get<std::string>(), unit);
        } else {
          throw DataError("timestamp must be a number or ISO-8601 string");
        }
      } catch (const DataError& e) {
        throw DataError(line_prefix(lineno) + e.what());
      }
      add_event(out, rec["user_id"].get<std::string>(), t, lineno);
    }
  }
  finalize(out);
  return out;
}

EventsByUser ingest_events(const std::filesystem::path& path, EventFormat format, TimeUnit unit) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return ingest_events(in, format, unit);
}

SessionSequence sessionize(const std::string& user_id, std::span<const double> ts, double threshold, GapMode mode) {
  if (!(threshold > 0.0)) throw std::invalid_argument("sessionize: threshold must be positive");
  if (ts.empty()) throw DataError("sessionize: user '" + user_id + "' has no events");
  SessionSequence seq{user_id, {}};
  double prev_end = ts[0];
  seq.sessions.push_back({ts[0], 0.0, 1});
  for (std::size_t j = 1; j < ts.size(); ++j) {
    if (ts[j] < ts[j - 1]) throw DataError("sessionize: events for '" + user_id + "' are not sorted");
    if (ts[j] - ts[j - 1] < threshold) {
      ++seq.sessions.back().duration;
    } else {
      const double last_start = seq.sessions.back().start;
      prev_end = ts[j - 1];
      const double gap = mode == GapMode::StartToStart ? ts[j] - last_start : ts[j] - prev_end;
      seq.sessions.push_back({ts[j], gap, 1});
    }
  }
  return seq;
}

std::vector<SessionSequence> sessionize_all(const EventsByUser& events, double threshold, GapMode mode) {
  std::vector<SessionSequence> out;
  out.reserve(events.size());
  for (const auto& [user, ts] : events) out.push_back(sessionize(user, ts, threshold, mode));
  return out;
}

std::pair<std::vector<SessionSequence>, std::vector<SessionSequence>> split_users(std::vector<SessionSequence> seqs,
                                                                                  double train_fraction,
                                                                                  std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("split_users: train fraction must lie in (0, 1)");
  if (seqs.size() < 2) throw DataError("split_users: need at least 2 users");
  std::sort(seqs.begin(), seqs.end(), [](const auto& a, const auto& b) { return a.user_id < b.user_id; });
  const std::size_t n = seqs.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, "split"));
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
  auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  std::vector<bool> in_train(n, false);
  for (std::size_t i = 0; i < n_train; ++i) in_train[order[i]] = true;
  std::vector<SessionSequence> train, test;
  for (std::size_t i = 0; i < n; ++i) (in_train[i] ? train : test).push_back(std::move(seqs[i]));
  return {std::move(train), std::move(test)};
}

void validate(const SessionSequence& seq) {
  if (seq.user_id.empty()) throw DataError("session sequence without user_id");
  if (seq.sessions.empty()) throw DataError("user '" + seq.user_id + "' has no sessions");
  for (std::size_t i = 0; i < seq.sessions.size(); ++i) {
    const auto& s = seq.sessions[i];
    const std::string where = "user '" + seq.user_id + "' session " + std::to_string(i + 1) + ": ";
    if (!std::isfinite(s.start) || !std::isfinite(s.gap)) throw DataError(where + "non-finite time");
    if (s.duration < 1) throw DataError(where + "duration must be >= 1");
    if (s.gap < 0.0) throw DataError(where + "gap must be >= 0");
    if (i > 0 && !(s.start > seq.sessions[i - 1].start)) throw DataError(where + "start times must strictly increase");
  }
}

void write_sessions(std::ostream& out, std::span<const SessionSequence> sequences) {
  for (const auto& seq : sequences) {
    ordered_json rec;
    rec["user_id"] = seq.user_id;
    ordered_json arr = ordered_json::array();
    for (const auto& s : seq.sessions) {
      ordered_json js;
      js["t"] = s.start;
      js["g"] = s.gap;
      js["d"] = s.duration;
      arr.push_back(std::move(js));
    }
    rec["sessions"] = std::move(arr);
    out << rec.dump() << '\n';
  }
}

void write_sessions(const std::filesystem::path& path, std::span<const SessionSequence> sequences) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_sessions(out, sequences);
}

std::vector<SessionSequence> read_sessions(std::istream& in) {
  std::vector<SessionSequence> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const json rec = json::parse(line);
      SessionSequence seq;
      seq.user_id = rec.at("user_id").get<std::string>();
      for (const auto& js : rec.at("sessions")) {
        seq.sessions.push_back({js.at("t").get<double>(), js.at("g").get<double>(), js.at("d").get<std::int64_t>()});
      }
      validate(seq);
      out.push_back(std::move(seq));
    } catch (const json::exception& e) {
      throw DataError(line_prefix(lineno) + "invalid sessions record: " + e.what());
    } catch (const DataError& e) {
      throw DataError(line_prefix(lineno) + e.what());
    }
  }
  return out;
}

std::vector<SessionSequence> read_sessions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return read_sessions(in);
}

bool looks_like_sessions_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    try {
      const json rec = json::parse(line);
      return rec.is_object() && rec.contains("sessions");
    } catch (const json::exception&) {
      return false;
    }
  }
  return false;
}

}  // namespace rtpp::eventlog
