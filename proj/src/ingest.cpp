#include "rtprop/ingest.hpp"

#include "rtprop/stats.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <tuple>
#include <unordered_map>

namespace rtprop {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

std::string upper(std::string s) {
    for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
}

bool parse_int(const std::string& text, int& out) {
    const std::string t = trim(text);
    if (t.empty()) return false;
    const auto* end = t.data() + t.size();
    auto [ptr, ec] = std::from_chars(t.data(), end, out);
    return ec == std::errc() && ptr == end;
}

bool parse_double(const std::string& text, double& out) {
    const std::string t = trim(text);
    if (t.empty()) return false;
    const auto* end = t.data() + t.size();
    auto [ptr, ec] = std::from_chars(t.data(), end, out);
    return ec == std::errc() && ptr == end;
}

bool read_line(std::istream& in, std::string& line) {
    if (!std::getline(in, line)) return false;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
}

std::vector<std::string> split_kcs(const std::string& cell, const std::string& delimiter) {
    std::vector<std::string> out;
    if (delimiter.empty()) {
        if (auto t = trim(cell); !t.empty()) out.push_back(t);
        return out;
    }
    std::size_t pos = 0;
    while (true) {
        const std::size_t next = cell.find(delimiter, pos);
        const std::string piece = trim(cell.substr(pos, next == std::string::npos ? std::string::npos : next - pos));
        if (!piece.empty() && std::find(out.begin(), out.end(), piece) == out.end()) out.push_back(piece);
        if (next == std::string::npos) break;
        pos = next + delimiter.size();
    }
    return out;
}

// Canonical step-table order.
bool step_less(const StepRecord& a, const StepRecord& b) {
    return std::tie(a.student_id, a.first_attempt_time, a.session_id, a.problem_id, a.step_id, a.kc_id) <
           std::tie(b.student_id, b.first_attempt_time, b.session_id, b.problem_id, b.step_id, b.kc_id);
}

} // namespace

const char* outcome_code(Outcome o) {
    switch (o) {
    case Outcome::Correct: return "CORRECT";
    case Outcome::Incorrect: return "INCORRECT";
    case Outcome::Hint: return "HINT";
    }
    return "";
}

bool parse_instant(const std::string& raw, Instant& out) {
    const std::string text = trim(raw);
    // YYYY-MM-DD?HH:MM:SS
    if (text.size() < 19) return false;
    auto digits = [&](std::size_t pos, std::size_t len, int& v) {
        v = 0;
        for (std::size_t i = pos; i < pos + len; ++i) {
            if (!std::isdigit(static_cast<unsigned char>(text[i]))) return false;
            v = v * 10 + (text[i] - '0');
        }
        return true;
    };
    int y, mo, d, h, mi, s;
    if (!digits(0, 4, y) || text[4] != '-' || !digits(5, 2, mo) || text[7] != '-' || !digits(8, 2, d)) return false;
    if (text[10] != ' ' && text[10] != 'T') return false;
    if (!digits(11, 2, h) || text[13] != ':' || !digits(14, 2, mi) || text[16] != ':' || !digits(17, 2, s)) return false;
    if (h > 23 || mi > 59 || s > 59) return false;
    int ms = 0;
    std::size_t pos = 19;
    if (pos < text.size()) {
        if (text[pos] != '.') return false;
        ++pos;
        int scale = 100;
        std::size_t ndig = 0;
        for (; pos < text.size(); ++pos, ++ndig) {
            if (!std::isdigit(static_cast<unsigned char>(text[pos]))) return false;
            if (scale > 0) {
                ms += (text[pos] - '0') * scale;
                scale /= 10;
            }
        }
        if (ndig == 0) return false;
    }
    const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{static_cast<unsigned>(mo)},
                                          std::chrono::day{static_cast<unsigned>(d)}};
    if (!ymd.ok()) return false;
    out = std::chrono::sys_days{ymd} + std::chrono::hours{h} + std::chrono::minutes{mi} +
          std::chrono::seconds{s} + Millis{ms};
    return true;
}

std::string format_instant(Instant t) {
    const auto day = std::chrono::floor<std::chrono::days>(t);
    const std::chrono::year_month_day ymd{day};
    const std::chrono::hh_mm_ss hms{t - day};
    char buf[40];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u %02d:%02d:%02d.%03d", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                  static_cast<int>(hms.hours().count()), static_cast<int>(hms.minutes().count()),
                  static_cast<int>(hms.seconds().count()), static_cast<int>(hms.subseconds().count()));
    return buf;
}

std::string format_double(double v) {
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), ptr);
}

std::vector<std::string> split_delimited(const std::string& line, char delimiter) {
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
        } else if (c == '"' && cur.empty()) {
            quoted = true;
        } else if (c == delimiter) {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(std::move(cur));
    return out;
}

std::string quote_field(const std::string& field, char delimiter) {
    if (field.find_first_of(std::string{delimiter, '"', '\n', '\r'}) == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

ParseResult parse_transactions(std::istream& source, const TransactionSchema& schema) {
    ParseResult result;
    std::string line;
    bool have_header = false;
    while (read_line(source, line)) {
        if (line.empty() || line[0] == '#') continue;
        have_header = true;
        break;
    }
    if (!have_header) config_error("transaction source has no header row");

    const char delim = schema.delimiter != 0 ? schema.delimiter : (line.find('\t') != std::string::npos ? '\t' : ',');
    const auto header = split_delimited(line, delim);
    auto column = [&](const std::string& name, bool required) -> int {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (trim(header[i]) == name) return static_cast<int>(i);
        if (required) config_error("missing required column in header: '" + name + "'");
        return -1;
    };
    const int c_student = column(schema.student, true);
    const int c_time = column(schema.time, true);
    const int c_problem = column(schema.problem, true);
    const int c_step = column(schema.step, true);
    const int c_attempt = column(schema.attempt, true);
    const int c_outcome = column(schema.outcome, true);
    const int c_kc = column(schema.kc, true);
    const int c_session = schema.session.empty() ? -1 : column(schema.session, false);
    const int needed = std::max({c_student, c_time, c_problem, c_step, c_attempt, c_outcome, c_kc, c_session}) + 1;

    std::size_t row = 0;
    while (read_line(source, line)) {
        if (trim(line).empty()) continue;
        ++row;
        ++result.input_rows;
        auto reject = [&](std::string reason) { result.rejects.push_back({row, std::move(reason)}); };
        const auto fields = split_delimited(line, delim);
        if (static_cast<int>(fields.size()) < needed) {
            reject("wrong field count");
            continue;
        }
        AttemptRecord rec;
        rec.student_id = trim(fields[c_student]);
        rec.problem_id = trim(fields[c_problem]);
        rec.step_id = trim(fields[c_step]);
        if (rec.student_id.empty()) { reject("missing required field: student"); continue; }
        if (rec.problem_id.empty()) { reject("missing required field: problem"); continue; }
        if (rec.step_id.empty()) { reject("missing required field: step"); continue; }
        if (trim(fields[c_time]).empty()) { reject("missing required field: time"); continue; }
        if (!parse_instant(fields[c_time], rec.timestamp)) { reject("unparseable timestamp"); continue; }
        if (!parse_int(fields[c_attempt], rec.attempt_index) || rec.attempt_index < 1) {
            reject("invalid attempt index");
            continue;
        }
        const auto code = schema.outcome_codes.find(upper(trim(fields[c_outcome])));
        if (code == schema.outcome_codes.end()) { reject("unmapped outcome code"); continue; }
        rec.outcome = code->second;
        rec.kc_ids = split_kcs(fields[c_kc], schema.kc_delimiter);
        if (rec.kc_ids.empty()) { reject("missing knowledge component"); continue; }
        if (c_session >= 0) {
            if (auto s = trim(fields[c_session]); !s.empty()) rec.session_id = std::move(s);
        }
        result.records.push_back(std::move(rec));
    }
    return result;
}

std::vector<SessionSpan> derive_sessions(std::vector<AttemptRecord>& attempts, const SessionOptions& options) {
    std::stable_sort(attempts.begin(), attempts.end(), [](const AttemptRecord& a, const AttemptRecord& b) {
        return std::tie(a.student_id, a.timestamp, a.problem_id, a.step_id, a.attempt_index) <
               std::tie(b.student_id, b.timestamp, b.problem_id, b.step_id, b.attempt_index);
    });

    // Gap rule for rows lacking an id, applied per student in time order.
    std::size_t i = 0;
    while (i < attempts.size()) {
        std::size_t j = i;
        while (j < attempts.size() && attempts[j].student_id == attempts[i].student_id) ++j;
        int counter = 0;
        std::optional<Instant> last;
        for (std::size_t r = i; r < j; ++r) {
            if (attempts[r].session_id) continue;
            if (!last || attempts[r].timestamp - *last > options.gap_threshold) ++counter;
            last = attempts[r].timestamp;
            attempts[r].session_id = "auto-" + std::to_string(counter);
        }
        i = j;
    }

    std::map<std::pair<std::string, std::string>, SessionSpan> spans;
    for (const auto& a : attempts) {
        auto key = std::make_pair(a.student_id, *a.session_id);
        auto it = spans.find(key);
        if (it == spans.end()) {
            spans.emplace(key, SessionSpan{a.student_id, *a.session_id, a.timestamp, a.timestamp, false});
        } else {
            it->second.start = std::min(it->second.start, a.timestamp);
            it->second.end = std::max(it->second.end, a.timestamp);
        }
    }
    std::vector<SessionSpan> out;
    out.reserve(spans.size());
    for (auto& [key, span] : spans) {
        if (span.end <= span.start) {
            span.end = span.start + std::chrono::seconds(1);
            span.degenerate = true;
        }
        out.push_back(span);
    }
    std::sort(out.begin(), out.end(), [](const SessionSpan& a, const SessionSpan& b) {
        return std::tie(a.student_id, a.start, a.session_id) < std::tie(b.student_id, b.start, b.session_id);
    });
    return out;
}

DeriveStepsResult derive_steps(const std::vector<AttemptRecord>& attempts, MultiKcMode mode) {
    using Key = std::tuple<std::string, std::string, std::string, std::string>;
    std::map<Key, const AttemptRecord*> first;
    std::map<Key, bool> seen;
    for (const auto& a : attempts) {
        Key key{a.student_id, a.session_id.value_or(""), a.problem_id, a.step_id};
        seen[key] = true;
        if (a.attempt_index != 1) continue;
        auto it = first.find(key);
        if (it == first.end() || a.timestamp < it->second->timestamp) first[key] = &a;
    }

    DeriveStepsResult result;
    for (const auto& [key, unused] : seen) {
        auto it = first.find(key);
        if (it == first.end()) {
            result.rejects.push_back("missing first attempt: " + std::get<0>(key) + "/" + std::get<2>(key) + "/" +
                                     std::get<3>(key));
            continue;
        }
        const AttemptRecord& a = *it->second;
        ++result.distinct_steps;
        if (a.kc_ids.size() > 1) ++result.multi_kc_steps;
        const std::size_t nkc = mode == MultiKcMode::Replicate ? a.kc_ids.size() : 1;
        for (std::size_t k = 0; k < nkc; ++k) {
            StepRecord s;
            s.student_id = a.student_id;
            s.session_id = a.session_id.value_or("");
            s.kc_id = a.kc_ids[k];
            s.problem_id = a.problem_id;
            s.step_id = a.step_id;
            s.first_attempt_correct = a.outcome == Outcome::Correct;
            s.first_attempt_time = a.timestamp;
            result.steps.push_back(std::move(s));
        }
    }
    std::sort(result.steps.begin(), result.steps.end(), step_less);
    return result;
}

RtQuality compute_response_times(std::vector<StepRecord>& steps, const RtOptions& options) {
    std::sort(steps.begin(), steps.end(), step_less);
    RtQuality quality;
    // Previous distinct step per (student, session): its first-attempt time.
    std::map<std::pair<std::string, std::string>, Instant> previous;
    const StepRecord* last_step = nullptr;
    for (auto& s : steps) {
        const bool replica = last_step && last_step->student_id == s.student_id &&
                             last_step->session_id == s.session_id && last_step->problem_id == s.problem_id &&
                             last_step->step_id == s.step_id && last_step->first_attempt_time == s.first_attempt_time;
        if (replica) {
            s.rt_seconds = last_step->rt_seconds;
            s.rt_log = last_step->rt_log;
            last_step = &s;
            continue;
        }
        s.rt_seconds.reset();
        s.rt_log.reset();
        auto key = std::make_pair(s.student_id, s.session_id);
        auto it = previous.find(key);
        if (it == previous.end()) {
            ++quality.session_first_steps;
            previous.emplace(std::move(key), s.first_attempt_time);
        } else {
            const double dt = std::chrono::duration<double>(s.first_attempt_time - it->second).count();
            if (dt > 0.0) {
                s.rt_seconds = dt;
                s.rt_log = std::log(dt);
            } else {
                ++quality.nonpositive_rt;
            }
            it->second = s.first_attempt_time;
        }
        last_step = &s;
    }

    if (options.winsorize_quantile) {
        const double q = *options.winsorize_quantile;
        if (!(q > 0.0 && q <= 1.0)) config_error("winsorize quantile must lie in (0, 1]");
        std::vector<double> present;
        for (const auto& s : steps)
            if (s.rt_seconds) present.push_back(*s.rt_seconds);
        if (!present.empty()) {
            const double cap = quantile_type7(present, q);
            for (auto& s : steps) {
                if (s.rt_seconds && *s.rt_seconds > cap) {
                    s.rt_seconds = cap;
                    s.rt_log = std::log(cap);
                    ++quality.winsorized;
                }
            }
        }
    }
    return quality;
}

void assign_opportunities(std::vector<StepRecord>& steps) {
    std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> sequences;
    for (std::size_t i = 0; i < steps.size(); ++i) sequences[{steps[i].student_id, steps[i].kc_id}].push_back(i);
    for (auto& [key, idx] : sequences) {
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return std::tie(steps[a].first_attempt_time, steps[a].problem_id, steps[a].step_id, steps[a].session_id) <
                   std::tie(steps[b].first_attempt_time, steps[b].problem_id, steps[b].step_id, steps[b].session_id);
        });
        int opp = 0;
        for (std::size_t i : idx) steps[i].opportunity = ++opp;
    }
}

int slice_of(Instant t, const SessionSpan& span, int k) {
    if (k < 1) config_error("slice count must be >= 1");
    const auto length = (span.end - span.start).count();
    if (length <= 0) return 1;
    const auto offset = std::clamp<std::int64_t>((t - span.start).count(), 0, length);
    const auto idx = static_cast<std::int64_t>(k) * offset / length;
    return static_cast<int>(std::min<std::int64_t>(idx, k - 1)) + 1;
}

SliceQuality slice_sessions(std::vector<StepRecord>& steps, const std::vector<SessionSpan>& spans, int k) {
    std::map<std::pair<std::string, std::string>, const SessionSpan*> index;
    for (const auto& sp : spans) index[{sp.student_id, sp.session_id}] = &sp;
    SliceQuality quality;
    for (auto& s : steps) {
        auto it = index.find({s.student_id, s.session_id});
        if (it == index.end()) {
            ++quality.outside_span;
            s.slice = 1;
            continue;
        }
        const SessionSpan& sp = *it->second;
        if (sp.degenerate || sp.end <= sp.start) ++quality.degenerate_span_steps;
        if (s.first_attempt_time < sp.start || s.first_attempt_time > sp.end) ++quality.outside_span;
        s.slice = sp.degenerate ? 1 : slice_of(s.first_attempt_time, sp, k);
    }
    return quality;
}

IngestResult ingest_attempts(std::vector<AttemptRecord> attempts, const IngestOptions& options) {
    IngestResult out;
    out.spans = derive_sessions(attempts, options.sessions);
    auto derived = derive_steps(attempts, options.multi_kc);
    out.steps = std::move(derived.steps);
    out.quality.rt = compute_response_times(out.steps, options.rt);
    assign_opportunities(out.steps);
    out.quality.slicing = slice_sessions(out.steps, out.spans, options.slices);

    out.quality.sessions = out.spans.size();
    for (const auto& sp : out.spans) out.quality.degenerate_sessions += sp.degenerate ? 1 : 0;
    out.quality.steps = derived.distinct_steps;
    out.quality.step_records = out.steps.size();
    out.quality.multi_kc_steps = derived.multi_kc_steps;
    out.quality.step_rejects = derived.rejects.size();
    return out;
}

IngestResult ingest(std::istream& source, const IngestOptions& options) {
    auto parsed = parse_transactions(source, options.schema);
    IngestResult out = ingest_attempts(std::move(parsed.records), options);
    out.quality.input_rows = parsed.input_rows;
    out.quality.accepted_rows = parsed.input_rows - parsed.rejects.size();
    for (const auto& r : parsed.rejects) ++out.quality.rejects_by_reason[r.reason];
    out.quality.rejected_rows = std::move(parsed.rejects);
    return out;
}

namespace {
constexpr std::array<const char*, 11> kStepColumns = {
    "student_id", "session_id", "kc_id",  "problem_id", "step_id",           "first_attempt_correct",
    "rt_seconds", "rt_log",     "opportunity", "slice", "first_attempt_time"};
}

void write_step_table(std::ostream& out, const std::vector<StepRecord>& steps,
                      const std::vector<std::string>& preamble) {
    for (const auto& line : preamble) out << "# " << line << '\n';
    for (std::size_t i = 0; i < kStepColumns.size(); ++i) out << (i ? "," : "") << kStepColumns[i];
    out << '\n';
    for (const auto& s : steps) {
        out << quote_field(s.student_id, ',') << ',' << quote_field(s.session_id, ',') << ','
            << quote_field(s.kc_id, ',') << ',' << quote_field(s.problem_id, ',') << ','
            << quote_field(s.step_id, ',') << ',' << (s.first_attempt_correct ? 1 : 0) << ','
            << (s.rt_seconds ? format_double(*s.rt_seconds) : "") << ','
            << (s.rt_log ? format_double(*s.rt_log) : "") << ',' << s.opportunity << ',' << s.slice << ','
            << format_instant(s.first_attempt_time) << '\n';
    }
}

std::vector<StepRecord> read_step_table(std::istream& in) {
    std::string line;
    bool have_header = false;
    while (read_line(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        have_header = true;
        break;
    }
    if (!have_header) data_error("step table is empty");
    const auto header = split_delimited(line, ',');
    std::array<int, kStepColumns.size()> col{};
    for (std::size_t c = 0; c < kStepColumns.size(); ++c) {
        auto it = std::find(header.begin(), header.end(), kStepColumns[c]);
        if (it == header.end()) data_error(std::string("step table lacks column '") + kStepColumns[c] + "'");
        col[c] = static_cast<int>(it - header.begin());
    }
    std::vector<StepRecord> steps;
    std::size_t row = 0;
    while (read_line(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        ++row;
        const auto f = split_delimited(line, ',');
        if (f.size() < header.size()) data_error("step table row " + std::to_string(row) + ": wrong field count");
        StepRecord s;
        s.student_id = f[col[0]];
        s.session_id = f[col[1]];
        s.kc_id = f[col[2]];
        s.problem_id = f[col[3]];
        s.step_id = f[col[4]];
        s.first_attempt_correct = f[col[5]] == "1" || upper(f[col[5]]) == "TRUE";
        double v;
        if (!f[col[6]].empty()) {
            if (!parse_double(f[col[6]], v)) data_error("step table row " + std::to_string(row) + ": bad rt_seconds");
            s.rt_seconds = v;
        }
        if (!f[col[7]].empty()) {
            if (!parse_double(f[col[7]], v)) data_error("step table row " + std::to_string(row) + ": bad rt_log");
            s.rt_log = v;
        }
        if (!parse_int(f[col[8]], s.opportunity) || !parse_int(f[col[9]], s.slice) ||
            !parse_instant(f[col[10]], s.first_attempt_time))
            data_error("step table row " + std::to_string(row) + ": malformed field");
        steps.push_back(std::move(s));
    }
    return steps;
}

} // namespace rtprop
