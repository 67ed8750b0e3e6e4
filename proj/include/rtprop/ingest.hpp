#pragma once

// Transaction-log ingestion: raw tutor transactions -> step-level observations
// with first-attempt correctness, log response times, per-skill opportunity
// counts and within-session time slices.

#include "rtprop/common.hpp"

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace rtprop {

enum class Outcome { Correct, Incorrect, Hint };

const char* outcome_code(Outcome o);

struct AttemptRecord {
    std::string student_id;
    std::optional<std::string> session_id;
    Instant timestamp{};
    std::string problem_id;
    std::string step_id;
    int attempt_index = 1;
    Outcome outcome = Outcome::Correct;
    std::vector<std::string> kc_ids;
};

struct StepRecord {
    std::string student_id;
    std::string session_id;
    std::string kc_id;
    std::string problem_id;
    std::string step_id;
    bool first_attempt_correct = false;
    std::optional<double> rt_seconds;
    std::optional<double> rt_log;
    int opportunity = 0; // 0 until assign_opportunities runs
    int slice = 0;       // 1..k; 0 until slice_sessions runs
    Instant first_attempt_time{};
};

struct SessionSpan {
    std::string student_id;
    std::string session_id;
    Instant start{};
    Instant end{};
    bool degenerate = false; // single-event session widened to one second
};

enum class MultiKcMode { Replicate, FirstOnly };

// Logical column -> source header name. Session is optional; an empty name
// means the source has no session column.
struct TransactionSchema {
    std::string student = "Anon Student Id";
    std::string session = "Session Id";
    std::string time = "Time";
    std::string problem = "Problem Name";
    std::string step = "Step Name";
    std::string attempt = "Attempt At Step";
    std::string outcome = "Outcome";
    std::string kc = "KC (Default)";
    // 0 = detect from the header line (tab if present, else comma).
    char delimiter = 0;
    std::string kc_delimiter = "~~";
    // Upper-cased source code -> outcome. Codes not listed are rejected.
    std::map<std::string, Outcome> outcome_codes = {
        {"CORRECT", Outcome::Correct},
        {"INCORRECT", Outcome::Incorrect},
        {"HINT", Outcome::Hint},
    };
};

struct RejectedRow {
    std::size_t row = 0; // 1-based data row number (header excluded)
    std::string reason;
};

struct ParseResult {
    std::vector<AttemptRecord> records;
    std::vector<RejectedRow> rejects;
    std::size_t input_rows = 0;
};

// Reads a delimited transaction export. Missing required header columns are a
// config error; row-level problems land in `rejects`. Lines starting with '#'
// before the header are skipped.
ParseResult parse_transactions(std::istream& source, const TransactionSchema& schema);

struct SessionOptions {
    Millis gap_threshold = std::chrono::minutes(30);
};

// Sorts attempts by (student, timestamp, problem, step, attempt) and returns
// one span per session. Attempts without a session id get one assigned by the
// inactivity-gap rule (ids "auto-<n>" numbered from 1 per student).
std::vector<SessionSpan> derive_sessions(std::vector<AttemptRecord>& attempts,
                                         const SessionOptions& options = {});

struct DeriveStepsResult {
    std::vector<StepRecord> steps;
    std::vector<std::string> rejects; // "missing first attempt: student/problem/step"
    std::size_t multi_kc_steps = 0;
    std::size_t distinct_steps = 0;
};

DeriveStepsResult derive_steps(const std::vector<AttemptRecord>& attempts,
                               MultiKcMode mode = MultiKcMode::Replicate);

struct RtOptions {
    // Upper-tail winsorization of rt_seconds at this quantile; nullopt = off.
    std::optional<double> winsorize_quantile;
};

struct RtQuality {
    std::size_t session_first_steps = 0;
    std::size_t nonpositive_rt = 0;
    std::size_t winsorized = 0;
};

// Orders steps by (student, session, time, problem, step, kc) and fills
// rt_seconds / rt_log from consecutive first attempts within a session.
RtQuality compute_response_times(std::vector<StepRecord>& steps, const RtOptions& options = {});

void assign_opportunities(std::vector<StepRecord>& steps);

// Slice index for an instant within a span (1..k), half-open bins with the
// span end assigned to bin k. Degenerate spans map everything to 1.
int slice_of(Instant t, const SessionSpan& span, int k);

struct SliceQuality {
    std::size_t degenerate_span_steps = 0;
    std::size_t outside_span = 0;
};

SliceQuality slice_sessions(std::vector<StepRecord>& steps, const std::vector<SessionSpan>& spans,
                            int k = 4);

struct IngestOptions {
    TransactionSchema schema;
    SessionOptions sessions;
    MultiKcMode multi_kc = MultiKcMode::Replicate;
    RtOptions rt;
    int slices = 4;
};

struct QualityReport {
    std::size_t input_rows = 0;
    std::size_t accepted_rows = 0;
    std::map<std::string, std::size_t> rejects_by_reason;
    std::vector<RejectedRow> rejected_rows;
    std::size_t sessions = 0;
    std::size_t degenerate_sessions = 0;
    std::size_t steps = 0;
    std::size_t step_records = 0;
    std::size_t multi_kc_steps = 0;
    std::size_t step_rejects = 0;
    RtQuality rt;
    SliceQuality slicing;
};

struct IngestResult {
    std::vector<StepRecord> steps;
    std::vector<SessionSpan> spans;
    QualityReport quality;
};

// Session derivation through slicing on already-parsed attempts.
IngestResult ingest_attempts(std::vector<AttemptRecord> attempts, const IngestOptions& options);
IngestResult ingest(std::istream& source, const IngestOptions& options);

// Canonical step table CSV. `preamble` lines are written as '#' comments.
void write_step_table(std::ostream& out, const std::vector<StepRecord>& steps,
                      const std::vector<std::string>& preamble = {});
std::vector<StepRecord> read_step_table(std::istream& in);

// Splits one delimited line honoring double quotes.
std::vector<std::string> split_delimited(const std::string& line, char delimiter);
std::string quote_field(const std::string& field, char delimiter);

} // namespace rtprop
