#include "rtprop/ingest.hpp"
#include "rtprop/simulate.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <sstream>

using namespace rtprop;

namespace {

const char* kHeader = "Anon Student Id\tSession Id\tTime\tProblem Name\tStep Name\tAttempt At Step\tOutcome\tKC (Default)\n";

Instant at(const std::string& text) {
    Instant t;
    EXPECT_TRUE(parse_instant(text, t)) << text;
    return t;
}

Instant minute(int m, int s = 0) { return at("2023-01-05 09:00:00") + std::chrono::minutes(m) + std::chrono::seconds(s); }

AttemptRecord attempt(const std::string& student, Instant t, const std::string& step, int index = 1,
                      Outcome outcome = Outcome::Correct, std::vector<std::string> kcs = {"A"}) {
    AttemptRecord a;
    a.student_id = student;
    a.timestamp = t;
    a.problem_id = "P1";
    a.step_id = step;
    a.attempt_index = index;
    a.outcome = outcome;
    a.kc_ids = std::move(kcs);
    return a;
}

ParseResult parse(const std::string& body, const TransactionSchema& schema = {}) {
    std::istringstream in(std::string(kHeader) + body);
    return parse_transactions(in, schema);
}

} // namespace

TEST(Parse, MapsFieldsAndOutcomes) {
    const ParseResult r = parse("S1\tX\t2023-01-05T09:00:00.000\tP1\tx-2=4\t1\tCORRECT\tsubtraction\n"
                                "S1\tX\t2023-01-05T09:00:05.250\tP1\tx=6\t1\tHINT\tsubtraction~~addition\n");
    ASSERT_EQ(r.records.size(), 2u);
    EXPECT_TRUE(r.rejects.empty());
    const AttemptRecord& a = r.records[0];
    EXPECT_EQ(a.student_id, "S1");
    EXPECT_EQ(a.session_id, "X");
    EXPECT_EQ(a.problem_id, "P1");
    EXPECT_EQ(a.step_id, "x-2=4");
    EXPECT_EQ(a.outcome, Outcome::Correct);
    EXPECT_EQ(a.kc_ids, std::vector<std::string>{"subtraction"});
    EXPECT_EQ(format_instant(a.timestamp), "2023-01-05 09:00:00.000");
    EXPECT_EQ(r.records[1].outcome, Outcome::Hint);
    EXPECT_EQ(r.records[1].kc_ids, (std::vector<std::string>{"subtraction", "addition"}));
    EXPECT_EQ((r.records[1].timestamp - a.timestamp).count(), 5250);
}

TEST(Parse, RowProblemsBecomeRejects) {
    const ParseResult r = parse("S1\tX\t2023-01-05 09:00:00\tP1\ts1\t1\tCORRECT\t\n"
                                "S1\tX\tyesterday\tP1\ts2\t1\tCORRECT\tA\n"
                                "S1\tX\t2023-01-05 09:00:00\tP1\ts3\t1\tBOGUS\tA\n"
                                "S1\tX\t2023-01-05 09:00:00\tP1\ts4\tzero\tCORRECT\tA\n"
                                "S1\tX\t2023-02-30 09:00:00\tP1\ts5\t1\tCORRECT\tA\n"
                                "S1\tX\t2023-01-05 09:00:00\tP1\ts6\t1\tincorrect\tA\n"
                                "S1\tX\n");
    EXPECT_EQ(r.input_rows, 7u);
    EXPECT_EQ(r.records.size(), 1u);
    EXPECT_EQ(r.records[0].outcome, Outcome::Incorrect);
    ASSERT_EQ(r.rejects.size(), 6u);
    EXPECT_EQ(r.rejects[0].reason, "missing knowledge component");
    EXPECT_EQ(r.rejects[0].row, 1u);
    EXPECT_EQ(r.rejects[1].reason, "unparseable timestamp");
    EXPECT_EQ(r.rejects[2].reason, "unmapped outcome code");
    EXPECT_EQ(r.rejects[3].reason, "invalid attempt index");
    EXPECT_EQ(r.rejects[4].reason, "unparseable timestamp");
    EXPECT_EQ(r.rejects[5].reason, "wrong field count");
}

TEST(Parse, MissingColumnIsConfigError) {
    std::istringstream in("Anon Student Id,Time,Problem Name\nS1,2023-01-05 09:00:00,P1\n");
    try {
        parse_transactions(in, {});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Config);
    }
}

TEST(Parse, CommaDelimitedWithQuotesAndNoSessionColumn) {
    std::istringstream in("# exported\n"
                          "Anon Student Id,Time,Problem Name,Step Name,Attempt At Step,Outcome,KC (Default)\n"
                          "S1,2023-01-05 09:00:00,P1,\"x, y\",1,CORRECT,A\n");
    TransactionSchema schema;
    const ParseResult r = parse_transactions(in, schema);
    ASSERT_EQ(r.records.size(), 1u);
    EXPECT_EQ(r.records[0].step_id, "x, y");
    EXPECT_FALSE(r.records[0].session_id.has_value());
    EXPECT_EQ(split_delimited("a,\"b \"\"c\"\"\",d", ','), (std::vector<std::string>{"a", "b \"c\"", "d"}));
    EXPECT_EQ(quote_field("b \"c\"", ','), "\"b \"\"c\"\"\"");
}

TEST(Sessions, GapRuleSplitsLongPauses) {
    std::vector<AttemptRecord> one{attempt("S", minute(0), "a"), attempt("S", minute(10), "b"),
                                   attempt("S", minute(20), "c")};
    const auto spans = derive_sessions(one);
    ASSERT_EQ(spans.size(), 1u);
    EXPECT_EQ(spans[0].start, minute(0));
    EXPECT_EQ(spans[0].end, minute(20));

    std::vector<AttemptRecord> two{attempt("S", minute(50), "c"), attempt("S", minute(0), "a"),
                                   attempt("S", minute(10), "b")};
    const auto split = derive_sessions(two);
    ASSERT_EQ(split.size(), 2u);
    EXPECT_EQ(split[0].end, minute(10));
    EXPECT_EQ(split[1].start, minute(50));
    EXPECT_EQ(split[1].end, minute(50, 1));
    EXPECT_TRUE(split[1].degenerate);
    EXPECT_FALSE(split[0].degenerate);
    EXPECT_EQ(two[2].session_id, "auto-2");

    // exactly the threshold does not split
    std::vector<AttemptRecord> edge{attempt("S", minute(0), "a"), attempt("S", minute(30), "b")};
    EXPECT_EQ(derive_sessions(edge).size(), 1u);
}

TEST(Sessions, ExplicitIdsWin) {
    std::vector<AttemptRecord> a{attempt("S", minute(0), "a"), attempt("S", minute(90), "b"),
                                 attempt("T", minute(5), "a")};
    a[0].session_id = a[1].session_id = "morning";
    a[2].session_id = "other";
    const auto spans = derive_sessions(a);
    ASSERT_EQ(spans.size(), 2u);
    EXPECT_EQ(spans[0].session_id, "morning");
    EXPECT_EQ(spans[0].end, minute(90));
    EXPECT_TRUE(spans[1].degenerate);
}

TEST(Steps, FirstAttemptGovernsCorrectness) {
    std::vector<AttemptRecord> a{attempt("S", minute(0), "a", 1, Outcome::Incorrect),
                                 attempt("S", minute(1), "a", 2, Outcome::Correct),
                                 attempt("S", minute(2), "b", 1, Outcome::Hint),
                                 attempt("S", minute(3), "b", 2, Outcome::Correct),
                                 attempt("S", minute(4), "c", 1, Outcome::Correct),
                                 attempt("S", minute(5), "d", 2, Outcome::Correct)};
    for (auto& r : a) r.session_id = "1";
    const DeriveStepsResult d = derive_steps(a);
    ASSERT_EQ(d.steps.size(), 3u);
    EXPECT_FALSE(d.steps[0].first_attempt_correct);
    EXPECT_FALSE(d.steps[1].first_attempt_correct);
    EXPECT_TRUE(d.steps[2].first_attempt_correct);
    ASSERT_EQ(d.rejects.size(), 1u);
    EXPECT_NE(d.rejects[0].find("missing first attempt"), std::string::npos);
}

TEST(Steps, MultiKcStepsAreReplicatedOrTruncated) {
    std::vector<AttemptRecord> a{attempt("S", minute(0), "a", 1, Outcome::Incorrect, {"A", "B"}),
                                 attempt("S", minute(1), "b", 1, Outcome::Correct, {"B"})};
    for (auto& r : a) r.session_id = "1";
    const DeriveStepsResult rep = derive_steps(a, MultiKcMode::Replicate);
    ASSERT_EQ(rep.steps.size(), 3u);
    EXPECT_EQ(rep.multi_kc_steps, 1u);
    EXPECT_EQ(rep.distinct_steps, 2u);
    EXPECT_EQ(rep.steps[0].kc_id, "A");
    EXPECT_EQ(rep.steps[1].kc_id, "B");
    EXPECT_EQ(rep.steps[0].first_attempt_time, rep.steps[1].first_attempt_time);
    EXPECT_EQ(rep.steps[0].first_attempt_correct, rep.steps[1].first_attempt_correct);
    EXPECT_EQ(derive_steps(a, MultiKcMode::FirstOnly).steps.size(), 2u);
}

TEST(ResponseTimes, ConsecutiveFirstAttemptsWithinSession) {
    std::vector<AttemptRecord> a{attempt("S", minute(0), "a"), attempt("S", minute(0, 10), "b", 1, Outcome::Correct, {"A", "B"}),
                                 attempt("S", minute(0, 20), "b", 2), attempt("S", minute(0, 25), "c"),
                                 attempt("S", minute(60), "d")};
    IngestOptions o;
    const IngestResult r = ingest_attempts(a, o);
    ASSERT_EQ(r.steps.size(), 5u);
    EXPECT_FALSE(r.steps[0].rt_seconds.has_value());
    ASSERT_TRUE(r.steps[1].rt_seconds.has_value());
    EXPECT_DOUBLE_EQ(*r.steps[1].rt_seconds, 10.0);
    EXPECT_NEAR(*r.steps[1].rt_log, 2.302585, 1e-6);
    EXPECT_EQ(r.steps[2].rt_seconds, r.steps[1].rt_seconds);
    EXPECT_DOUBLE_EQ(*r.steps[3].rt_seconds, 15.0);
    // new session after the hour-long pause
    EXPECT_FALSE(r.steps[4].rt_seconds.has_value());
    EXPECT_EQ(r.quality.rt.session_first_steps, 2u);
}

TEST(ResponseTimes, NonPositiveGapsAreFlaggedAndWinsorizationCaps) {
    std::vector<StepRecord> steps(4);
    const int secs[] = {0, 0, 4, 100};
    for (int i = 0; i < 4; ++i) {
        steps[static_cast<std::size_t>(i)].student_id = "S";
        steps[static_cast<std::size_t>(i)].session_id = "1";
        steps[static_cast<std::size_t>(i)].step_id = std::string(1, static_cast<char>('a' + i));
        steps[static_cast<std::size_t>(i)].first_attempt_time = minute(0, secs[i]);
    }
    std::vector<StepRecord> plain = steps;
    const RtQuality q = compute_response_times(plain);
    EXPECT_EQ(q.nonpositive_rt, 1u);
    EXPECT_FALSE(plain[1].rt_seconds.has_value());
    for (const auto& s : plain)
        if (s.rt_seconds) EXPECT_GT(*s.rt_seconds, 0.0);

    RtOptions w;
    w.winsorize_quantile = 0.5;
    const RtQuality qw = compute_response_times(steps, w);
    EXPECT_EQ(qw.winsorized, 1u);
    EXPECT_DOUBLE_EQ(*steps[3].rt_seconds, 50.0);
    EXPECT_DOUBLE_EQ(*steps[3].rt_log, std::log(50.0));
}

TEST(Opportunities, InterleavedSkillsCountPerPair) {
    std::vector<AttemptRecord> a;
    const char* kcs = "ABAB";
    for (int i = 0; i < 4; ++i) a.push_back(attempt("S", minute(i), "s" + std::to_string(i), 1, Outcome::Correct, {std::string(1, kcs[i])}));
    a.push_back(attempt("S", minute(120), "s9", 1, Outcome::Correct, {"A"}));
    const IngestResult r = ingest_attempts(a, {});
    std::vector<int> got;
    for (const auto& s : r.steps) got.push_back(s.opportunity);
    EXPECT_EQ(got, (std::vector<int>{1, 1, 2, 2, 3}));
}

TEST(Opportunities, GapFreeOnSimulatedLogs) {
    SimConfig c;
    c.n_students = 40;
    c.n_skills = 6;
    c.multi_kc_fraction = 0.2;
    c.seed = 8;
    const Population pop = generate_population(c);
    std::map<std::pair<std::string, std::string>, std::vector<StepRecord>> seq;
    for (const auto& s : pop.steps) seq[{s.student_id, s.kc_id}].push_back(s);
    for (auto& [key, v] : seq) {
        std::sort(v.begin(), v.end(), [](const StepRecord& a, const StepRecord& b) { return a.opportunity < b.opportunity; });
        for (std::size_t i = 0; i < v.size(); ++i) {
            EXPECT_EQ(v[i].opportunity, static_cast<int>(i) + 1);
            if (i > 0) EXPECT_LE(v[i - 1].first_attempt_time, v[i].first_attempt_time);
        }
    }
}

TEST(Slices, HalfOpenBinsWithClosedEnd) {
    const SessionSpan span{"S", "1", minute(0), minute(40), false};
    EXPECT_EQ(slice_of(minute(0), span, 4), 1);
    EXPECT_EQ(slice_of(minute(5), span, 4), 1);
    EXPECT_EQ(slice_of(minute(10) - std::chrono::milliseconds(1), span, 4), 1);
    EXPECT_EQ(slice_of(minute(10), span, 4), 2);
    EXPECT_EQ(slice_of(minute(20), span, 4), 3);
    EXPECT_EQ(slice_of(minute(30), span, 4), 4);
    EXPECT_EQ(slice_of(minute(40), span, 4), 4);
    EXPECT_EQ(slice_of(minute(20), span, 2), 2);
    EXPECT_EQ(slice_of(minute(20), span, 1), 1);
    const SessionSpan flat{"S", "1", minute(3), minute(3), true};
    EXPECT_EQ(slice_of(minute(3), flat, 4), 1);
    EXPECT_THROW(slice_of(minute(3), span, 0), Error);
}

TEST(Slices, DegenerateSessionsLandInFirstSlice) {
    std::vector<AttemptRecord> a{attempt("S", minute(0), "a"), attempt("T", minute(0), "a"),
                                 attempt("T", minute(8), "b")};
    const IngestResult r = ingest_attempts(a, {});
    ASSERT_EQ(r.steps.size(), 3u);
    EXPECT_EQ(r.quality.degenerate_sessions, 1u);
    EXPECT_EQ(r.quality.slicing.degenerate_span_steps, 1u);
    EXPECT_EQ(r.steps[0].slice, 1);
    EXPECT_EQ(r.steps[2].slice, 4);
}

TEST(Slices, UniformTimesFillSlicesEvenly) {
    std::mt19937_64 rng(12);
    std::uniform_int_distribution<int> ms(1, 3'599'999);
    const SessionSpan span{"S", "1", minute(0), minute(60), false};
    std::array<int, 4> counts{};
    const int n = 40000;
    for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(slice_of(minute(0) + Millis(ms(rng)), span, 4) - 1)];
    double chi2 = 0.0;
    for (int c : counts) chi2 += (c - n / 4.0) * (c - n / 4.0) / (n / 4.0);
    EXPECT_LT(chi2, 16.27); // 0.999 quantile, 3 df
}

TEST(Ingest, ConservationAndRoundTripOfSimulatedLogs) {
    SimConfig c;
    c.n_students = 60;
    c.n_skills = 8;
    c.multi_kc_fraction = 0.15;
    c.seed = 5;
    const Population pop = generate_population(c);
    std::stringstream tsv;
    emit_transactions(tsv, pop.attempts);
    IngestOptions o;
    const IngestResult r = ingest(tsv, o);

    EXPECT_EQ(r.quality.input_rows, pop.attempts.size());
    EXPECT_EQ(r.quality.accepted_rows + r.quality.rejected_rows.size(), r.quality.input_rows);
    std::size_t expected_records = 0;
    std::map<std::tuple<std::string, std::string, std::string, std::string>, std::size_t> kcs;
    for (const auto& a : pop.attempts)
        if (a.attempt_index == 1) kcs[{a.student_id, *a.session_id, a.problem_id, a.step_id}] = a.kc_ids.size();
    for (const auto& [k, n] : kcs) expected_records += n;
    EXPECT_EQ(r.steps.size(), expected_records);
    EXPECT_EQ(r.quality.step_records, expected_records);

    std::ostringstream a, b;
    write_step_table(a, r.steps);
    write_step_table(b, pop.steps);
    EXPECT_EQ(a.str(), b.str());

    ASSERT_EQ(r.spans.size(), pop.truth.sessions.size());
    for (std::size_t i = 0; i < r.spans.size(); ++i) {
        EXPECT_EQ(r.spans[i].session_id, pop.truth.sessions[i].session_id);
        EXPECT_EQ(r.spans[i].start, pop.truth.sessions[i].start);
        EXPECT_EQ(r.spans[i].end, pop.truth.sessions[i].end);
    }
}

TEST(Ingest, StepTableRoundTrip) {
    SimConfig c;
    c.n_students = 10;
    c.n_skills = 4;
    const Population pop = generate_population(c);
    std::stringstream out;
    write_step_table(out, pop.steps, {"seed 1"});
    EXPECT_EQ(out.str().rfind("# seed 1\n", 0), 0u);
    const std::vector<StepRecord> back = read_step_table(out);
    std::ostringstream again;
    write_step_table(again, back, {"seed 1"});
    EXPECT_EQ(again.str(), out.str());
    ASSERT_EQ(back.size(), pop.steps.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].rt_log, pop.steps[i].rt_log);
        EXPECT_EQ(back[i].first_attempt_time, pop.steps[i].first_attempt_time);
    }
}

TEST(Ingest, RejectCountsByReason) {
    std::istringstream in(std::string(kHeader) + "S1\tX\t2023-01-05 09:00:00\tP1\ta\t1\tCORRECT\tA\n"
                                                 "S1\tX\tnot a time\tP1\tb\t1\tCORRECT\tA\n"
                                                 "S1\tX\t2023-01-05 09:00:09\tP1\tc\t1\tCORRECT\t\n");
    const IngestResult r = ingest(in, {});
    EXPECT_EQ(r.quality.input_rows, 3u);
    EXPECT_EQ(r.quality.accepted_rows, 1u);
    EXPECT_EQ(r.quality.rejects_by_reason.at("unparseable timestamp"), 1u);
    EXPECT_EQ(r.quality.rejects_by_reason.at("missing knowledge component"), 1u);
}

TEST(Ingest, InstantFormatting) {
    Instant t;
    EXPECT_TRUE(parse_instant("2024-02-29 23:59:59.5", t));
    EXPECT_EQ(format_instant(t), "2024-02-29 23:59:59.500");
    EXPECT_FALSE(parse_instant("2023-02-29 00:00:00", t));
    EXPECT_FALSE(parse_instant("2023-01-01 24:00:00", t));
    EXPECT_EQ(format_double(0.1), "0.1");
    EXPECT_EQ(std::stod(format_double(std::log(10.0))), std::log(10.0));
}
