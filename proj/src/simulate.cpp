#include "rtprop/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

namespace rtprop {

namespace {

std::string padded_id(const char* prefix, int index, int count) {
    const int width = static_cast<int>(std::to_string(count).size());
    std::string digits = std::to_string(index + 1);
    if (static_cast<int>(digits.size()) < width) digits.insert(0, width - digits.size(), '0');
    return prefix + digits;
}

struct Chol2 {
    double l11 = 0.0, l21 = 0.0, l22 = 0.0;
};

Chol2 cholesky(const Cov2& c) {
    Chol2 l;
    l.l11 = std::sqrt(c.var_intercept);
    if (l.l11 > 0.0) {
        l.l21 = c.covariance / l.l11;
        l.l22 = std::sqrt(std::max(0.0, c.var_slope - l.l21 * l.l21));
    } else {
        l.l22 = std::sqrt(c.var_slope);
    }
    return l;
}

bool is_psd(const Cov2& c) {
    const double tol = 1e-12 * std::max({1.0, c.var_intercept, c.var_slope});
    return c.var_intercept >= 0.0 && c.var_slope >= 0.0 &&
           c.var_intercept * c.var_slope - c.covariance * c.covariance >= -tol &&
           (c.var_intercept > 0.0 || std::abs(c.covariance) <= tol) &&
           (c.var_slope > 0.0 || std::abs(c.covariance) <= tol);
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

void validate(const SimConfig& c) {
    if (c.n_students < 0 || c.n_skills < 1) config_error("simulation needs n_students >= 0 and n_skills >= 1");
    if (!(c.mean_obs_per_student > 0.0) || c.sd_obs_per_student < 0.0 || c.min_obs_per_student < 1)
        config_error("observation counts must be positive");
    if (c.steps_per_problem < 1) config_error("steps_per_problem must be >= 1");
    if (c.rt_var_student < 0.0 || c.rt_var_skill < 0.0 || c.rt_var_resid < 0.0)
        config_error("response-time variances must be non-negative");
    if (!is_psd(c.cov_student)) config_error("student covariance matrix is not positive semi-definite");
    if (!is_psd(c.cov_skill)) config_error("skill covariance matrix is not positive semi-definite");
    for (double p : {c.prob_second_session, c.multi_kc_fraction, c.hint_fraction})
        if (p < 0.0 || p > 1.0) config_error("probabilities must lie in [0, 1]");
    if (c.moderation) {
        const auto& m = *c.moderation;
        if (m.b_rt * m.b_rt + m.b_prof * m.b_prof + m.b_interaction * m.b_interaction > 1.0)
            config_error("moderation coefficients explain more than the unit slope variance");
    }
}

std::vector<StudentTruth> draw_student_traits(const SimConfig& config, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    const Chol2 l = cholesky(config.cov_student);
    const double sd_rt = std::sqrt(config.rt_var_student);
    const double sd_int = std::sqrt(config.cov_student.var_intercept);
    const double sd_slope = std::sqrt(config.cov_student.var_slope);

    std::vector<StudentTruth> out(config.n_students);
    for (int s = 0; s < config.n_students; ++s) {
        StudentTruth& t = out[s];
        t.id = padded_id("stu", s, config.n_students);
        const double z_rt = normal(rng);
        const double e1 = normal(rng);
        const double e2 = normal(rng);
        t.rt_intercept = sd_rt * z_rt;
        t.iafm_intercept = l.l11 * e1;
        if (config.moderation) {
            const auto& m = *config.moderation;
            const double z_prof = sd_int > 0.0 ? e1 : 0.0;
            const double z_r = sd_rt > 0.0 ? z_rt : 0.0;
            const double noise =
                std::sqrt(std::max(0.0, 1.0 - m.b_rt * m.b_rt - m.b_prof * m.b_prof - m.b_interaction * m.b_interaction));
            const double base = m.b0 + m.b_rt * z_r + m.b_prof * z_prof + noise * e2;
            for (int q = 0; q < 4; ++q) {
                const double inter = config.moderation_slices[q] ? m.b_interaction * z_r * z_prof : 0.0;
                t.iafm_slope_by_slice[q] = sd_slope * (base + inter);
            }
        } else {
            t.iafm_slope_by_slice.fill(l.l21 * e1 + l.l22 * e2);
        }
        double sum = 0.0;
        for (double v : t.iafm_slope_by_slice) sum += v;
        t.iafm_slope = sum / 4.0;
    }
    return out;
}

Population generate_population(const SimConfig& config) {
    validate(config);
    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    Population pop;
    pop.truth.students = draw_student_traits(config, rng);

    const Chol2 lk = cholesky(config.cov_skill);
    const double sd_rt_skill = std::sqrt(config.rt_var_skill);
    pop.truth.skills.resize(config.n_skills);
    for (int k = 0; k < config.n_skills; ++k) {
        SkillTruth& t = pop.truth.skills[k];
        t.id = padded_id("kc", k, config.n_skills);
        t.rt_intercept = sd_rt_skill * normal(rng);
        const double e1 = normal(rng), e2 = normal(rng);
        t.iafm_intercept = lk.l11 * e1;
        t.iafm_slope = lk.l21 * e1 + lk.l22 * e2;
    }

    std::vector<double> zipf(config.n_skills);
    for (int k = 0; k < config.n_skills; ++k) zipf[k] = 1.0 / std::pow(k + 1.0, config.zipf_exponent);

    const double sd_resid = std::sqrt(config.rt_var_resid);
    const Instant epoch = std::chrono::sys_days{std::chrono::year{2023} / 1 / 9} + std::chrono::hours{9};

    for (int s = 0; s < config.n_students; ++s) {
        const StudentTruth& st = pop.truth.students[s];

        int n_obs;
        if (config.sd_obs_per_student > 0.0) {
            const double shape = std::pow(config.mean_obs_per_student / config.sd_obs_per_student, 2);
            const double scale = config.sd_obs_per_student * config.sd_obs_per_student / config.mean_obs_per_student;
            std::gamma_distribution<double> gamma(shape, scale);
            n_obs = static_cast<int>(std::lround(gamma(rng)));
        } else {
            n_obs = static_cast<int>(std::lround(config.mean_obs_per_student));
        }
        n_obs = std::max(n_obs, config.min_obs_per_student);

        const int n_sub = std::clamp(
            static_cast<int>(std::lround(config.mean_skills_per_student + config.sd_skills_per_student * normal(rng))),
            1, config.n_skills);
        std::vector<int> subset;
        {
            std::vector<double> w = zipf;
            for (int j = 0; j < n_sub; ++j) {
                std::discrete_distribution<int> pick(w.begin(), w.end());
                const int k = pick(rng);
                subset.push_back(k);
                w[k] = 0.0;
            }
            std::sort(subset.begin(), subset.end());
        }

        const int n_sessions = (n_obs > 1 && unif(rng) < config.prob_second_session) ? 2 : 1;
        std::map<int, int> opportunity;

        int problem_counter = 0;
        for (int sess = 0; sess < n_sessions; ++sess) {
            const int first = sess == 0 ? 0 : (n_obs + 1) / 2;
            const int last = n_sessions == 1 ? n_obs : (sess == 0 ? (n_obs + 1) / 2 : n_obs);
            const int count = last - first;
            const std::string session_id = "sess" + std::to_string(sess + 1);
            const Instant start = epoch + std::chrono::days{sess} +
                                  Millis{static_cast<std::int64_t>(std::floor(unif(rng) * 600000.0))};

            struct PendingStep {
                std::vector<int> kcs;
                Instant time;
                std::string problem, step;
            };
            std::vector<PendingStep> pending(count);
            Instant t = start;
            for (int j = 0; j < count; ++j) {
                PendingStep& p = pending[j];
                const int primary = subset[std::uniform_int_distribution<int>(0, n_sub - 1)(rng)];
                p.kcs.push_back(primary);
                if (n_sub > 1 && unif(rng) < config.multi_kc_fraction) {
                    int other;
                    do other = subset[std::uniform_int_distribution<int>(0, n_sub - 1)(rng)];
                    while (other == primary);
                    p.kcs.push_back(other);
                }
                const double rt_log = config.rt_grand_mean + st.rt_intercept +
                                      pop.truth.skills[primary].rt_intercept + sd_resid * normal(rng);
                if (j > 0) {
                    const auto ms = std::max<std::int64_t>(1, std::llround(std::exp(rt_log) * 1000.0));
                    t += Millis{ms};
                }
                p.time = t;
                if (j % config.steps_per_problem == 0) ++problem_counter;
                p.problem = "prob" + std::to_string(problem_counter);
                p.step = "step" + std::to_string(j % config.steps_per_problem + 1);
            }

            // Retries fall halfway to the next step's first attempt. The last
            // step's retry shares its first-attempt instant, so the span ends at
            // the last first attempt and slices are known before outcomes.
            std::vector<Instant> retry_time(count);
            for (int j = 0; j < count; ++j)
                retry_time[j] = j + 1 < count ? pending[j].time + (pending[j + 1].time - pending[j].time) / 2
                                              : pending[j].time;
            SessionSpan span{st.id, session_id, start, count > 0 ? pending[count - 1].time : start, false};
            if (span.end <= span.start) {
                span.end = span.start + std::chrono::seconds(1);
                span.degenerate = true;
            }

            std::vector<int> slice(count);
            std::vector<bool> correct(count);
            std::vector<double> outcome_draw(count);
            for (int j = 0; j < count; ++j) {
                slice[j] = span.degenerate ? 1 : slice_of(pending[j].time, span, 4);
                const int primary = pending[j].kcs.front();
                int opp = 0;
                for (int k : pending[j].kcs) {
                    const int o = ++opportunity[k];
                    if (k == primary) opp = o;
                }
                const SkillTruth& sk = pop.truth.skills[primary];
                const double eta = config.iafm_beta0 + config.iafm_beta_opp * opp + st.iafm_intercept +
                                   st.iafm_slope_by_slice[slice[j] - 1] * opp + sk.iafm_intercept +
                                   sk.iafm_slope * opp;
                correct[j] = unif(rng) < logistic(eta);
                outcome_draw[j] = unif(rng);
            }
            pop.truth.sessions.push_back(span);

            std::vector<AttemptRecord> session_attempts;
            for (int j = 0; j < count; ++j) {
                const PendingStep& p = pending[j];
                std::vector<std::string> kc_names;
                for (int k : p.kcs) kc_names.push_back(pop.truth.skills[k].id);
                AttemptRecord first_attempt;
                first_attempt.student_id = st.id;
                if (config.emit_session_ids) first_attempt.session_id = session_id;
                first_attempt.timestamp = p.time;
                first_attempt.problem_id = p.problem;
                first_attempt.step_id = p.step;
                first_attempt.attempt_index = 1;
                first_attempt.outcome = correct[j] ? Outcome::Correct
                                                   : (outcome_draw[j] < config.hint_fraction ? Outcome::Hint
                                                                                             : Outcome::Incorrect);
                first_attempt.kc_ids = kc_names;
                session_attempts.push_back(first_attempt);
                if (!correct[j]) {
                    AttemptRecord retry = first_attempt;
                    retry.attempt_index = 2;
                    retry.outcome = Outcome::Correct;
                    retry.timestamp = retry_time[j];
                    session_attempts.push_back(std::move(retry));
                }
            }
            for (auto& a : session_attempts) pop.attempts.push_back(std::move(a));

            // Generator-side step table, built from the generator's own counters.
            for (int j = 0; j < count; ++j) {
                for (int k : pending[j].kcs) {
                    StepRecord r;
                    r.student_id = st.id;
                    r.session_id = config.emit_session_ids ? session_id : "";
                    r.kc_id = pop.truth.skills[k].id;
                    r.problem_id = pending[j].problem;
                    r.step_id = pending[j].step;
                    r.first_attempt_correct = correct[j];
                    if (j > 0) {
                        const double dt = std::chrono::duration<double>(pending[j].time - pending[j - 1].time).count();
                        r.rt_seconds = dt;
                        r.rt_log = std::log(dt);
                    }
                    r.slice = slice[j];
                    r.first_attempt_time = pending[j].time;
                    pop.steps.push_back(std::move(r));
                }
            }
        }
    }

    // Opportunities from the generator's per-pair counters, replayed in the
    // same time order used during generation.
    {
        std::map<std::pair<std::string, std::string>, int> counter;
        for (auto& r : pop.steps) r.opportunity = ++counter[{r.student_id, r.kc_id}];
    }

    std::stable_sort(pop.attempts.begin(), pop.attempts.end(), [](const AttemptRecord& a, const AttemptRecord& b) {
        return std::tie(a.student_id, a.timestamp, a.problem_id, a.step_id, a.attempt_index) <
               std::tie(b.student_id, b.timestamp, b.problem_id, b.step_id, b.attempt_index);
    });
    std::stable_sort(pop.steps.begin(), pop.steps.end(), [](const StepRecord& a, const StepRecord& b) {
        return std::tie(a.student_id, a.first_attempt_time, a.session_id, a.problem_id, a.step_id, a.kc_id) <
               std::tie(b.student_id, b.first_attempt_time, b.session_id, b.problem_id, b.step_id, b.kc_id);
    });
    return pop;
}

void emit_transactions(std::ostream& out, const std::vector<AttemptRecord>& records, const EmitOptions& options) {
    const TransactionSchema schema;
    const char d = options.delimiter;
    for (const auto& line : options.preamble) out << "# " << line << '\n';
    out << schema.student << d;
    if (options.include_session) out << schema.session << d;
    out << schema.time << d << schema.problem << d << schema.step << d << schema.attempt << d << schema.outcome << d
        << schema.kc << '\n';
    for (const auto& r : records) {
        out << quote_field(r.student_id, d) << d;
        if (options.include_session) out << quote_field(r.session_id.value_or(""), d) << d;
        std::string kcs;
        for (std::size_t i = 0; i < r.kc_ids.size(); ++i) kcs += (i ? schema.kc_delimiter : "") + r.kc_ids[i];
        out << format_instant(r.timestamp) << d << quote_field(r.problem_id, d) << d << quote_field(r.step_id, d) << d
            << r.attempt_index << d << outcome_code(r.outcome) << d << quote_field(kcs, d) << '\n';
    }
}

} // namespace rtprop
