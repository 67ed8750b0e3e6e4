#pragma once

// Synthetic tutor logs drawn from the generative form of the two models:
//   rt_log  = mu + student + skill + noise
//   correct ~ Bernoulli(logistic(b0 + b_opp*opp + student(1, opp) + skill(1, opp)))
// with the latent traits kept as ground truth for recovery checks.

#include "rtprop/ingest.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace rtprop {

// Intercept/slope covariance of a (1 + opp | factor) term.
struct Cov2 {
    double var_intercept = 0.0;
    double covariance = 0.0;
    double var_slope = 0.0;
};

// Learning-rate construction on the standardized scale:
//   slope/sd = b0 + b_rt*z(rt) + b_prof*z(prof) + b_interaction*z(rt)*z(prof) + e
// with e scaled so the slope score has unit variance.
struct ModerationCoeffs {
    double b0 = 0.0;
    double b_rt = 0.0;
    double b_prof = 0.0;
    double b_interaction = 0.0;
};

struct SimConfig {
    int n_students = 794;
    int n_skills = 32;
    double mean_obs_per_student = 87.61;
    double sd_obs_per_student = 72.47;
    int min_obs_per_student = 30;
    double mean_skills_per_student = 7.44;
    double sd_skills_per_student = 2.28;
    double zipf_exponent = 1.0;
    int steps_per_problem = 4;
    double prob_second_session = 0.5;
    double multi_kc_fraction = 0.0;
    double hint_fraction = 0.3;

    double rt_grand_mean = 3.0; // log-seconds, ~20 s median
    double rt_var_student = 0.2;
    double rt_var_skill = 0.3;
    double rt_var_resid = 1.0;

    double iafm_beta0 = 0.0;
    double iafm_beta_opp = 0.1;
    Cov2 cov_student{1.0, 0.0, 0.01};
    Cov2 cov_skill{0.5, 0.0, 0.0025};

    std::optional<ModerationCoeffs> moderation;
    // Slices (Q1..Q4) whose learning rates carry the interaction term.
    std::array<bool, 4> moderation_slices{true, true, true, true};

    bool emit_session_ids = true;
    std::uint64_t seed = 1;
};

// Throws a config error on negative variances, non-PSD covariances or bad counts.
void validate(const SimConfig& config);

struct StudentTruth {
    std::string id;
    double rt_intercept = 0.0;
    double iafm_intercept = 0.0;
    double iafm_slope = 0.0; // mean over slices
    std::array<double, 4> iafm_slope_by_slice{};
};

struct SkillTruth {
    std::string id;
    double rt_intercept = 0.0;
    double iafm_intercept = 0.0;
    double iafm_slope = 0.0;
};

struct GroundTruth {
    std::vector<StudentTruth> students;
    std::vector<SkillTruth> skills;
    std::vector<SessionSpan> sessions;
};

struct Population {
    std::vector<AttemptRecord> attempts; // sorted by (student, time, attempt)
    GroundTruth truth;
    std::vector<StepRecord> steps; // generator's own step table, canonical order
};

// Student-level traits only (no logs). Used directly by regression-only studies.
std::vector<StudentTruth> draw_student_traits(const SimConfig& config, std::mt19937_64& rng);

Population generate_population(const SimConfig& config);

struct EmitOptions {
    char delimiter = '\t';
    bool include_session = true;
    std::vector<std::string> preamble; // written as '#' comment lines
};

// Writes transactions with the default TransactionSchema column names.
void emit_transactions(std::ostream& out, const std::vector<AttemptRecord>& records, const EmitOptions& options = {});

} // namespace rtprop
