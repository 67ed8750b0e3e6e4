#pragma once

// Student-level analyses on extracted random effects: cross-slice stability,
// RT/learning correlations, the standardized moderation regression
//   learning_rate ~ rt_propensity * prior_proficiency
// with influence diagnostics, and Benjamini-Hochberg adjustment across slices.

#include "rtprop/iafm.hpp"
#include "rtprop/ingest.hpp"
#include "rtprop/lmm.hpp"

#include <Eigen/Dense>

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rtprop {

struct Standardized {
    std::vector<double> z;
    double mean = 0.0;
    double sd = 1.0;
};

// z-scores with the N-1 standard deviation; a constant vector is a data error
// ("zero variance").
Standardized standardize_with_moments(std::span<const double> values);
std::vector<double> standardize(std::span<const double> values);

struct Correlation {
    double r = 0.0;
    double p = 1.0;
    std::size_t n = 0;
};

Correlation pearson(std::span<const double> x, std::span<const double> y);

// Fisher-z interval for r.
std::array<double, 2> correlation_ci(double r, std::size_t n, double level = 0.95);

struct StudentParams {
    std::string student_id;
    double rt_propensity = 0.0;
    double prior_proficiency = 0.0;
    double learning_rate = 0.0;
    int slice = 0; // 0 = full period
};

// Inner join of the RT and iAFM student tables on student_id.
std::vector<StudentParams> join_params(const std::vector<BlupRow>& rt, const std::vector<StudentIafmRow>& iafm,
                                       int slice = 0);

enum class ParamField { RtPropensity, LearningRate, PriorProficiency };

const char* field_name(ParamField f);

struct StabilityCell {
    double r = 0.0;
    double p = 1.0;
    std::size_t n = 0;
    bool available = false;
};

using StabilityMatrix = std::vector<std::vector<StabilityCell>>;

// Pairwise-complete correlations between slice tables (one table per slice;
// an empty table is an unavailable slice).
StabilityMatrix stability_matrix(const std::vector<std::vector<StudentParams>>& by_slice, ParamField field);

struct Coefficient {
    std::string name;
    double estimate = 0.0;
    double se = 0.0;
    double t = 0.0;
    double p = 1.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
};

struct OlsFit {
    Eigen::VectorXd beta;
    Eigen::VectorXd se;
    Eigen::VectorXd residuals;
    double sigma2 = 0.0;
    double r2 = 0.0;
    int df = 0;
};

// Least squares through a rank-revealing QR; rank deficiency is a data error.
OlsFit ols(const Eigen::MatrixXd& x, const Eigen::VectorXd& y);

struct InfluenceRow {
    std::string id;
    double leverage = 0.0;
    double studentized_residual = 0.0; // externally studentized; NaN when h = 1
    double cooks_d = 0.0;
    bool flagged = false;
};

struct InfluenceResult {
    std::vector<InfluenceRow> rows;
    std::size_t flagged = 0;
    double cooks_threshold = 0.0;    // 4 / N
    double leverage_threshold = 0.0; // 2p / N
};

InfluenceResult influence_diagnostics(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                      const std::vector<std::string>& ids = {});

inline constexpr std::array<const char*, 4> kModerationTerms{"(Intercept)", "RT propensity", "Prior proficiency",
                                                             "RT propensity x Prior proficiency"};

struct ModerationFit {
    std::array<Coefficient, 4> coefficients;
    std::size_t n = 0;
    double r2 = 0.0;
    InfluenceResult influence;
    bool refit_available = false;
    std::array<Coefficient, 4> refit_coefficients;
    std::size_t refit_n = 0;
    double refit_r2 = 0.0;
    // Standardized design (1, z_rt, z_prof, z_rt*z_prof) and response z_lr.
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    std::vector<std::string> ids;
};

// All three variables are standardized internally. Needs N >= 10.
ModerationFit moderation_fit(const std::vector<StudentParams>& params);

// Coefficient table (estimates, SEs, t-based 95% CIs and p) for an OLS fit.
std::array<Coefficient, 4> coefficient_table(const OlsFit& fit);

// Step-up adjustment; order of the input is preserved.
std::vector<double> bh_adjust(std::span<const double> p);

// "***" < .001, "**" < .01, "*" < .05, "." < .10, otherwise "".
std::string significance_marker(double p);

struct SliceOptions {
    int slices = 4;
    int min_obs_per_student = 3;
    LmmSpec lmm;
    IafmSpec iafm;
    bool include_unconverged = false;
    int threads = 0; // 0 = one per slice
};

struct SliceEffect {
    std::string effect;
    double estimate = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    double p = 1.0;
    double p_adjusted = 1.0;
};

struct SliceResult {
    int slice = 0;
    bool available = false;
    std::string status; // "ok" or why the slice is unavailable
    std::size_t rows = 0;
    std::size_t students = 0;
    bool rt_converged = false;
    bool iafm_converged = false;
    std::optional<LmmFit> rt_fit;
    std::optional<IafmFit> iafm_fit;
    std::vector<StudentParams> params;
    std::optional<Correlation> rt_learning;
    std::optional<ModerationFit> moderation;
    std::vector<SliceEffect> effects; // filled once all slices are done
};

struct SliceAnalysis {
    std::vector<SliceResult> slices;
    StabilityMatrix stability_rt;
    StabilityMatrix stability_learning;
};

// Slice-specific fits of both models, per-slice correlation and moderation,
// then BH adjustment of each effect across the available slices.
SliceAnalysis run_slice_analysis(const std::vector<StepRecord>& steps, const SliceOptions& options = {});

// Rows of one slice with students below the minimum observation count removed.
std::vector<StepRecord> slice_rows(const std::vector<StepRecord>& steps, int slice, int min_obs_per_student);

} // namespace rtprop
