#pragma once

// Gaussian linear mixed model with crossed random intercepts,
//   rt_log ~ 1 + (1 | student) + (1 | skill),
// estimated by maximizing the profiled REML (or ML) criterion over the
// variance ratios theta_k = var_k / var_resid. Each evaluation solves the
// penalized least-squares problem with a sparse Cholesky factorization.

#include "rtprop/ingest.hpp"

#include <Eigen/Dense>

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rtprop {

namespace detail {
class RandomDesign;
}

enum class Criterion { REML, ML };

const char* criterion_name(Criterion c);

struct LmmSpec {
    Criterion criterion = Criterion::REML;
    double tolerance = 1e-8; // relative deviance change
    int max_iterations = 2000;
};

// A grouping factor given as level labels per row.
struct InterceptFactor {
    std::string name;
    std::vector<std::string> levels; // label per level index
    std::vector<int> level;          // level index per row
};

// Factor built from row labels; levels are sorted lexicographically.
InterceptFactor make_factor(std::string name, const std::vector<std::string>& labels);

struct InterceptModelFit {
    Criterion criterion = Criterion::REML;
    double mu_hat = 0.0;
    double var_resid = 0.0;
    std::vector<double> ratios;                 // var_k / var_resid
    std::vector<double> variances;              // per factor
    std::vector<std::vector<double>> blups;     // per factor, per level
    std::vector<std::vector<int>> level_counts; // rows per level
    double deviance = 0.0;
    bool converged = false;
    bool boundary = false;
    int evaluations = 0;
    std::vector<double> deviance_trace;
};

// Solution of the penalized least-squares problem at fixed variance ratios.
struct PlsSolution {
    double mu = 0.0;
    Eigen::VectorXd u;  // spherical random effects
    Eigen::VectorXd b;  // b = Lambda u
    double prss = 0.0;  // penalized residual sum of squares
    double logdet_a = 0.0;
    double logdet_x = 0.0; // log of the fixed-effect Schur complement
};

// Intercept-only fixed part plus one or more random-intercept factors.
class InterceptMixedModel {
public:
    InterceptMixedModel(Eigen::VectorXd y, std::vector<InterceptFactor> factors);
    ~InterceptMixedModel();
    InterceptMixedModel(InterceptMixedModel&&) noexcept;
    InterceptMixedModel& operator=(InterceptMixedModel&&) noexcept;

    std::size_t rows() const { return static_cast<std::size_t>(y_.size()); }
    std::size_t factor_count() const { return factors_.size(); }
    const std::vector<InterceptFactor>& factors() const { return factors_; }

    PlsSolution solve(std::span<const double> ratios);
    double deviance(std::span<const double> ratios, Criterion criterion);

    InterceptModelFit fit(const LmmSpec& spec);

private:
    Eigen::VectorXd y_;
    std::vector<InterceptFactor> factors_;
    std::unique_ptr<detail::RandomDesign> design_;
};

struct LmmFit {
    Criterion criterion = Criterion::REML;
    double mu_hat = 0.0;
    double var_student = 0.0;
    double var_skill = 0.0;
    double var_resid = 0.0;
    std::map<std::string, double> blup_student;
    std::map<std::string, double> blup_skill;
    std::map<std::string, int> n_obs_student;
    std::map<std::string, int> n_obs_skill;
    double deviance = 0.0;
    bool converged = false;
    bool boundary_flag = false;
    int evaluations = 0;
    std::vector<double> deviance_trace;
    std::size_t n_rows = 0;
    std::size_t dropped_rows = 0;     // rows without rt_log
    std::size_t dropped_students = 0; // levels seen only in rows without rt_log
    std::size_t dropped_skills = 0;
};

// Fits the response-time model on rows with rt_log present. Fewer than two
// students or skills with RT observations is a data error.
LmmFit fit_lmm(const std::vector<StepRecord>& steps, const LmmSpec& spec = {});

struct BlupRow {
    std::string id;
    double effect = 0.0;
    int n_obs = 0;
};

// factor is "student" or "skill". Unconverged fits are refused unless
// accept_unconverged is set.
std::vector<BlupRow> extract_blups(const LmmFit& fit, const std::string& factor, bool accept_unconverged = false);

} // namespace rtprop
