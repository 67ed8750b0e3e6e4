#pragma once

// Logistic mixed model with correlated random intercepts and opportunity
// slopes for students and skills (the individualized additive factors model),
//   logit P(correct) = b0 + b_opp*opp + s(1, opp) + k(1, opp),
// fitted by maximizing the Laplace approximation of the marginal likelihood.

#include "rtprop/detail/random_design.hpp"
#include "rtprop/ingest.hpp"

#include <Eigen/Dense>

#include <array>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rtprop {

struct GlmmOptions {
    bool pin_covariance_zero = false;
    double inner_tolerance = 1e-8; // max |penalized score| at the modes
    double outer_tolerance = 1e-6; // relative change of the Laplace deviance
    int max_outer_iterations = 2000;
    int max_inner_iterations = 200;
    int max_halvings = 40;
    std::vector<double> theta_start; // empty: built-in start
    // Adaptive Gauss-Hermite nodes per group; 1 is the Laplace approximation.
    // More than one node needs a single scalar random-effect term.
    int agq_nodes = 1;
};

struct InnerResult {
    double penalized_deviance = 0.0; // sum of Bernoulli deviances + |u|^2
    double logdet = 0.0;             // log|A| at the modes
    double max_gradient = 0.0;
    int iterations = 0;
    bool converged = false;
    double laplace() const { return penalized_deviance + logdet; }
};

struct GlmmFit {
    Eigen::VectorXd beta;
    std::vector<double> theta;          // log-Cholesky per term
    std::vector<Eigen::MatrixXd> chol;  // lower-triangular factor per term
    std::vector<Eigen::MatrixXd> cov;   // chol * chol'
    Eigen::VectorXd u;
    Eigen::VectorXd b;                  // per term (n_levels x dim), row-major
    double laplace_deviance = 0.0; // adaptive quadrature when agq_nodes > 1
    double laplace_loglik = 0.0;
    double max_inner_gradient = 0.0;
    bool converged = false;
    int evaluations = 0;
    std::vector<double> loglik_trace; // accepted outer iterations
};

// Bernoulli GLMM with a dense fixed-effect design and sparse random terms.
// Covariance parameters per term: dim 1 -> (log l11); dim 2 -> (log l11, l21, log l22).
class LogisticMixedModel {
public:
    LogisticMixedModel(Eigen::VectorXd y, Eigen::MatrixXd x, std::vector<detail::RandomTerm> terms,
                       std::vector<double> covariate);
    ~LogisticMixedModel();
    LogisticMixedModel(LogisticMixedModel&&) noexcept;
    LogisticMixedModel& operator=(LogisticMixedModel&&) noexcept;

    std::size_t theta_size() const;
    std::vector<Eigen::MatrixXd> lambda_of(std::span<const double> theta) const;

    void set_theta(std::span<const double> theta);
    void set_zero_covariance();

    // Conditional modes of u at fixed beta (warm-started from the last call).
    InnerResult modes(const Eigen::VectorXd& beta);
    // Laplace deviance -2 log L at (beta, current theta).
    double laplace_deviance(const Eigen::VectorXd& beta) { return modes(beta).laplace(); }
    // Gradient of the Laplace deviance in beta, implicit dependence of the
    // modes included. Call right after modes(beta).
    Eigen::VectorXd laplace_gradient(Eigen::MatrixXd* hessian = nullptr);
    // beta maximizing the Laplace likelihood at the current theta. Stops once
    // the Newton step is below `tolerance` or its predicted decrease below
    // `decrement`.
    InnerResult profile_beta(Eigen::VectorXd& beta, double tolerance = 1e-9, double decrement = 1e-12);

    // -2 log L by adaptive Gauss-Hermite quadrature around the modes.
    double agq_deviance(const Eigen::VectorXd& beta, int nodes);

    const Eigen::VectorXd& u() const { return u_; }
    Eigen::VectorXd b() const;

    GlmmFit fit(const GlmmOptions& options);

private:
    double penalized(const Eigen::VectorXd& beta, const Eigen::VectorXd& u, Eigen::VectorXd& eta) const;
    void weights_from(const Eigen::VectorXd& eta);
    InnerResult joint_modes(Eigen::VectorXd& beta, const GlmmOptions& options);

    Eigen::VectorXd y_;
    Eigen::MatrixXd x_;
    std::unique_ptr<detail::RandomDesign> design_;
    Eigen::VectorXd u_, eta_, mu_, w_;
    Eigen::VectorXd beta_at_; // beta of the last modes() call
    double inner_tolerance_ = 1e-8;
    int max_inner_iterations_ = 200;
    int max_halvings_ = 40;
    InnerResult last_inner_;
    std::vector<double> gh_nodes_, gh_weights_;
};

struct IafmSpec {
    bool center_opportunity = false;
    bool pin_covariance_zero = false;
    double inner_tolerance = 1e-8;
    double outer_tolerance = 1e-6;
    int max_outer_iterations = 2000;
};

struct IafmFit {
    double beta0_hat = 0.0;
    double beta_opp_hat = 0.0;
    Eigen::Matrix2d cov_student = Eigen::Matrix2d::Zero();
    Eigen::Matrix2d cov_skill = Eigen::Matrix2d::Zero();
    Eigen::Matrix2d chol_student = Eigen::Matrix2d::Zero();
    Eigen::Matrix2d chol_skill = Eigen::Matrix2d::Zero();
    std::map<std::string, std::array<double, 2>> blup_student; // (intercept, slope)
    std::map<std::string, std::array<double, 2>> blup_skill;
    std::map<std::string, int> n_obs_student;
    std::map<std::string, int> n_obs_skill;
    double laplace_loglik = 0.0;
    bool converged = false;
    bool centered = false;
    double opportunity_center = 0.0;
    bool pinned_zero = false;
    int evaluations = 0;
    std::vector<double> loglik_trace;
    double max_inner_gradient = 0.0;
    std::size_t n_rows = 0;
    int threads = 1;
};

// Fits every row of the step table. All-correct or all-incorrect responses
// raise "separation: model unidentified".
IafmFit fit_iafm(const std::vector<StepRecord>& steps, const IafmSpec& spec = {});

struct StudentIafmRow {
    std::string student_id;
    double prior_proficiency = 0.0;
    double learning_rate = 0.0;
    int n_obs = 0;
};

std::vector<StudentIafmRow> extract_student_params(const IafmFit& fit, bool accept_unconverged = false);

struct Prediction {
    double probability = 0.5;
    bool unknown_student = false;
    bool unknown_skill = false;
};

// Unknown ids contribute zero random effects and are flagged.
Prediction predict_prob(const IafmFit& fit, const std::string& student_id, const std::string& kc_id,
                        double opportunity);

} // namespace rtprop
