#include "rtprop/iafm.hpp"

#include "rtprop/lmm.hpp"
#include "rtprop/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace rtprop {

namespace {

constexpr double kLogScaleLower = -12.0;
constexpr double kLogScaleUpper = 4.0;
constexpr double kOffDiagBound = 20.0;
constexpr double kProbFloor = 1e-15;
// Newton decrement below which a PIRLS iterate counts as the mode.
constexpr double kDecrement = 1e-10;
constexpr double kOuterBetaDecrement = 1e-6;

double inv_logit(double eta) {
    const double p = eta >= 0.0 ? 1.0 / (1.0 + std::exp(-eta)) : std::exp(eta) / (1.0 + std::exp(eta));
    return std::clamp(p, kProbFloor, 1.0 - kProbFloor);
}

// Gauss-Hermite rule for the weight exp(-t^2). Nodes start from the Jacobi
// matrix and are refined by Newton; `scaled` receives w_i * exp(t_i^2).
void gauss_hermite_rule(int n, std::vector<double>& nodes, std::vector<double>& scaled) {
    Eigen::MatrixXd j = Eigen::MatrixXd::Zero(n, n);
    for (int i = 1; i < n; ++i) j(i, i - 1) = j(i - 1, i) = std::sqrt(0.5 * i);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(j, Eigen::EigenvaluesOnly);
    nodes.assign(es.eigenvalues().data(), es.eigenvalues().data() + n);
    scaled.resize(static_cast<std::size_t>(n));
    const double p0 = std::pow(std::numbers::pi, -0.25);
    for (int i = 0; i < n; ++i) {
        double& t = nodes[static_cast<std::size_t>(i)];
        double norm = 0.0;
        for (int pass = 0; pass < 4; ++pass) {
            double prev = 0.0, cur = p0;
            norm = cur * cur;
            for (int k = 0; k < n; ++k) {
                const double next = std::sqrt(2.0 / (k + 1.0)) * t * cur - std::sqrt(k / (k + 1.0)) * prev;
                prev = cur;
                cur = next;
                if (k < n - 1) norm += cur * cur;
            }
            if (pass < 3) t -= cur / (std::sqrt(2.0 * n) * prev);
        }
        scaled[static_cast<std::size_t>(i)] = std::exp(t * t) / norm;
    }
}

} // namespace

LogisticMixedModel::LogisticMixedModel(Eigen::VectorXd y, Eigen::MatrixXd x, std::vector<detail::RandomTerm> terms,
                                       std::vector<double> covariate)
    : y_(std::move(y)), x_(std::move(x)) {
    if (x_.rows() != y_.size()) config_error("fixed-effect design does not match the response length");
    if (x_.cols() < 1) config_error("fixed-effect design needs at least one column");
    for (Eigen::Index i = 0; i < y_.size(); ++i)
        if (y_[i] != 0.0 && y_[i] != 1.0) data_error("binary response must be 0 or 1");
    design_ = std::make_unique<detail::RandomDesign>(std::move(terms), std::move(covariate));
    u_ = Eigen::VectorXd::Zero(design_->q());
}

LogisticMixedModel::~LogisticMixedModel() = default;
LogisticMixedModel::LogisticMixedModel(LogisticMixedModel&&) noexcept = default;
LogisticMixedModel& LogisticMixedModel::operator=(LogisticMixedModel&&) noexcept = default;

std::size_t LogisticMixedModel::theta_size() const {
    std::size_t s = 0;
    for (const auto& t : design_->terms()) s += t.dim == 1 ? 1 : 3;
    return s;
}

std::vector<Eigen::MatrixXd> LogisticMixedModel::lambda_of(std::span<const double> theta) const {
    if (theta.size() != theta_size()) config_error("covariance parameter vector has the wrong length");
    std::vector<Eigen::MatrixXd> out;
    std::size_t k = 0;
    for (const auto& t : design_->terms()) {
        Eigen::MatrixXd l = Eigen::MatrixXd::Zero(t.dim, t.dim);
        l(0, 0) = std::exp(theta[k++]);
        if (t.dim == 2) {
            l(1, 0) = theta[k++];
            l(1, 1) = std::exp(theta[k++]);
        }
        out.push_back(std::move(l));
    }
    return out;
}

void LogisticMixedModel::set_theta(std::span<const double> theta) { design_->set_lambda(lambda_of(theta)); }

void LogisticMixedModel::set_zero_covariance() {
    std::vector<Eigen::MatrixXd> zero;
    for (const auto& t : design_->terms()) zero.push_back(Eigen::MatrixXd::Zero(t.dim, t.dim));
    design_->set_lambda(zero);
}

Eigen::VectorXd LogisticMixedModel::b() const { return design_->scale(u_); }

double LogisticMixedModel::penalized(const Eigen::VectorXd& beta, const Eigen::VectorXd& u,
                                     Eigen::VectorXd& eta) const {
    design_->zl_times(u, eta);
    eta.noalias() += x_ * beta;
    const auto e = eta.array();
    const double dev = (e.max(0.0) + (1.0 + (-e.abs()).exp()).log() - y_.array() * e).sum();
    return 2.0 * dev + u.squaredNorm();
}

void LogisticMixedModel::weights_from(const Eigen::VectorXd& eta) {
    const auto e = eta.array();
    const Eigen::ArrayXd t = (-e.abs()).exp();
    mu_ = (e >= 0.0).select(1.0 / (1.0 + t), t / (1.0 + t)).max(kProbFloor).min(1.0 - kProbFloor).matrix();
    w_ = (mu_.array() * (1.0 - mu_.array())).matrix();
}

InnerResult LogisticMixedModel::modes(const Eigen::VectorXd& beta) {
    auto& d = *design_;
    InnerResult res;
    double f = penalized(beta, u_, eta_);
    if (!std::isfinite(f)) {
        u_.setZero();
        f = penalized(beta, u_, eta_);
    }
    Eigen::VectorXd g, delta, trial_u, trial_eta;
    bool refresh = false;
    for (int it = 0; it < max_inner_iterations_; ++it) {
        weights_from(eta_);
        d.zl_transpose_times(y_ - mu_, g);
        g -= u_;
        d.assemble({w_.data(), static_cast<std::size_t>(w_.size())});
        d.factorize();
        res.max_gradient = g.size() ? g.lpNorm<Eigen::Infinity>() : 0.0;
        res.iterations = it;
        if (res.max_gradient <= inner_tolerance_) {
            res.converged = true;
            break;
        }
        delta = d.factor().solve(g);
        const bool last = g.dot(delta) <= kDecrement;
        double step = 1.0;
        bool accepted = false;
        for (int h = 0; h <= (last ? 0 : max_halvings_); ++h, step *= 0.5) {
            trial_u = u_ + step * delta;
            const double ft = penalized(beta, trial_u, trial_eta);
            if (ft <= f + 1e-13 * (1.0 + std::abs(f))) {
                u_.swap(trial_u);
                eta_.swap(trial_eta);
                f = ft;
                accepted = true;
                break;
            }
        }
        if (last) {
            if (accepted) refresh = true;
            res.converged = true;
            break;
        }
        if (!accepted) {
            if (res.max_gradient <= 1e-6) {
                res.converged = true;
                break;
            }
            numerical_error("PIRLS diverged: step-halving exhausted");
        }
    }
    if (!res.converged || refresh) {
        weights_from(eta_);
        d.zl_transpose_times(y_ - mu_, g);
        g -= u_;
        d.assemble({w_.data(), static_cast<std::size_t>(w_.size())});
        d.factorize();
        res.max_gradient = g.size() ? g.lpNorm<Eigen::Infinity>() : 0.0;
        if (!refresh) res.converged = res.max_gradient <= inner_tolerance_;
    }
    beta_at_ = beta;
    res.penalized_deviance = f;
    res.logdet = d.logdet();
    return res;
}

Eigen::VectorXd LogisticMixedModel::laplace_gradient(Eigen::MatrixXd* hessian) {
    auto& d = *design_;
    const std::span<const double> w{w_.data(), static_cast<std::size_t>(w_.size())};
    Eigen::VectorXd g = -2.0 * (x_.transpose() * (y_ - mu_));
    const Eigen::MatrixXd zwx = d.zl_transpose_weighted(w, x_);
    const Eigen::MatrixXd ainv_zwx = d.factor().solve(zwx);
    if (hessian)
        *hessian = 2.0 * (x_.transpose() * w_.asDiagonal() * x_ - zwx.transpose() * ainv_zwx);
    const Eigen::VectorXd h = d.leverage_terms();
    Eigen::VectorXd c(y_.size());
    for (Eigen::Index i = 0; i < c.size(); ++i) c[i] = w_[i] * (1.0 - 2.0 * mu_[i]) * h[i];
    g.noalias() += x_.transpose() * c;
    Eigen::VectorXd t;
    for (Eigen::Index j = 0; j < x_.cols(); ++j) {
        d.zl_times(-ainv_zwx.col(j), t);
        g[j] += c.dot(t);
    }
    return g;
}

InnerResult LogisticMixedModel::profile_beta(Eigen::VectorXd& beta, double tolerance, double decrement) {
    InnerResult r = modes(beta);
    double f = r.laplace();
    Eigen::MatrixXd hess;
    for (int it = 0; it < 100; ++it) {
        const Eigen::VectorXd g = laplace_gradient(&hess);
        Eigen::LDLT<Eigen::MatrixXd> ldlt(hess);
        if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0.0).all())
            numerical_error("fixed-effect Hessian is not positive definite");
        const Eigen::VectorXd delta = -ldlt.solve(g);
        if (!delta.allFinite()) numerical_error("fixed-effect update is not finite");
        const double size = delta.lpNorm<Eigen::Infinity>();
        if (size <= tolerance || -g.dot(delta) <= decrement) break;
        double step = 1.0;
        bool accepted = false;
        Eigen::VectorXd trial;
        for (int h = 0; h <= max_halvings_; ++h, step *= 0.5) {
            trial = beta + step * delta;
            const InnerResult tr = modes(trial);
            if (tr.laplace() <= f + 1e-13 * (1.0 + std::abs(f))) {
                beta = trial;
                r = tr;
                f = tr.laplace();
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            r = modes(beta);
            break;
        }
        if (step == 1.0 && size * size <= tolerance) break;
    }
    return r;
}

InnerResult LogisticMixedModel::joint_modes(Eigen::VectorXd& beta, const GlmmOptions& options) {
    auto& d = *design_;
    double f = penalized(beta, u_, eta_);
    if (!std::isfinite(f)) {
        u_.setZero();
        f = penalized(beta, u_, eta_);
    }
    InnerResult res;
    Eigen::VectorXd gu, tu, teta, tb;
    for (int it = 0; it < options.max_inner_iterations; ++it) {
        weights_from(eta_);
        const std::span<const double> w{w_.data(), static_cast<std::size_t>(w_.size())};
        d.zl_transpose_times(y_ - mu_, gu);
        gu -= u_;
        const Eigen::VectorXd gb = x_.transpose() * (y_ - mu_);
        d.assemble(w);
        d.factorize();
        res.iterations = it;
        res.max_gradient = std::max(gu.size() ? gu.lpNorm<Eigen::Infinity>() : 0.0, gb.lpNorm<Eigen::Infinity>());
        if (res.max_gradient <= options.inner_tolerance) {
            res.converged = true;
            break;
        }
        const Eigen::MatrixXd zwx = d.zl_transpose_weighted(w, x_);
        const Eigen::MatrixXd ainv_zwx = d.factor().solve(zwx);
        const Eigen::VectorXd ainv_gu = d.factor().solve(gu);
        const Eigen::MatrixXd s = x_.transpose() * w_.asDiagonal() * x_ - zwx.transpose() * ainv_zwx;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(s);
        if (ldlt.info() != Eigen::Success) numerical_error("joint PIRLS: singular fixed-effect system");
        const Eigen::VectorXd db = ldlt.solve(gb - zwx.transpose() * ainv_gu);
        const Eigen::VectorXd du = ainv_gu - ainv_zwx * db;
        if (!db.allFinite() || !du.allFinite()) numerical_error("joint PIRLS: non-finite update");
        if (gu.dot(du) + gb.dot(db) <= kDecrement) {
            res.converged = true;
            break;
        }
        double step = 1.0;
        bool accepted = false;
        for (int h = 0; h <= options.max_halvings; ++h, step *= 0.5) {
            tu = u_ + step * du;
            tb = beta + step * db;
            const double ft = penalized(tb, tu, teta);
            if (ft <= f + 1e-13 * (1.0 + std::abs(f))) {
                u_.swap(tu);
                beta.swap(tb);
                eta_.swap(teta);
                f = ft;
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            if (res.max_gradient <= 1e-6) {
                res.converged = true;
                break;
            }
            numerical_error("PIRLS diverged: step-halving exhausted");
        }
    }
    res.penalized_deviance = f;
    res.logdet = d.logdet();
    return res;
}

GlmmFit LogisticMixedModel::fit(const GlmmOptions& options) {
    if (y_.size() == 0) data_error("no observations to fit");
    const double ymin = y_.minCoeff(), ymax = y_.maxCoeff();
    if (ymin == ymax) data_error("separation: model unidentified");
    inner_tolerance_ = options.inner_tolerance;
    max_inner_iterations_ = options.max_inner_iterations;
    max_halvings_ = options.max_halvings;

    const Eigen::Index p = x_.cols();
    GlmmFit out;
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);

    // Plain logistic regression: start values, and the whole answer when pinned.
    set_zero_covariance();
    u_.setZero();
    InnerResult r = profile_beta(beta, 1e-12);
    int evaluations = 1;

    auto finish = [&](const std::vector<Eigen::MatrixXd>& lambda) {
        out.beta = beta;
        for (const auto& l : lambda) {
            out.chol.push_back(l);
            out.cov.push_back(l * l.transpose());
        }
        out.u = u_;
        out.b = b();
        out.laplace_deviance = r.laplace();
        out.laplace_loglik = -0.5 * out.laplace_deviance;
        out.max_inner_gradient = r.max_gradient;
        out.evaluations = evaluations;
    };

    if (options.pin_covariance_zero) {
        std::vector<Eigen::MatrixXd> zero;
        for (const auto& t : design_->terms()) zero.push_back(Eigen::MatrixXd::Zero(t.dim, t.dim));
        finish(zero);
        out.converged = r.converged;
        out.loglik_trace.push_back(out.laplace_loglik);
        return out;
    }

    const std::size_t nt = theta_size();
    std::vector<double> theta = options.theta_start;
    std::vector<double> lower, upper;
    for (const auto& t : design_->terms()) {
        lower.push_back(kLogScaleLower);
        upper.push_back(kLogScaleUpper);
        if (t.dim == 2) {
            lower.insert(lower.end(), {-kOffDiagBound, kLogScaleLower});
            upper.insert(upper.end(), {kOffDiagBound, kLogScaleUpper});
        }
    }
    if (theta.empty()) {
        for (const auto& t : design_->terms()) {
            theta.push_back(0.0);
            if (t.dim == 2) theta.insert(theta.end(), {0.0, std::log(0.1)});
        }
    }
    if (theta.size() != nt) config_error("theta_start has the wrong length");

    const double inf = std::numeric_limits<double>::infinity();

    // Stage 1: fixed effects and modes optimized jointly inside PIRLS.
    Eigen::VectorXd beta1 = beta;
    auto stage1 = [&](std::span<const double> th) {
        try {
            set_theta(th);
            Eigen::VectorXd bt = beta1;
            const InnerResult jr = joint_modes(bt, options);
            if (!jr.converged) return inf;
            beta1 = bt;
            return jr.laplace();
        } catch (const Error&) {
            u_.setZero();
            return inf;
        }
    };
    NelderMeadOptions nm1;
    nm1.ftol_rel = 1e-5;
    nm1.xtol = 5e-2;
    nm1.restarts = 0;
    nm1.initial_step = 0.5;
    nm1.max_evaluations = options.max_outer_iterations;
    const OptimResult o1 = nelder_mead(stage1, theta, lower, upper, nm1);
    evaluations += o1.evaluations;
    if (std::isfinite(o1.value)) theta = o1.x;

    // Stage 2: beta profiled on the exact Laplace deviance.
    Eigen::VectorXd beta2 = std::isfinite(o1.value) ? beta1 : beta;
    auto stage2 = [&](std::span<const double> th) {
        try {
            set_theta(th);
            Eigen::VectorXd bt = beta2;
            const InnerResult pr = profile_beta(bt, 1e-9, kOuterBetaDecrement);
            if (!pr.converged) return inf;
            beta2 = bt;
            return pr.laplace();
        } catch (const Error&) {
            u_.setZero();
            return inf;
        }
    };
    NelderMeadOptions nm2;
    nm2.ftol_rel = options.outer_tolerance;
    nm2.xtol = 1e-4;
    nm2.restarts = 0;
    nm2.initial_step = 0.1;
    nm2.max_evaluations = options.max_outer_iterations;
    const OptimResult o2 = nelder_mead(stage2, theta, lower, upper, nm2);
    evaluations += o2.evaluations;
    if (!std::isfinite(o2.value)) numerical_error("Laplace objective is not finite at any trial point");

    theta = o2.x;
    set_theta(theta);
    beta = beta2;
    r = profile_beta(beta);
    ++evaluations;
    if (options.agq_nodes <= 1) {
        finish(lambda_of(theta));
        out.theta = theta;
        out.converged = o2.converged && r.converged;
        for (double v : o2.trace) out.loglik_trace.push_back(-0.5 * v);
        return out;
    }

    // Stage 3: theta and beta together on the quadrature deviance.
    std::vector<double> x0 = theta, lower3 = lower, upper3 = upper;
    for (Eigen::Index j = 0; j < p; ++j) {
        x0.push_back(beta[j]);
        lower3.push_back(-inf);
        upper3.push_back(inf);
    }
    auto stage3 = [&](std::span<const double> v) {
        try {
            set_theta(v.first(nt));
            Eigen::VectorXd bt(p);
            for (Eigen::Index j = 0; j < p; ++j) bt[j] = v[nt + static_cast<std::size_t>(j)];
            return agq_deviance(bt, options.agq_nodes);
        } catch (const Error&) {
            u_.setZero();
            return inf;
        }
    };
    NelderMeadOptions nm3;
    nm3.ftol_rel = 1e-10;
    nm3.xtol = 1e-6;
    nm3.restarts = 1;
    nm3.initial_step = 0.1;
    nm3.max_evaluations = options.max_outer_iterations;
    const OptimResult o3 = nelder_mead(stage3, x0, lower3, upper3, nm3);
    evaluations += o3.evaluations;
    if (!std::isfinite(o3.value)) numerical_error("quadrature objective is not finite at any trial point");
    theta.assign(o3.x.begin(), o3.x.begin() + static_cast<std::ptrdiff_t>(nt));
    for (Eigen::Index j = 0; j < p; ++j) beta[j] = o3.x[nt + static_cast<std::size_t>(j)];
    set_theta(theta);
    const double dev = agq_deviance(beta, options.agq_nodes);
    ++evaluations;
    finish(lambda_of(theta));
    out.theta = theta;
    out.laplace_deviance = dev;
    out.laplace_loglik = -0.5 * dev;
    out.max_inner_gradient = last_inner_.max_gradient;
    out.converged = o3.converged && last_inner_.converged;
    for (double v : o3.trace) out.loglik_trace.push_back(-0.5 * v);
    return out;
}

double LogisticMixedModel::agq_deviance(const Eigen::VectorXd& beta, int nodes) {
    const auto& terms = design_->terms();
    if (terms.size() != 1 || terms.front().dim != 1)
        config_error("adaptive quadrature needs a single scalar random-effect term");
    if (nodes < 1) config_error("quadrature needs at least one node");
    if (static_cast<int>(gh_nodes_.size()) != nodes) gauss_hermite_rule(nodes, gh_nodes_, gh_weights_);

    last_inner_ = modes(beta);
    const InnerResult& r = last_inner_;
    if (!r.converged) return std::numeric_limits<double>::infinity();
    const detail::RandomTerm& term = terms.front();
    const double lambda = design_->lambda().front()(0, 0);
    const int ng = term.n_levels;
    const Eigen::VectorXd fixed = x_ * beta;

    std::vector<double> curvature(static_cast<std::size_t>(ng), 1.0);
    for (Eigen::Index i = 0; i < y_.size(); ++i) curvature[term.level[i]] += lambda * lambda * w_[i];
    std::vector<std::vector<Eigen::Index>> rows(static_cast<std::size_t>(ng));
    for (Eigen::Index i = 0; i < y_.size(); ++i) rows[term.level[i]].push_back(i);

    // Per group: h(u) = Bernoulli deviance + u^2, integrated around the mode.
    auto h = [&](int g, double u) {
        double dev = u * u;
        for (Eigen::Index i : rows[static_cast<std::size_t>(g)]) {
            const double eta = fixed[i] + lambda * u;
            dev += 2.0 * ((eta > 0.0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta))) - y_[i] * eta);
        }
        return dev;
    };
    double total = 0.0;
    for (int g = 0; g < ng; ++g) {
        const double mode = u_[g];
        const double sd = 1.0 / std::sqrt(curvature[static_cast<std::size_t>(g)]);
        const double h0 = h(g, mode);
        double sum = 0.0;
        for (int k = 0; k < nodes; ++k) {
            const double t = gh_nodes_[static_cast<std::size_t>(k)];
            const double hk = h(g, mode + std::sqrt(2.0) * sd * t);
            sum += gh_weights_[static_cast<std::size_t>(k)] * std::exp(-0.5 * (hk - h0));
        }
        total += h0 - 2.0 * std::log(sum) + std::log(curvature[static_cast<std::size_t>(g)]) + std::log(std::numbers::pi);
    }
    return total;
}

IafmFit fit_iafm(const std::vector<StepRecord>& steps, const IafmSpec& spec) {
    if (steps.empty()) data_error("no steps to fit");
    std::vector<std::size_t> order(steps.size());
    std::iota(order.begin(), order.end(), 0);
    // Canonical row order makes the fit independent of input order.
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const StepRecord& x = steps[a];
        const StepRecord& y = steps[b];
        return std::tie(x.student_id, x.kc_id, x.opportunity, x.first_attempt_correct) <
               std::tie(y.student_id, y.kc_id, y.opportunity, y.first_attempt_correct);
    });

    const std::size_t n = steps.size();
    std::vector<std::string> students(n), skills(n);
    std::vector<double> opp(n);
    Eigen::VectorXd y(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const StepRecord& s = steps[order[i]];
        if (s.opportunity < 1) config_error("steps need opportunities assigned before fitting");
        students[i] = s.student_id;
        skills[i] = s.kc_id;
        opp[i] = s.opportunity;
        y[static_cast<Eigen::Index>(i)] = s.first_attempt_correct ? 1.0 : 0.0;
    }
    IafmFit fit;
    fit.n_rows = n;
    fit.centered = spec.center_opportunity;
    fit.pinned_zero = spec.pin_covariance_zero;
    if (spec.center_opportunity) {
        fit.opportunity_center = std::accumulate(opp.begin(), opp.end(), 0.0) / static_cast<double>(n);
        for (double& v : opp) v -= fit.opportunity_center;
    }

    const InterceptFactor fs = make_factor("student", students);
    const InterceptFactor fk = make_factor("skill", skills);
    if (fs.levels.size() < 2) data_error("iAFM needs at least 2 students");
    if (fk.levels.size() < 2) data_error("iAFM needs at least 2 skills");

    Eigen::MatrixXd x(static_cast<Eigen::Index>(n), 2);
    for (std::size_t i = 0; i < n; ++i) {
        x(static_cast<Eigen::Index>(i), 0) = 1.0;
        x(static_cast<Eigen::Index>(i), 1) = opp[i];
    }
    std::vector<detail::RandomTerm> terms{
        {"student", static_cast<int>(fs.levels.size()), 2, fs.level},
        {"skill", static_cast<int>(fk.levels.size()), 2, fk.level},
    };
    LogisticMixedModel model(y, std::move(x), std::move(terms), opp);
    GlmmOptions options;
    options.pin_covariance_zero = spec.pin_covariance_zero;
    options.inner_tolerance = spec.inner_tolerance;
    options.outer_tolerance = spec.outer_tolerance;
    options.max_outer_iterations = spec.max_outer_iterations;
    const GlmmFit g = model.fit(options);

    fit.beta0_hat = g.beta[0];
    fit.beta_opp_hat = g.beta[1];
    fit.chol_student = g.chol[0];
    fit.chol_skill = g.chol[1];
    fit.cov_student = g.cov[0];
    fit.cov_skill = g.cov[1];
    fit.laplace_loglik = g.laplace_loglik;
    fit.converged = g.converged;
    fit.evaluations = g.evaluations;
    fit.loglik_trace = g.loglik_trace;
    fit.max_inner_gradient = g.max_inner_gradient;

    const Eigen::Index skill_offset = 2 * static_cast<Eigen::Index>(fs.levels.size());
    std::vector<int> ns(fs.levels.size(), 0), nk(fk.levels.size(), 0);
    for (int l : fs.level) ++ns[l];
    for (int l : fk.level) ++nk[l];
    for (std::size_t l = 0; l < fs.levels.size(); ++l) {
        const Eigen::Index o = 2 * static_cast<Eigen::Index>(l);
        fit.blup_student[fs.levels[l]] = {g.b[o], g.b[o + 1]};
        fit.n_obs_student[fs.levels[l]] = ns[l];
    }
    for (std::size_t l = 0; l < fk.levels.size(); ++l) {
        const Eigen::Index o = skill_offset + 2 * static_cast<Eigen::Index>(l);
        fit.blup_skill[fk.levels[l]] = {g.b[o], g.b[o + 1]};
        fit.n_obs_skill[fk.levels[l]] = nk[l];
    }
    return fit;
}

std::vector<StudentIafmRow> extract_student_params(const IafmFit& fit, bool accept_unconverged) {
    if (!fit.converged && !accept_unconverged) numerical_error("refusing parameters from an unconverged iAFM fit");
    std::vector<StudentIafmRow> rows;
    rows.reserve(fit.blup_student.size());
    for (const auto& [id, e] : fit.blup_student) {
        auto it = fit.n_obs_student.find(id);
        rows.push_back({id, e[0], e[1], it == fit.n_obs_student.end() ? 0 : it->second});
    }
    return rows;
}

Prediction predict_prob(const IafmFit& fit, const std::string& student_id, const std::string& kc_id,
                        double opportunity) {
    if (!(opportunity >= 0.0)) config_error("opportunity must be non-negative");
    Prediction out;
    const double x = fit.centered ? opportunity - fit.opportunity_center : opportunity;
    double eta = fit.beta0_hat + fit.beta_opp_hat * x;
    if (auto it = fit.blup_student.find(student_id); it != fit.blup_student.end())
        eta += it->second[0] + it->second[1] * x;
    else
        out.unknown_student = true;
    if (auto it = fit.blup_skill.find(kc_id); it != fit.blup_skill.end())
        eta += it->second[0] + it->second[1] * x;
    else
        out.unknown_skill = true;
    out.probability = inv_logit(eta);
    return out;
}

} // namespace rtprop
