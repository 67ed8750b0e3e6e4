#include "rtprop/lmm.hpp"

#include "rtprop/detail/random_design.hpp"
#include "rtprop/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace rtprop {

namespace {

constexpr double kLogRatioLower = -23.0; // ratio ~1e-10
constexpr double kLogRatioUpper = 12.0;
constexpr double kBoundaryProximity = 1e-4;

} // namespace

const char* criterion_name(Criterion c) { return c == Criterion::REML ? "REML" : "ML"; }

InterceptFactor make_factor(std::string name, const std::vector<std::string>& labels) {
    InterceptFactor f;
    f.name = std::move(name);
    std::set<std::string> unique(labels.begin(), labels.end());
    f.levels.assign(unique.begin(), unique.end());
    f.level.reserve(labels.size());
    for (const auto& l : labels)
        f.level.push_back(static_cast<int>(std::lower_bound(f.levels.begin(), f.levels.end(), l) - f.levels.begin()));
    return f;
}

InterceptMixedModel::InterceptMixedModel(Eigen::VectorXd y, std::vector<InterceptFactor> factors)
    : y_(std::move(y)), factors_(std::move(factors)) {
    if (y_.size() < 2) data_error("mixed model needs at least two observations");
    std::vector<detail::RandomTerm> terms;
    for (const auto& f : factors_) {
        if (static_cast<Eigen::Index>(f.level.size()) != y_.size())
            config_error("factor '" + f.name + "' length does not match the response");
        terms.push_back({f.name, static_cast<int>(f.levels.size()), 1, f.level});
    }
    design_ = std::make_unique<detail::RandomDesign>(std::move(terms), std::vector<double>{});
}

InterceptMixedModel::~InterceptMixedModel() = default;
InterceptMixedModel::InterceptMixedModel(InterceptMixedModel&&) noexcept = default;
InterceptMixedModel& InterceptMixedModel::operator=(InterceptMixedModel&&) noexcept = default;

PlsSolution InterceptMixedModel::solve(std::span<const double> ratios) {
    if (ratios.size() != factors_.size()) config_error("one variance ratio per factor is required");
    std::vector<Eigen::MatrixXd> lambda;
    for (double r : ratios) {
        if (!(r >= 0.0)) config_error("variance ratios must be non-negative");
        lambda.push_back(Eigen::MatrixXd::Constant(1, 1, std::sqrt(r)));
    }
    auto& d = *design_;
    d.set_lambda(lambda);
    d.assemble({});
    d.factorize();

    const Eigen::Index n = y_.size();
    Eigen::VectorXd zy, z1;
    d.zl_transpose_times(y_, zy);
    d.zl_transpose_times(Eigen::VectorXd::Ones(n), z1);
    const Eigen::VectorXd sy = d.factor().solve(zy);
    const Eigen::VectorXd s1 = d.factor().solve(z1);

    PlsSolution sol;
    const double schur = static_cast<double>(n) - z1.dot(s1);
    if (!(schur > 0.0)) numerical_error("fixed-effect Schur complement is not positive");
    sol.mu = (y_.sum() - z1.dot(sy)) / schur;
    sol.u = sy - s1 * sol.mu;
    Eigen::VectorXd fitted;
    d.zl_times(sol.u, fitted);
    sol.prss = (y_.array() - sol.mu - fitted.array()).matrix().squaredNorm() + sol.u.squaredNorm();
    sol.b = d.scale(sol.u);
    sol.logdet_a = d.logdet();
    sol.logdet_x = std::log(schur);
    return sol;
}

double InterceptMixedModel::deviance(std::span<const double> ratios, Criterion criterion) {
    const PlsSolution s = solve(ratios);
    const double n = static_cast<double>(y_.size());
    const double two_pi = 2.0 * std::numbers::pi;
    if (criterion == Criterion::ML) return s.logdet_a + n * (1.0 + std::log(two_pi * s.prss / n));
    const double nr = n - 1.0;
    return s.logdet_a + s.logdet_x + nr * (1.0 + std::log(two_pi * s.prss / nr));
}

InterceptModelFit InterceptMixedModel::fit(const LmmSpec& spec) {
    const std::size_t k = factors_.size();
    struct Run {
        std::vector<double> log_ratio;
        std::vector<bool> pinned;
        double value = 0.0;
        bool converged = false;
        int evaluations = 0;
        std::vector<double> trace;
    };

    auto ratios_of = [&](const std::vector<double>& x, const std::vector<bool>& pinned) {
        std::vector<double> r(k);
        for (std::size_t i = 0; i < k; ++i) r[i] = pinned[i] ? 0.0 : std::exp(x[i]);
        return r;
    };

    auto optimize = [&](const std::vector<bool>& pinned, std::vector<double> start) {
        Run run;
        run.pinned = pinned;
        std::vector<std::size_t> free;
        for (std::size_t i = 0; i < k; ++i)
            if (!pinned[i]) free.push_back(i);
        auto objective_full = [&](const std::vector<double>& x) { return deviance(ratios_of(x, pinned), spec.criterion); };
        if (free.empty()) {
            run.log_ratio = start;
            run.value = objective_full(start);
            run.converged = true;
            run.evaluations = 1;
            run.trace.push_back(run.value);
            return run;
        }
        std::vector<double> x0, lo(free.size(), kLogRatioLower), hi(free.size(), kLogRatioUpper);
        for (std::size_t i : free) x0.push_back(start[i]);
        auto expand = [&](std::span<const double> z) {
            std::vector<double> x = start;
            for (std::size_t j = 0; j < free.size(); ++j) x[free[j]] = z[j];
            return x;
        };
        NelderMeadOptions nm;
        nm.ftol_rel = spec.tolerance;
        nm.xtol = 1e-7;
        nm.max_evaluations = spec.max_iterations * static_cast<int>(free.size() + 1);
        nm.initial_step = 1.0;
        const OptimResult opt = nelder_mead([&](std::span<const double> z) { return objective_full(expand(z)); }, x0,
                                            lo, hi, nm);
        run.evaluations = opt.evaluations;
        run.converged = opt.converged;
        run.trace = opt.trace;
        std::vector<double> z = opt.x;
        double fz = opt.value;

        // Newton polish with central differences on interior coordinates.
        const double h = 1e-4;
        const std::size_t m = free.size();
        for (int iter = 0; iter < 6; ++iter) {
            bool interior = true;
            for (double v : z)
                if (v - h <= kLogRatioLower || v + h >= kLogRatioUpper) interior = false;
            if (!interior) break;
            Eigen::VectorXd g(m);
            Eigen::MatrixXd hess(m, m);
            auto at = [&](std::size_t a, double da, std::size_t b, double db) {
                std::vector<double> t = z;
                t[a] += da;
                t[b] += db;
                ++run.evaluations;
                return objective_full(expand(t));
            };
            for (std::size_t a = 0; a < m; ++a) {
                const double fp = at(a, h, a, 0.0), fm = at(a, -h, a, 0.0);
                g[a] = (fp - fm) / (2 * h);
                hess(a, a) = (fp - 2 * fz + fm) / (h * h);
                for (std::size_t b = 0; b < a; ++b) {
                    const double v = (at(a, h, b, h) - at(a, h, b, -h) - at(a, -h, b, h) + at(a, -h, b, -h)) / (4 * h * h);
                    hess(a, b) = hess(b, a) = v;
                }
            }
            Eigen::LLT<Eigen::MatrixXd> llt(hess);
            if (llt.info() != Eigen::Success) break;
            const Eigen::VectorXd step = -llt.solve(g);
            if (!step.allFinite() || step.lpNorm<Eigen::Infinity>() > 0.5) break;
            std::vector<double> cand = z;
            for (std::size_t a = 0; a < m; ++a) cand[a] = std::clamp(z[a] + step[a], kLogRatioLower, kLogRatioUpper);
            ++run.evaluations;
            const double fc = objective_full(expand(cand));
            if (!(fc <= fz)) break;
            z = cand;
            fz = fc;
            run.trace.push_back(fz);
            if (step.lpNorm<Eigen::Infinity>() < 1e-10) break;
        }
        run.log_ratio = expand(z);
        run.value = fz;
        return run;
    };

    Run best = optimize(std::vector<bool>(k, false), std::vector<double>(k, 0.0));
    int evaluations = best.evaluations;

    // Boundary handling: pin near-zero ratios at exactly zero and refit the rest.
    std::vector<bool> near(k, false);
    bool any_near = false;
    for (std::size_t i = 0; i < k; ++i) {
        if (std::exp(best.log_ratio[i]) < kBoundaryProximity) {
            near[i] = true;
            any_near = true;
        }
    }
    if (any_near) {
        std::vector<std::vector<bool>> candidates{near};
        if (std::count(near.begin(), near.end(), true) > 1)
            for (std::size_t i = 0; i < k; ++i)
                if (near[i]) {
                    std::vector<bool> single(k, false);
                    single[i] = true;
                    candidates.push_back(single);
                }
        for (const auto& pins : candidates) {
            Run cand = optimize(pins, best.log_ratio);
            evaluations += cand.evaluations;
            if (cand.value <= best.value + 1e-7) {
                cand.converged = cand.converged && best.converged;
                best = std::move(cand);
                break;
            }
        }
    }
    if (best.pinned.empty()) best.pinned.assign(k, false);

    const std::vector<double> ratios = ratios_of(best.log_ratio, best.pinned);
    const PlsSolution sol = solve(ratios);
    const double n = static_cast<double>(y_.size());

    InterceptModelFit fit;
    fit.criterion = spec.criterion;
    fit.mu_hat = sol.mu;
    fit.var_resid = sol.prss / (spec.criterion == Criterion::REML ? n - 1.0 : n);
    fit.ratios = ratios;
    fit.deviance = deviance(ratios, spec.criterion);
    fit.converged = best.converged;
    fit.evaluations = evaluations;
    fit.deviance_trace = best.trace;
    for (std::size_t f = 0; f < k; ++f) {
        fit.variances.push_back(ratios[f] * fit.var_resid);
        if (ratios[f] == 0.0) fit.boundary = true;
        const int off = design_->offset(f);
        const auto nl = factors_[f].levels.size();
        std::vector<double> b(nl);
        std::vector<int> counts(nl, 0);
        for (std::size_t l = 0; l < nl; ++l) b[l] = sol.b[off + static_cast<int>(l)];
        for (int lvl : factors_[f].level) ++counts[lvl];
        fit.blups.push_back(std::move(b));
        fit.level_counts.push_back(std::move(counts));
    }
    if (fit.var_resid <= 0.0) fit.boundary = true;
    return fit;
}

LmmFit fit_lmm(const std::vector<StepRecord>& steps, const LmmSpec& spec) {
    std::vector<std::string> students, skills;
    std::vector<double> y;
    std::set<std::string> all_students, all_skills;
    for (const auto& s : steps) {
        all_students.insert(s.student_id);
        all_skills.insert(s.kc_id);
        if (!s.rt_log) continue;
        students.push_back(s.student_id);
        skills.push_back(s.kc_id);
        y.push_back(*s.rt_log);
    }
    if (y.empty()) data_error("no response-time observations");

    LmmFit out;
    out.criterion = spec.criterion;
    out.n_rows = y.size();
    out.dropped_rows = steps.size() - y.size();

    InterceptFactor fs = make_factor("student", students);
    InterceptFactor fk = make_factor("skill", skills);
    out.dropped_students = all_students.size() - fs.levels.size();
    out.dropped_skills = all_skills.size() - fk.levels.size();
    if (fs.levels.size() < 2) data_error("response-time model needs at least 2 students with RT observations");
    if (fk.levels.size() < 2) data_error("response-time model needs at least 2 skills with RT observations");

    InterceptMixedModel model(Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size())),
                              {fs, fk});
    const InterceptModelFit fit = model.fit(spec);

    out.mu_hat = fit.mu_hat;
    out.var_resid = fit.var_resid;
    out.var_student = fit.variances[0];
    out.var_skill = fit.variances[1];
    out.deviance = fit.deviance;
    out.converged = fit.converged;
    out.boundary_flag = fit.boundary;
    out.evaluations = fit.evaluations;
    out.deviance_trace = fit.deviance_trace;
    for (std::size_t l = 0; l < fs.levels.size(); ++l) {
        out.blup_student[fs.levels[l]] = fit.blups[0][l];
        out.n_obs_student[fs.levels[l]] = fit.level_counts[0][l];
    }
    for (std::size_t l = 0; l < fk.levels.size(); ++l) {
        out.blup_skill[fk.levels[l]] = fit.blups[1][l];
        out.n_obs_skill[fk.levels[l]] = fit.level_counts[1][l];
    }
    return out;
}

std::vector<BlupRow> extract_blups(const LmmFit& fit, const std::string& factor, bool accept_unconverged) {
    if (!fit.converged && !accept_unconverged) numerical_error("refusing BLUPs from an unconverged response-time fit");
    const std::map<std::string, double>* effects = nullptr;
    const std::map<std::string, int>* counts = nullptr;
    if (factor == "student") {
        effects = &fit.blup_student;
        counts = &fit.n_obs_student;
    } else if (factor == "skill") {
        effects = &fit.blup_skill;
        counts = &fit.n_obs_skill;
    } else {
        config_error("unknown factor '" + factor + "' (expected student or skill)");
    }
    std::vector<BlupRow> rows;
    rows.reserve(effects->size());
    for (const auto& [id, e] : *effects) {
        auto it = counts->find(id);
        rows.push_back({id, e, it == counts->end() ? 0 : it->second});
    }
    return rows;
}

} // namespace rtprop
