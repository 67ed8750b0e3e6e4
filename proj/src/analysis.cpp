#include "rtprop/analysis.hpp"

#include "rtprop/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <thread>

namespace rtprop {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

} // namespace

Standardized standardize_with_moments(std::span<const double> values) {
    if (values.size() < 2) data_error("zero variance");
    Standardized s;
    s.mean = mean(values);
    s.sd = sample_sd(values);
    if (!(s.sd > 0.0)) data_error("zero variance");
    s.z.reserve(values.size());
    for (double v : values) s.z.push_back((v - s.mean) / s.sd);
    return s;
}

std::vector<double> standardize(std::span<const double> values) { return standardize_with_moments(values).z; }

Correlation pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) config_error("pearson: vectors differ in length");
    if (x.size() < 3) data_error("pearson: needs at least 3 pairs");
    const double mx = mean(x), my = mean(y);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (!(sxx > 0.0) || !(syy > 0.0)) data_error("zero variance");
    Correlation c;
    c.n = x.size();
    c.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    const double df = static_cast<double>(c.n) - 2.0;
    if (std::abs(c.r) >= 1.0) {
        c.p = 0.0;
    } else {
        const double t = c.r * std::sqrt(df / (1.0 - c.r * c.r));
        c.p = student_t_two_sided_p(t, df);
    }
    return c;
}

std::array<double, 2> correlation_ci(double r, std::size_t n, double level) {
    if (n <= 3) return {kNaN, kNaN};
    const double rc = std::clamp(r, -1.0 + 1e-15, 1.0 - 1e-15);
    const double z = std::atanh(rc);
    const double se = 1.0 / std::sqrt(static_cast<double>(n) - 3.0);
    const double q = normal_quantile(0.5 + level / 2.0);
    return {std::tanh(z - q * se), std::tanh(z + q * se)};
}

std::vector<StudentParams> join_params(const std::vector<BlupRow>& rt, const std::vector<StudentIafmRow>& iafm,
                                       int slice) {
    std::map<std::string, double> rt_by_id;
    for (const auto& r : rt) rt_by_id[r.id] = r.effect;
    std::vector<StudentParams> out;
    for (const auto& row : iafm) {
        auto it = rt_by_id.find(row.student_id);
        if (it == rt_by_id.end()) continue;
        out.push_back({row.student_id, it->second, row.prior_proficiency, row.learning_rate, slice});
    }
    std::sort(out.begin(), out.end(),
              [](const StudentParams& a, const StudentParams& b) { return a.student_id < b.student_id; });
    return out;
}

const char* field_name(ParamField f) {
    switch (f) {
    case ParamField::RtPropensity: return "rt_propensity";
    case ParamField::LearningRate: return "learning_rate";
    case ParamField::PriorProficiency: return "prior_proficiency";
    }
    return "";
}

namespace {

double field_of(const StudentParams& p, ParamField f) {
    switch (f) {
    case ParamField::RtPropensity: return p.rt_propensity;
    case ParamField::LearningRate: return p.learning_rate;
    case ParamField::PriorProficiency: return p.prior_proficiency;
    }
    return 0.0;
}

} // namespace

StabilityMatrix stability_matrix(const std::vector<std::vector<StudentParams>>& by_slice, ParamField field) {
    const std::size_t k = by_slice.size();
    std::vector<std::map<std::string, double>> maps(k);
    for (std::size_t s = 0; s < k; ++s)
        for (const auto& p : by_slice[s]) maps[s][p.student_id] = field_of(p, field);

    StabilityMatrix m(k, std::vector<StabilityCell>(k));
    for (std::size_t a = 0; a < k; ++a) {
        m[a][a] = {1.0, 0.0, maps[a].size(), !maps[a].empty()};
        for (std::size_t b = a + 1; b < k; ++b) {
            std::vector<double> x, y;
            for (const auto& [id, v] : maps[a]) {
                auto it = maps[b].find(id);
                if (it == maps[b].end()) continue;
                x.push_back(v);
                y.push_back(it->second);
            }
            StabilityCell cell;
            cell.n = x.size();
            if (x.size() >= 3) {
                try {
                    const Correlation c = pearson(x, y);
                    cell = {c.r, c.p, c.n, true};
                } catch (const Error&) {
                    cell.available = false;
                }
            }
            m[a][b] = m[b][a] = cell;
        }
    }
    return m;
}

OlsFit ols(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
    const Eigen::Index n = x.rows(), p = x.cols();
    if (y.size() != n) config_error("ols: response length does not match the design");
    if (n <= p) data_error("ols: needs more rows than columns");
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
    qr.setThreshold(1e-10);
    if (qr.rank() < p) data_error("rank-deficient design");
    OlsFit fit;
    fit.beta = qr.solve(y);
    fit.residuals = y - x * fit.beta;
    fit.df = static_cast<int>(n - p);
    const double rss = fit.residuals.squaredNorm();
    fit.sigma2 = rss / fit.df;
    const double tss = (y.array() - y.mean()).matrix().squaredNorm();
    fit.r2 = tss > 0.0 ? 1.0 - rss / tss : 1.0;
    // (X'X)^-1 = P R^-1 R^-T P'
    const Eigen::MatrixXd r = qr.matrixR().topLeftCorner(p, p).triangularView<Eigen::Upper>();
    const Eigen::MatrixXd rinv = r.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(p, p));
    const Eigen::MatrixXd perm = qr.colsPermutation();
    const Eigen::MatrixXd xtx_inv = perm * rinv * rinv.transpose() * perm.transpose();
    fit.se = (fit.sigma2 * xtx_inv.diagonal().array()).sqrt();
    return fit;
}

std::array<Coefficient, 4> coefficient_table(const OlsFit& fit) {
    if (fit.beta.size() != 4) config_error("coefficient table expects four terms");
    std::array<Coefficient, 4> out;
    const double q = student_t_quantile(0.975, fit.df);
    for (int j = 0; j < 4; ++j) {
        Coefficient& c = out[j];
        c.name = kModerationTerms[j];
        c.estimate = fit.beta[j];
        c.se = fit.se[j];
        c.t = c.se > 0.0 ? c.estimate / c.se : (c.estimate == 0.0 ? 0.0 : std::copysign(INFINITY, c.estimate));
        c.p = c.se > 0.0 ? student_t_two_sided_p(c.t, fit.df) : (c.estimate == 0.0 ? 1.0 : 0.0);
        c.ci_low = c.estimate - q * c.se;
        c.ci_high = c.estimate + q * c.se;
    }
    return out;
}

InfluenceResult influence_diagnostics(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                      const std::vector<std::string>& ids) {
    const Eigen::Index n = x.rows(), p = x.cols();
    if (n <= p) data_error("influence diagnostics need N > p");
    const OlsFit fit = ols(x, y);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(x);
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, p);
    const double rss = fit.residuals.squaredNorm();
    const double s2 = fit.sigma2;
    const double dn = static_cast<double>(n), dp = static_cast<double>(p);

    InfluenceResult out;
    out.cooks_threshold = 4.0 / dn;
    out.leverage_threshold = 2.0 * dp / dn;
    out.rows.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        InfluenceRow& row = out.rows[static_cast<std::size_t>(i)];
        if (!ids.empty()) row.id = ids[static_cast<std::size_t>(i)];
        const double h = q.row(i).squaredNorm();
        const double e = fit.residuals[i];
        row.leverage = h;
        const double one_minus_h = 1.0 - h;
        if (one_minus_h < 1e-10) {
            row.studentized_residual = kNaN;
            row.cooks_d = kNaN;
            row.flagged = true;
        } else {
            const double s2_i = (rss - e * e / one_minus_h) / (dn - dp - 1.0);
            row.studentized_residual = s2_i > 0.0 ? e / std::sqrt(s2_i * one_minus_h) : (e == 0.0 ? 0.0 : INFINITY);
            row.cooks_d = s2 > 0.0 ? e * e * h / (dp * s2 * one_minus_h * one_minus_h) : 0.0;
            row.flagged = row.cooks_d > out.cooks_threshold || h > out.leverage_threshold ||
                          std::abs(row.studentized_residual) > 3.0;
        }
        if (row.flagged) ++out.flagged;
    }
    return out;
}

ModerationFit moderation_fit(const std::vector<StudentParams>& params) {
    const std::size_t n = params.size();
    if (n < 10) data_error("moderation model needs at least 10 students");
    std::vector<double> rt(n), prof(n), lr(n);
    ModerationFit out;
    out.ids.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        rt[i] = params[i].rt_propensity;
        prof[i] = params[i].prior_proficiency;
        lr[i] = params[i].learning_rate;
        out.ids.push_back(params[i].student_id);
    }
    const auto zr = standardize(rt), zp = standardize(prof), zl = standardize(lr);
    out.x.resize(static_cast<Eigen::Index>(n), 4);
    out.y.resize(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        out.x.row(r) << 1.0, zr[i], zp[i], zr[i] * zp[i];
        out.y[r] = zl[i];
    }
    const OlsFit fit = ols(out.x, out.y);
    out.coefficients = coefficient_table(fit);
    out.n = n;
    out.r2 = fit.r2;
    out.influence = influence_diagnostics(out.x, out.y, out.ids);

    std::vector<Eigen::Index> keep;
    for (std::size_t i = 0; i < n; ++i)
        if (!out.influence.rows[i].flagged) keep.push_back(static_cast<Eigen::Index>(i));
    if (keep.size() > 4) {
        Eigen::MatrixXd xr(static_cast<Eigen::Index>(keep.size()), 4);
        Eigen::VectorXd yr(static_cast<Eigen::Index>(keep.size()));
        for (std::size_t j = 0; j < keep.size(); ++j) {
            xr.row(static_cast<Eigen::Index>(j)) = out.x.row(keep[j]);
            yr[static_cast<Eigen::Index>(j)] = out.y[keep[j]];
        }
        try {
            const OlsFit refit = ols(xr, yr);
            out.refit_coefficients = coefficient_table(refit);
            out.refit_n = keep.size();
            out.refit_r2 = refit.r2;
            out.refit_available = true;
        } catch (const Error&) {
            out.refit_available = false;
        }
    }
    return out;
}

std::vector<double> bh_adjust(std::span<const double> p) {
    const std::size_t m = p.size();
    for (double v : p)
        if (!(v >= 0.0 && v <= 1.0)) data_error("p-values must lie in [0, 1]");
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    std::vector<double> out(m);
    double running = 1.0;
    for (std::size_t r = m; r-- > 0;) {
        const double v = std::min(1.0, static_cast<double>(m) * p[order[r]] / static_cast<double>(r + 1));
        running = std::min(running, v);
        out[order[r]] = running;
    }
    return out;
}

std::string significance_marker(double p) {
    if (!(p == p)) return "";
    if (p < 0.001) return "***";
    if (p < 0.01) return "**";
    if (p < 0.05) return "*";
    if (p < 0.10) return ".";
    return "";
}

std::vector<StepRecord> slice_rows(const std::vector<StepRecord>& steps, int slice, int min_obs_per_student) {
    std::map<std::string, int> counts;
    for (const auto& s : steps)
        if (s.slice == slice) ++counts[s.student_id];
    std::vector<StepRecord> out;
    for (const auto& s : steps)
        if (s.slice == slice && counts[s.student_id] >= min_obs_per_student) out.push_back(s);
    return out;
}

namespace {

void analyze_one(const std::vector<StepRecord>& steps, const SliceOptions& options, SliceResult& res) {
    const std::vector<StepRecord> rows = slice_rows(steps, res.slice, options.min_obs_per_student);
    res.rows = rows.size();
    try {
        res.rt_fit = fit_lmm(rows, options.lmm);
        res.iafm_fit = fit_iafm(rows, options.iafm);
    } catch (const Error& e) {
        res.status = std::string("fit failed: ") + e.what();
        return;
    }
    res.rt_converged = res.rt_fit->converged;
    res.iafm_converged = res.iafm_fit->converged;
    if (!options.include_unconverged && !(res.rt_converged && res.iafm_converged)) {
        res.status = "unconverged";
        return;
    }
    res.params = join_params(extract_blups(*res.rt_fit, "student", true),
                             extract_student_params(*res.iafm_fit, true), res.slice);
    res.students = res.params.size();
    try {
        std::vector<double> rt, lr;
        for (const auto& p : res.params) {
            rt.push_back(p.rt_propensity);
            lr.push_back(p.learning_rate);
        }
        res.rt_learning = pearson(rt, lr);
        res.moderation = moderation_fit(res.params);
    } catch (const Error& e) {
        res.status = std::string("analysis failed: ") + e.what();
        return;
    }
    res.available = true;
    res.status = "ok";
}

} // namespace

SliceAnalysis run_slice_analysis(const std::vector<StepRecord>& steps, const SliceOptions& options) {
    if (options.slices < 1) config_error("slice count must be positive");
    SliceAnalysis out;
    out.slices.resize(static_cast<std::size_t>(options.slices));
    for (int s = 0; s < options.slices; ++s) out.slices[static_cast<std::size_t>(s)].slice = s + 1;

    const int threads = options.threads > 0 ? std::min(options.threads, options.slices) : options.slices;
    if (threads <= 1) {
        for (auto& r : out.slices) analyze_one(steps, options, r);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
        for (int t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t s = static_cast<std::size_t>(t); s < out.slices.size();
                         s += static_cast<std::size_t>(threads))
                        analyze_one(steps, options, out.slices[s]);
                } catch (...) {
                    errors[static_cast<std::size_t>(t)] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    // Effects per slice, then BH within each effect across available slices.
    const std::array<const char*, 4> names{kModerationTerms[1], kModerationTerms[2], kModerationTerms[3],
                                           "r(RT propensity, learning rate)"};
    for (auto& r : out.slices) {
        if (!r.available) continue;
        for (int j = 1; j <= 3; ++j) {
            const Coefficient& c = r.moderation->coefficients[j];
            r.effects.push_back({names[j - 1], c.estimate, c.ci_low, c.ci_high, c.p, c.p});
        }
        const auto ci = correlation_ci(r.rt_learning->r, r.rt_learning->n);
        r.effects.push_back({names[3], r.rt_learning->r, ci[0], ci[1], r.rt_learning->p, r.rt_learning->p});
    }
    for (std::size_t e = 0; e < names.size(); ++e) {
        std::vector<double> p;
        for (const auto& r : out.slices)
            if (r.available) p.push_back(r.effects[e].p);
        if (p.empty()) continue;
        const auto adj = bh_adjust(p);
        std::size_t k = 0;
        for (auto& r : out.slices)
            if (r.available) r.effects[e].p_adjusted = adj[k++];
    }

    std::vector<std::vector<StudentParams>> tables;
    for (const auto& r : out.slices) tables.push_back(r.available ? r.params : std::vector<StudentParams>{});
    out.stability_rt = stability_matrix(tables, ParamField::RtPropensity);
    out.stability_learning = stability_matrix(tables, ParamField::LearningRate);
    return out;
}

} // namespace rtprop
