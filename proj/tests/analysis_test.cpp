#include "oracles.hpp"

#include "rtprop/analysis.hpp"
#include "rtprop/report.hpp"
#include "rtprop/simulate.hpp"
#include "rtprop/stats.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace rtprop;

namespace {

Eigen::MatrixXd random_design(std::mt19937_64& rng, int n, int p) {
    std::normal_distribution<double> n01(0.0, 1.0);
    Eigen::MatrixXd x(n, p);
    for (int i = 0; i < n; ++i) {
        x(i, 0) = 1.0;
        for (int j = 1; j < p; ++j) x(i, j) = n01(rng);
    }
    return x;
}

std::vector<StudentParams> synthetic_params(std::mt19937_64& rng, int n, double b_int) {
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<StudentParams> out;
    for (int i = 0; i < n; ++i) {
        StudentParams p;
        p.student_id = "s" + std::to_string(1000 + i);
        p.rt_propensity = n01(rng);
        p.prior_proficiency = n01(rng);
        p.learning_rate = 0.3 * p.rt_propensity + b_int * p.rt_propensity * p.prior_proficiency + n01(rng);
        out.push_back(p);
    }
    return out;
}

} // namespace

TEST(Stats, TDistributionMatchesIncompleteBeta) {
    for (double df : {1.0, 2.5, 7.0, 30.0, 785.0})
        for (double t : {-6.0, -2.0, -0.3, 0.0, 0.7, 1.96, 4.0}) {
            EXPECT_NEAR(student_t_two_sided_p(t, df), oracle::t_two_sided(t, df), 1e-12);
            const double p = student_t_cdf(t, df);
            EXPECT_NEAR(student_t_quantile(p, df), t, 1e-8 * std::max(1.0, std::abs(t)));
        }
    EXPECT_NEAR(normal_quantile(0.975), 1.959963984540054, 1e-12);
    EXPECT_NEAR(normal_quantile(0.5), 0.0, 1e-15);
}

TEST(Stats, QuantileAndMoments) {
    const std::vector<double> v{4.0, 1.0, 3.0, 2.0};
    EXPECT_DOUBLE_EQ(quantile_type7(v, 0.0), 1.0);
    EXPECT_DOUBLE_EQ(quantile_type7(v, 1.0), 4.0);
    EXPECT_DOUBLE_EQ(quantile_type7(v, 0.5), 2.5);
    EXPECT_DOUBLE_EQ(quantile_type7(v, 0.25), 1.75);
    EXPECT_DOUBLE_EQ(mean(v), 2.5);
    EXPECT_DOUBLE_EQ(sample_sd(v), std::sqrt(5.0 / 3.0));
}

TEST(Analysis, StandardizeHasZeroMeanUnitSd) {
    const std::vector<double> v{2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0};
    const Standardized s = standardize_with_moments(v);
    EXPECT_DOUBLE_EQ(s.mean, 5.0);
    EXPECT_NEAR(s.sd, std::sqrt(32.0 / 7.0), 1e-14);
    EXPECT_NEAR(mean(s.z), 0.0, 1e-14);
    EXPECT_NEAR(sample_sd(s.z), 1.0, 1e-14);
    const std::vector<double> flat{3.0, 3.0, 3.0};
    try {
        standardize(flat);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Data);
        EXPECT_NE(std::string(e.what()).find("zero variance"), std::string::npos);
    }
}

TEST(Analysis, PearsonPMatchesTDistribution) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (int rep = 0; rep < 50; ++rep) {
        const int n = 5 + rep * 7;
        std::vector<double> x(static_cast<std::size_t>(n)), y(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] = n01(rng);
            y[i] = 0.3 * x[i] + n01(rng);
        }
        const Correlation c = pearson(x, y);
        const double t = c.r * std::sqrt((n - 2.0) / (1.0 - c.r * c.r));
        EXPECT_NEAR(c.p, oracle::t_two_sided(t, n - 2.0), 1e-10);
        EXPECT_EQ(c.n, static_cast<std::size_t>(n));
        const auto ci = correlation_ci(c.r, c.n);
        EXPECT_LT(ci[0], c.r);
        EXPECT_GT(ci[1], c.r);
    }
    const std::vector<double> a{1.0, 2.0, 3.0}, b{2.0, 4.0, 6.0};
    EXPECT_DOUBLE_EQ(pearson(a, b).r, 1.0);
    EXPECT_THROW(pearson(a, std::vector<double>{1.0, 1.0, 1.0}), Error);
    EXPECT_THROW(pearson(std::vector<double>{1.0, 2.0}, std::vector<double>{1.0, 2.0}), Error);
}

TEST(Analysis, OlsMatchesNormalEquations) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n01(0.0, 1.0);
    const Eigen::MatrixXd x = random_design(rng, 40, 4);
    Eigen::VectorXd y(40);
    for (int i = 0; i < 40; ++i) y[i] = x.row(i).sum() + n01(rng);
    const OlsFit f = ols(x, y);
    const Eigen::MatrixXd xtx = x.transpose() * x;
    const Eigen::VectorXd beta = xtx.ldlt().solve(x.transpose() * y);
    const Eigen::VectorXd r = y - x * beta;
    const double s2 = r.squaredNorm() / 36.0;
    const Eigen::VectorXd se = (s2 * xtx.inverse().diagonal()).cwiseSqrt();
    EXPECT_TRUE(f.beta.isApprox(beta, 1e-12));
    EXPECT_TRUE(f.se.isApprox(se, 1e-10));
    EXPECT_NEAR(f.sigma2, s2, 1e-12);
    EXPECT_EQ(f.df, 36);
    EXPECT_NEAR(f.r2, 1.0 - r.squaredNorm() / (y.array() - y.mean()).matrix().squaredNorm(), 1e-12);

    const auto table = coefficient_table(f);
    const double q = student_t_quantile(0.975, 36.0);
    for (int j = 0; j < 4; ++j) {
        EXPECT_NEAR(table[j].t, beta[j] / se[j], 1e-9);
        EXPECT_NEAR(table[j].p, oracle::t_two_sided(beta[j] / se[j], 36.0), 1e-10);
        EXPECT_NEAR(table[j].ci_low, beta[j] - q * se[j], 1e-9);
        EXPECT_NEAR(table[j].ci_high, beta[j] + q * se[j], 1e-9);
    }
}

TEST(Analysis, RankDeficientDesignIsRefused) {
    std::mt19937_64 rng(5);
    Eigen::MatrixXd x = random_design(rng, 20, 3);
    x.col(2) = 2.0 * x.col(1);
    try {
        ols(x, Eigen::VectorXd::Ones(20));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Data);
    }
}

TEST(Analysis, CooksDistanceMatchesLeaveOneOut) {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (int rep = 0; rep < 10; ++rep) {
        const int n = 15 + 5 * rep;
        const Eigen::MatrixXd x = random_design(rng, n, 4);
        Eigen::VectorXd y(n);
        for (int i = 0; i < n; ++i) y[i] = 0.5 * x(i, 1) + n01(rng);
        y[0] += 6.0;
        const InfluenceResult inf = influence_diagnostics(x, y);
        const std::vector<double> loo = oracle::cooks_loo(x, y);
        const Eigen::MatrixXd hat = x * (x.transpose() * x).inverse() * x.transpose();
        for (int i = 0; i < n; ++i) {
            EXPECT_NEAR(inf.rows[static_cast<std::size_t>(i)].cooks_d, loo[static_cast<std::size_t>(i)], 1e-10);
            EXPECT_NEAR(inf.rows[static_cast<std::size_t>(i)].leverage, hat(i, i), 1e-12);
        }
        EXPECT_NEAR(hat.trace(), 4.0, 1e-10);
        EXPECT_TRUE(inf.rows[0].flagged);
        EXPECT_DOUBLE_EQ(inf.cooks_threshold, 4.0 / n);
        EXPECT_DOUBLE_EQ(inf.leverage_threshold, 8.0 / n);
    }
}

TEST(Analysis, StudentizedResidualMatchesDeletedFit) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n01(0.0, 1.0);
    const Eigen::MatrixXd x = random_design(rng, 25, 3);
    Eigen::VectorXd y(25);
    for (int i = 0; i < 25; ++i) y[i] = n01(rng);
    const InfluenceResult inf = influence_diagnostics(x, y);
    for (int i : {0, 7, 24}) {
        Eigen::MatrixXd xi(24, 3);
        Eigen::VectorXd yi(24);
        for (int r = 0, k = 0; r < 25; ++r)
            if (r != i) {
                xi.row(k) = x.row(r);
                yi[k++] = y[r];
            }
        const Eigen::VectorXd bi = (xi.transpose() * xi).ldlt().solve(xi.transpose() * yi);
        const double s2i = (yi - xi * bi).squaredNorm() / 21.0;
        const double h = inf.rows[static_cast<std::size_t>(i)].leverage;
        const double pred_err = y[i] - x.row(i).dot(bi);
        // deleted residual divided by its standard error
        const double expected = pred_err * std::sqrt(1.0 - h) / std::sqrt(s2i);
        EXPECT_NEAR(inf.rows[static_cast<std::size_t>(i)].studentized_residual, expected, 1e-10);
    }
}

TEST(Analysis, BenjaminiHochbergMatchesDefinition) {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::uniform_int_distribution<int> len(1, 12);
    for (int rep = 0; rep < 1000; ++rep) {
        std::vector<double> p(static_cast<std::size_t>(len(rng)));
        for (double& v : p) v = rep % 3 == 0 ? std::pow(u01(rng), 4.0) : u01(rng);
        if (rep % 7 == 0 && p.size() > 1) p[1] = p[0];
        const std::vector<double> ours = bh_adjust(p);
        const std::vector<double> ref = oracle::bh_bruteforce(p);
        ASSERT_EQ(ours.size(), ref.size());
        for (std::size_t i = 0; i < p.size(); ++i) {
            EXPECT_DOUBLE_EQ(ours[i], ref[i]);
            EXPECT_GE(ours[i], p[i] * (1.0 - 1e-15));
        }
    }
    EXPECT_TRUE(bh_adjust(std::vector<double>{}).empty());
    EXPECT_THROW(bh_adjust(std::vector<double>{0.1, 1.5}), Error);
}

TEST(Analysis, SignificanceMarkers) {
    EXPECT_EQ(significance_marker(0.0005), "***");
    EXPECT_EQ(significance_marker(0.001), "**");
    EXPECT_EQ(significance_marker(0.009), "**");
    EXPECT_EQ(significance_marker(0.01), "*");
    EXPECT_EQ(significance_marker(0.049), "*");
    EXPECT_EQ(significance_marker(0.05), ".");
    EXPECT_EQ(significance_marker(0.0999), ".");
    EXPECT_EQ(significance_marker(0.10), "");
    EXPECT_EQ(significance_marker(std::nan("")), "");
}

TEST(Analysis, ModerationUsesStandardizedVariables) {
    std::mt19937_64 rng(9);
    std::vector<StudentParams> params = synthetic_params(rng, 300, 0.4);
    // shifting and scaling the raw inputs leaves the standardized fit unchanged
    std::vector<StudentParams> moved = params;
    for (auto& p : moved) {
        p.rt_propensity = 5.0 + 3.0 * p.rt_propensity;
        p.prior_proficiency = -2.0 + 0.1 * p.prior_proficiency;
        p.learning_rate = 0.01 * p.learning_rate;
    }
    const ModerationFit a = moderation_fit(params);
    const ModerationFit b = moderation_fit(moved);
    for (int j = 0; j < 4; ++j) {
        EXPECT_NEAR(a.coefficients[j].estimate, b.coefficients[j].estimate, 1e-10);
        EXPECT_EQ(a.coefficients[j].name, kModerationTerms[j]);
    }
    EXPECT_EQ(a.n, 300u);
    EXPECT_GT(a.coefficients[3].estimate, 0.2);
    EXPECT_LT(a.coefficients[3].p, 1e-3);
    EXPECT_NEAR(a.y.mean(), 0.0, 1e-12);
    EXPECT_TRUE(a.refit_available);
    EXPECT_EQ(a.refit_n + a.influence.flagged, a.n);
    EXPECT_THROW(moderation_fit(synthetic_params(rng, 9, 0.0)), Error);
}

TEST(Analysis, StabilityMatrixUsesPairwiseCompleteStudents) {
    std::vector<std::vector<StudentParams>> slices(4);
    std::mt19937_64 rng(10);
    std::normal_distribution<double> n01(0.0, 1.0);
    for (int i = 0; i < 30; ++i) {
        const double trait = n01(rng);
        for (int s = 0; s < 3; ++s) {
            if (s == 2 && i % 3 == 0) continue;
            StudentParams p;
            p.student_id = "s" + std::to_string(i);
            p.rt_propensity = trait + 0.2 * n01(rng);
            p.slice = s + 1;
            slices[static_cast<std::size_t>(s)].push_back(p);
        }
    }
    const StabilityMatrix m = stability_matrix(slices, ParamField::RtPropensity);
    ASSERT_EQ(m.size(), 4u);
    EXPECT_EQ(m[0][1].n, 30u);
    EXPECT_EQ(m[0][2].n, 20u);
    EXPECT_EQ(m[2][0].n, 20u);
    EXPECT_DOUBLE_EQ(m[0][2].r, m[2][0].r);
    EXPECT_GT(m[0][1].r, 0.8);
    EXPECT_FALSE(m[0][3].available);
    EXPECT_FALSE(m[3][3].available);
    EXPECT_TRUE(m[1][1].available);
}

TEST(Analysis, JoinKeepsStudentsInBothTables) {
    const std::vector<BlupRow> rt{{"b", 0.5, 3}, {"a", -0.1, 4}, {"c", 0.0, 2}};
    const std::vector<StudentIafmRow> iafm{{"c", 1.0, 0.1, 2}, {"a", 2.0, 0.2, 4}, {"d", 3.0, 0.3, 5}};
    const auto j = join_params(rt, iafm, 2);
    ASSERT_EQ(j.size(), 2u);
    EXPECT_EQ(j[0].student_id, "a");
    EXPECT_EQ(j[0].rt_propensity, -0.1);
    EXPECT_EQ(j[0].prior_proficiency, 2.0);
    EXPECT_EQ(j[1].learning_rate, 0.1);
    EXPECT_EQ(j[1].slice, 2);
}

TEST(Analysis, SliceRowsApplyMinimumObservations) {
    std::vector<StepRecord> steps;
    for (int i = 0; i < 5; ++i) {
        StepRecord s;
        s.student_id = i < 3 ? "a" : "b";
        s.slice = i == 4 ? 2 : 1;
        steps.push_back(s);
    }
    EXPECT_EQ(slice_rows(steps, 1, 3).size(), 3u);
    EXPECT_EQ(slice_rows(steps, 1, 1).size(), 4u);
    EXPECT_EQ(slice_rows(steps, 2, 1).size(), 1u);
    EXPECT_TRUE(slice_rows(steps, 3, 1).empty());
}

TEST(Analysis, SliceAnalysisOnSimulatedLogs) {
    SimConfig c;
    c.n_students = 80;
    c.n_skills = 8;
    c.seed = 4;
    const Population pop = generate_population(c);
    SliceOptions o;
    o.threads = 1;
    const SliceAnalysis a = run_slice_analysis(pop.steps, o);
    ASSERT_EQ(a.slices.size(), 4u);
    std::size_t rows = 0;
    for (const auto& s : a.slices) {
        EXPECT_EQ(s.available, s.status == "ok") << s.status;
        rows += s.rows;
        if (!s.available) continue;
        EXPECT_EQ(s.effects.size(), 4u);
        for (const auto& e : s.effects) EXPECT_GE(e.p_adjusted, e.p);
        EXPECT_EQ(s.students, s.params.size());
    }
    EXPECT_LE(rows, pop.steps.size());
    EXPECT_EQ(a.stability_rt.size(), 4u);

    const std::string table = slice_table(a);
    EXPECT_NE(table.find("Slice"), std::string::npos);
    EXPECT_NE(table.find("Q1"), std::string::npos);
}

TEST(Report, Formatting) {
    EXPECT_EQ(format_ci(-0.123, 0.456), "[-0.12, 0.46]");
    EXPECT_EQ(flag_summary(3, 40), "3/40 (7.5%)");
    EXPECT_EQ(fixed(1.25, 1), "1.2");
    EXPECT_EQ(median_iqr({1.0, 2.0, 3.0, 4.0, 5.0}), "3.0 [2.0]");
}
