#include "rtprop/report.hpp"

#include "rtprop/stats.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace rtprop {

std::string fixed(double v, int decimals) {
    if (!std::isfinite(v)) return "NA";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    std::string s = buf;
    if (s == "-0" || s.find_first_not_of("-0.") == std::string::npos) {
        if (!s.empty() && s[0] == '-') s.erase(0, 1);
    }
    return s;
}

std::string median_iqr(const std::vector<double>& values) {
    if (values.empty()) return "NA";
    const double med = quantile_type7(values, 0.5);
    const double iqr = quantile_type7(values, 0.75) - quantile_type7(values, 0.25);
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.1f [%.1f]", med, iqr);
    return buf;
}

std::string flag_summary(std::size_t flagged, std::size_t total) {
    const double pct = total ? 100.0 * static_cast<double>(flagged) / static_cast<double>(total) : 0.0;
    char buf[96];
    std::snprintf(buf, sizeof buf, "%zu/%zu (%.1f%%)", flagged, total, pct);
    return buf;
}

std::string format_ci(double lo, double hi) { return "[" + fixed(lo, 2) + ", " + fixed(hi, 2) + "]"; }

std::string format_p(double p) {
    if (!std::isfinite(p)) return "NA";
    if (p < 0.001) return "<0.001";
    return fixed(p, 3);
}

namespace {

std::string slice_label(int s) { return "Q" + std::to_string(s); }

} // namespace

std::string rt_quartile_table(const std::vector<StepRecord>& steps, int slices) {
    std::vector<std::vector<double>> by(static_cast<std::size_t>(slices));
    std::vector<double> all;
    for (const auto& s : steps) {
        if (!s.rt_seconds) continue;
        all.push_back(*s.rt_seconds);
        if (s.slice >= 1 && s.slice <= slices) by[static_cast<std::size_t>(s.slice - 1)].push_back(*s.rt_seconds);
    }
    std::ostringstream out;
    out << "| Slice | N | RT (s), median [IQR] |\n|---|---|---|\n";
    for (int q = 1; q <= slices; ++q) {
        const auto& v = by[static_cast<std::size_t>(q - 1)];
        out << "| " << slice_label(q) << " | " << v.size() << " | " << median_iqr(v) << " |\n";
    }
    out << "| All | " << all.size() << " | " << median_iqr(all) << " |\n";
    return out.str();
}

std::string rt_quartile_csv(const std::vector<StepRecord>& steps, int slices) {
    std::vector<std::vector<double>> by(static_cast<std::size_t>(slices) + 1);
    for (const auto& s : steps) {
        if (!s.rt_seconds) continue;
        by[0].push_back(*s.rt_seconds);
        if (s.slice >= 1 && s.slice <= slices) by[static_cast<std::size_t>(s.slice)].push_back(*s.rt_seconds);
    }
    std::ostringstream out;
    out << "slice,n,median,q1,q3,iqr\n";
    for (int q = 1; q <= slices + 0; ++q) {
        const auto& v = by[static_cast<std::size_t>(q)];
        out << slice_label(q) << ',' << v.size();
        if (v.empty()) {
            out << ",,,,\n";
            continue;
        }
        const double q1 = quantile_type7(v, 0.25), q3 = quantile_type7(v, 0.75);
        out << ',' << format_double(quantile_type7(v, 0.5)) << ',' << format_double(q1) << ',' << format_double(q3)
            << ',' << format_double(q3 - q1) << '\n';
    }
    const auto& v = by[0];
    out << "All," << v.size();
    if (v.empty()) {
        out << ",,,,\n";
    } else {
        const double q1 = quantile_type7(v, 0.25), q3 = quantile_type7(v, 0.75);
        out << ',' << format_double(quantile_type7(v, 0.5)) << ',' << format_double(q1) << ',' << format_double(q3)
            << ',' << format_double(q3 - q1) << '\n';
    }
    return out.str();
}

std::string stability_table(const StabilityMatrix& m) {
    const std::size_t k = m.size();
    std::ostringstream out;
    out << "| |";
    for (std::size_t j = 0; j < k; ++j) out << ' ' << slice_label(static_cast<int>(j + 1)) << " |";
    out << "\n|---|";
    for (std::size_t j = 0; j < k; ++j) out << "---|";
    out << '\n';
    for (std::size_t i = 0; i < k; ++i) {
        out << "| " << slice_label(static_cast<int>(i + 1)) << " |";
        for (std::size_t j = 0; j < k; ++j) {
            const StabilityCell& c = m[i][j];
            if (i == j) {
                out << " 1 |";
            } else if (!c.available) {
                out << " NA (n=" << c.n << ") |";
            } else {
                out << ' ' << fixed(c.r, 2) << significance_marker(c.p) << " (n=" << c.n << ") |";
            }
        }
        out << '\n';
    }
    return out.str();
}

std::string stability_csv(const StabilityMatrix& m) {
    std::ostringstream out;
    out << "slice_a,slice_b,r,p,n,available\n";
    for (std::size_t i = 0; i < m.size(); ++i)
        for (std::size_t j = 0; j < m.size(); ++j) {
            const StabilityCell& c = m[i][j];
            out << slice_label(static_cast<int>(i + 1)) << ',' << slice_label(static_cast<int>(j + 1)) << ',';
            if (c.available)
                out << format_double(c.r) << ',' << format_double(c.p);
            else
                out << ',';
            out << ',' << c.n << ',' << (c.available ? 1 : 0) << '\n';
        }
    return out.str();
}

std::string moderation_table(const ModerationFit& fit) {
    std::ostringstream out;
    out << "| Effect | Estimate | 95% CI | p | Sig. |\n|---|---|---|---|---|\n";
    for (const auto& c : fit.coefficients)
        out << "| " << c.name << " | " << fixed(c.estimate, 2) << " | " << format_ci(c.ci_low, c.ci_high) << " | "
            << format_p(c.p) << " | " << significance_marker(c.p) << " |\n";
    out << "\nN = " << fit.n << ", R^2 = " << fixed(fit.r2, 3) << "\n\n";
    out << "Influential cases (Cook's D > 4/N, leverage > 2p/N or |studentized residual| > 3): "
        << flag_summary(fit.influence.flagged, fit.n) << "\n\n";
    if (fit.refit_available) {
        out << "Refit without flagged cases (N = " << fit.refit_n << "):\n\n";
        out << "| Effect | Estimate | 95% CI | p | Sig. |\n|---|---|---|---|---|\n";
        for (const auto& c : fit.refit_coefficients)
            out << "| " << c.name << " | " << fixed(c.estimate, 2) << " | " << format_ci(c.ci_low, c.ci_high)
                << " | " << format_p(c.p) << " | " << significance_marker(c.p) << " |\n";
    } else {
        out << "Refit without flagged cases: not available.\n";
    }
    return out.str();
}

std::string slice_table(const SliceAnalysis& analysis) {
    std::ostringstream out;
    out << "| Slice | Effect | Estimate | 95% CI | p | Sig. |\n|---|---|---|---|---|---|\n";
    for (const auto& r : analysis.slices) {
        if (!r.available) {
            out << "| " << slice_label(r.slice) << " | unavailable (" << r.status << ") | | | | |\n";
            continue;
        }
        for (const auto& e : r.effects)
            out << "| " << slice_label(r.slice) << " | " << e.effect << " | " << fixed(e.estimate, 3) << " | "
                << format_ci(e.ci_low, e.ci_high) << " | " << format_p(e.p_adjusted) << " | "
                << significance_marker(e.p_adjusted) << " |\n";
    }
    return out.str();
}

std::string slice_csv(const SliceAnalysis& analysis) {
    std::ostringstream out;
    out << "slice,status,students,effect,estimate,ci_low,ci_high,p,p_adjusted,sig\n";
    for (const auto& r : analysis.slices) {
        if (!r.available) {
            out << slice_label(r.slice) << ',' << quote_field(r.status, ',') << ',' << r.students << ",,,,,,,\n";
            continue;
        }
        for (const auto& e : r.effects)
            out << slice_label(r.slice) << ",ok," << r.students << ',' << quote_field(e.effect, ',') << ','
                << format_double(e.estimate) << ',' << format_double(e.ci_low) << ',' << format_double(e.ci_high)
                << ',' << format_double(e.p) << ',' << format_double(e.p_adjusted) << ','
                << significance_marker(e.p_adjusted) << '\n';
    }
    return out.str();
}

std::string render_report(const ReportInputs& in) {
    std::ostringstream out;
    out << "# Response-time propensity report\n\n";
    out << "## Response times by session slice\n\n";
    if (in.steps) out << rt_quartile_table(*in.steps, in.slice_count) << '\n';
    out << "## Stability across slices\n\n";
    if (in.slices) {
        out << "### RT propensity\n\n" << stability_table(in.slices->stability_rt) << '\n';
        out << "### Learning rate\n\n" << stability_table(in.slices->stability_learning) << '\n';
    }
    out << "## Moderation of learning rate (full period)\n\n";
    out << "learning_rate ~ rt_propensity * prior_proficiency, all variables standardized.\n\n";
    if (in.global_moderation)
        out << moderation_table(*in.global_moderation) << '\n';
    else
        out << "Not available: " << in.global_status << "\n\n";
    out << "## Slice-specific models\n\n";
    if (in.slices) {
        out << slice_table(*in.slices) << '\n';
        out << "p values are Benjamini-Hochberg adjusted across slices within each effect. "
               "Sig.: *** < .001, ** < .01, * < .05, . < .10.\n\n";
    }
    if (!in.footer.empty()) out << "---\n" << in.footer << '\n';
    return out.str();
}

} // namespace rtprop
