#pragma once

// Markdown and CSV renderings of the analysis results.

#include "rtprop/analysis.hpp"
#include "rtprop/ingest.hpp"

#include <string>
#include <vector>

namespace rtprop {

// "12.3 [45.6]": median and interquartile range, one decimal.
std::string median_iqr(const std::vector<double>& values);

// "k/N (pct%)" with one decimal.
std::string flag_summary(std::size_t flagged, std::size_t total);

// "[lo, hi]" with two decimals.
std::string format_ci(double lo, double hi);
std::string format_p(double p);
std::string fixed(double v, int decimals);

// Response-time median [IQR] per slice and overall.
std::string rt_quartile_table(const std::vector<StepRecord>& steps, int slices = 4);
std::string rt_quartile_csv(const std::vector<StepRecord>& steps, int slices = 4);

std::string stability_table(const StabilityMatrix& m);
std::string stability_csv(const StabilityMatrix& m);

// Full-period moderation: coefficients, flag summary, refit without flagged rows.
std::string moderation_table(const ModerationFit& fit);

// Columns: Slice, Effect, Estimate, 95% CI, p, Sig. (p and Sig. use BH-adjusted p).
std::string slice_table(const SliceAnalysis& analysis);
std::string slice_csv(const SliceAnalysis& analysis);

struct ReportInputs {
    const std::vector<StepRecord>* steps = nullptr;
    const ModerationFit* global_moderation = nullptr; // may be null
    std::string global_status;                       // shown when the global model is missing
    const SliceAnalysis* slices = nullptr;
    int slice_count = 4;
    std::string footer;
};

std::string render_report(const ReportInputs& in);

} // namespace rtprop
