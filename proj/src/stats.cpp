#include "rtprop/stats.hpp"

#include "rtprop/common.hpp"

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rtprop {

double student_t_cdf(double t, double df) {
    const boost::math::students_t dist(df);
    return boost::math::cdf(dist, t);
}

double student_t_two_sided_p(double t, double df) {
    if (std::isinf(t)) return 0.0;
    const boost::math::students_t dist(df);
    return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
}

double student_t_quantile(double p, double df) {
    const boost::math::students_t dist(df);
    return boost::math::quantile(dist, p);
}

double normal_quantile(double p) { return boost::math::quantile(boost::math::normal(), p); }

double quantile_type7(std::vector<double> v, double q) {
    if (v.empty()) data_error("quantile of an empty sample");
    std::sort(v.begin(), v.end());
    const double h = (static_cast<double>(v.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double mean(std::span<const double> v) {
    if (v.empty()) data_error("mean of an empty sample");
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_sd(std::span<const double> v) {
    if (v.size() < 2) data_error("standard deviation needs at least two values");
    const double m = mean(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

} // namespace rtprop
