#pragma once

#include <span>
#include <vector>

namespace rtprop {

// Student t distribution with `df` degrees of freedom.
double student_t_cdf(double t, double df);
double student_t_two_sided_p(double t, double df);
double student_t_quantile(double p, double df);
double normal_quantile(double p);

// Sample quantile, linear interpolation between order statistics (type 7).
double quantile_type7(std::vector<double> values, double q);

double mean(std::span<const double> v);
double sample_sd(std::span<const double> v); // N - 1 denominator

} // namespace rtprop
